"""Training: negative sampling, margin loss, Adam updates, checkpoints.

Each step draws a fresh batch of statements; closed-interval statements
re-sample their timestamp (or sub-interval) every time they are seen, so
the whole interval is eventually used. Entity negatives corrupt the
object, time negatives corrupt the timestamp with scope-consistent false
timestamps and score the true object against the rebuilt box.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import ScopeKind, Statement, TemporalKB
from .model import (
    PARAM_ORDER,
    PROJECTOR_TE,
    BoxEmbedding,
    ParameterStore,
    QueryPlan,
    Variant,
    distance,
    intersect_items,
    project_relation,
)

CHECKPOINT_MAGIC = b"T2B1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


class CheckpointError(Exception):
    """Unreadable, truncated, or dimensionally inconsistent checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    k: int = 16  # entity negatives per positive (total negatives under TNS)
    m: int | None = None  # time negatives replacing entity ones; default k//2 under TNS
    lr: float = 1e-3
    batch: int = 256
    steps: int = 2000
    gamma: float = 24.0
    alpha: float = 0.5
    beta: float = 0.0  # time-smoothness weight
    variant: Variant = field(default_factory=Variant)
    seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        m = self.time_negatives
        if not 0 <= m <= self.k:
            raise ValueError("m must satisfy 0 <= m <= k (time negatives replace entity ones)")

    @property
    def time_negatives(self) -> int:
        if not self.variant.use_tns:
            return 0
        return self.k // 2 if self.m is None else self.m


@dataclass
class TrainingSample:
    """One positive statement with its sampled query plan and negatives."""

    statement: Statement
    plan: QueryPlan
    negatives_entities: list[int]
    negatives_times: list[int]
    weight: float  # 1 / (number of training answers to the concrete query)


def plan_for_statement(stmt: Statement, variant: Variant, rng: np.random.Generator) -> QueryPlan:
    """Sample the query plan: half-open scopes use their known endpoint; a
    closed interval samples one timestamp, or a sub-interval under SI."""
    scope = stmt.scope
    if scope.kind is ScopeKind.NO_TIME:
        times: tuple[int, ...] = ()
    elif scope.kind is ScopeKind.INSTANT:
        times = (scope.start,)
    elif scope.kind is ScopeKind.RIGHT_OPEN:
        times = (scope.start,)
    elif scope.kind is ScopeKind.LEFT_OPEN:
        times = (scope.end,)
    elif variant.use_si:
        a = int(rng.integers(scope.start, scope.end + 1))
        b = int(rng.integers(scope.start, scope.end + 1))
        times = (min(a, b), max(a, b))
    else:
        times = (int(rng.integers(scope.start, scope.end + 1)),)
    return QueryPlan(stmt.s, stmt.r, times, variant.projector_kind, variant.use_tr)


def _known_positives(stmt: Statement, kb: TemporalKB, timestamps) -> set[int]:
    if timestamps:
        positives: set[int] = set()
        for t in timestamps:
            positives |= kb.filter.timed_objects(stmt.s, stmt.r, t, splits=("train",))
        return positives
    return kb.filter.atemporal_objects(stmt.s, stmt.r, splits=("train",))


def sample_entity_negatives(
    stmt: Statement,
    k: int,
    kb: TemporalKB,
    rng: np.random.Generator,
    timestamps: tuple[int, ...] | None = None,
) -> list[int]:
    """k distinct entities o' for which the corrupted statement is absent
    from the training split at the query key: absent at every sampled
    timestamp for temporal queries, absent in the atemporal index
    otherwise. Uniform rejection sampling; after 100*k rejected draws the
    remaining slots are filled uniformly from all non-positive entities.
    """
    if timestamps is None:
        timestamps = _scope_timestamps(stmt.scope) if stmt.scope.is_temporal else ()
    positives = _known_positives(stmt, kb, timestamps)
    n = kb.n_entities
    if n < k + len(positives):
        raise ValueError(
            f"cannot draw {k} negatives: only {n} entities and {len(positives)} known positives"
        )
    chosen: list[int] = []
    chosen_set: set[int] = set()
    budget = 100 * k
    while len(chosen) < k and budget > 0:
        draw = min(budget, 2 * k)
        for cand in rng.integers(0, n, size=draw):
            cand = int(cand)
            if cand not in positives and cand not in chosen_set:
                chosen.append(cand)
                chosen_set.add(cand)
                if len(chosen) == k:
                    break
        budget -= draw
    if len(chosen) < k:
        allowed = np.array(sorted(set(range(n)) - positives - chosen_set))
        picks = rng.permutation(len(allowed))[: k - len(chosen)]
        chosen.extend(int(allowed[i]) for i in picks)
    return chosen


def _scope_timestamps(scope) -> tuple[int, ...]:
    if scope.kind is ScopeKind.LEFT_OPEN:
        return (scope.end,)
    if scope.kind is ScopeKind.CLOSED:
        return tuple(range(scope.start, scope.end + 1))
    return (scope.start,)


def sample_time_negatives(
    stmt: Statement, m: int, kb: TemporalKB, rng: np.random.Generator
) -> list[int]:
    """Up to m distinct timestamps t' at which (s, r, o, t') is false in
    training, restricted by scope: any t' for instants, t' < start for
    right-open, t' > end for left-open, t' outside [start, end] for
    closed. An empty result signals the caller to fall back to entity
    negatives."""
    if not stmt.scope.is_temporal:
        raise ValueError("time negatives need a temporal statement")
    if m < 1:
        raise ValueError("m must be at least 1")
    scope = stmt.scope
    n_times = kb.axis.length
    if scope.kind is ScopeKind.RIGHT_OPEN:
        span = range(0, scope.start)
    elif scope.kind is ScopeKind.LEFT_OPEN:
        span = range(scope.end + 1, n_times)
    elif scope.kind is ScopeKind.CLOSED:
        span = [*range(0, scope.start), *range(scope.end + 1, n_times)]
    else:
        span = range(n_times)
    candidates = [
        t
        for t in span
        if stmt.o not in kb.filter.timed_objects(stmt.s, stmt.r, t, splits=("train",))
    ]
    if not candidates:
        return []
    take = min(m, len(candidates))
    picks = rng.choice(len(candidates), size=take, replace=False)
    return [candidates[int(i)] for i in np.sort(picks)]


def query_weight(stmt: Statement, plan: QueryPlan, kb: TemporalKB) -> float:
    """1 / n_q where n_q counts training answers to the concrete query."""
    if not plan.time_projections:
        n_q = len(kb.filter.atemporal_objects(stmt.s, stmt.r, splits=("train",)))
    else:
        answer_sets = [
            kb.filter.timed_objects(stmt.s, stmt.r, t, splits=("train",))
            for t in plan.time_projections
        ]
        n_q = len(set.intersection(*answer_sets))
    return 1.0 / max(n_q, 1)


def make_training_sample(
    stmt: Statement, kb: TemporalKB, config: TrainConfig, rng: np.random.Generator
) -> TrainingSample:
    plan = plan_for_statement(stmt, config.variant, rng)
    neg_times: list[int] = []
    m = config.time_negatives
    if m > 0 and stmt.scope.is_temporal:
        neg_times = sample_time_negatives(stmt, m, kb, rng)
    k_entities = config.k - len(neg_times)
    neg_entities = sample_entity_negatives(stmt, k_entities, kb, rng, plan.time_projections)
    return TrainingSample(stmt, plan, neg_entities, neg_times, query_weight(stmt, plan, kb))


def smoothness(params: ParameterStore, tape: Tape | None = None):
    """Mean squared L2 difference of consecutive timestamp embeddings."""
    n_times = params.n_times
    if n_times < 2:
        return ad.constant(0.0)
    nxt = params.rows(tape, "time_emb", np.arange(1, n_times))
    prv = params.rows(tape, "time_emb", np.arange(0, n_times - 1))
    diff = ad.sub(nxt, prv)
    return ad.mul(ad.reduce_sum(ad.mul(diff, diff)), ad.constant(1.0 / (n_times - 1)))


def _positive_box(group: list[TrainingSample], params: ParameterStore, tape: Tape) -> BoxEmbedding:
    plan0 = group[0].plan
    s_idx = np.array([g.plan.subject for g in group])
    r_idx = np.array([g.plan.relation for g in group])
    b_r = project_relation(s_idx, r_idx, params, plan0.projector_kind, tape)
    if not plan0.time_projections:
        return b_r
    center_items = [b_r.center]
    offset_items = [b_r.offset]
    e = params.rows(tape, "entity_emb", s_idx)
    for j in range(len(plan0.time_projections)):
        t_idx = np.array([g.plan.time_projections[j] for g in group])
        t_emb = params.rows(tape, "time_emb", t_idx)
        if plan0.projector_kind == PROJECTOR_TE:
            center_items.append(ad.add(e, t_emb))
        else:
            center_items.append(ad.mul(e, t_emb))
        offset_items.append(params.rows(tape, "time_off", t_idx))
        if plan0.use_tr:
            center_items.append(ad.add(params.rows(tape, "relation_emb", r_idx), t_emb))
    return intersect_items(center_items, offset_items, params, tape)


def _time_negative_boxes(
    group: list[TrainingSample], params: ParameterStore, tape: Tape
) -> BoxEmbedding:
    """Boxes with corrupted timestamps, one per time negative: shape (n, m, d)."""
    plan0 = group[0].plan
    n, m, d = len(group), len(group[0].negatives_times), params.d
    s_idx = np.array([g.plan.subject for g in group])
    r_idx = np.array([g.plan.relation for g in group])
    t_idx = np.array([g.negatives_times for g in group])  # (n, m)
    s_mat = np.broadcast_to(s_idx[:, None], (n, m))
    e = params.rows(tape, "entity_emb", s_mat)
    t_emb = params.rows(tape, "time_emb", t_idx)
    t_off = params.rows(tape, "time_off", t_idx)
    b_r = project_relation(s_idx, r_idx, params, plan0.projector_kind, tape)
    r_center = ad.broadcast_to(ad.reshape(b_r.center, (n, 1, d)), (n, m, d))
    r_offset = ad.broadcast_to(ad.reshape(b_r.offset, (n, 1, d)), (n, m, d))
    if plan0.projector_kind == PROJECTOR_TE:
        t_center = ad.add(e, t_emb)
    else:
        t_center = ad.mul(e, t_emb)
    center_items = [r_center, t_center]
    offset_items = [r_offset, t_off]
    if plan0.use_tr:
        r_mat = params.rows(tape, "relation_emb", np.broadcast_to(r_idx[:, None], (n, m)))
        center_items.append(ad.add(r_mat, t_emb))
    return intersect_items(center_items, offset_items, params, tape)


def batch_loss(
    batch: list[TrainingSample], params: ParameterStore, beta: float = 0.0
) -> tuple["ad.Node", Tape]:
    """Weighted margin loss over the batch plus the smoothness penalty.

    Per sample: -log sig(gamma - D(o, box)) - (1/k) * sum log sig(D' - gamma)
    over its k negatives, multiplied by the sample's 1/n_q weight; the
    batch loss is the mean. Lambda(T) is added once, weighted by beta,
    when any statement in the batch is temporal.
    """
    if not batch:
        raise ValueError("empty batch")
    tape = Tape()
    gamma = params.gamma

    groups: dict[tuple, list[TrainingSample]] = {}
    for sample in batch:
        key = (len(sample.plan.time_projections), len(sample.negatives_times))
        groups.setdefault(key, []).append(sample)

    total = ad.constant(0.0)
    for (_, n_tneg), group in groups.items():
        n = len(group)
        box = _positive_box(group, params, tape)
        o_idx = np.array([g.statement.o for g in group])
        o_emb = params.rows(tape, "entity_emb", o_idx)
        d_pos = distance(o_emb, box, params.alpha).total  # (n,)
        pos_term = ad.neg(ad.log_sigmoid(ad.sub(ad.constant(gamma), d_pos)))

        d = params.d
        box_b = BoxEmbedding(
            ad.reshape(box.center, (n, 1, d)), ad.reshape(box.offset, (n, 1, d))
        )
        neg_sum = None
        k_total = len(group[0].negatives_entities) + n_tneg
        if group[0].negatives_entities:
            ne_idx = np.array([g.negatives_entities for g in group])  # (n, k_e)
            ne_emb = params.rows(tape, "entity_emb", ne_idx)
            d_neg = distance(ne_emb, box_b, params.alpha).total  # (n, k_e)
            neg_sum = ad.reduce_sum(ad.log_sigmoid(ad.sub(d_neg, ad.constant(gamma))), axis=-1)
        if n_tneg:
            tbox = _time_negative_boxes(group, params, tape)
            o_b = ad.reshape(o_emb, (n, 1, d))
            d_tneg = distance(o_b, tbox, params.alpha).total  # (n, m)
            t_sum = ad.reduce_sum(ad.log_sigmoid(ad.sub(d_tneg, ad.constant(gamma))), axis=-1)
            neg_sum = t_sum if neg_sum is None else ad.add(neg_sum, t_sum)

        sample_loss = pos_term
        if neg_sum is not None:
            sample_loss = ad.sub(sample_loss, ad.mul(neg_sum, ad.constant(1.0 / k_total)))
        weights = np.array([g.weight for g in group])
        total = ad.add(total, ad.reduce_sum(ad.mul(sample_loss, ad.constant(weights))))

    loss = ad.mul(total, ad.constant(1.0 / len(batch)))
    if beta > 0.0 and any(s.statement.scope.is_temporal for s in batch):
        loss = ad.add(loss, ad.mul(smoothness(params, tape), ad.constant(beta)))
    return loss, tape


class Adam:
    """Adam with decay rates 0.9/0.999 and epsilon 1e-8; updates run in
    sorted array order so training is bitwise deterministic."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(arrays):
            arr = arrays[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(arr)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class LogEntry:
    step: int
    loss: float
    valid_mrr: float
    smoothness: float | None = None

    def format(self) -> str:
        cols = [str(self.step), f"{self.loss:.6f}", f"{self.valid_mrr:.6f}"]
        if self.smoothness is not None:
            cols.append(f"{self.smoothness:.6f}")
        return "\t".join(cols)


def train(
    kb: TemporalKB, config: TrainConfig, progress=None
) -> tuple[ParameterStore, list[LogEntry]]:
    """Optimize a fresh ParameterStore on kb's training split.

    Returns the parameters at the best validation MRR seen (the final ones
    if the validation split is empty) and the training log. Randomness
    derives from config.seed via two spawned streams: one for
    initialization, one for batch/negative/timestamp sampling.
    """
    from .evaluation import eval_link_prediction  # cycle-free: evaluation imports model only

    init_rng, batch_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    params = ParameterStore.initialize(
        config.d,
        kb.n_entities,
        kb.n_relations,
        kb.axis.length,
        config.gamma,
        config.alpha,
        init_rng,
    )
    adam = Adam(config.lr)
    statements = kb.splits["train"]
    has_valid = bool(kb.splits["valid"])
    log: list[LogEntry] = []
    best_mrr, best_params = -1.0, None
    window: list[float] = []

    for step in range(1, config.steps + 1):
        picks = batch_rng.integers(0, len(statements), size=config.batch)
        batch = [make_training_sample(statements[i], kb, config, batch_rng) for i in picks]
        loss, tape = batch_loss(batch, params, config.beta)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"loss is {loss_val} at step {step}")
        window.append(loss_val)
        grads = ad.densify(ad.backward(tape, loss), params.arrays)
        adam.step(params.arrays, grads)
        params.clamp_offsets()

        # step 1 is always logged so the initial loss is on record; the
        # loss column is the mean since the previous log line
        if step == 1 or step % config.eval_every == 0 or step == config.steps:
            mrr = float("nan")
            if has_valid:
                report = eval_link_prediction(
                    kb.splits["valid"], params, kb, config.variant, filter_splits=("train", "valid")
                )
                mrr = report.overall.mrr
                if mrr > best_mrr:
                    best_mrr, best_params = mrr, params.copy()
            lam = float(smoothness(params).value) if config.beta > 0 else None
            entry = LogEntry(step, float(np.mean(window)), mrr, lam)
            window.clear()
            log.append(entry)
            if progress is not None:
                progress(entry)
    return (best_params if best_params is not None else params), log


def save_checkpoint(params: ParameterStore, path, variant: Variant = Variant()) -> None:
    """Binary checkpoint: magic, little-endian header (d, |E|, |R|, |T|,
    variant code as int32; gamma, alpha as float64), then each parameter
    block in declared order as float32."""
    header = struct.pack(
        "<4s5i2d",
        CHECKPOINT_MAGIC,
        params.d,
        params.n_entities,
        params.n_relations,
        params.n_times,
        variant.encode(),
        params.gamma,
        params.alpha,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in PARAM_ORDER:
            fh.write(params.arrays[name].astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, Variant]:
    header_size = struct.calcsize("<4s5i2d")
    with open(path, "rb") as fh:
        header = fh.read(header_size)
        if len(header) < header_size:
            raise CheckpointError("truncated checkpoint header")
        magic, d, n_e, n_r, n_t, code, gamma, alpha = struct.unpack("<4s5i2d", header)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        shapes = {
            "entity_emb": (n_e, d),
            "relation_emb": (n_r, d),
            "relation_off": (n_r, d),
            "time_emb": (n_t, d),
            "time_off": (n_t, d),
            "w_att": (d, d),
            "w_ds_in": (d, d),
            "w_ds_hidden": (d, d),
            "w_ds_out": (d, d),
        }
        arrays = {}
        for name in PARAM_ORDER:
            shape = shapes[name]
            n_bytes = 4 * shape[0] * shape[1]
            blob = fh.read(n_bytes)
            if len(blob) < n_bytes:
                raise CheckpointError(f"truncated checkpoint: block {name} incomplete")
            arrays[name] = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter block")
    params = ParameterStore(arrays, gamma, alpha)
    params.clamp_offsets()
    return params, Variant.decode(code)


def check_dimensions(params: ParameterStore, kb: TemporalKB) -> None:
    """Raise when a checkpoint does not match the dataset's vocabularies."""
    problems = []
    if params.n_entities != kb.n_entities:
        problems.append(f"|E| {params.n_entities} != dataset {kb.n_entities}")
    if params.n_relations != kb.n_relations:
        problems.append(f"|R| {params.n_relations} != dataset {kb.n_relations}")
    if params.n_times != kb.axis.length:
        problems.append(f"|T| {params.n_times} != dataset {kb.axis.length}")
    if problems:
        raise CheckpointError("checkpoint/dataset mismatch: " + "; ".join(problems))
