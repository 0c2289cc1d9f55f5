"""Box embeddings for temporal queries.

A query (s, r, ?o, t*) is answered by projecting the subject to a
relation box (all objects related to s under r), optionally to one or two
time boxes (all objects co-occurring with s at a timestamp), and taking
an attention/DeepSets intersection. Candidate objects are ranked by a
two-part point-to-box distance.

All forward functions work on single queries or batches (leading
dimensions broadcast) and record on an autodiff tape when one is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape

PROJECTOR_TE = "te"  # translation: center = e + r
PROJECTOR_DM = "dm"  # elementwise product: center = e * r

#: checkpoint block order; also the parameter-draw order at initialization
PARAM_ORDER = (
    "entity_emb",
    "relation_emb",
    "relation_off",
    "time_emb",
    "time_off",
    "w_att",
    "w_ds_in",
    "w_ds_hidden",
    "w_ds_out",
)


@dataclass
class BoxEmbedding:
    """Axis-aligned box: center and elementwise nonnegative offset.

    A point e lies inside iff center - offset <= e <= center + offset
    elementwise. Fields are numpy arrays, or tape nodes during training.
    """

    center: "Node | np.ndarray"
    offset: "Node | np.ndarray"

    def center_value(self) -> np.ndarray:
        return self.center.value if isinstance(self.center, Node) else self.center

    def offset_value(self) -> np.ndarray:
        return self.offset.value if isinstance(self.offset, Node) else self.offset

    def contains(self, point: np.ndarray) -> np.ndarray:
        c, o = self.center_value(), self.offset_value()
        return np.all((c - o <= point) & (point <= c + o), axis=-1)


@dataclass(frozen=True)
class QueryPlan:
    """A concrete query: subject, relation, and 0-2 sampled timestamps."""

    subject: int
    relation: int
    time_projections: tuple[int, ...] = ()
    projector_kind: str = PROJECTOR_TE
    use_tr: bool = False

    def __post_init__(self):
        if len(self.time_projections) > 2:
            raise ValueError("a query plan carries at most 2 time projections")


@dataclass(frozen=True)
class Variant:
    """Model variant flags: projector kind plus the TR/SI/TNS toggles."""

    projector_kind: str = PROJECTOR_TE
    use_tr: bool = False
    use_si: bool = False
    use_tns: bool = False

    KNOWN = ("te", "dm", "tr", "si", "tns")

    @classmethod
    def parse(cls, spec: str) -> "Variant":
        names = [p.strip().lower() for p in spec.split(",") if p.strip()]
        unknown = [n for n in names if n not in cls.KNOWN]
        if unknown:
            raise ValueError(f"unknown variant name(s): {', '.join(unknown)}")
        kind = PROJECTOR_DM if "dm" in names else PROJECTOR_TE
        if "te" in names and "dm" in names:
            raise ValueError("te and dm projectors are mutually exclusive")
        return cls(kind, "tr" in names, "si" in names, "tns" in names)

    def encode(self) -> int:
        return (
            (1 if self.projector_kind == PROJECTOR_DM else 0)
            | (self.use_tr << 1)
            | (self.use_si << 2)
            | (self.use_tns << 3)
        )

    @classmethod
    def decode(cls, code: int) -> "Variant":
        return cls(
            PROJECTOR_DM if code & 1 else PROJECTOR_TE,
            bool(code & 2),
            bool(code & 4),
            bool(code & 8),
        )

    def __str__(self):
        parts = [self.projector_kind]
        parts += [n for n, on in (("tr", self.use_tr), ("si", self.use_si), ("tns", self.use_tns)) if on]
        return ",".join(parts)


class ParameterStore:
    """All learnable arrays plus the fixed hyperparameters (d, gamma, alpha).

    Scalar count is d*(|E| + 2|T| + 2|R|) + 4*d^2: one d-vector per entity,
    center and offset vectors per relation and per timestamp, and four
    biasless d x d matrices (one attention map, three DeepSets maps).
    """

    def __init__(self, arrays: dict[str, np.ndarray], gamma: float, alpha: float):
        missing = set(PARAM_ORDER) - set(arrays)
        if missing:
            raise ValueError(f"missing parameter arrays: {sorted(missing)}")
        self.arrays = arrays
        self.gamma = float(gamma)
        self.alpha = float(alpha)

    @classmethod
    def initialize(
        cls,
        d: int,
        n_entities: int,
        n_relations: int,
        n_times: int,
        gamma: float = 24.0,
        alpha: float = 0.5,
        rng: np.random.Generator | None = None,
    ) -> "ParameterStore":
        """Margin-scaled uniform init: centers in [-gamma/d, gamma/d],
        offsets in [0, gamma/d], Xavier-uniform intersection matrices."""
        rng = rng or np.random.default_rng(0)
        s = gamma / d
        xavier = np.sqrt(3.0 / d)
        shapes = {
            "entity_emb": ((n_entities, d), -s, s),
            "relation_emb": ((n_relations, d), -s, s),
            "relation_off": ((n_relations, d), 0.0, s),
            "time_emb": ((n_times, d), -s, s),
            "time_off": ((n_times, d), 0.0, s),
            "w_att": ((d, d), -xavier, xavier),
            "w_ds_in": ((d, d), -xavier, xavier),
            "w_ds_hidden": ((d, d), -xavier, xavier),
            "w_ds_out": ((d, d), -xavier, xavier),
        }
        arrays = {
            name: rng.uniform(lo, hi, size=shape) for name, (shape, lo, hi) in shapes.items()
        }
        return cls(arrays, gamma, alpha)

    @property
    def d(self) -> int:
        return self.arrays["entity_emb"].shape[1]

    @property
    def n_entities(self) -> int:
        return self.arrays["entity_emb"].shape[0]

    @property
    def n_relations(self) -> int:
        return self.arrays["relation_emb"].shape[0]

    @property
    def n_times(self) -> int:
        return self.arrays["time_emb"].shape[0]

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def clamp_offsets(self) -> None:
        """Keep stored offsets nonnegative (applied after optimizer steps)."""
        np.maximum(self.arrays["relation_off"], 0.0, out=self.arrays["relation_off"])
        np.maximum(self.arrays["time_off"], 0.0, out=self.arrays["time_off"])

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.arrays.items()}, self.gamma, self.alpha
        )

    def rows(self, tape, name: str, indices) -> Node:
        return ad.param_rows(tape, self.arrays[name], name, indices)

    def matrix(self, tape, name: str) -> Node:
        return ad.param_full(tape, self.arrays[name], name)


def _project(subject_emb: Node, projector_emb: Node, kind: str) -> Node:
    if kind == PROJECTOR_TE:
        return ad.add(subject_emb, projector_emb)
    if kind == PROJECTOR_DM:
        return ad.mul(subject_emb, projector_emb)
    raise ValueError(f"unknown projector kind {kind!r}")


def project_relation(
    subject, relation, params: ParameterStore, kind: str = PROJECTOR_TE, tape: Tape | None = None
) -> BoxEmbedding:
    """Box of objects satisfying (s, r, ?o): center from the projected
    subject embedding, offset from the relation's offset vector.

    Offset nonnegativity is a store invariant (offsets are clamped at 0
    after every optimizer step); the lookup itself stays an identity so a
    zeroed offset dimension keeps receiving gradient and can regrow.
    """
    e = params.rows(tape, "entity_emb", subject)
    r = params.rows(tape, "relation_emb", relation)
    return BoxEmbedding(_project(e, r, kind), params.rows(tape, "relation_off", relation))


def project_time(
    subject, t, params: ParameterStore, kind: str = PROJECTOR_TE, tape: Tape | None = None
) -> BoxEmbedding:
    """Box of objects co-occurring with s at timestamp t."""
    e = params.rows(tape, "entity_emb", subject)
    tm = params.rows(tape, "time_emb", t)
    return BoxEmbedding(_project(e, tm, kind), params.rows(tape, "time_off", t))


def intersect_items(
    center_items: list[Node],
    offset_items: list[Node],
    params: ParameterStore,
    tape: Tape | None = None,
) -> BoxEmbedding:
    """Intersection over boxes given as parallel center/offset item lists
    (plus any extra attention-only center points appended by the caller).

    Center: elementwise attention over centers, weights softmaxed across
    items per dimension. Offset: elementwise min over offsets, downscaled
    by a sigmoid-gated DeepSets encoding, so the result is strictly
    smaller than every input in each dimension.
    """
    centers = ad.stack(center_items, axis=-2)
    att = ad.softmax(ad.linear(centers, params.matrix(tape, "w_att")), axis=-2)
    center = ad.reduce_sum(ad.mul(att, centers), axis=-2)

    offsets = ad.stack(offset_items, axis=-2)
    floor = ad.amin(offsets, axis=-2)
    h = ad.relu(ad.linear(offsets, params.matrix(tape, "w_ds_in")))
    h = ad.relu(ad.linear(h, params.matrix(tape, "w_ds_hidden")))
    pooled = ad.reduce_mean(h, axis=-2)
    gate = ad.sigmoid(ad.linear(pooled, params.matrix(tape, "w_ds_out")))
    return BoxEmbedding(center, ad.mul(floor, gate))


def intersect(
    boxes: list[BoxEmbedding],
    params: ParameterStore,
    tr_point=None,
    tape: Tape | None = None,
) -> BoxEmbedding:
    """Intersect one or more boxes; `tr_point` (a vector or list of
    vectors) joins the center attention without contributing an offset."""
    if not boxes:
        raise ValueError("intersection needs at least one box")
    center_items = [ad.wrap(b.center) for b in boxes]
    offset_items = [ad.wrap(b.offset) for b in boxes]
    if tr_point is not None:
        points = tr_point if isinstance(tr_point, (list, tuple)) else [tr_point]
        center_items.extend(ad.wrap(p) for p in points)
    return intersect_items(center_items, offset_items, params, tape)


def box_of_query(plan: QueryPlan, params: ParameterStore, tape: Tape | None = None) -> BoxEmbedding:
    """Build the answer box for a query plan.

    No time projection: the relation box itself (no intersection pass).
    One or two projections: intersect the relation box with the time
    box(es); under the TR variant each timestamp also contributes the
    point r + t to the center attention.
    """
    b_r = project_relation(plan.subject, plan.relation, params, plan.projector_kind, tape)
    if not plan.time_projections:
        return b_r
    boxes = [b_r] + [
        project_time(plan.subject, t, params, plan.projector_kind, tape)
        for t in plan.time_projections
    ]
    tr_points = None
    if plan.use_tr:
        tr_points = [
            ad.add(
                params.rows(tape, "relation_emb", plan.relation),
                params.rows(tape, "time_emb", t),
            )
            for t in plan.time_projections
        ]
    return intersect(boxes, params, tr_points, tape)


@dataclass
class DistanceParts:
    """Outside distance to the box boundary, inside distance from the
    boundary-clamped point to the center, and their weighted total."""

    outside: "Node | np.ndarray"
    inside: "Node | np.ndarray"
    total: "Node | np.ndarray"


def distance(point, box: BoxEmbedding, alpha: float) -> DistanceParts:
    """Two-part L1 distance of a point to a box: total = alpha*inside + outside."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    point = ad.wrap(point)
    center, offset = ad.wrap(box.center), ad.wrap(box.offset)
    b_min = ad.sub(center, offset)
    b_max = ad.add(center, offset)
    inside = ad.reduce_sum(ad.absolute(ad.sub(center, ad.clamp(point, b_min, b_max))), axis=-1)
    outside = ad.reduce_sum(
        ad.add(ad.relu(ad.sub(point, b_max)), ad.relu(ad.sub(b_min, point))), axis=-1
    )
    total = ad.add(ad.mul(inside, ad.constant(alpha)), outside)
    return DistanceParts(outside, inside, total)


def score(point, box: BoxEmbedding, gamma: float, alpha: float) -> "Node":
    """log sigmoid(gamma - distance); strictly decreasing in the distance."""
    total = distance(point, box, alpha).total
    return ad.log_sigmoid(ad.sub(ad.constant(gamma), total))


def score_entities(box: BoxEmbedding, params: ParameterStore) -> np.ndarray:
    """Scores of every entity against a query box (evaluation path)."""
    return score(params.arrays["entity_emb"], box, params.gamma, params.alpha).value
