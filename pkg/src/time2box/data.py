"""Temporal knowledge bases: parsing, indexing, time axis, synthetic generation.

A statement is a (subject, relation, object) triple scoped by one of five
validity kinds: no time, a single year, a known start, a known end, or a
closed year interval. Datasets are 5-column TSV files (one per split); the
time axis is the contiguous range of years observed in the training split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

MISSING = "-"

SPLITS = ("train", "valid", "test")


class DatasetError(Exception):
    """Malformed dataset file or infeasible generator configuration."""


class ScopeKind(str, Enum):
    NO_TIME = "no-time"
    INSTANT = "instant"
    RIGHT_OPEN = "right-open"
    LEFT_OPEN = "left-open"
    CLOSED = "closed"


@dataclass(frozen=True)
class TimeScope:
    """Validity scope of a statement; start/end are years or axis indices."""

    kind: ScopeKind
    start: int | None = None
    end: int | None = None

    def __post_init__(self):
        if self.kind is ScopeKind.CLOSED and self.start > self.end:
            raise DatasetError(f"closed scope with start {self.start} > end {self.end}")

    @classmethod
    def no_time(cls) -> "TimeScope":
        return cls(ScopeKind.NO_TIME)

    @classmethod
    def instant(cls, t: int) -> "TimeScope":
        return cls(ScopeKind.INSTANT, t, t)

    @classmethod
    def right_open(cls, st: int) -> "TimeScope":
        return cls(ScopeKind.RIGHT_OPEN, st, None)

    @classmethod
    def left_open(cls, et: int) -> "TimeScope":
        return cls(ScopeKind.LEFT_OPEN, None, et)

    @classmethod
    def closed(cls, st: int, et: int) -> "TimeScope":
        return cls(ScopeKind.CLOSED, st, et)

    @property
    def is_temporal(self) -> bool:
        return self.kind is not ScopeKind.NO_TIME


@dataclass(frozen=True)
class Statement:
    s: int
    r: int
    o: int
    scope: TimeScope


@dataclass(frozen=True)
class TimeAxis:
    """Contiguous yearly axis; index i corresponds to year origin + i."""

    origin: int
    length: int

    def index_of(self, year: int, clamp: bool = False) -> int:
        idx = year - self.origin
        if clamp:
            idx = min(max(idx, 0), self.length - 1)
        elif not 0 <= idx < self.length:
            raise DatasetError(f"year {year} outside axis [{self.origin}, {self.last_year}]")
        return idx

    def year_of(self, index: int) -> int:
        return self.origin + index

    @property
    def last_year(self) -> int:
        return self.origin + self.length - 1


class Vocab:
    """Label <-> integer id mapping, ids assigned in first-seen order."""

    def __init__(self):
        self._ids: dict[str, int] = {}
        self.labels: list[str] = []

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self.labels)
            self._ids[label] = idx
            self.labels.append(label)
        return idx

    def id_of(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"unknown label {label!r}") from None

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self.labels)


class FilterIndex:
    """True-answer sets per split: (s, r) -> {o} and (s, r, t) -> {o}.

    Timed entries cover every timestamp in the discretization of each
    temporally scoped statement; atemporal entries cover every statement.
    """

    def __init__(self):
        self.atemporal: dict[str, dict[tuple[int, int], set[int]]] = {sp: {} for sp in SPLITS}
        self.timed: dict[str, dict[tuple[int, int, int], set[int]]] = {sp: {} for sp in SPLITS}

    def add(self, split: str, stmt: Statement, axis: TimeAxis) -> None:
        self.atemporal[split].setdefault((stmt.s, stmt.r), set()).add(stmt.o)
        if stmt.scope.is_temporal:
            timed = self.timed[split]
            for t in discretize(stmt.scope, axis):
                timed.setdefault((stmt.s, stmt.r, t), set()).add(stmt.o)

    def atemporal_objects(self, s: int, r: int, splits=SPLITS) -> set[int]:
        out: set[int] = set()
        for sp in splits:
            out |= self.atemporal[sp].get((s, r), set())
        return out

    def timed_objects(self, s: int, r: int, t: int, splits=SPLITS) -> set[int]:
        out: set[int] = set()
        for sp in splits:
            out |= self.timed[sp].get((s, r, t), set())
        return out


@dataclass
class TemporalKB:
    """Immutable after construction; safe to share across readers."""

    entities: Vocab
    relations: Vocab
    axis: TimeAxis
    splits: dict[str, list[Statement]]
    filter: FilterIndex
    n_base_relations: int

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def has_inverses(self) -> bool:
        return len(self.relations) == 2 * self.n_base_relations

    def type_counts(self, split: str) -> dict[str, int]:
        counts = {"all": 0} | {k.value: 0 for k in ScopeKind}
        for stmt in self.splits[split]:
            counts["all"] += 1
            counts[stmt.scope.kind.value] += 1
        return counts


def parse_statement(
    line: str,
    entities: Vocab,
    relations: Vocab,
    line_no: int | None = None,
    missing: str = MISSING,
    axis: TimeAxis | None = None,
) -> Statement:
    """Parse one 5-column TSV line, assigning vocabulary ids as needed.

    Scope classification: (-,-) no time; (y,y) instant; (y,-) right-open;
    (-,y) left-open; (y1,y2) with y1<y2 closed. When `axis` is given, years
    are converted to axis indices, clamping to the axis endpoints.
    """
    where = f" (line {line_no})" if line_no is not None else ""
    cols = line.rstrip("\n").split("\t")
    if len(cols) != 5:
        raise DatasetError(f"expected 5 tab-separated columns, got {len(cols)}{where}")
    s_lab, r_lab, o_lab, start_s, end_s = cols

    def year(text: str) -> int | None:
        if text == missing:
            return None
        try:
            return int(text)
        except ValueError:
            raise DatasetError(f"non-integer year {text!r}{where}") from None

    start, end = year(start_s), year(end_s)
    if start is None and end is None:
        scope = TimeScope.no_time()
    elif start is not None and end is None:
        scope = TimeScope.right_open(start)
    elif start is None:
        scope = TimeScope.left_open(end)
    elif start == end:
        scope = TimeScope.instant(start)
    elif start < end:
        scope = TimeScope.closed(start, end)
    else:
        raise DatasetError(f"closed interval with start {start} > end {end}{where}")
    if axis is not None:
        scope = scope_to_axis(scope, axis)
    return Statement(entities.add(s_lab), relations.add(r_lab), entities.add(o_lab), scope)


def format_statement(
    stmt: Statement,
    entities: Vocab,
    relations: Vocab,
    axis: TimeAxis | None = None,
    missing: str = MISSING,
) -> str:
    """Canonical 5-column form; inverse of parse_statement."""

    def col(value: int | None) -> str:
        if value is None:
            return missing
        return str(axis.year_of(value)) if axis is not None else str(value)

    scope = stmt.scope
    return "\t".join(
        (
            entities.labels[stmt.s],
            relations.labels[stmt.r],
            entities.labels[stmt.o],
            col(scope.start),
            col(scope.end),
        )
    )


def scope_to_axis(scope: TimeScope, axis: TimeAxis) -> TimeScope:
    """Convert a year-valued scope to axis indices, clamping out-of-span years."""

    def conv(year: int | None) -> int | None:
        return None if year is None else axis.index_of(year, clamp=True)

    return TimeScope(scope.kind, conv(scope.start), conv(scope.end))


def discretize(scope: TimeScope, axis: TimeAxis | None = None) -> list[int]:
    """Timestamps a temporal scope contributes: the known endpoint for
    half-open intervals, every year for closed ones."""
    if scope.kind is ScopeKind.NO_TIME:
        raise ValueError("cannot discretize a statement without a temporal scope")
    if scope.kind is ScopeKind.RIGHT_OPEN:
        ts = [scope.start]
    elif scope.kind is ScopeKind.LEFT_OPEN:
        ts = [scope.end]
    else:
        ts = list(range(scope.start, scope.end + 1))
    if axis is not None:
        for t in ts:
            if not 0 <= t < axis.length:
                raise DatasetError(f"time index {t} off axis of length {axis.length}")
    return ts


def _read_split(path, entities: Vocab, relations: Vocab, missing: str) -> list[Statement]:
    statements = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            statements.append(parse_statement(line, entities, relations, line_no, missing))
    return statements


def _train_year_span(statements: list[Statement]) -> tuple[int, int]:
    years = []
    for stmt in statements:
        for y in (stmt.scope.start, stmt.scope.end):
            if y is not None:
                years.append(y)
    if not years:
        raise DatasetError("training split has no temporal statements; time axis is undefined")
    return min(years), max(years)


def build_kb(
    split_statements: dict[str, list[Statement]],
    entities: Vocab,
    relations: Vocab,
    axis: TimeAxis,
    n_base_relations: int | None = None,
    scopes_in_years: bool = True,
) -> TemporalKB:
    """Assemble a TemporalKB from parsed statements, indexing all splits."""
    filt = FilterIndex()
    splits: dict[str, list[Statement]] = {}
    for sp in SPLITS:
        out = []
        for stmt in split_statements.get(sp, []):
            if scopes_in_years:
                stmt = Statement(stmt.s, stmt.r, stmt.o, scope_to_axis(stmt.scope, axis))
            filt.add(sp, stmt, axis)
            out.append(stmt)
        splits[sp] = out
    return TemporalKB(
        entities=entities,
        relations=relations,
        axis=axis,
        splits=splits,
        filter=filt,
        n_base_relations=n_base_relations or len(relations),
    )


def load_dataset(train_path, valid_path, test_path, missing: str = MISSING) -> TemporalKB:
    """Load a TSV dataset. The axis spans the training split's year range;
    validation/test years outside it are clamped to the nearest endpoint."""
    entities, relations = Vocab(), Vocab()
    raw = {
        "train": _read_split(train_path, entities, relations, missing),
        "valid": _read_split(valid_path, entities, relations, missing),
        "test": _read_split(test_path, entities, relations, missing),
    }
    if not raw["train"]:
        raise DatasetError(f"training split {train_path} is empty")
    lo, hi = _train_year_span(raw["train"])
    axis = TimeAxis(origin=lo, length=hi - lo + 1)

    seen_train_e = {x for st in raw["train"] for x in (st.s, st.o)}
    seen_train_r = {st.r for st in raw["train"]}
    only_eval_e = len(entities) - len(seen_train_e)
    only_eval_r = len(relations) - len(seen_train_r)
    if only_eval_e or only_eval_r:
        logger.info(
            "%d entities and %d relations appear only outside the training split",
            only_eval_e,
            only_eval_r,
        )
    return build_kb(raw, entities, relations, axis)


def add_inverse_relations(kb: TemporalKB) -> TemporalKB:
    """Return a KB with a reciprocal relation r^-1 and a mirrored statement
    (o, r^-1, s, scope) for every statement; doubles the relation count."""
    if kb.has_inverses:
        return kb
    relations = Vocab()
    for label in kb.relations.labels:
        relations.add(label)
    for label in kb.relations.labels:
        relations.add(f"{label}^-1")
    n_base = kb.n_base_relations
    splits = {}
    for sp in SPLITS:
        out = []
        for stmt in kb.splits[sp]:
            out.append(stmt)
            out.append(Statement(stmt.o, stmt.r + n_base, stmt.s, stmt.scope))
        splits[sp] = out
    return build_kb(splits, kb.entities, relations, kb.axis, n_base, scopes_in_years=False)


@dataclass(frozen=True)
class SynthConfig:
    """Planted-timeline generator settings."""

    seed: int
    n_entities: int
    n_relations: int
    axis_length: int
    n_rules: int
    origin_year: int = 1980
    max_segments: int = 4
    instant_echoes: int = 1  # train-split instant statements per segment
    bipartite: bool = True  # subjects and objects drawn from disjoint pools
    n_atemporal_pairs: int = field(default=0)  # 0 -> n_rules // 4


#: manifest row: (s, r, o, start, end, split) as TSV-ready strings
ManifestRow = tuple[str, str, str, str, str, str]


def generate_synthetic(config: SynthConfig) -> tuple[TemporalKB, list[ManifestRow]]:
    """Generate a TKB where each rule (s, r) carries a planted object
    timeline: distinct objects valid on consecutive disjoint intervals
    covering the whole axis. Train holds the interval statements plus
    instant/half-open echoes; valid/test hold instants, sub-intervals,
    half-open and no-time statements inferable from the training timeline.
    Splits are disjoint. The manifest records every emitted statement with
    its split. In bipartite mode (default) subjects come from the first
    half of the entity range and objects from the second half, which keeps
    the two roles geometrically separable.
    """
    E, R, L = config.n_entities, config.n_relations, config.axis_length
    if E < 2 or R < 2 or L < 2:
        raise DatasetError("synthetic generation needs at least 2 entities, relations and years")
    if config.n_rules < 1:
        raise DatasetError("need at least one rule")
    n_subjects = E // 2 if config.bipartite else E
    if config.n_rules > n_subjects * R:
        raise DatasetError(
            f"{config.n_rules} rules exceed the {n_subjects}x{R} subject-relation capacity"
        )
    object_pool = np.arange(E - E // 2, E) if config.bipartite else np.arange(E)
    max_segments = min(config.max_segments, len(object_pool) - (0 if config.bipartite else 1), L)
    rng = np.random.default_rng(config.seed)

    entities, relations = Vocab(), Vocab()
    width = len(str(E - 1))
    for i in range(E):
        entities.add(f"e{i:0{width}d}")
    for j in range(R):
        relations.add(f"rel{j}")

    rule_keys = rng.choice(n_subjects * R, size=config.n_rules, replace=False)
    emitted: set[tuple] = set()
    rows: list[tuple[Statement, str]] = []

    def emit(split: str, s: int, r: int, o: int, scope: TimeScope) -> bool:
        key = (s, r, o, scope.kind, scope.start, scope.end)
        if key in emitted:
            return False
        emitted.add(key)
        rows.append((Statement(s, r, o, scope), split))
        return True

    for key in rule_keys:
        s, r = int(key) // R, int(key) % R
        n_seg = int(rng.integers(2, max_segments + 1))
        cuts = np.sort(rng.choice(np.arange(1, L), size=n_seg - 1, replace=False))
        bounds = [0, *cuts.tolist(), L]
        # a subject is never its own timeline object
        candidates = np.setdiff1d(object_pool, [s])
        objects = rng.choice(candidates, size=n_seg, replace=False)
        for i in range(n_seg):
            a, b = bounds[i], bounds[i + 1] - 1
            o = int(objects[i])
            if a == b:
                emit("train", s, r, o, TimeScope.instant(a))
                continue
            emit("train", s, r, o, TimeScope.closed(a, b))
            span = np.arange(a, b + 1)
            for _ in range(config.instant_echoes):
                emit("train", s, r, o, TimeScope.instant(int(rng.choice(span))))
            for split in ("valid", "test"):
                emit(split, s, r, o, TimeScope.instant(int(rng.choice(span))))
            # closed sub-intervals of the planted segment are inferable
            # from training and exercise interval-query evaluation
            if b - a >= 3:
                for split in ("valid", "test"):
                    if rng.random() < 0.5:
                        x, y = sorted(int(v) for v in rng.integers(a, b + 1, size=2))
                        if x < y and (x, y) != (a, b):
                            emit(split, s, r, o, TimeScope.closed(x, y))
            # occasional half-open and no-time echoes keep every validity
            # kind represented in the evaluation splits
            u = rng.random()
            if u < 0.15:
                emit("test", s, r, o, TimeScope.right_open(a))
            elif u < 0.30:
                emit("test", s, r, o, TimeScope.left_open(b))
            elif u < 0.40:
                emit("test", s, r, o, TimeScope.no_time())
            elif u < 0.50:
                emit("train", s, r, o, TimeScope.right_open(int(rng.choice(span))))

    # purely atemporal facts, train-only noise off the rule grid
    n_atemporal = config.n_atemporal_pairs or max(1, config.n_rules // 4)
    free = np.setdiff1d(np.arange(n_subjects * R), rule_keys)
    if len(free) and n_atemporal:
        picks = rng.choice(free, size=min(n_atemporal, len(free)), replace=False)
        for key in picks:
            s, r = int(key) // R, int(key) % R
            emit("train", s, r, int(rng.choice(object_pool)), TimeScope.no_time())

    # anchor facts so every entity and relation occurs in training, keeping
    # the written dataset's vocabulary identical to the generated one
    mentioned_e = {x for stmt, sp in rows if sp == "train" for x in (stmt.s, stmt.o)}
    mentioned_r = {stmt.r for stmt, sp in rows if sp == "train"}
    for e in range(E):
        if e not in mentioned_e:
            if config.bipartite and e >= E - E // 2:
                emit("train", int(rng.integers(0, n_subjects)), int(rng.integers(0, R)), e, TimeScope.no_time())
            else:
                emit("train", e, int(rng.integers(0, R)), int(rng.choice(object_pool)), TimeScope.no_time())
    for r in range(R):
        if r not in mentioned_r:
            emit("train", int(rng.integers(0, n_subjects)), r, int(rng.choice(object_pool)), TimeScope.no_time())

    axis = TimeAxis(origin=config.origin_year, length=L)
    split_statements: dict[str, list[Statement]] = {sp: [] for sp in SPLITS}
    manifest: list[ManifestRow] = []
    for stmt, split in rows:
        split_statements[split].append(stmt)
        year_scope = TimeScope(
            stmt.scope.kind,
            None if stmt.scope.start is None else axis.year_of(stmt.scope.start),
            None if stmt.scope.end is None else axis.year_of(stmt.scope.end),
        )
        manifest.append(
            (
                entities.labels[stmt.s],
                relations.labels[stmt.r],
                entities.labels[stmt.o],
                MISSING if year_scope.start is None else str(year_scope.start),
                MISSING if year_scope.end is None else str(year_scope.end),
                split,
            )
        )
    # every timeline partitions [0, L-1], so the train split always pins
    # both axis endpoints and a reload reproduces the same axis
    kb = build_kb(split_statements, entities, relations, axis, scopes_in_years=False)
    return kb, manifest


def write_dataset(kb: TemporalKB, out_dir, manifest: list[ManifestRow] | None = None) -> None:
    """Write train/valid/test TSVs (and manifest.tsv when given) under out_dir."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for sp in SPLITS:
        with open(os.path.join(out_dir, f"{sp}.txt"), "w", encoding="utf-8") as fh:
            for stmt in kb.splits[sp]:
                fh.write(format_statement(stmt, kb.entities, kb.relations, kb.axis) + "\n")
    if manifest is not None:
        with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8") as fh:
            for row in manifest:
                fh.write("\t".join(row) + "\n")
