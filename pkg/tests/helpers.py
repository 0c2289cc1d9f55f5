"""Shared test fixtures: tiny KB construction and the brute-force ranking
oracle that eval_link_prediction must match exactly."""

import numpy as np

from time2box import data as d
from time2box.data import ScopeKind, TimeAxis, Vocab, build_kb
from time2box.model import QueryPlan, Variant, box_of_query, score_entities


def kb_from_lines(train_lines, valid_lines=(), test_lines=(), n_entities=None):
    """Tiny KB built directly from 5-column lines; the axis spans the
    training lines' year range."""
    ents, rels = Vocab(), Vocab()
    splits = {
        "train": [d.parse_statement(line, ents, rels) for line in train_lines],
        "valid": [d.parse_statement(line, ents, rels) for line in valid_lines],
        "test": [d.parse_statement(line, ents, rels) for line in test_lines],
    }
    if n_entities is not None:
        for i in range(len(ents), n_entities):
            ents.add(f"pad{i}")
    years = [
        y for st in splits["train"] for y in (st.scope.start, st.scope.end) if y is not None
    ]
    axis = TimeAxis(origin=min(years), length=max(years) - min(years) + 1)
    return build_kb(splits, ents, rels, axis)


def brute_force_rank(scores, gold, known_true):
    """Rank by explicit descending sort; the gold takes the worst position
    within its tie group, and known true answers other than the gold do
    not compete."""
    entries = [
        (e, s) for e, s in enumerate(scores) if e == gold or e not in known_true
    ]
    entries.sort(key=lambda pair: -pair[1])
    gold_score = scores[gold]
    rank = 0
    for _, s in entries:
        if s >= gold_score:
            rank += 1
        else:
            break
    return rank


def brute_force_link_report(statements, params, kb, variant=None, filter_splits=("train", "valid")):
    """Independent link-prediction evaluation: per-year queries, explicit
    sorting, averaged ranks, per-validity-type aggregation."""
    variant = variant or Variant()
    buckets = {
        ScopeKind.NO_TIME: "no-time",
        ScopeKind.INSTANT: "instant",
        ScopeKind.RIGHT_OPEN: "open-interval",
        ScopeKind.LEFT_OPEN: "open-interval",
        ScopeKind.CLOSED: "closed-interval",
    }
    rows = []
    for stmt in statements:
        scope = stmt.scope
        if scope.kind is ScopeKind.NO_TIME:
            ts = [None]
        elif scope.kind is ScopeKind.LEFT_OPEN:
            ts = [scope.end]
        elif scope.kind is ScopeKind.CLOSED:
            ts = list(range(scope.start, scope.end + 1))
        else:
            ts = [scope.start]
        per_t = []
        for t in ts:
            plan = QueryPlan(
                stmt.s,
                stmt.r,
                () if t is None else (t,),
                projector_kind=variant.projector_kind,
                use_tr=variant.use_tr,
            )
            scores = score_entities(box_of_query(plan, params), params)
            if t is None:
                known = kb.filter.atemporal_objects(stmt.s, stmt.r, splits=filter_splits)
            else:
                known = kb.filter.timed_objects(stmt.s, stmt.r, t, splits=filter_splits)
            per_t.append(brute_force_rank(scores, stmt.o, known))
        rows.append((buckets[scope.kind], float(np.mean(per_t))))

    def agg(ranks):
        arr = np.array(ranks, dtype=float)
        return {
            "count": len(arr),
            "mrr": float(np.mean(1.0 / arr)),
            "mr": float(np.mean(arr)),
            "hits1": float(np.mean(arr <= 1)),
            "hits3": float(np.mean(arr <= 3)),
            "hits10": float(np.mean(arr <= 10)),
        }

    report = {"overall": agg([r for _, r in rows])}
    for bucket in {b for b, _ in rows}:
        report[bucket] = agg([r for b, r in rows if b == bucket])
    return report
