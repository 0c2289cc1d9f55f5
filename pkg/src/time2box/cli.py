"""Command-line interface: dataset stats, synthetic generation, training,
evaluation, prediction, metric computation, and embedding export.

Configuration is flat key=value files; command-line flags override file
values. Every file-producing run writes a config.resolved snapshot next
to its outputs, and rerunning from that snapshot reproduces the run.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import (
    DatasetError,
    ScopeKind,
    SynthConfig,
    add_inverse_relations,
    generate_synthetic,
    load_dataset,
    write_dataset,
)
from .evaluation import (
    Interval,
    aeiou,
    eval_link_prediction,
    eval_time_prediction,
    gaeiou,
    giou,
)
from .model import QueryPlan, Variant, box_of_query, score_entities
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    check_dimensions,
    load_checkpoint,
    save_checkpoint,
    train,
)

SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")

_TYPE_ROWS = (
    ("#time instant", ScopeKind.INSTANT),
    ("#start time only", ScopeKind.RIGHT_OPEN),
    ("#end time only", ScopeKind.LEFT_OPEN),
    ("#full time interval", ScopeKind.CLOSED),
    ("#no time", ScopeKind.NO_TIME),
)


def load_kb(data_dir: str, missing: str = "-"):
    paths = [os.path.join(data_dir, name) for name in SPLIT_FILES]
    for path in paths:
        if not os.path.exists(path):
            raise DatasetError(f"dataset file not found: {path}")
    return load_dataset(*paths, missing=missing)


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def write_snapshot(out_dir: str, values: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")


def resolve(args, file_keys: dict[str, str], name: str, cast, default):
    """Precedence: explicit CLI flag > config file > default."""
    cli_value = getattr(args, name.replace("-", "_"), None)
    if cli_value is not None:
        return cli_value
    if name in file_keys:
        raw = file_keys[name]
        return cast(raw) if cast is not None else raw
    return default


def _split_arg(value: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in value.split(",") if part.strip())


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args) -> int:
    kb = load_kb(args.data, args.missing)
    print(f"#entities\t{kb.n_entities}")
    print(f"#relations\t{kb.n_relations}")
    print(f"time period\t[{kb.axis.origin}, {kb.axis.last_year}]")
    for split in ("train", "valid", "test"):
        counts = kb.type_counts(split)
        print(f"{split}\t#all\t{counts['all']}")
        for row_name, kind in _TYPE_ROWS:
            print(f"{split}\t{row_name}\t{counts[kind.value]}")
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        n_entities=args.entities,
        n_relations=args.relations,
        axis_length=args.axis_length,
        n_rules=args.rules,
        origin_year=args.origin,
    )
    kb, manifest = generate_synthetic(cfg)
    write_dataset(kb, args.out, manifest)
    write_snapshot(
        args.out,
        {
            "command": "gen-synthetic",
            "seed": cfg.seed,
            "entities": cfg.n_entities,
            "relations": cfg.n_relations,
            "axis-length": cfg.axis_length,
            "rules": cfg.n_rules,
            "origin": cfg.origin_year,
        },
    )
    counts = {sp: len(kb.splits[sp]) for sp in ("train", "valid", "test")}
    print(f"wrote {args.out}: {counts}, |E|={kb.n_entities}, |R|={kb.n_relations}")
    return 0


def _train_config_from(args) -> tuple[TrainConfig, str, str]:
    file_keys = read_config_file(args.config) if args.config else {}
    data_dir = resolve(args, file_keys, "data", str, None)
    missing = resolve(args, file_keys, "missing", str, "-")
    if data_dir is None:
        raise UsageError("--data is required (flag or config file)")
    cfg = TrainConfig(
        d=resolve(args, file_keys, "d", int, 64),
        k=resolve(args, file_keys, "k", int, 16),
        m=resolve(args, file_keys, "m", int, None),
        lr=resolve(args, file_keys, "lr", float, 1e-3),
        batch=resolve(args, file_keys, "batch", int, 256),
        steps=resolve(args, file_keys, "steps", int, 2000),
        gamma=resolve(args, file_keys, "gamma", float, 24.0),
        alpha=resolve(args, file_keys, "alpha", float, 0.5),
        beta=resolve(args, file_keys, "beta", float, 0.0),
        variant=Variant.parse(resolve(args, file_keys, "variant", str, "te")),
        seed=resolve(args, file_keys, "seed", int, 0),
        eval_every=resolve(args, file_keys, "eval-every", int, 200),
    )
    return cfg, data_dir, missing


def cmd_train(args) -> int:
    cfg, data_dir, missing = _train_config_from(args)
    kb = add_inverse_relations(load_kb(data_dir, missing))
    os.makedirs(args.out, exist_ok=True)
    snapshot = {
        "command": "train",
        "data": data_dir,
        "missing": missing,
        "d": cfg.d,
        "k": cfg.k,
        "m": "" if cfg.m is None else cfg.m,
        "lr": cfg.lr,
        "batch": cfg.batch,
        "steps": cfg.steps,
        "gamma": cfg.gamma,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "variant": str(cfg.variant),
        "seed": cfg.seed,
        "eval-every": cfg.eval_every,
    }
    if cfg.m is None:
        del snapshot["m"]
    write_snapshot(args.out, snapshot)

    log_path = os.path.join(args.out, "train.log")
    with open(log_path, "w", encoding="utf-8") as log_file:

        def progress(entry):
            log_file.write(entry.format() + "\n")
            log_file.flush()
            if not args.quiet:
                print(entry.format())

        params, _ = train(kb, cfg, progress=progress)
    ckpt = os.path.join(args.out, "checkpoint.t2b")
    save_checkpoint(params, ckpt, cfg.variant)
    print(f"checkpoint written to {ckpt}")
    return 0


def _load_model_and_kb(args, augment: bool = True):
    params, variant = load_checkpoint(args.checkpoint)
    kb = load_kb(args.data, args.missing)
    if augment:
        kb = add_inverse_relations(kb)
    check_dimensions(params, kb)
    return params, variant, kb


def cmd_eval_link(args) -> int:
    params, variant, kb = _load_model_and_kb(args)
    splits = _split_arg(args.filter)
    report = eval_link_prediction(
        kb.splits["test"], params, kb, variant, filter_splits=splits
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "link_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "link_breakdown.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.breakdown_tsv())
    write_snapshot(
        args.out,
        {
            "command": "eval-link",
            "checkpoint": args.checkpoint,
            "data": args.data,
            "filter": args.filter,
            "seed": args.seed,
        },
    )
    o = report.overall
    print(
        f"MRR={o.mrr:.4f} MR={o.mr:.1f} HITS@1={o.hits1:.4f} "
        f"HITS@3={o.hits3:.4f} HITS@10={o.hits10:.4f} (filter: {args.filter})"
    )
    return 0


def cmd_eval_time(args) -> int:
    params, variant, kb = _load_model_and_kb(args)
    # each original statement is predicted once, in the forward direction
    statements = [s for s in kb.splits["test"] if s.r < kb.n_base_relations]
    report = eval_time_prediction(statements, params, kb, variant, k=args.k, tau=args.tau)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "time_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "time_breakdown.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.breakdown_tsv())
    write_snapshot(
        args.out,
        {
            "command": "eval-time",
            "checkpoint": args.checkpoint,
            "data": args.data,
            "k": args.k,
            "tau": args.tau,
            "seed": args.seed,
        },
    )
    headline = " ".join(
        f"{key}={report.overall.get(key, float('nan')):.4f}"
        for key in ("giou@1", "aeiou@1", "gaeiou@1", f"gaeiou@{args.k}")
    )
    print(f"{headline} (evaluated {report.n_evaluated}, skipped {report.n_skipped})")
    return 0


def cmd_predict(args) -> int:
    params, variant, kb = _load_model_and_kb(args)
    try:
        s = kb.entities.id_of(args.subject)
    except KeyError:
        raise UsageError(f"unknown entity label {args.subject!r}") from None
    try:
        r = kb.relations.id_of(args.relation)
    except KeyError:
        raise UsageError(f"unknown relation label {args.relation!r}") from None

    if args.interval is not None:
        lo_year, hi_year = args.interval
        lo = kb.axis.index_of(lo_year, clamp=True)
        hi = kb.axis.index_of(hi_year, clamp=True)
        print("year\ttop entity\tscore")
        for t in range(lo, hi + 1):
            plan = QueryPlan(s, r, (t,), variant.projector_kind, variant.use_tr)
            scores = score_entities(box_of_query(plan, params), params)
            best = int(np.argmax(scores))
            print(f"{kb.axis.year_of(t)}\t{kb.entities.labels[best]}\t{scores[best]:.4f}")
        return 0

    t = None if args.time is None else kb.axis.index_of(args.time, clamp=True)
    plan = QueryPlan(s, r, () if t is None else (t,), variant.projector_kind, variant.use_tr)
    scores = score_entities(box_of_query(plan, params), params)
    order = np.argsort(-scores, kind="stable")[: args.topk]
    print("rank\tentity\tscore")
    for i, e in enumerate(order, start=1):
        print(f"{i}\t{kb.entities.labels[int(e)]}\t{scores[int(e)]:.4f}")
    return 0


def cmd_metrics(args) -> int:
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        with open(args.input, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                cols = line.split("\t")
                if len(cols) < 4:
                    raise DatasetError(
                        f"{args.input}:{line_no}: expected 4 integer columns"
                    )
                try:
                    g_lo, g_hi, p_lo, p_hi = (int(c) for c in cols[:4])
                except ValueError:
                    raise DatasetError(
                        f"{args.input}:{line_no}: expected 4 integer columns"
                    ) from None
                try:
                    gold, pred = Interval(g_lo, g_hi), Interval(p_lo, p_hi)
                except ValueError as exc:
                    raise DatasetError(f"{args.input}:{line_no}: {exc}") from None
                values = (giou(gold, pred), aeiou(gold, pred), gaeiou(gold, pred))
                out.write(line + "".join(f"\t{v:.6f}" for v in values) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.output:
        snapshot_dir = os.path.dirname(os.path.abspath(args.output))
        write_snapshot(
            snapshot_dir,
            {"command": "metrics", "input": args.input, "output": args.output},
        )
    return 0


def cmd_export_embeddings(args) -> int:
    params, _, kb = _load_model_and_kb(args)
    if args.table == "entity":
        labels, table = kb.entities.labels, params.arrays["entity_emb"]
    elif args.table == "relation":
        labels, table = kb.relations.labels, params.arrays["relation_emb"]
    else:
        labels = [str(kb.axis.year_of(i)) for i in range(kb.axis.length)]
        table = params.arrays["time_emb"]
    with open(args.out, "w", encoding="utf-8") as fh:
        for label, row in zip(labels, table):
            fh.write(label + "".join(f"\t{v:.8g}" for v in row) + "\n")
    print(f"wrote {len(labels)} {args.table} vectors to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    """Command-line misuse detected after argparse (exit code 2)."""


def _interval_arg(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YEAR:YEAR, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="time2box",
        description="Temporal knowledge-base completion with box embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="print split/validity-type counts")
    p.add_argument("data", help="dataset directory with train/valid/test.txt")
    p.add_argument("--missing", default="-", help="missing-endpoint sentinel")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-synthetic", help="generate a planted-timeline dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--axis-length", type=int, default=40)
    p.add_argument("--rules", type=int, default=120)
    p.add_argument("--origin", type=int, default=1980)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", help="comma-joined: te|dm plus tr, si, tns")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--missing", help="missing-endpoint sentinel (default '-')")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-link", help="filtered link-prediction evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing", default="-", help="missing-endpoint sentinel")
    p.add_argument("--out", required=True)
    p.add_argument("--filter", default="train,valid", help="splits used for filtering")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_link)

    p = sub.add_parser("eval-time", help="time-interval prediction evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing", default="-", help="missing-endpoint sentinel")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10, help="ranked intervals per query")
    p.add_argument("--tau", type=float, default=0.5, help="coalescing threshold fraction")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_time)

    p = sub.add_parser("predict", help="top-k entities for a query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing", default="-", help="missing-endpoint sentinel")
    p.add_argument("-s", "--subject", required=True)
    p.add_argument("-r", "--relation", required=True)
    p.add_argument("-t", "--time", type=int, help="query year")
    p.add_argument("--interval", type=_interval_arg, help="YEAR:YEAR timeline query")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="append gIOU/aeIOU/gaeIOU columns to a TSV")
    p.add_argument("--input", required=True, help="TSV: gold_lo gold_hi pred_lo pred_hi")
    p.add_argument("--output", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-embeddings", help="write label + vector TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing", default="-", help="missing-endpoint sentinel")
    p.add_argument("--out", required=True)
    p.add_argument("--table", choices=("entity", "relation", "time"), default="entity")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
