"""Command-line entry point: ``gensemrec <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import MODES, RunConfig, load_config
from .errors import GenSemRecError, PartitionMismatch
from .evalkit import (
    StratifiedReport,
    mean_report,
    stratified_lift,
    write_level_lift_table,
    write_p_table,
    write_report_csv,
    write_report_json,
)
from .runner import (
    base_manifest,
    gen_world,
    load_aggregator,
    load_world,
    train_aggregator,
    train_generator,
    write_manifest,
)


def _with(cfg: RunConfig, overrides: list) -> RunConfig:
    """Copy of ``cfg`` with ``key=value`` strings or ``(key, value)`` pairs applied."""
    return load_config(None, [*_flatten(cfg.to_dict()), *overrides])


def _flatten(tree: dict, prefix: str = ""):
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield (key, v)


# -- commands --------------------------------------------------------------


def cmd_gen_world(cfg: RunConfig, out: str | None = None) -> Path:
    d = Path(out or cfg.paths.world_dir or Path(cfg.output_dir) / "world")
    world = gen_world(cfg, d)
    print(f"world: {len(world.catalog)} items, {len(world.episodes)} episodes -> {d}")
    return d


def cmd_train(cfg: RunConfig, mode: str | None = None, resume: bool = False) -> Path:
    if mode is not None:
        cfg = _with(cfg, [("a2po.mode", mode)])
    world = load_world(cfg)
    aggregator = load_aggregator(cfg)
    d = Path(cfg.output_dir)
    res = train_generator(world, cfg, aggregator, run_dir=d, resume=resume)
    print(f"{cfg.a2po.mode}: HR@10={res.report.get('hr', 10):.4f} NDCG@10={res.report.get('ndcg', 10):.4f} -> {d}")
    return d


def cmd_train_aggregator(cfg: RunConfig) -> Path:
    world = load_world(cfg)
    d = Path(cfg.output_dir)
    res = train_aggregator(world, cfg, run_dir=d)
    msg = f"aggregator: held-out pairwise accuracy {res.heldout_accuracy:.4f}"
    if res.argmax_match is not None:
        msg += f", planted-aspect argmax match {res.argmax_match:.4f}"
    print(msg + f" -> {d}")
    return d


def cmd_sweep_p(cfg: RunConfig, p_values: list[float], seeds: list[int]) -> Path:
    """Paired runs: every p shares the seeds; p=0 is the business-only baseline."""
    world = load_world(cfg)
    aggregator = load_aggregator(_with(cfg, [("a2po.mode", "full")]))
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    by_p: dict[float, list[StratifiedReport]] = {}
    for p in p_values:
        for s in seeds:
            sub = _with(cfg, [("a2po.mode", "full"), ("a2po.p", float(p)), ("seed", s), ("output_dir", str(root / f"p{p!r}_seed{s}"))])
            res = train_generator(world, sub, aggregator, run_dir=sub.output_dir)
            by_p.setdefault(p, []).append(res.report)
    means = {p: mean_report(r) for p, r in by_p.items()}
    base = means.get(0.0)
    top = means.get(max(p_values))
    full_lift = None if base is None or top is None else top.get("hr", 10) - base.get("hr", 10)
    rows = []
    for p in p_values:
        hr, nd = means[p].get("hr", 10), means[p].get("ndcg", 10)
        frac = None
        if base is not None and full_lift:
            frac = (hr - base.get("hr", 10)) / full_lift
        rows.append((p, hr, nd, frac))
        print(f"p={p}: HR@10={hr:.4f} NDCG@10={nd:.4f} fraction_of_full_lift={'-' if frac is None else f'{frac:.3f}'}")
    write_p_table(root / "p_table.csv", rows)
    summary = {"seeds": seeds, "rows": [dict(zip(("p", "hr10", "ndcg10", "fraction_of_full_lift"), r)) for r in rows]}
    (root / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(root, base_manifest(cfg, "sweep-p", p_values=p_values, sweep_seeds=seeds))
    return root


def _load_report(run_dir) -> StratifiedReport:
    path = Path(run_dir) / "reports" / "final.json"
    if not path.exists():
        raise GenSemRecError(f"{run_dir}: no final report (run not completed?)")
    return StratifiedReport.from_json(json.loads(path.read_text())["report"])


def cmd_report(run_dirs: list[str], baseline: str | None, out: str) -> Path:
    """Seed-average the treatment runs; with a baseline, add stratified lift."""
    out_d = Path(out)
    out_d.mkdir(parents=True, exist_ok=True)
    treat = mean_report(_load_report(d) for d in run_dirs)
    lift = None
    if baseline is not None:
        base = mean_report(_load_report(d) for d in baseline.split(","))
        if base.partition != treat.partition:
            raise PartitionMismatch("baseline and treatment runs were evaluated on different worlds")
        lift = stratified_lift(treat, base)
        write_level_lift_table(out_d / "level_lift_hr5.csv", lift, "hr", 5)
        write_level_lift_table(out_d / "level_lift_hr10.csv", lift, "hr", 10)
    write_report_csv(out_d / "report.csv", treat, lift)
    write_report_json(out_d / "report.json", treat, lift, extra={"runs": list(run_dirs), "baseline": baseline})
    print(f"report: HR@10={treat.get('hr', 10):.4f} over {len(run_dirs)} run(s) -> {out_d}")
    return out_d


def cmd_selftest() -> int:
    from .selftest import run_all

    failures = 0
    for name, ok, detail in run_all():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += not ok
    return 1 if failures else 0


# -- argument parsing ------------------------------------------------------


def _csv_list(kind):
    return lambda s: [kind(v) for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gensemrec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return p

    g = with_config(sub.add_parser("gen-world", help="generate and save a synthetic world"))
    g.add_argument("--out", help="world directory (default: paths.world_dir or <output_dir>/world)")

    t = with_config(sub.add_parser("train", help="train the generator with A2PO"))
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    with_config(sub.add_parser("train-aggregator", help="train the aspect aggregator from pairwise preferences"))

    s = with_config(sub.add_parser("sweep-p", help="paired runs over the semantic sampling ratio"))
    s.add_argument("--p", dest="p_values", type=_csv_list(float), default=[0.0, 0.05, 1.0])
    s.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2, 3, 4])

    r = sub.add_parser("report", help="consolidate run reports and stratified lift")
    r.add_argument("runs", nargs="+")
    r.add_argument("--baseline", help="baseline run dir(s), comma separated")
    r.add_argument("--out", default="report")

    sub.add_parser("selftest", help="run the built-in invariant checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return cmd_selftest()
        if args.command == "report":
            cmd_report(args.runs, args.baseline, args.out)
            return 0
        cfg = load_config(args.config, args.overrides)
        if args.command == "gen-world":
            cmd_gen_world(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.mode, args.resume)
        elif args.command == "train-aggregator":
            cmd_train_aggregator(cfg)
        elif args.command == "sweep-p":
            cmd_sweep_p(cfg, args.p_values, args.seeds)
        return 0
    except GenSemRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
