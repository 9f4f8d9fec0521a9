"""Ranking metrics, novelty-stratified reports and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CatalogTooLarge, KTooLarge, PartitionMismatch

KS = (3, 5, 10)
METRICS = ("hr", "ndcg")
LEVELS = (0, 1, 2, 3)


@dataclass(frozen=True)
class RankedList:
    items: tuple[int, ...]
    dedup: bool = True
    approximate: bool = False

    def __post_init__(self):
        if self.dedup and len(set(self.items)) != len(self.items):
            raise ValueError("duplicate items in a deduplicated list")

    def __len__(self) -> int:
        return len(self.items)


def _rank_of(ranked: RankedList, target: int, K: int) -> int | None:
    if K > len(ranked):
        raise KTooLarge(f"K={K} exceeds list length {len(ranked)}")
    for i, item in enumerate(ranked.items[:K]):
        if item == target:
            return i + 1
    return None


def hr_at_k(ranked: RankedList, target: int, K: int) -> int:
    return int(_rank_of(ranked, int(target), K) is not None)


def ndcg_at_k(ranked: RankedList, target: int, K: int) -> float:
    r = _rank_of(ranked, int(target), K)
    return 0.0 if r is None else float(1.0 / np.log2(r + 1))


def hr_from_ranks(ranks, K: int) -> np.ndarray:
    return (np.asarray(ranks) <= K).astype(float)


def ndcg_from_ranks(ranks, K: int) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=float)
    return np.where(ranks <= K, 1.0 / np.log2(ranks + 1.0), 0.0)


# -- ranking under a policy -----------------------------------------------


def order_items(log_probs: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """Indices sorting by log-prob descending, ties broken by ascending item id."""
    return np.lexsort((item_ids, -log_probs))


def generate_ranked_list(policy, x, K_max: int, seed: int = 0, enum_budget: int = 1 << 16, fallback: bool = False, n_samples: int = 100_000) -> RankedList:
    """Top ``K_max`` items for one context.

    Exact enumeration when the catalog fits ``enum_budget``; otherwise raise
    :class:`CatalogTooLarge`, or with ``fallback`` rank by sampled frequency
    (flagged as approximate).
    """
    ids = np.array(sorted(policy.codebook.forward), dtype=np.int64)
    if K_max > len(ids):
        raise KTooLarge(f"K_max={K_max} exceeds catalog size {len(ids)}")
    x = np.asarray(x, dtype=float)[None, :]
    if len(ids) <= enum_budget:
        lp = policy.all_item_log_probs(x)[0]
        order = order_items(lp, ids)
        return RankedList(tuple(int(i) for i in ids[order[:K_max]]))
    if not fallback:
        raise CatalogTooLarge(f"{len(ids)} items exceed the enumeration budget {enum_budget}")
    sids, _ = policy.sample(np.repeat(x, n_samples, axis=0), np.random.default_rng(seed), under="current")
    counts = np.bincount(policy.sid_rows(sids), minlength=len(ids)).astype(float)
    order = order_items(counts, ids)
    return RankedList(tuple(int(i) for i in ids[order[:K_max]]), approximate=True)


def target_ranks(policy, X: np.ndarray, target_rows, chunk: int = 256) -> np.ndarray:
    """1-based rank of each target under exact enumeration with id tie-break.

    Columns of the enumeration follow ascending item id, so a row index
    comparison is the id tie-break.
    """
    target_rows = np.asarray(target_rows)
    ranks = np.zeros(len(X), dtype=np.int64)
    cols = None
    for lo in range(0, len(X), chunk):
        lp = policy.all_item_log_probs(X[lo : lo + chunk])
        if cols is None:
            cols = np.arange(lp.shape[1])
        tr = target_rows[lo : lo + chunk]
        lt = lp[np.arange(len(lp)), tr][:, None]
        ahead = (lp > lt) | ((lp == lt) & (cols[None, :] < tr[:, None]))
        ranks[lo : lo + chunk] = ahead.sum(axis=1) + 1
    return ranks


# -- stratified reports ----------------------------------------------------


@dataclass
class StratifiedReport:
    """``metrics[(level, metric, K)]``; level ``"all"`` holds the overall value."""

    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    partition: str = ""

    def get(self, metric: str, K: int, level="all") -> float:
        return self.metrics[(level, metric, K)]

    def to_json(self) -> dict:
        return {
            "partition": self.partition,
            "counts": {str(k): v for k, v in self.counts.items()},
            "metrics": {f"{lv}|{m}|{k}": v for (lv, m, k), v in self.metrics.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "StratifiedReport":
        metrics = {}
        for key, v in d["metrics"].items():
            lv, m, k = key.split("|")
            metrics[(lv if lv == "all" else int(lv), m, int(k))] = v
        counts = {(k if k == "all" else int(k)): v for k, v in d["counts"].items()}
        return cls(metrics, counts, d.get("partition", ""))


def stratified_report(ranks, levels, partition: str = "", Ks=KS) -> StratifiedReport:
    ranks = np.asarray(ranks)
    levels = np.asarray(levels)
    rep = StratifiedReport(partition=partition)
    rep.counts["all"] = int(len(ranks))
    for lv in LEVELS:
        rep.counts[lv] = int(np.sum(levels == lv))
    for K in Ks:
        for name, fn in (("hr", hr_from_ranks), ("ndcg", ndcg_from_ranks)):
            vals = fn(ranks, K)
            rep.metrics[("all", name, K)] = float(vals.mean()) if len(vals) else 0.0
            for lv in LEVELS:
                sel = vals[levels == lv]
                rep.metrics[(lv, name, K)] = float(sel.mean()) if len(sel) else 0.0
    return rep


def stratified_lift(treatment: StratifiedReport, baseline: StratifiedReport) -> dict:
    """Relative lift per ``(level, metric, K)``; ``None`` where the baseline is 0."""
    if treatment.counts != baseline.counts or treatment.partition != baseline.partition:
        raise PartitionMismatch("reports were computed on different episode partitions")
    out = {}
    for key, base in baseline.metrics.items():
        out[key] = None if base == 0 else (treatment.metrics[key] - base) / base
    return out


def mean_report(reports) -> StratifiedReport:
    """Seed-average of reports sharing one partition."""
    reports = list(reports)
    first = reports[0]
    for r in reports[1:]:
        if r.counts != first.counts or r.partition != first.partition:
            raise PartitionMismatch("cannot average reports over different partitions")
    metrics = {k: float(np.mean([r.metrics[k] for r in reports])) for k in first.metrics}
    return StratifiedReport(metrics, dict(first.counts), first.partition)


# -- emission --------------------------------------------------------------


def _level_key(lv):
    return -1 if lv == "all" else lv


def write_report_csv(path, report: StratifiedReport, lift: dict | None = None) -> None:
    """One row per level x metric x K."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["level", "metric", "K", "value", "count"] + (["lift"] if lift is not None else [])
        w.writerow(header)
        for key in sorted(report.metrics, key=lambda k: (_level_key(k[0]), k[1], k[2])):
            lv, m, K = key
            row = [lv, m, K, repr(report.metrics[key]), report.counts[lv]]
            if lift is not None:
                row.append("" if lift[key] is None else repr(lift[key]))
            w.writerow(row)


def write_report_json(path, report: StratifiedReport, lift: dict | None = None, extra: dict | None = None) -> None:
    d = {"report": report.to_json()}
    if lift is not None:
        d["lift"] = {f"{lv}|{m}|{k}": v for (lv, m, k), v in lift.items()}
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def write_level_lift_table(path, lift: dict, metric: str = "hr", K: int = 5) -> None:
    """Plot data: ``level,lift`` rows."""
    lines = ["level,lift"]
    for lv in LEVELS:
        v = lift[(lv, metric, K)]
        lines.append(f"{lv},{'' if v is None else repr(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_p_table(path, rows) -> None:
    """Plot data: rows of ``(p, hr10, ndcg10, fraction_of_full_lift)``."""
    lines = ["p,hr10,ndcg10,fraction_of_full_lift"]
    for p, hr, nd, frac in rows:
        lines.append(f"{p!r},{hr!r},{nd!r},{'' if frac is None else repr(frac)}")
    Path(path).write_text("\n".join(lines) + "\n")
