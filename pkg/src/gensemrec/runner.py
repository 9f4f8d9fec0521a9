"""Experiment plumbing shared by the CLI and the acceptance suite.

A run directory holds ``manifest.json``, ``config.yaml``, ``checkpoints/``,
``logs/`` and ``reports/``.  Every random draw is keyed by
``(seed, counter, stream)``, so a run resumed from any checkpoint replays the
remaining steps exactly.
"""

from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .a2po import LOG_FIELDS, STREAM_SAMPLE, A2POConfig, FusionConfig, a2po_train_step, epoch_plan
from .aggregator import (
    AggregatorPolicy,
    aggregator_train_step,
    build_preference_pairs,
    pairwise_accuracy,
    prepare_pairs,
    write_pairs,
)
from .arrays import dump_arrays, load_arrays
from .config import RunConfig, config_from_dict, dump_config
from .errors import ConfigError, EmptyPairSet, MissingWorld, ResumeMismatch
from .evalkit import (
    StratifiedReport,
    hr_from_ranks,
    ndcg_from_ranks,
    stratified_report,
    target_ranks,
    write_report_csv,
    write_report_json,
)
from .genpolicy import GeneratorPolicy
from .judge import NoisyScorer, OracleScorer
from .optim import make_optimizer
from .synthworld import BusinessRewardConfig, World, WorldParams, context_features, generate_world

STREAM_AGG = 11
STREAM_AGG_PAIRS = 12


@dataclass
class Split:
    train: list
    test: list
    X_train: np.ndarray
    X_test: np.ndarray
    train_rows: np.ndarray
    test_rows: np.ndarray
    partition: str

    @property
    def test_levels(self) -> np.ndarray:
        return np.array([e.novelty_level for e in self.test])


def world_params(cfg: RunConfig) -> WorldParams:
    w = cfg.world.__dict__.copy()
    w.pop("test_fraction")
    return WorldParams(**w)


def split_world(world: World, test_fraction: float) -> Split:
    """Last ``test_fraction`` of users are held out (user order is already random)."""
    eps = world.episodes
    n_test = max(1, int(round(len(eps) * test_fraction)))
    train, test = eps[:-n_test], eps[-n_test:]
    n_tags = world.params.n_context_tags
    X = context_features([e.context for e in eps], world.catalog, n_tags)
    rows = world.catalog.rows([e.target_item for e in eps])
    return Split(train, test, X[:-n_test], X[-n_test:], rows[:-n_test], rows[-n_test:], f"{world.fingerprint()}:{n_test}")


def load_world(cfg: RunConfig) -> World:
    if not cfg.paths.world_dir:
        raise MissingWorld("paths.world_dir is not set; run gen-world first")
    d = Path(cfg.paths.world_dir)
    if not (d / "manifest.json").exists():
        raise MissingWorld(f"no world at {d}")
    return World.load(d)


def base_manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seeds": {"run": cfg.seed, "world": cfg.world.seed},
        "versions": {"gensemrec": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }


def write_manifest(run_dir, manifest: dict) -> None:
    Path(run_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(run_dir) -> dict:
    return json.loads(Path(run_dir, "manifest.json").read_text())


def config_from_manifest(run_dir) -> RunConfig:
    return config_from_dict(read_manifest(run_dir)["config"])


def prepare_run_dir(run_dir, cfg: RunConfig) -> Path:
    d = Path(run_dir)
    for sub in ("checkpoints", "logs", "reports"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, d / "config.yaml")
    return d


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- world ---------------------------------------------------------------


def gen_world(cfg: RunConfig, out_dir) -> World:
    world = generate_world(world_params(cfg))
    world.save(out_dir)
    return world


# -- aggregator ----------------------------------------------------------


@dataclass
class AggregatorResult:
    policy: AggregatorPolicy
    history: list
    heldout_accuracy: float
    argmax_match: float | None


def make_scorer(cfg: RunConfig, world: World):
    scorer = OracleScorer(world.catalog, world.tag_allowed)
    if cfg.judge.noise > 0:
        scorer = NoisyScorer(scorer, cfg.judge.noise, world.params.seed)
    return scorer


def train_aggregator(world: World, cfg: RunConfig, run_dir=None) -> AggregatorResult:
    """Build pairwise data from the world, train, and track held-out accuracy.

    Pairs come from training users; held-out pairs from the held-out users of
    the same split used for generator evaluation.
    """
    a = cfg.aggregator
    split = split_world(world, cfg.world.test_fraction)
    scorer = OracleScorer(world.catalog, world.tag_allowed)
    tr_pairs = build_preference_pairs(
        world, scorer, split.train, [cfg.seed, 0, STREAM_AGG_PAIRS], a.behavioral_fraction, a.pairs_per_context
    )
    te_pairs = build_preference_pairs(
        world, scorer, split.test, [cfg.seed, 1, STREAM_AGG_PAIRS], a.behavioral_fraction, a.pairs_per_context
    )
    if not tr_pairs or not te_pairs:
        raise EmptyPairSet("the world produced no usable preference pairs")
    n_tags = world.params.n_context_tags
    btr = prepare_pairs(tr_pairs, scorer, world.catalog, n_tags)
    bte = prepare_pairs(te_pairs, scorer, world.catalog, n_tags)
    policy = AggregatorPolicy(btr.X.shape[1], world.n_aspects, a.K, seed=cfg.seed)
    opt = make_optimizer(a.optimizer, a.lr, policy.size)

    planted = world.params.latent_weight_mode == "onehot"
    segs = np.array([e.context.latent_weights.argmax() for e in split.test])

    def argmax_match():
        if not planted:
            return None
        return float(np.mean(policy.expected_weights(split.X_test).argmax(axis=1) == segs))

    history = []
    log_lines = ["step,mean_reward,objective,kl,heldout_accuracy,argmax_match"]
    bs = min(a.batch_size, len(btr))
    for step in range(a.steps):
        rng = np.random.default_rng([cfg.seed, step, STREAM_AGG])
        idx = rng.choice(len(btr), bs, replace=False)
        d = aggregator_train_step(policy, btr.subset(idx), a.group_size, a.beta, opt, rng)
        if (step + 1) % a.eval_every == 0 or step + 1 == a.steps:
            acc = pairwise_accuracy(policy, bte)
            am = argmax_match()
            rec = {"step": step + 1, **d, "heldout_accuracy": acc, "argmax_match": am}
            history.append(rec)
            log_lines.append(
                ",".join(
                    [str(step + 1)]
                    + [_fmt(d[k]) for k in ("mean_reward", "objective", "kl")]
                    + [_fmt(acc), "" if am is None else _fmt(am)]
                )
            )
    result = AggregatorResult(policy, history, pairwise_accuracy(policy, bte), argmax_match())
    if run_dir is not None:
        d = prepare_run_dir(run_dir, cfg)
        policy.save(d / "checkpoints" / "aggregator.txt")
        write_pairs(d / "logs" / "pairs_train.txt", tr_pairs)
        write_pairs(d / "logs" / "pairs_heldout.txt", te_pairs)
        (d / "logs" / "aggregator.log").write_text("\n".join(log_lines) + "\n")
        summary = {
            "heldout_accuracy": result.heldout_accuracy,
            "argmax_match": result.argmax_match,
            "n_train_pairs": len(tr_pairs),
            "n_heldout_pairs": len(te_pairs),
        }
        (d / "reports" / "aggregator.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_manifest(
            d, base_manifest(cfg, "train-aggregator", artifacts={"checkpoint": "checkpoints/aggregator.txt"}, world_partition=split.partition)
        )
    return result


def semantic_weight_rows(cfg: RunConfig, world: World, split: Split, aggregator: AggregatorPolicy | None) -> np.ndarray:
    """Per-training-context weights used for the holistic semantic reward."""
    mode = cfg.a2po.semantic_weights
    D = world.n_aspects
    if mode == "uniform":
        return np.full((len(split.train), D), 1.0 / D)
    if mode == "latent":
        return np.stack([e.context.latent_weights for e in split.train])
    if aggregator is None:
        raise ConfigError("a2po.semantic_weights=aggregator needs paths.aggregator (run train-aggregator first)")
    return aggregator.expected_weights(split.X_train)


def load_aggregator(cfg: RunConfig) -> AggregatorPolicy | None:
    if cfg.a2po.semantic_weights != "aggregator" or cfg.a2po.mode == "business_only":
        return None
    if not cfg.paths.aggregator:
        raise ConfigError("a2po.semantic_weights=aggregator needs paths.aggregator (run train-aggregator first)")
    path = Path(cfg.paths.aggregator)
    if path.is_dir():
        path = path / "checkpoints" / "aggregator.txt"
    if not path.exists():
        raise ConfigError(f"paths.aggregator: no checkpoint at {path}")
    return AggregatorPolicy.load(path)


# -- generator -----------------------------------------------------------


def a2po_config(cfg: RunConfig) -> A2POConfig:
    a = cfg.a2po
    fusion_mode = "full" if a.mode == "business_only" else a.mode
    p = 0.0 if a.mode == "business_only" else a.p
    fusion = FusionConfig(fusion_mode, a.alpha, a.epsilon, a.std_guard)
    return A2POConfig(fusion, a.group_size, p, a.delta, a.beta_gen, a.batch_size, a.inner_epochs)


@dataclass
class TrainResult:
    policy: GeneratorPolicy
    log: list
    evals: list
    report: StratifiedReport


def evaluate(policy: GeneratorPolicy, split: Split) -> tuple[StratifiedReport, np.ndarray]:
    ranks = target_ranks(policy, split.X_test, split.test_rows)
    return stratified_report(ranks, split.test_levels, split.partition), ranks


def _save_checkpoint(path, policy, opt, step: int) -> None:
    arrs = {"params": policy.params, "old_params": policy.old_params, "ref_params": policy.ref_params}
    arrs.update(opt.state())
    arrs["step"] = np.array([step], dtype=np.int64)
    dump_arrays(path, arrs)


def _latest_checkpoint(run_dir: Path):
    ck = sorted(run_dir.glob("checkpoints/step_*.txt"), key=lambda p: int(p.stem.split("_")[1]))
    return ck[-1] if ck else None


def train_generator(
    world: World,
    cfg: RunConfig,
    aggregator: AggregatorPolicy | None = None,
    run_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    split: Split | None = None,
) -> TrainResult:
    """Run the A2PO loop to ``cfg.a2po.steps``.

    With ``run_dir`` set, writes the training log, evaluation snapshots,
    periodic checkpoints and the final report.  ``stop_after`` ends the loop
    early (used to simulate an interruption).
    """
    a = cfg.a2po
    split = split or split_world(world, cfg.world.test_fraction)
    conf = a2po_config(cfg)
    weights = None if conf.p == 0 else semantic_weight_rows(cfg, world, split, aggregator)
    scorer = make_scorer(cfg, world)
    biz = BusinessRewardConfig(cfg.business.mode, cfg.business.graded_same_sub, cfg.business.graded_same_root)
    policy = GeneratorPolicy(world.codebook, split.X_train.shape[1], cfg.policy.embed_dim, cfg.policy.init_scale, cfg.seed)
    opt = make_optimizer(cfg.policy.optimizer, cfg.policy.lr, policy.size)
    contexts = [e.context for e in split.train]
    n_train = len(split.train)
    spe = math.ceil(n_train / conf.batch_size)

    log: list[dict] = []
    evals: list[dict] = []
    start = 0
    d = None
    if run_dir is not None:
        d = Path(run_dir)
        if resume:
            if not (d / "manifest.json").exists():
                raise ResumeMismatch(f"nothing to resume at {d}")
            if read_manifest(d)["config_digest"] != cfg.digest():
                raise ResumeMismatch("config differs from the run being resumed")
            ck = _latest_checkpoint(d)
            if ck is not None:
                arrs = load_arrays(ck)
                policy.params = arrs["params"]
                policy.old_params = arrs["old_params"]
                policy.ref_params = arrs["ref_params"]
                opt.load_state(arrs)
                start = int(arrs["step"][0])
            log = [r for r in _read_log(d / "logs" / "train.log") if r["step"] < start]
            evals = [r for r in _read_log(d / "logs" / "eval.log") if r["step"] <= start]
        else:
            prepare_run_dir(d, cfg)
            write_manifest(
                d,
                base_manifest(
                    cfg,
                    "train",
                    world_partition=split.partition,
                    world_dir=cfg.paths.world_dir,
                    artifacts={"train_log": "logs/train.log", "eval_log": "logs/eval.log", "report": "reports/final.json"},
                ),
            )

    plan_epoch, batches, judged = -1, None, None
    end = a.steps if stop_after is None else min(a.steps, stop_after)
    for step in range(start, end):
        epoch, bi = divmod(step, spe)
        if epoch != plan_epoch:
            batches, judged = epoch_plan(n_train, conf.batch_size, conf.p, cfg.seed, epoch)
            plan_epoch = epoch
        b = batches[bi]
        diag = a2po_train_step(
            policy,
            split.X_train[b],
            [contexts[i] for i in b],
            split.train_rows[b],
            judged[b],
            scorer,
            None if weights is None else weights[b],
            world.catalog,
            biz,
            conf,
            opt,
            [cfg.seed, step, STREAM_SAMPLE],
        )
        log.append({"step": step, **{k: diag[k] for k in LOG_FIELDS if k != "step"}})
        done = step + 1
        if a.eval_every and (done % a.eval_every == 0 or done == a.steps):
            rep, ranks = evaluate(policy, split)
            evals.append({"step": done, "hr10": rep.get("hr", 10), "ndcg10": rep.get("ndcg", 10)})
        if d is not None and a.checkpoint_every and done % a.checkpoint_every == 0:
            _save_checkpoint(d / "checkpoints" / f"step_{done}.txt", policy, opt, done)
            _write_logs(d, log, evals)

    report, ranks = evaluate(policy, split)
    if d is not None:
        _write_logs(d, log, evals)
        if end == a.steps:
            _save_checkpoint(d / "checkpoints" / "final.txt", policy, opt, end)
            write_report_json(d / "reports" / "final.json", report, extra={"mode": a.mode, "p": conf.p, "seed": cfg.seed})
            write_report_csv(d / "reports" / "final.csv", report)
            np.savetxt(d / "reports" / "ranks.txt", ranks, fmt="%d")
    return TrainResult(policy, log, evals, report)


def _write_logs(d: Path, log: list, evals: list) -> None:
    lines = [",".join(LOG_FIELDS)] + [",".join(_fmt(r[k]) for k in LOG_FIELDS) for r in log]
    (d / "logs" / "train.log").write_text("\n".join(lines) + "\n")
    elines = ["step,hr10,ndcg10"] + [f"{r['step']},{_fmt(r['hr10'])},{_fmt(r['ndcg10'])}" for r in evals]
    (d / "logs" / "eval.log").write_text("\n".join(elines) + "\n")


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        rec = {h: (int(v) if h == "step" else float(v)) for h, v in zip(header, vals)}
        out.append(rec)
    return out


def hr_ndcg(ranks, K: int = 10) -> tuple[float, float]:
    return float(hr_from_ranks(ranks, K).mean()), float(ndcg_from_ranks(ranks, K).mean())
