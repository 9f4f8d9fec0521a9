import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from gensemrec.aggregator import AggregatorPolicy, pairwise_accuracy, prepare_pairs, read_pairs
from gensemrec.cli import main
from gensemrec.config import MODES, load_config
from gensemrec.judge import OracleScorer
from gensemrec.runner import load_aggregator, load_world, split_world, train_generator

SMALL = [
    "world.n_users=400",
    "a2po.steps=12",
    "a2po.batch_size=32",
    "a2po.group_size=4",
    "a2po.eval_every=6",
    "a2po.checkpoint_every=4",
    "aggregator.steps=30",
    "aggregator.eval_every=10",
]


def _args(*sets):
    out = []
    for s in sets:
        out += ["--set", s]
    return out


def _hashes(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    assert main(["gen-world", "--out", str(d), *_args(*SMALL)]) == 0
    return d


@pytest.fixture(scope="module")
def agg_dir(tmp_path_factory, world_dir):
    d = tmp_path_factory.mktemp("agg")
    assert main(["train-aggregator", *_args(*SMALL, f"paths.world_dir={world_dir}", f"output_dir={d}")]) == 0
    return d


def _train(tmp, world_dir, agg_dir, name, *extra):
    out = tmp / name
    argv = ["train", *_args(*SMALL, f"paths.world_dir={world_dir}", f"paths.aggregator={agg_dir}", f"output_dir={out}", *extra)]
    assert main(argv) == 0
    return out


def test_gen_world_writes_files_and_records_seed(world_dir):
    files = {p.name for p in world_dir.iterdir()}
    assert {"catalog.txt", "codebook.txt", "episodes.txt", "users.txt", "manifest.json"} <= files
    manifest = json.loads((world_dir / "manifest.json").read_text())
    assert manifest["params"]["seed"] == 0 and manifest["params"]["n_users"] == 400


def test_gen_world_is_deterministic(tmp_path, world_dir):
    assert main(["gen-world", "--out", str(tmp_path / "again"), *_args(*SMALL)]) == 0
    assert _hashes(tmp_path / "again") == _hashes(world_dir)


def test_malformed_key_is_rejected_by_name(tmp_path, capsys):
    assert main(["gen-world", "--out", str(tmp_path), "--set", "world.n_user=5"]) == 2
    assert "world.n_user" in capsys.readouterr().err
    (tmp_path / "c.yaml").write_text("a2po:\n  detla: 0.3\n")
    assert main(["train", "--config", str(tmp_path / "c.yaml")]) == 2
    assert "detla" in capsys.readouterr().err


def test_train_without_world_fails(tmp_path, capsys):
    assert main(["train", "--set", f"output_dir={tmp_path}"]) == 2
    assert "gen-world" in capsys.readouterr().err


def test_aggregator_outputs(agg_dir):
    log = (agg_dir / "logs" / "aggregator.log").read_text().splitlines()
    assert log[0].startswith("step,") and len(log) == 4
    summary = json.loads((agg_dir / "reports" / "aggregator.json").read_text())
    assert 0.0 <= summary["heldout_accuracy"] <= 1.0 and summary["n_train_pairs"] > 0
    AggregatorPolicy.load(agg_dir / "checkpoints" / "aggregator.txt")


def test_zero_pairs_is_an_error(tmp_path, world_dir, capsys):
    rc = main(["train-aggregator", *_args(*SMALL, f"paths.world_dir={world_dir}", f"output_dir={tmp_path}", "aggregator.pairs_per_context=0")])
    assert rc == 2 and "pairs" in capsys.readouterr().err


def test_huge_beta_stays_near_reference_accuracy(tmp_path, world_dir):
    d = tmp_path / "agg"
    # plain SGD: Adam rescales the step, so a large beta would only bound the drift by the learning rate
    sets = ["aggregator.beta=10000", "aggregator.optimizer=sgd", "aggregator.lr=0.0005"]
    assert main(["train-aggregator", *_args(*SMALL, f"paths.world_dir={world_dir}", f"output_dir={d}", *sets)]) == 0
    cfg = load_config(None, SMALL)
    world = load_world(load_config(None, [f"paths.world_dir={world_dir}"]))
    split = split_world(world, cfg.world.test_fraction)
    pairs = read_pairs(d / "logs" / "pairs_heldout.txt", {e.user_id: e.context for e in split.test})
    batch = prepare_pairs(pairs, OracleScorer(world.catalog), world.catalog, 0)
    trained = AggregatorPolicy.load(d / "checkpoints" / "aggregator.txt")
    ref = AggregatorPolicy(trained.input_dim, trained.n_aspects, trained.K)
    ref.params = trained.ref_params
    p, q = np.exp(trained.log_probs(batch.X)), np.exp(ref.log_probs(batch.X))
    assert 0.5 * np.abs(p - q).sum(-1).max() < 0.01
    # the uniform reference ties many pairs exactly and any tilt breaks them, so compare past a tolerance
    assert abs(pairwise_accuracy(trained, batch, 1e-3) - pairwise_accuracy(ref, batch, 1e-3)) <= 0.02


def test_six_modes_give_comparable_reports(tmp_path, world_dir, agg_dir):
    partitions = set()
    for mode in MODES:
        out = _train(tmp_path, world_dir, agg_dir, mode, f"a2po.mode={mode}")
        rep = json.loads((out / "reports" / "final.json").read_text())
        assert rep["mode"] == mode
        partitions.add(rep["report"]["partition"])
        log = (out / "logs" / "train.log").read_text().splitlines()
        assert log[0] == "step,objective,mean_lambda,gate_close_rate,consistency_rate,conflict_rate,judged_fraction,grad_norm"
        assert len(log) == 13
    assert len(partitions) == 1


def test_p_zero_is_bit_identical_to_business_only(tmp_path, world_dir, agg_dir):
    a = _train(tmp_path, world_dir, agg_dir, "biz", "a2po.mode=business_only")
    b = _train(tmp_path, world_dir, agg_dir, "p0", "a2po.mode=full", "a2po.p=0")
    assert (a / "checkpoints" / "final.txt").read_bytes() == (b / "checkpoints" / "final.txt").read_bytes()
    assert (a / "reports" / "ranks.txt").read_bytes() == (b / "reports" / "ranks.txt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path, world_dir, agg_dir):
    full = _train(tmp_path, world_dir, agg_dir, "full")
    cfg = load_config(None, [*SMALL, f"paths.world_dir={world_dir}", f"paths.aggregator={agg_dir}", f"output_dir={tmp_path / 'cut'}"])
    # interrupted after step 7: the last checkpoint is step 4, so three steps are replayed
    train_generator(load_world(cfg), cfg, load_aggregator(cfg), run_dir=cfg.output_dir, stop_after=7)
    assert not (tmp_path / "cut" / "reports" / "final.json").exists()
    argv = ["train", "--resume", *_args(*SMALL, f"paths.world_dir={world_dir}", f"paths.aggregator={agg_dir}", f"output_dir={tmp_path / 'cut'}")]
    assert main(argv) == 0
    ra = json.loads((full / "reports" / "final.json").read_text())["report"]["metrics"]
    rb = json.loads((tmp_path / "cut" / "reports" / "final.json").read_text())["report"]["metrics"]
    assert all(abs(ra[k] - rb[k]) <= 1e-9 for k in ra)
    for log in ("train.log", "eval.log"):
        assert (full / "logs" / log).read_bytes() == (tmp_path / "cut" / "logs" / log).read_bytes()


def test_resume_with_changed_config_is_refused(tmp_path, world_dir, agg_dir, capsys):
    _train(tmp_path, world_dir, agg_dir, "r")
    argv = ["train", "--resume", *_args(*SMALL, f"paths.world_dir={world_dir}", f"paths.aggregator={agg_dir}", f"output_dir={tmp_path / 'r'}", "a2po.delta=0.3")]
    assert main(argv) == 2
    assert "config" in capsys.readouterr().err


def test_report_single_and_with_baseline(tmp_path, world_dir, agg_dir):
    t = _train(tmp_path, world_dir, agg_dir, "t")
    b = _train(tmp_path, world_dir, agg_dir, "b", "a2po.mode=business_only")
    assert main(["report", str(t), "--out", str(tmp_path / "single")]) == 0
    header = (tmp_path / "single" / "report.csv").read_text().splitlines()[0]
    assert "lift" not in header
    assert main(["report", str(t), "--baseline", str(b), "--out", str(tmp_path / "lift")]) == 0
    rows = (tmp_path / "lift" / "level_lift_hr5.csv").read_text().splitlines()
    assert rows[0] == "level,lift" and [r.split(",")[0] for r in rows[1:]] == ["0", "1", "2", "3"]


def test_report_rejects_mismatched_worlds(tmp_path, world_dir, agg_dir, capsys):
    t = _train(tmp_path, world_dir, agg_dir, "t")
    other = tmp_path / "world2"
    assert main(["gen-world", "--out", str(other), *_args(*SMALL, "world.seed=5")]) == 0
    b = tmp_path / "b2"
    argv = ["train", *_args(*SMALL, f"paths.world_dir={other}", f"output_dir={b}", "a2po.mode=business_only")]
    assert main(argv) == 0
    assert main(["report", str(t), "--baseline", str(b), "--out", str(tmp_path / "x")]) == 2
    assert "different" in capsys.readouterr().err


def test_sweep_p_writes_table(tmp_path, world_dir, agg_dir):
    argv = ["sweep-p", "--p", "0,0.05,1", "--seeds", "0,1", *_args(*SMALL, f"paths.world_dir={world_dir}", f"paths.aggregator={agg_dir}", f"output_dir={tmp_path / 's'}")]
    assert main(argv) == 0
    lines = (tmp_path / "s" / "p_table.csv").read_text().splitlines()
    assert lines[0] == "p,hr10,ndcg10,fraction_of_full_lift" and len(lines) == 4
    summary = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert summary["seeds"] == [0, 1]


def test_selftest_and_console_script():
    assert main(["selftest"]) == 0
    out = subprocess.run([sys.executable, "-m", "gensemrec.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "sweep-p" in out.stdout
