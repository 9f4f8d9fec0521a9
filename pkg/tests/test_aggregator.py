import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gensemrec.aggregator import (
    AggregatorPolicy,
    PairBatch,
    PreferencePair,
    aggregator_train_step,
    build_preference_pairs,
    holistic_score,
    normalize_levels,
    pairwise_accuracy,
    pairwise_objective,
    pairwise_reward,
    prepare_pairs,
    read_pairs,
    write_pairs,
)
from gensemrec.errors import DimensionMismatch, EmptyPairSet, FormatError
from gensemrec.judge import AspectScores, OracleScorer
from gensemrec.optim import SGD, Adam
from gensemrec.selftest import check_aggregator_gradient


def test_normalize_levels_examples():
    assert np.allclose(normalize_levels([1, 1, 1, 1]), 0.25)
    assert np.allclose(normalize_levels([0, 0, 0, 0]), 0.25)
    assert np.allclose(normalize_levels([0, 4, 2, 2]), [0, 0.5, 0.25, 0.25])


@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(3, 4)), elements=st.integers(0, 4)))
def test_normalized_levels_lie_on_simplex(z):
    w = normalize_levels(z)
    assert np.allclose(w.sum(-1), 1.0) and (w >= 0).all()


def test_holistic_score_examples():
    assert holistic_score([0.25] * 4, AspectScores(1.0, 0.5, 1.0, 0.0)) == pytest.approx(0.625)
    assert holistic_score([1, 0, 0, 0], AspectScores(-1.0, 1.0, 1.0, 0.0)) == -1.0
    assert holistic_score([0.15, 0.42, 0.31, 0.12], AspectScores(1.0, 1.0, 1.0, 0.0)) == pytest.approx(0.88)
    with pytest.raises(DimensionMismatch):
        holistic_score([0.25] * 4, AspectScores(1.0, 1.0, 1.0))


def test_pairwise_reward_examples():
    assert pairwise_reward(0.9, 0.5) == 1
    assert pairwise_reward(0.5, 0.5) == 0
    assert pairwise_reward(0.4, 0.6) == 0


def test_preference_pair_needs_distinct_items(small_world):
    with pytest.raises(ValueError):
        PreferencePair(small_world.episodes[0].context, 3, 3)


def _random_batch(rng, P=40, D=4, n_in=6):
    alph = [(-1.0, -0.5, 0.0, 0.5, 1.0), (0.0, 0.5, 1.0), (0.0, 0.5, 1.0), (-1.0, 0.0)][:D]
    s = lambda: np.stack([rng.choice(a, P) for a in alph], 1)
    return PairBatch(rng.standard_normal((P, n_in)), s(), s())


def test_expected_weights_match_monte_carlo():
    rng = np.random.default_rng(0)
    pol = AggregatorPolicy(5, 4, K=4, init_scale=0.7, seed=1)
    X = rng.standard_normal((3, 5))
    exact = pol.expected_weights(X)
    mc = normalize_levels(pol.sample(X, 200_000, rng)).mean(axis=1)
    assert np.abs(exact - mc).max() < 5e-3
    assert np.allclose(exact.sum(1), 1.0)


def test_expected_weights_by_explicit_enumeration():
    pol = AggregatorPolicy(2, 3, K=2, init_scale=1.0, seed=2)
    x = np.array([[0.3, -1.2]])
    p = np.exp(pol.log_probs(x))[0]
    ref = np.zeros(3)
    for z in itertools.product(range(3), repeat=3):
        ref += np.prod([p[d, z[d]] for d in range(3)]) * normalize_levels(np.array(z))
    assert np.allclose(pol.expected_weights(x)[0], ref, atol=1e-14)


def test_sampler_frequencies():
    pol = AggregatorPolicy(3, 4, K=4, init_scale=1.0, seed=0)
    x = np.ones((1, 3))
    z = pol.sample(x, 100_000, np.random.default_rng(1))[0]
    p = np.exp(pol.log_probs(x))[0]
    for d in range(4):
        freq = np.bincount(z[:, d], minlength=5) / len(z)
        assert np.abs(freq - p[d]).max() < 0.01


def test_analytic_gradient_matches_finite_differences():
    name, ok, detail = check_aggregator_gradient(n_instances=4, n_coords=60)
    assert ok, detail


def test_zero_advantage_step_follows_kl_gradient():
    rng = np.random.default_rng(3)
    pol = AggregatorPolicy(4, 4, K=4, seed=0)
    pol.params = pol.ref_params + 0.5 * rng.standard_normal(pol.size)
    batch = _random_batch(rng, P=12, n_in=4)
    # identical scores on both sides: every sample gets reward 0
    batch.s_lose = batch.s_win.copy()
    before = pol.params.copy()
    aggregator_train_step(pol, batch, G=8, beta=0.3, optimizer=SGD(0.1), rng=rng)
    step = pol.params - before
    h = 1e-6
    fd = np.empty(pol.size)
    for c in range(pol.size):
        e = np.zeros(pol.size)
        e[c] = h
        fd[c] = -(pol.kl_to_ref(batch.X, before + e).mean() - pol.kl_to_ref(batch.X, before - e).mean()) / (2 * h)
    cos = step @ fd / (np.linalg.norm(step) * np.linalg.norm(fd))
    assert cos > 1 - 1e-8


def test_huge_beta_stays_at_reference():
    rng = np.random.default_rng(0)
    pol = AggregatorPolicy(6, 4, K=4, init_scale=0.3, seed=0)
    batch = _random_batch(rng, P=64)
    opt = Adam(0.05, pol.size)
    for _ in range(200):
        aggregator_train_step(pol, batch, G=8, beta=1e4, optimizer=opt, rng=rng)
    p = np.exp(pol.log_probs(batch.X))
    q = np.exp(pol.log_probs(batch.X, pol.ref_params))
    tv = 0.5 * np.abs(p - q).sum(-1)
    assert tv.max() < 0.01


def test_train_step_validates():
    rng = np.random.default_rng(0)
    pol = AggregatorPolicy(6, 4)
    with pytest.raises(ValueError):
        aggregator_train_step(pol, _random_batch(rng), G=1, beta=0.1, optimizer=SGD(0.1), rng=rng)
    with pytest.raises(ValueError):
        aggregator_train_step(pol, _random_batch(rng), G=4, beta=-1, optimizer=SGD(0.1), rng=rng)


def test_training_learns_a_planted_weight():
    """Pairs labeled by weight on the second aspect only: accuracy should climb well above chance."""
    rng = np.random.default_rng(5)
    batch = _random_batch(rng, P=400, D=3, n_in=4)
    keep = batch.s_win[:, 1] != batch.s_lose[:, 1]
    swap = batch.s_win[:, 1] < batch.s_lose[:, 1]
    win = np.where(swap[:, None], batch.s_lose, batch.s_win)
    lose = np.where(swap[:, None], batch.s_win, batch.s_lose)
    batch = PairBatch(batch.X[keep], win[keep], lose[keep])
    pol = AggregatorPolicy(4, 3, K=4, seed=0)
    start = pairwise_accuracy(pol, batch)
    opt = Adam(0.05, pol.size)
    for _ in range(300):
        aggregator_train_step(pol, batch, G=16, beta=0.01, optimizer=opt, rng=rng)
    assert pairwise_accuracy(pol, batch) > max(0.9, start + 0.1)
    assert pol.expected_weights(batch.X).mean(0).argmax() == 1


def test_objective_ignores_equal_pairs_when_advantages_zero():
    rng = np.random.default_rng(0)
    pol = AggregatorPolicy(6, 4, init_scale=0.2)
    batch = _random_batch(rng, P=5)
    levels = pol.sample(batch.X, 4, rng)
    value, grad = pairwise_objective(pol, batch, levels, np.zeros((5, 4)), beta=0.0)
    assert value == 0.0 and not grad.any()


def test_pairs_respect_planted_weights(tagged_world):
    scorer = OracleScorer(tagged_world.catalog, tagged_world.tag_allowed)
    pairs = build_preference_pairs(tagged_world, scorer, tagged_world.episodes[:200], seed=0, pairs_per_context=2)
    assert {p.source for p in pairs} == {"intra", "behavioral"}
    for p in pairs:
        s = scorer.score_batch([p.context] * 2, [p.winner, p.loser]) @ p.context.latent_weights
        assert s[0] > s[1]
    again = build_preference_pairs(tagged_world, scorer, tagged_world.episodes[:200], seed=0, pairs_per_context=2)
    assert [(p.winner, p.loser) for p in again] == [(p.winner, p.loser) for p in pairs]


def test_no_pairs_is_an_error(small_world):
    with pytest.raises(EmptyPairSet):
        prepare_pairs([], OracleScorer(small_world.catalog), small_world.catalog, 0)


def test_pairs_file_round_trip(tmp_path, small_world):
    scorer = OracleScorer(small_world.catalog)
    pairs = build_preference_pairs(small_world, scorer, small_world.episodes[:50], seed=1)
    write_pairs(tmp_path / "p.txt", pairs)
    ctxs = {e.user_id: e.context for e in small_world.episodes}
    back = read_pairs(tmp_path / "p.txt", ctxs)
    assert [(p.context.user_id, p.winner, p.loser, p.source) for p in back] == [
        (p.context.user_id, p.winner, p.loser, p.source) for p in pairs
    ]
    (tmp_path / "bad.txt").write_text("1,2,3,intra\n")
    with pytest.raises(FormatError):
        read_pairs(tmp_path / "bad.txt", ctxs)


def test_checkpoint_round_trip(tmp_path):
    pol = AggregatorPolicy(7, 3, K=2, init_scale=0.4, seed=9)
    pol.ref_params = pol.ref_params * 0.5
    pol.save(tmp_path / "a.txt")
    back = AggregatorPolicy.load(tmp_path / "a.txt")
    assert (back.input_dim, back.n_aspects, back.K) == (7, 3, 2)
    assert np.array_equal(back.params, pol.params) and np.array_equal(back.ref_params, pol.ref_params)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(0, 5))
def test_kl_is_nonnegative_and_zero_at_reference(seed, scale):
    rng = np.random.default_rng(seed)
    pol = AggregatorPolicy(3, 4, init_scale=0.5, seed=seed)
    X = rng.standard_normal((5, 3))
    assert np.allclose(pol.kl_to_ref(X), 0.0, atol=1e-12)
    pol.params = pol.params + scale * rng.standard_normal(pol.size)
    assert (pol.kl_to_ref(X) >= -1e-12).all()
