import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gensemrec.errors import FormatError, InfeasibleQuota, MissingWorld
from gensemrec.synthworld import (
    BusinessRewardConfig,
    World,
    business_reward,
    business_reward_rows,
    context_feature_dim,
    context_features,
    generate_world,
    novelty_of,
    read_episodes,
)

from conftest import make_catalog


def _dir_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_same_seed_gives_byte_identical_worlds(tmp_path):
    a = generate_world(seed=11, n_users=300)
    b = generate_world(seed=11, n_users=300)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")
    c = generate_world(seed=12, n_users=300)
    assert c.fingerprint() != a.fingerprint()


def test_single_root_is_infeasible():
    with pytest.raises(InfeasibleQuota):
        generate_world(seed=0, n_users=100, n_roots=1)


def test_bad_quota_is_infeasible():
    with pytest.raises(InfeasibleQuota):
        generate_world(seed=0, n_users=100, level_quota=(0.05, 0.35, 0.3, 0.3))


def test_default_quotas_give_each_level_1000_of_10k():
    w = generate_world(seed=0, n_users=10_000)
    counts = np.bincount([ep.novelty_level for ep in w.episodes], minlength=4)
    assert counts.sum() == 10_000
    assert counts.min() >= 1000


def test_recorded_levels_agree_with_novelty_of(small_world):
    cat = small_world.catalog
    for ep in small_world.episodes:
        assert novelty_of(ep.context.history, ep.target_item, cat) == ep.novelty_level


def test_dead_items_are_never_targets():
    w = generate_world(seed=5, n_users=500, dead_item_fraction=0.3)
    dead = set(w.catalog.ids[~np.isfinite(w.popularity)].tolist())
    assert 0.2 < len(dead) / len(w.catalog) < 0.4
    assert not dead & {ep.target_item for ep in w.episodes}


@pytest.fixture
def hand_catalog():
    # roots 0 and 1; root 0 has subs 0 and 1
    return make_catalog([(1, 0, 0, 0), (2, 0, 0, 1), (3, 0, 1, 0), (4, 1, 0, 0)])


def test_novelty_levels(hand_catalog):
    cat = hand_catalog
    assert novelty_of([1], 1, cat) == 0
    assert novelty_of([1], 2, cat) == 1
    assert novelty_of([1], 3, cat) == 2
    assert novelty_of([1], 4, cat) == 3
    assert novelty_of([1, 4], 2, cat) == 1


def _brute_level(history, target, cat):
    h = [cat.get(i) for i in history]
    t = cat.get(target)
    if target in history:
        return 0
    if any(x.triple[:2] == t.triple[:2] for x in h):
        return 1
    if any(x.root_category == t.root_category for x in h):
        return 2
    return 3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 63), min_size=1, max_size=8), st.integers(0, 63))
def test_novelty_matches_brute_force(hist, target):
    cat = _grid_catalog()
    assert novelty_of(hist, target, cat) == _brute_level(hist, target, cat)


_GRID = None


def _grid_catalog():
    global _GRID
    if _GRID is None:
        _GRID = make_catalog([(i, i // 16, (i // 4) % 4, i % 4) for i in range(64)])
    return _GRID


def test_business_reward_table(hand_catalog):
    cat = hand_catalog
    exact = BusinessRewardConfig("exact")
    graded = BusinessRewardConfig("graded", 0.3, 0.1)
    assert business_reward(exact, 2, 2, cat) == 1.0
    assert business_reward(graded, 2, 2, cat) == 1.0
    assert business_reward(exact, 1, 2, cat) == 0.0
    assert business_reward(graded, 3, 1, cat) == 0.1
    assert business_reward(graded, 2, 1, cat) == 0.3
    assert business_reward(graded, 4, 1, cat) == 0.0


def test_business_reward_rows_matches_scalar():
    cat = _grid_catalog()
    rng = np.random.default_rng(0)
    g, t = rng.integers(0, 64, 500), rng.integers(0, 64, 500)
    for mode in ("exact", "graded"):
        cfg = BusinessRewardConfig(mode)
        vec = business_reward_rows(cfg, cat.rows(g.tolist()), cat.rows(t.tolist()), cat)
        ref = [business_reward(cfg, int(a), int(b), cat) for a, b in zip(g, t)]
        assert np.array_equal(vec, ref)


def test_bad_business_config():
    with pytest.raises(ValueError):
        BusinessRewardConfig("fuzzy")
    with pytest.raises(ValueError):
        BusinessRewardConfig("graded", 0.1, 0.3)


def test_world_round_trip(tmp_path, tagged_world):
    tagged_world.save(tmp_path)
    back = World.load(tmp_path)
    assert back.fingerprint() == tagged_world.fingerprint()
    assert np.array_equal(back.tag_allowed, tagged_world.tag_allowed)
    assert np.array_equal(back.popularity, tagged_world.popularity)
    for a, b in zip(back.episodes, tagged_world.episodes):
        assert a.context.history == b.context.history
        assert a.context.context_tag == b.context.context_tag
        assert np.array_equal(a.context.profile_vector, b.context.profile_vector)
        assert np.array_equal(a.context.latent_weights, b.context.latent_weights)


def test_missing_world(tmp_path):
    with pytest.raises(MissingWorld):
        World.load(tmp_path / "nothing")


def test_episode_file_needs_header(tmp_path):
    (tmp_path / "e.txt").write_text("0\t1 2\t3\t1\t-\n")
    with pytest.raises(FormatError):
        read_episodes(tmp_path / "e.txt", {})


def test_latent_weights_are_hidden_from_features(tagged_world):
    eps = tagged_world.episodes[:50]
    X = context_features([e.context for e in eps], tagged_world.catalog, 3)
    assert X.shape == (50, context_feature_dim(tagged_world.catalog.feature_dim, 3))
    # tag one-hot sits in the last block
    assert np.array_equal(X[:, -3:].argmax(1), [e.context.context_tag for e in eps])


def test_latent_weights_on_simplex(tagged_world):
    W = np.stack([e.context.latent_weights for e in tagged_world.episodes])
    assert W.shape[1] == 4
    assert np.allclose(W.sum(1), 1.0) and (W >= 0).all()


def test_onehot_latent_weights():
    w = generate_world(seed=1, n_users=200, latent_weight_mode="onehot")
    W = np.stack([e.context.latent_weights for e in w.episodes])
    assert set(np.unique(W)) == {0.0, 1.0}
    assert np.all(W.sum(1) == 1.0)
