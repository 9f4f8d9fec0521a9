"""User-conditional aggregation of aspect scores into one holistic score.

A small policy maps context features to independent categoricals over
importance levels ``{0..K}`` per aspect.  Sampled level vectors are normalized
onto the simplex and dotted with the aspect scores.  Training samples a group
of level vectors per preference pair, rewards each with 1 when the preferred
item scores strictly higher, standardizes rewards inside the group, and
ascends the advantage-weighted log-likelihood minus ``beta * KL(pi || ref)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .a2po import standardize_groups
from .arrays import dump_arrays, load_arrays
from .errors import DimensionMismatch, EmptyPairSet, FormatError
from .judge import AspectScores
from .synthworld import UserContext, World, context_features


@dataclass(frozen=True)
class PreferencePair:
    context: UserContext
    winner: int
    loser: int
    source: str = "intra"

    def __post_init__(self):
        if int(self.winner) == int(self.loser):
            raise ValueError("winner and loser must differ")


@dataclass
class PairBatch:
    """Pre-scored pairs: context features and aspect scores for both sides."""

    X: np.ndarray
    s_win: np.ndarray
    s_lose: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.X[idx], self.s_win[idx], self.s_lose[idx])


def normalize_levels(z) -> np.ndarray:
    """Levels to simplex weights; an all-zero level vector maps to uniform."""
    z = np.asarray(z, dtype=float)
    total = z.sum(axis=-1, keepdims=True)
    uniform = np.full_like(z, 1.0 / z.shape[-1])
    return np.where(total > 0, z / np.where(total > 0, total, 1.0), uniform)


def holistic_score(w, s) -> float:
    w = np.asarray(w, dtype=float)
    s = s.as_array() if isinstance(s, AspectScores) else np.asarray(s, dtype=float)
    if w.shape[-1] != s.shape[-1]:
        raise DimensionMismatch(f"{w.shape[-1]} weights vs {s.shape[-1]} aspect scores")
    return (w * s).sum(axis=-1)


def pairwise_reward(s_hol_winner, s_hol_loser):
    return (np.asarray(s_hol_winner) > np.asarray(s_hol_loser)).astype(int)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


class AggregatorPolicy:
    """Linear map from context features to per-aspect level logits."""

    def __init__(self, input_dim: int, n_aspects: int = 4, K: int = 4, init_scale: float = 0.0, seed: int = 0):
        self.input_dim = input_dim
        self.n_aspects = n_aspects
        self.K = K
        self._shape_W = (n_aspects, K + 1, input_dim)
        self._shape_b = (n_aspects, K + 1)
        self.size = int(np.prod(self._shape_W) + np.prod(self._shape_b))
        rng = np.random.default_rng(seed)
        self.params = rng.standard_normal(self.size) * init_scale
        self.ref_params = self.params.copy()
        self._grid = np.array(list(itertools.product(range(K + 1), repeat=n_aspects)), dtype=np.int64)
        self._grid_w = normalize_levels(self._grid)

    def views(self, params):
        nW = int(np.prod(self._shape_W))
        return params[:nW].reshape(self._shape_W), params[nW:].reshape(self._shape_b)

    def log_probs(self, X: np.ndarray, params=None) -> np.ndarray:
        """``(n, n_aspects, K+1)`` log-probabilities."""
        W, b = self.views(self.params if params is None else params)
        return _log_softmax(np.einsum("dki,ni->ndk", W, X) + b)

    def sample(self, X: np.ndarray, G: int, rng: np.random.Generator, params=None) -> np.ndarray:
        """``(n, G, n_aspects)`` integer level vectors."""
        p = np.exp(self.log_probs(X, params))
        cdf = np.cumsum(p, axis=-1)
        u = rng.random((len(X), G, self.n_aspects, 1)) * cdf[:, None, :, -1:]
        return np.minimum((cdf[:, None] <= u).sum(axis=-1), self.K)

    def expected_weights(self, X: np.ndarray, params=None) -> np.ndarray:
        """Exact E[normalize_levels(z)] under the policy, by enumerating the level grid."""
        lp = self.log_probs(X, params)
        out = np.zeros((len(X), self.n_aspects))
        for lo in range(0, len(X), 512):
            chunk = lp[lo : lo + 512]
            joint = np.zeros((len(chunk), len(self._grid)))
            for d in range(self.n_aspects):
                joint += chunk[:, d, self._grid[:, d]]
            out[lo : lo + 512] = np.exp(joint) @ self._grid_w
        return out

    def kl_to_ref(self, X: np.ndarray, params=None) -> np.ndarray:
        """Per-context sum over aspects of KL(pi || ref)."""
        lp = self.log_probs(X, params)
        lq = self.log_probs(X, self.ref_params)
        return (np.exp(lp) * (lp - lq)).sum(axis=(1, 2))

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        dump_arrays(
            path,
            {
                "params": self.params,
                "ref_params": self.ref_params,
                "meta": np.array([self.input_dim, self.n_aspects, self.K], dtype=np.int64),
            },
        )

    @classmethod
    def load(cls, path) -> "AggregatorPolicy":
        arrs = load_arrays(path)
        if "meta" not in arrs:
            raise FormatError(f"{path}: not an aggregator checkpoint")
        input_dim, n_aspects, K = (int(v) for v in arrs["meta"])
        pol = cls(input_dim, n_aspects, K)
        pol.params = arrs["params"]
        pol.ref_params = arrs["ref_params"]
        return pol


def pairwise_objective(policy: AggregatorPolicy, batch: PairBatch, levels, advantages, beta: float, params=None):
    """Value and gradient of mean_g A log pi(z) - beta * KL, averaged over pairs.

    ``levels`` and ``advantages`` are held fixed (they come from the sampling step).
    """
    params = policy.params if params is None else params
    P, G = advantages.shape
    lp = policy.log_probs(batch.X, params)
    p = np.exp(lp)
    lq = policy.log_probs(batch.X, policy.ref_params)
    d_idx = np.arange(policy.n_aspects)
    chosen = lp[np.arange(P)[:, None, None], d_idx[None, None, :], levels]  # (P, G, D)
    seq_lp = chosen.sum(axis=-1)
    kl_d = (p * (lp - lq)).sum(axis=-1)  # (P, D)
    value = float(np.mean(np.mean(advantages * seq_lp, axis=1)) - beta * np.mean(kl_d.sum(axis=1)))

    onehot = np.zeros((P, G, policy.n_aspects, policy.K + 1))
    np.put_along_axis(onehot, levels[..., None], 1.0, axis=-1)
    dlogits = np.einsum("pg,pgdk->pdk", advantages, onehot - p[:, None]) / (G * P)
    dlogits -= (beta / P) * p * (lp - lq - kl_d[..., None])
    dW = np.einsum("pdk,pi->dki", dlogits, batch.X)
    db = dlogits.sum(axis=0)
    return value, np.concatenate([dW.ravel(), db.ravel()])


def prepare_pairs(pairs: Sequence[PreferencePair], scorer, catalog, n_context_tags: int) -> PairBatch:
    if not pairs:
        raise EmptyPairSet("no preference pairs")
    ctxs = [p.context for p in pairs]
    X = context_features(ctxs, catalog, n_context_tags)
    s_win = scorer.score_batch(ctxs, [p.winner for p in pairs])
    s_lose = scorer.score_batch(ctxs, [p.loser for p in pairs])
    return PairBatch(X, s_win, s_lose)


def aggregator_train_step(policy: AggregatorPolicy, batch: PairBatch, G: int, beta: float, optimizer, rng) -> dict:
    """One sampled group update over ``batch``; mutates ``policy.params``."""
    if G < 2:
        raise ValueError("group size must be at least 2")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    levels = policy.sample(batch.X, G, rng)
    w = normalize_levels(levels)
    rewards = pairwise_reward((w * batch.s_win[:, None]).sum(-1), (w * batch.s_lose[:, None]).sum(-1))
    adv = standardize_groups(rewards.astype(float))
    value, grad = pairwise_objective(policy, batch, levels, adv, beta)
    policy.params = optimizer.step(policy.params, grad)
    return {
        "mean_reward": float(rewards.mean()),
        "objective": value,
        "kl": float(np.mean(policy.kl_to_ref(batch.X))),
        "grad_norm": float(np.linalg.norm(grad)),
    }


def pairwise_accuracy(policy: AggregatorPolicy, batch: PairBatch, tie_tol: float = 0.0) -> float:
    """Share of pairs the expected weight vector orders correctly by more than ``tie_tol``."""
    w = policy.expected_weights(batch.X)
    return float(np.mean(holistic_score(w, batch.s_win) - holistic_score(w, batch.s_lose) > tie_tol))


# -- pair construction from a world ------------------------------------------


def build_preference_pairs(
    world: World, scorer, episodes, seed: int, behavioral_fraction: float = 0.5, pairs_per_context: int = 1
) -> list[PreferencePair]:
    """Intra-request and behavioral-contrast pairs labeled by planted weights.

    Intra-request: two candidates under one context (one drawn near the
    user's categories, one uniform), the higher latent-weighted aspect score
    wins.  Behavioral: the target against an exposure the user rated lower.
    Ties are dropped, so a context may yield fewer than ``pairs_per_context``.
    """
    rng = np.random.default_rng(seed)
    cat = world.catalog
    pairs = []
    for ep in episodes:
        ctx = ep.context
        hist_roots = np.unique(cat.roots[cat.rows(list(ctx.history))])
        near = np.flatnonzero(np.isin(cat.roots, np.concatenate([hist_roots, hist_roots ^ 1])))
        for _ in range(pairs_per_context):
            _draw_pair(pairs, rng, cat, scorer, ep, ctx, near, behavioral_fraction)
    return pairs


def _draw_pair(pairs, rng, cat, scorer, ep, ctx, near, behavioral_fraction) -> None:
    n = len(cat)
    if rng.random() < behavioral_fraction:
        cand = rng.choice(n, size=8, replace=False)
        scores = scorer.score_batch([ctx] * 9, [ep.target_item] + [int(cat.ids[r]) for r in cand])
        true = scores @ ctx.latent_weights
        lower = np.flatnonzero(true[1:] < true[0])
        if lower.size:
            loser = int(cat.ids[cand[lower[0]]])
            pairs.append(PreferencePair(ctx, ep.target_item, loser, "behavioral"))
        return
    a = int(cat.ids[rng.choice(near)])
    b = int(cat.ids[rng.integers(n)])
    if a == b:
        return
    true = scorer.score_batch([ctx, ctx], [a, b]) @ ctx.latent_weights
    if true[0] == true[1]:
        return
    win, lose = (a, b) if true[0] > true[1] else (b, a)
    pairs.append(PreferencePair(ctx, win, lose, "intra"))


def write_pairs(path, pairs: Sequence[PreferencePair]) -> None:
    """``user_id,winner_item,loser_item,source`` lines."""
    lines = ["# gensemrec preference-pairs v1"]
    lines += [f"{p.context.user_id},{p.winner},{p.loser},{p.source}" for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path, contexts: dict[int, UserContext]) -> list[PreferencePair]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "# gensemrec preference-pairs v1":
        raise FormatError(f"{path}: missing preference-pairs header")
    out = []
    for line in lines[1:]:
        if line.strip():
            u, w, l, src = line.split(",")
            out.append(PreferencePair(contexts[int(u)], int(w), int(l), src))
    return out
