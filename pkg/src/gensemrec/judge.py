"""Aspect-level semantic judging.

The judge maps (user context, item) to four discrete aspect scores:

    profile  in {-1, -0.5, 0, 0.5, 1}
    future   in {0, 0.5, 1}
    novelty  in {0, 0.5, 1}
    context  in {-1, 0}, or absent when the world has no context tags

``OracleScorer`` stands in for a fine-tuned LLM judge; anything with the same
``score``/``score_batch`` surface can replace it.  This module also holds the
point-wise reward used to train a scorer and the judge-quality metrics.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .catalog import Catalog
from .errors import DimensionMismatch, EmptyPairSet, FormatError, LengthMismatch
from .synthworld import UserContext, recency_mean

PROFILE_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)
FUTURE_LEVELS = (0.0, 0.5, 1.0)
NOVELTY_LEVELS = (0.0, 0.5, 1.0)
CONTEXT_LEVELS = (-1.0, 0.0)
SCORES_HEADER = "# gensemrec judged-scores v1"


@dataclass(frozen=True)
class AspectScores:
    profile: float
    future: float
    novelty: float
    context: float | None = None

    def __post_init__(self):
        for name, alphabet in (
            ("profile", PROFILE_LEVELS),
            ("future", FUTURE_LEVELS),
            ("novelty", NOVELTY_LEVELS),
        ):
            if getattr(self, name) not in alphabet:
                raise ValueError(f"{name}={getattr(self, name)} is outside {alphabet}")
        if self.context is not None and self.context not in CONTEXT_LEVELS:
            raise ValueError(f"context={self.context} is outside {CONTEXT_LEVELS}")

    @property
    def has_context(self) -> bool:
        return self.context is not None

    def as_array(self) -> np.ndarray:
        vals = [self.profile, self.future, self.novelty]
        if self.context is not None:
            vals.append(self.context)
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AspectScores":
        arr = [float(x) for x in arr]
        return cls(*arr[:3], arr[3] if len(arr) == 4 else None)


class AspectScorer(Protocol):
    n_aspects: int

    def score(self, ctx: UserContext, item_id: int) -> AspectScores: ...

    def score_batch(self, contexts: Sequence[UserContext], item_ids: Sequence[int]) -> np.ndarray: ...


def quantize_profile(cos):
    """Five even bins over [-1, 1]."""
    b = np.clip(np.floor((np.asarray(cos) + 1.0) / 0.4), 0, 4)
    return -1.0 + 0.5 * b


def quantize_future(cos):
    """Three even bins over [0, 1]; negative similarity floors to 0."""
    b = np.clip(np.floor(np.clip(np.asarray(cos), 0.0, 1.0) * 3.0), 0, 2)
    return 0.5 * b


class OracleScorer:
    """Rule-based aspect scorer with access to the world's item features."""

    def __init__(
        self,
        catalog: Catalog,
        tag_allowed: np.ndarray | None = None,
        history_window: int = 5,
        recency_decay: float = 0.8,
    ):
        self.catalog = catalog
        self.tag_allowed = None if tag_allowed is None else np.asarray(tag_allowed, dtype=bool)
        self.history_window = history_window
        self.recency_decay = recency_decay
        self.n_aspects = 3 if tag_allowed is None else 4
        self._norms = np.linalg.norm(catalog.features, axis=1)
        self._n_sub = int(catalog.subs.max()) + 1
        self._state: dict = {}
        self._lock = threading.Lock()

    def _context_state(self, ctx: UserContext):
        key = (ctx.user_id, ctx.history, ctx.context_tag)
        st = self._state.get(key)
        if st is None:
            if (ctx.context_tag is None) != (self.tag_allowed is None):
                raise DimensionMismatch("context tag presence differs from the scorer's world")
            rows = self.catalog.rows(list(ctx.history))
            feats = self.catalog.features[rows]
            fut = recency_mean(feats, self.recency_decay, self.history_window)
            prof = np.asarray(ctx.profile_vector, dtype=float)
            seen_root = np.zeros(self.catalog.n_roots, dtype=bool)
            seen_root[self.catalog.roots[rows]] = True
            seen_sub = np.zeros(self.catalog.n_roots * self._n_sub, dtype=bool)
            seen_sub[self.catalog.roots[rows] * self._n_sub + self.catalog.subs[rows]] = True
            st = (
                prof / (np.linalg.norm(prof) + 1e-12),
                fut / (np.linalg.norm(fut) + 1e-12),
                seen_root,
                seen_sub,
                ctx.context_tag,
            )
            with self._lock:
                self._state[key] = st
        return st

    def score(self, ctx: UserContext, item_id: int) -> AspectScores:
        return AspectScores.from_array(self.score_batch([ctx], [item_id])[0])

    def score_batch(self, contexts: Sequence[UserContext], item_ids: Sequence[int]) -> np.ndarray:
        """Scores for aligned ``(contexts[i], item_ids[i])``; shape ``(n, n_aspects)``."""
        if len(contexts) != len(item_ids):
            raise LengthMismatch("contexts and item_ids must align")
        rows = self.catalog.rows(list(item_ids))
        states = [self._context_state(c) for c in contexts]
        prof = np.stack([s[0] for s in states])
        fut = np.stack([s[1] for s in states])
        feats = self.catalog.features[rows]
        norms = self._norms[rows] + 1e-12
        p = quantize_profile(np.einsum("ij,ij->i", feats, prof) / norms)
        f = quantize_future(np.einsum("ij,ij->i", feats, fut) / norms)
        roots = self.catalog.roots[rows]
        root_seen = np.array([s[2][r] for s, r in zip(states, roots)])
        sub_codes = roots * self._n_sub + self.catalog.subs[rows]
        sub_seen = np.array([s[3][c] for s, c in zip(states, sub_codes)])
        nov = np.where(f >= 0.5, np.where(~root_seen, 1.0, np.where(~sub_seen, 0.5, 0.0)), 0.0)
        cols = [p, f, nov]
        if self.tag_allowed is not None:
            allowed = np.array([self.tag_allowed[s[4], r] for s, r in zip(states, roots)])
            cols.append(np.where(allowed, 0.0, -1.0))
        return np.stack(cols, axis=1)


def _hash_uniform(*keys) -> np.ndarray:
    """splitmix64 over broadcast integer keys, mapped to [0, 1)."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x9E3779B97F4A7C15)
        for k in np.broadcast_arrays(*[np.asarray(k, dtype=np.uint64) for k in keys]):
            h = h ^ k
            h = h + np.uint64(0x9E3779B97F4A7C15)
            h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class NoisyScorer:
    """Wraps a scorer and replaces each aspect score, with probability ``flip``,
    by a uniform draw from that aspect's alphabet.

    The corruption is a fixed function of ``(seed, user_id, item_id, aspect)``,
    so repeated queries agree and caching stays valid.
    """

    def __init__(self, scorer: AspectScorer, flip: float, seed: int = 0):
        if not 0.0 <= flip <= 1.0:
            raise ValueError(f"flip must lie in [0, 1], got {flip}")
        self.scorer = scorer
        self.flip = flip
        self.seed = seed
        self.n_aspects = scorer.n_aspects
        self._alphabets = [PROFILE_LEVELS, FUTURE_LEVELS, NOVELTY_LEVELS, CONTEXT_LEVELS][: self.n_aspects]

    def score(self, ctx: UserContext, item_id: int) -> AspectScores:
        return AspectScores.from_array(self.score_batch([ctx], [item_id])[0])

    def score_batch(self, contexts, item_ids) -> np.ndarray:
        out = self.scorer.score_batch(contexts, item_ids)
        if self.flip == 0.0 or len(out) == 0:
            return out
        users = np.array([c.user_id for c in contexts])[:, None]
        items = np.asarray(item_ids)[:, None]
        dims = np.arange(self.n_aspects)[None, :]
        hit = _hash_uniform(self.seed, users, items, dims, 0) < self.flip
        pick = _hash_uniform(self.seed, users, items, dims, 1)
        for d, alphabet in enumerate(self._alphabets):
            draw = np.asarray(alphabet)[np.minimum((pick[:, d] * len(alphabet)).astype(int), len(alphabet) - 1)]
            out[:, d] = np.where(hit[:, d], draw, out[:, d])
        return out


class JudgeCache:
    """Memoizes a scorer by ``(user_id, item_id)``; reads are lock-free."""

    def __init__(self, scorer: AspectScorer):
        self.scorer = scorer
        self.n_aspects = scorer.n_aspects
        self.table: dict[tuple[int, int], np.ndarray] = {}
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def score(self, ctx: UserContext, item_id: int) -> AspectScores:
        return AspectScores.from_array(self.score_batch([ctx], [item_id])[0])

    def score_batch(self, contexts, item_ids) -> np.ndarray:
        out = np.empty((len(item_ids), self.n_aspects))
        missing = []
        for i, (c, iid) in enumerate(zip(contexts, item_ids)):
            row = self.table.get((c.user_id, int(iid)))
            if row is None:
                missing.append(i)
            else:
                out[i] = row
        if missing:
            fresh = self.scorer.score_batch([contexts[i] for i in missing], [item_ids[i] for i in missing])
            out[missing] = fresh
            with self._lock:
                for i, row in zip(missing, fresh):
                    self.table[(contexts[i].user_id, int(item_ids[i]))] = row
        with self._lock:
            self.hits += len(item_ids) - len(missing)
            self.misses += len(missing)
        return out

    def dump(self, path) -> None:
        write_scores(path, ((u, i, AspectScores.from_array(v)) for (u, i), v in sorted(self.table.items())))

    def load(self, path) -> None:
        for u, i, s in read_scores(path):
            self.table[(u, i)] = s.as_array()


def write_scores(path, records) -> None:
    """``user_id,item_id,profile,future,novelty,context`` lines (context ``-`` when absent)."""
    lines = [SCORES_HEADER]
    for u, i, s in records:
        ctx = "-" if s.context is None else repr(s.context)
        lines.append(f"{u},{i},{s.profile!r},{s.future!r},{s.novelty!r},{ctx}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path) -> list[tuple[int, int, AspectScores]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCORES_HEADER:
        raise FormatError(f"{path}: missing judged-scores header")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        u, i, p, f, n, c = line.split(",")
        out.append((int(u), int(i), AspectScores(float(p), float(f), float(n), None if c == "-" else float(c))))
    return out


# -- scorer-training reward and judge-quality metrics ---------------------


def _as_matrix(scores: Sequence[AspectScores]) -> np.ndarray:
    return np.stack([s.as_array() for s in scores]) if len(scores) else np.zeros((0, 0))


def _check_aligned(predicted, gold) -> tuple[np.ndarray, np.ndarray]:
    if len(predicted) != len(gold):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(gold)} labels")
    if len(gold) == 0:
        raise LengthMismatch("need at least one sample")
    if any(p.has_context != g.has_context for p, g in zip(predicted, gold)):
        raise DimensionMismatch("context presence differs between prediction and label")
    return _as_matrix(predicted), _as_matrix(gold)


def order_consistency(pred: np.ndarray, gold: np.ndarray) -> float:
    """Concordant fraction over pairs the gold scores order strictly.

    Returns 1.0 when no pair has distinct gold scores.
    """
    eligible = concordant = 0
    for i, j in combinations(range(len(gold)), 2):
        g = np.sign(gold[i] - gold[j])
        if g == 0:
            continue
        eligible += 1
        concordant += np.sign(pred[i] - pred[j]) == g
    return 1.0 if eligible == 0 else concordant / eligible


def aspect_reward(predicted: Sequence[AspectScores], gold: Sequence[AspectScores]) -> float:
    """Sum over aspects of exact-match accuracy plus order consistency (unit weights)."""
    P, G = _check_aligned(predicted, gold)
    total = 0.0
    for d in range(G.shape[1]):
        total += float(np.mean(P[:, d] == G[:, d])) + order_consistency(P[:, d], G[:, d])
    return total


def pair_auc(predicted_scores, gold_order) -> float:
    """Fraction of gold pairs ``(winner, loser)`` the predictions order the same way.

    Predicted ties count one half.
    """
    pairs = np.asarray(list(gold_order), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyPairSet("pair_auc needs at least one pair")
    s = np.asarray(predicted_scores, dtype=float)
    w, l = s[pairs[:, 0]], s[pairs[:, 1]]
    return float(np.mean(np.where(w > l, 1.0, np.where(w == l, 0.5, 0.0))))


def gold_pairs(gold: np.ndarray) -> list[tuple[int, int]]:
    """All ``(i, j)`` with ``gold[i] > gold[j]``."""
    g = np.asarray(gold)
    i, j = np.nonzero(g[:, None] > g[None, :])
    return list(zip(i.tolist(), j.tolist()))


def pair_auc_macro(predicted: Sequence[AspectScores], gold: Sequence[AspectScores]) -> float:
    """Per-aspect :func:`pair_auc` over gold-ordered pairs, averaged across aspects."""
    P, G = _check_aligned(predicted, gold)
    per_dim = [pair_auc(P[:, d], gold_pairs(G[:, d])) for d in range(G.shape[1]) if len(np.unique(G[:, d])) > 1]
    if not per_dim:
        raise EmptyPairSet("no aspect has two distinct gold scores")
    return float(np.mean(per_dim))


def point_acc(predicted: Sequence[AspectScores], gold: Sequence[AspectScores]) -> float:
    P, G = _check_aligned(predicted, gold)
    return float(np.mean(np.mean(P == G, axis=0)))


def judged_subset(episodes, p: float, seed: int) -> np.ndarray:
    """Bernoulli(p) episode mask; masks for different ``p`` under one seed are nested."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    n = episodes if isinstance(episodes, (int, np.integer)) else len(episodes)
    return np.random.default_rng(seed).random(n) < p
