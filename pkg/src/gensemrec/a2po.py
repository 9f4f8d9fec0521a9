"""Asymmetric advantage fusion of business and semantic rewards.

Both reward streams are standardized inside each rollout group.  The business
advantage anchors the update; the semantic advantage is added with a
per-candidate coefficient

    lam = 1[sign(a_biz) == sign(a_sem)] * min(|a_biz|, |a_sem|) / (max(|a_biz|, |a_sem|) + eps)

so it only ever reinforces the business direction and never contributes more
than ``|a_biz|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, GroupTooSmall, NoJudgedPairs
from .genpolicy import surrogate_grad
from .judge import judged_subset
from .synthworld import business_reward_rows

FUSION_MODES = ("reward_sum", "adv_sum", "gate_only", "magnitude_only", "full")


@dataclass(frozen=True)
class RewardPair:
    r_biz: float
    r_sem: float | None = None


@dataclass(frozen=True)
class AdvantagePair:
    a_biz: float
    a_sem: float | None = None


@dataclass(frozen=True)
class FusedAdvantage:
    lam: float
    a_fused: float


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "full"
    alpha: float = 1.0
    epsilon: float = 1e-8
    std_guard: float = 1e-8

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")
        if self.epsilon <= 0 or self.std_guard <= 0:
            raise ValueError("epsilon and std_guard must be positive")


def standardize_groups(rewards, std_guard: float = 1e-8) -> np.ndarray:
    """Row-wise ``(r - mean) / (population std + std_guard)``; constant rows map to 0."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 2:
        raise ValueError("expected a 2-D array of groups")
    if r.shape[1] < 2:
        raise GroupTooSmall(f"group size {r.shape[1]} < 2")
    mean = r.mean(axis=1, keepdims=True)
    centered = r - mean
    # second pass removes the rounding left in the first mean
    centered -= centered.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    out = centered / (std + std_guard)
    constant = np.all(r == r[:, :1], axis=1)
    out[constant] = 0.0
    return out


def standardize_group(rewards, std_guard: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1:
        raise ValueError("expected a 1-D group")
    return standardize_groups(r[None, :], std_guard)[0]


def sign_gate(a_biz, a_sem) -> np.ndarray:
    return (np.sign(a_biz) == np.sign(a_sem)).astype(float)


def magnitude_ratio(a_biz, a_sem, epsilon: float = 1e-8) -> np.ndarray:
    ab, asem = np.abs(a_biz), np.abs(a_sem)
    return np.minimum(ab, asem) / (np.maximum(ab, asem) + epsilon)


def compute_lambda(a_biz, a_sem, epsilon: float = 1e-8):
    """Dual-consistency coefficient; scalar in, scalar out."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lam = sign_gate(a_biz, a_sem) * magnitude_ratio(a_biz, a_sem, epsilon)
    return float(lam) if np.ndim(lam) == 0 else lam


def fuse_arrays(a_biz, a_sem, judged, config: FusionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fusion; ``judged`` marks entries whose ``a_sem`` is present.

    Returns ``(lam, fused)``.  Unjudged entries get ``lam = 0``.
    """
    a_biz = np.asarray(a_biz, dtype=float)
    a_sem = np.where(judged, np.asarray(a_sem, dtype=float), 0.0)
    mode = config.mode
    if mode == "full":
        lam = sign_gate(a_biz, a_sem) * magnitude_ratio(a_biz, a_sem, config.epsilon)
    elif mode == "gate_only":
        lam = sign_gate(a_biz, a_sem)
    elif mode == "magnitude_only":
        lam = magnitude_ratio(a_biz, a_sem, config.epsilon)
    elif mode == "adv_sum":
        lam = np.ones_like(a_biz)
    else:
        raise ValueError("reward_sum mixes rewards before standardization; fusion does not apply")
    lam = np.where(judged, lam, 0.0)
    term = lam * a_sem
    if mode in ("full", "magnitude_only"):
        # the ratio can round past the bound for subnormal advantages
        term = np.clip(term, -np.abs(a_biz), np.abs(a_biz))
    return lam, a_biz + term


def fuse(a: AdvantagePair, config: FusionConfig) -> FusedAdvantage:
    if a.a_sem is None:
        return FusedAdvantage(0.0, float(a.a_biz))
    lam, fused = fuse_arrays(np.array([a.a_biz]), np.array([a.a_sem]), np.array([True]), config)
    return FusedAdvantage(float(lam[0]), float(fused[0]))


def consistency_rate(pairs) -> float:
    """Share of judged pairs whose advantages agree in sign (``sign(0) = 0``)."""
    present = [(p.a_biz, p.a_sem) for p in pairs if p.a_sem is not None]
    if not present:
        raise NoJudgedPairs("no pair carries a semantic advantage")
    ab, asem = np.array(present, dtype=float).T
    return float(np.mean(np.sign(ab) == np.sign(asem)))


# -- training ----------------------------------------------------------------

# independent RNG streams derived from (seed, counter, stream)
STREAM_SAMPLE = 1
STREAM_SHUFFLE = 2
STREAM_JUDGE = 3

LOG_FIELDS = (
    "step",
    "objective",
    "mean_lambda",
    "gate_close_rate",
    "consistency_rate",
    "conflict_rate",
    "judged_fraction",
    "grad_norm",
)


@dataclass(frozen=True)
class A2POConfig:
    fusion: FusionConfig = FusionConfig()
    group_size: int = 16
    p: float = 1.0
    delta: float = 0.2
    beta_gen: float = 0.04
    batch_size: int = 64
    # clipped updates per sampled batch; the old policy is refreshed once per batch
    inner_epochs: int = 1

    def __post_init__(self):
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be at least 1")
        if self.group_size < 2:
            raise GroupTooSmall(f"group size {self.group_size} < 2")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.delta <= 0 or self.beta_gen < 0:
            raise ValueError("need delta > 0 and beta_gen >= 0")


def semantic_rewards(scorer, contexts, item_ids, weights) -> np.ndarray:
    """Holistic score ``w(x) . s(x, a)`` for aligned contexts, items and weight rows."""
    scores = scorer.score_batch(contexts, item_ids)
    weights = np.asarray(weights, dtype=float)
    if weights.shape[-1] != scores.shape[-1]:
        raise DimensionMismatch(f"{weights.shape[-1]} weights vs {scores.shape[-1]} aspects")
    return np.einsum("nd,nd->n", scores, weights)


def group_advantages(r_biz, r_sem, judged, config: FusionConfig):
    """Advantages for a ``(B, G)`` batch; returns ``(A, lam, a_biz, a_sem)``.

    ``r_sem`` rows are ignored where ``judged`` is False.
    """
    judged = np.asarray(judged, dtype=bool)
    if config.mode == "reward_sum":
        mixed = np.where(judged[:, None], r_biz + config.alpha * r_sem, r_biz)
        A = standardize_groups(mixed, config.std_guard)
        a_biz = standardize_groups(r_biz, config.std_guard)
        a_sem = np.where(judged[:, None], standardize_groups(np.where(judged[:, None], r_sem, 0.0), config.std_guard), 0.0)
        return A, np.zeros_like(A), a_biz, a_sem
    a_biz = standardize_groups(r_biz, config.std_guard)
    a_sem = standardize_groups(np.where(judged[:, None], r_sem, 0.0), config.std_guard)
    mask = np.broadcast_to(judged[:, None], a_biz.shape)
    lam, A = fuse_arrays(a_biz, a_sem, mask, config)
    return A, lam, a_biz, np.where(mask, a_sem, 0.0)


def a2po_train_step(policy, X, contexts, target_rows, judged, scorer, sem_weights, catalog, biz_config, config: A2POConfig, optimizer, seed) -> dict:
    """One grouped update over a batch of episodes; mutates ``policy.params``.

    ``X`` holds context features, ``judged`` the episodes selected for judging
    and ``sem_weights`` the aggregator's weight rows for those contexts.  Only
    judged episodes are sent to ``scorer``.
    """
    B, G = len(X), config.group_size
    judged = np.asarray(judged, dtype=bool)
    Xg = np.repeat(X, G, axis=0)
    policy.refresh_old()
    sids, logp_old = policy.sample(Xg, np.random.default_rng(seed), under="old")
    gen_rows = policy.sid_rows(sids)
    r_biz = business_reward_rows(biz_config, gen_rows, np.repeat(target_rows, G), catalog).reshape(B, G)

    r_sem = np.zeros((B, G))
    jrows = np.flatnonzero(judged)
    if jrows.size:
        sel = np.repeat(jrows, G) * G + np.tile(np.arange(G), jrows.size)
        ctxs = [contexts[i] for i in np.repeat(jrows, G)]
        items = catalog.ids[gen_rows[sel]].tolist()
        w = np.repeat(np.asarray(sem_weights)[jrows], G, axis=0)
        r_sem[jrows] = semantic_rewards(scorer, ctxs, items, w).reshape(jrows.size, G)

    A, lam, a_biz, a_sem = group_advantages(r_biz, r_sem, judged, config.fusion)
    for _ in range(config.inner_epochs):
        objective, grad, info = surrogate_grad(policy, Xg, sids, logp_old, A.ravel(), config.delta, config.beta_gen)
        policy.params = optimizer.step(policy.params, grad)

    diag = {
        "objective": objective,
        "mean_lambda": float("nan"),
        "gate_close_rate": float("nan"),
        "consistency_rate": float("nan"),
        "conflict_rate": float("nan"),
        "judged_fraction": float(judged.mean()) if B else 0.0,
        "grad_norm": float(np.linalg.norm(grad)),
        "mean_r_biz": float(r_biz.mean()),
    }
    if jrows.size:
        ab, asem = a_biz[jrows].ravel(), a_sem[jrows].ravel()
        agree = np.sign(ab) == np.sign(asem)
        diag["consistency_rate"] = float(agree.mean())
        diag["gate_close_rate"] = float(1.0 - agree.mean())
        # strictly opposite signs: the two signals pull the candidate in different directions
        diag["conflict_rate"] = float(np.mean(np.sign(ab) * np.sign(asem) < 0))
        diag["mean_lambda"] = float(lam[jrows].mean())
        diag["mean_r_sem"] = float(r_sem[jrows].mean())
    return diag


def epoch_plan(n_train: int, batch_size: int, p: float, seed: int, epoch: int):
    """Shuffled batches and the pre-committed judged mask for one epoch.

    The mask is drawn from its own stream, so masks for different ``p`` under
    one seed are nested and the sampling stream never depends on ``p``.
    """
    order = np.random.default_rng([seed, epoch, STREAM_SHUFFLE]).permutation(n_train)
    judged = judged_subset(n_train, p, [seed, epoch, STREAM_JUDGE])
    batches = [order[i : i + batch_size] for i in range(0, n_train, batch_size)]
    return batches, judged
