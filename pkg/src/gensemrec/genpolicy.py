"""Autoregressive SID generator with trie-constrained decoding.

Architecture (no attention)::

    a_1 = W x + b
    a_t = a_1 + sum_{s<t} emb[s, y_s]
    logits_t = U_t tanh(a_t) + c_t          masked to the trie's valid tokens

All gradients are written out by hand; ``tests/test_genpolicy.py`` checks them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import Codebook, SemanticId, check_sid
from .errors import InvalidSid

NEG_INF = -np.inf


@dataclass(frozen=True)
class Rollout:
    sid: SemanticId
    log_prob_current: float
    log_prob_old: float
    item_id: int


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, NEG_INF)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class GeneratorPolicy:
    """Parameters live in one flat vector; ``views`` slices it into tensors."""

    def __init__(self, codebook: Codebook, input_dim: int, embed_dim: int = 32, init_scale: float = 0.5, seed: int = 0):
        self.codebook = codebook
        self.T = codebook.levels
        self.C = codebook.codebook_size
        self.input_dim = input_dim
        self.embed_dim = embed_dim
        E, T, C = embed_dim, self.T, self.C
        self._layout = [
            ("W", (E, input_dim)),
            ("b", (E,)),
            ("emb", (max(T - 1, 0), C, E)),
            ("U", (T, C, E)),
            ("c", (T, C)),
        ]
        self.size = sum(int(np.prod(s)) for _, s in self._layout)
        rng = np.random.default_rng(seed)
        params = np.zeros(self.size)
        v = self.views(params)
        v["W"][:] = rng.standard_normal(v["W"].shape) * init_scale / np.sqrt(input_dim)
        v["emb"][:] = rng.standard_normal(v["emb"].shape) * init_scale
        v["U"][:] = rng.standard_normal(v["U"].shape) * init_scale / np.sqrt(E)
        self.params = params
        self.old_params = params.copy()
        self.ref_params = params.copy()
        self._masks = codebook.level_masks()
        self._all_sids = codebook.sid_array(sorted(codebook.forward))
        self._row_of_code = np.full(self.C**self.T, -1, dtype=np.int64)
        self._row_of_code[codebook.prefix_code(self._all_sids)] = np.arange(len(self._all_sids))

    def views(self, params: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = params[i : i + n].reshape(shape)
            i += n
        return out

    def sid_rows(self, sids: np.ndarray) -> np.ndarray:
        """Row index (ascending item id order) of each full SID."""
        rows = self._row_of_code[self.codebook.prefix_code(np.asarray(sids, dtype=np.int64))]
        if (rows < 0).any():
            raise InvalidSid("SID outside the codebook")
        return rows

    def refresh_old(self) -> None:
        self.old_params = self.params.copy()

    def resolve(self, under: str) -> np.ndarray:
        return {"current": self.params, "old": self.old_params, "ref": self.ref_params}[under]

    # -- forward -----------------------------------------------------------

    def _position(self, v, a1, sids, t):
        a = a1.copy()
        for s in range(t):
            a += v["emb"][s][sids[:, s]]
        z = np.tanh(a)
        logits = z @ v["U"][t].T + v["c"][t]
        mask = self._masks[t][self.codebook.prefix_code(sids[:, :t])]
        return z, mask, masked_log_softmax(logits, mask)

    def forward(self, params: np.ndarray, X: np.ndarray, sids: np.ndarray):
        """Per-rollout sequence log-prob plus the cache needed by :meth:`backward`."""
        v = self.views(params)
        a1 = X @ v["W"].T + v["b"]
        logp = np.zeros(len(sids))
        cache = []
        rows = np.arange(len(sids))
        for t in range(self.T):
            z, mask, ls = self._position(v, a1, sids, t)
            logp += ls[rows, sids[:, t]]
            cache.append((z, mask, ls))
        return logp, cache

    def backward(self, params: np.ndarray, X: np.ndarray, sids: np.ndarray, cache, dlogits) -> np.ndarray:
        """Chain rule from per-position logit gradients to the flat parameter gradient."""
        v = self.views(params)
        grad = np.zeros(self.size)
        g = self.views(grad)
        for t in range(self.T):
            z = cache[t][0]
            dl = dlogits[t]
            g["U"][t] += dl.T @ z
            g["c"][t] += dl.sum(axis=0)
            da = (dl @ v["U"][t]) * (1.0 - z * z)
            g["W"] += da.T @ X
            g["b"] += da.sum(axis=0)
            for s in range(t):
                np.add.at(g["emb"][s], sids[:, s], da)
        return grad

    def sequence_log_probs(self, X: np.ndarray, sids: np.ndarray, under: str = "current") -> np.ndarray:
        return self.forward(self.resolve(under), X, np.asarray(sids, dtype=np.int64))[0]

    def next_token_probs(self, X: np.ndarray, prefix, under: str = "current") -> np.ndarray:
        """Masked next-token distribution after ``prefix`` for each context row."""
        params = self.resolve(under)
        v = self.views(params)
        t = len(prefix)
        sids = np.tile(np.asarray(list(prefix) + [0] * (self.T - t), dtype=np.int64), (len(X), 1))
        a1 = X @ v["W"].T + v["b"]
        _, _, ls = self._position(v, a1, sids, t)
        return np.exp(ls)

    # -- sampling ----------------------------------------------------------

    def sample(self, X: np.ndarray, rng: np.random.Generator, under: str = "old") -> tuple[np.ndarray, np.ndarray]:
        """Draw one SID per row of ``X``; returns ``(sids, log_probs)``."""
        v = self.views(self.resolve(under))
        n = len(X)
        a1 = X @ v["W"].T + v["b"]
        sids = np.zeros((n, self.T), dtype=np.int64)
        logp = np.zeros(n)
        rows = np.arange(n)
        for t in range(self.T):
            _, _, ls = self._position(v, a1, sids, t)
            cdf = np.cumsum(np.exp(ls), axis=1)
            u = rng.random(n) * cdf[:, -1]
            tok = (cdf <= u[:, None]).sum(axis=1)
            tok = np.minimum(tok, self.C - 1)
            # rounding can land on a masked slot at the top edge
            bad = ~np.isfinite(ls[rows, tok])
            if bad.any():
                tok[bad] = np.argmax(np.where(np.isfinite(ls[bad]), np.arange(self.C), -1), axis=1)
            sids[:, t] = tok
            logp += ls[rows, tok]
        return sids, logp

    # -- enumeration -------------------------------------------------------

    def all_item_log_probs(self, X: np.ndarray, under: str = "current", chunk: int = 256) -> np.ndarray:
        """Exact log-probability of every valid SID; columns follow ascending item id."""
        v = self.views(self.resolve(under))
        sids = self._all_sids
        n_items = len(sids)
        levels = []
        for t in range(self.T):
            uniq, inv = np.unique(sids[:, :t], axis=0, return_inverse=True) if t else (np.zeros((1, 0), int), np.zeros(n_items, int))
            pre = np.zeros((len(uniq), self.embed_dim))
            for s in range(t):
                pre += v["emb"][s][uniq[:, s]]
            mask = self._masks[t][self.codebook.prefix_code(uniq)]
            levels.append((pre, mask, np.ravel(inv), sids[:, t]))
        out = np.zeros((len(X), n_items))
        for lo in range(0, len(X), chunk):
            a1 = X[lo : lo + chunk] @ v["W"].T + v["b"]
            acc = np.zeros((len(a1), n_items))
            for t, (pre, mask, inv, tok) in enumerate(levels):
                z = np.tanh(a1[:, None, :] + pre[None, :, :])
                ls = masked_log_softmax(z @ v["U"][t].T + v["c"][t], mask[None])
                acc += ls[:, inv, tok]
            out[lo : lo + chunk] = acc
        return out


# -- per-context API -------------------------------------------------------


def sample_group(policy: GeneratorPolicy, x: np.ndarray, G: int, seed, under: str = "old") -> list[Rollout]:
    """``G`` rollouts (with replacement) for one context feature vector ``x``."""
    if G < 2:
        raise ValueError("group size must be at least 2")
    X = np.tile(np.asarray(x, dtype=float), (G, 1))
    sids, logp_old = policy.sample(X, np.random.default_rng(seed), under=under)
    logp_cur = policy.sequence_log_probs(X, sids, "current")
    out = []
    for sid, lo, lc in zip(sids, logp_old, logp_cur):
        sid = tuple(int(t) for t in sid)
        out.append(Rollout(sid, float(lc), float(lo), policy.codebook.backward[sid]))
    return out


def log_prob(policy: GeneratorPolicy, x: np.ndarray, sid, under: str = "current") -> float:
    sid = check_sid(policy.codebook, sid)
    if sid not in policy.codebook.backward:
        raise InvalidSid(f"SID {sid} is not in the codebook")
    return float(policy.sequence_log_probs(np.asarray(x, dtype=float)[None, :], np.array([sid]), under)[0])


# -- clipped surrogate -----------------------------------------------------


def _kl_terms(policy: GeneratorPolicy, X, sids, cache):
    """Per-position KL(current || ref) and its gradient w.r.t. current logits."""
    _, ref_cache = policy.forward(policy.ref_params, X, sids)
    kls, dls = [], []
    for (_, mask, ls), (_, _, ls_ref) in zip(cache, ref_cache):
        p = np.exp(ls)
        diff = np.where(mask, ls - np.where(mask, ls_ref, 0.0), 0.0)
        kl = (p * diff).sum(axis=1)
        kls.append(kl)
        dls.append(p * (diff - kl[:, None]))
    return kls, dls


def surrogate_grad(
    policy: GeneratorPolicy,
    X: np.ndarray,
    sids: np.ndarray,
    log_prob_old: np.ndarray,
    advantages: np.ndarray,
    delta: float = 0.2,
    beta_gen: float = 0.0,
    params: np.ndarray | None = None,
) -> tuple[float, np.ndarray, dict]:
    """Clipped surrogate value and its exact gradient (for ascent).

    objective = mean_i min(rho_i A_i, clip(rho_i, 1-delta, 1+delta) A_i)
                - beta_gen * mean_i sum_t KL_t(current || ref)

    At an exact clip boundary the unclipped branch supplies the gradient.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    params = policy.params if params is None else params
    sids = np.asarray(sids, dtype=np.int64)
    A = np.asarray(advantages, dtype=float)
    n = len(sids)
    logp, cache = policy.forward(params, X, sids)
    rho = np.exp(logp - log_prob_old)
    unclipped = rho * A
    clipped = np.clip(rho, 1 - delta, 1 + delta) * A
    objective = float(np.mean(np.minimum(unclipped, clipped)))
    coef = np.where(unclipped <= clipped, rho * A, 0.0) / n

    rows = np.arange(n)
    dlogits = []
    for t, (_, _, ls) in enumerate(cache):
        d = -np.exp(ls)
        d[rows, sids[:, t]] += 1.0
        dlogits.append(coef[:, None] * d)

    kl_total = 0.0
    if beta_gen > 0:
        kls, dls = _kl_terms(policy, X, sids, cache)
        kl_total = float(np.mean(np.sum(kls, axis=0)))
        objective -= beta_gen * kl_total
        for t in range(len(dlogits)):
            dlogits[t] -= (beta_gen / n) * dls[t]

    grad = policy.backward(params, X, sids, cache, dlogits)
    info = {
        "clip_fraction": float(np.mean(unclipped > clipped)),
        "kl": kl_total,
        "mean_ratio": float(np.mean(rho)),
    }
    return objective, grad, info
