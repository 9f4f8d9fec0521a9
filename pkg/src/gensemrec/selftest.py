"""Built-in invariant checks behind ``gensemrec selftest``.

Each check returns ``(name, ok, detail)``.  The acceptance suite calls the
same functions with its stated sizes.
"""

from __future__ import annotations

import numpy as np

from .a2po import FusionConfig, compute_lambda, fuse_arrays, standardize_groups
from .aggregator import AggregatorPolicy, PairBatch, normalize_levels, pairwise_objective, pairwise_reward
from .catalog import Item, assign_residuals, assign_sids
from .evalkit import RankedList, hr_at_k, ndcg_at_k
from .genpolicy import GeneratorPolicy, surrogate_grad
from .judge import AspectScores, pair_auc, point_acc


def check_fusion_bound(n: int = 1_000_000, seed: int = 0, epsilon: float = 1e-8):
    rng = np.random.default_rng(seed)
    a_biz = rng.uniform(-10, 10, n)
    a_sem = rng.uniform(-10, 10, n)
    lam = compute_lambda(a_biz, a_sem, epsilon)
    violations = int(np.sum(np.abs(lam * a_sem) > np.abs(a_biz)))
    opposite = np.sign(a_biz) != np.sign(a_sem)
    closed = float(np.mean(lam[opposite] == 0.0)) if opposite.any() else 1.0
    _, fused = fuse_arrays(a_biz, a_sem, np.ones(n, dtype=bool), FusionConfig("full", epsilon=epsilon))
    nz = a_biz != 0
    anchor = bool(np.all(np.sign(fused[nz]) == np.sign(a_biz[nz])))
    ok = violations == 0 and closed == 1.0 and anchor and bool(np.all((lam >= 0) & (lam < 1)))
    return "fusion_bound", ok, f"{violations} bound violations, gate closure {closed:.6f}, anchor kept {anchor}"


def check_standardization(n_groups: int = 100_000, seed: int = 0, std_guard: float = 1e-8):
    """Mean 0 within 1e-12, std equal to sigma/(sigma+guard) within 1e-6, degenerate rows exact zeros."""
    rng = np.random.default_rng(seed)
    sizes = rng.integers(2, 65, n_groups)
    worst_mean = worst_std = 0.0
    degenerate_ok = True
    n_degenerate = 0
    for G in np.unique(sizes):
        k = int(np.sum(sizes == G))
        scale = 10.0 ** rng.uniform(-3, 3, (k, 1))
        r = rng.standard_normal((k, G)) * scale + rng.uniform(-100, 100, (k, 1))
        degen = rng.random(k) < 0.05
        r[degen] = r[degen, :1]
        n_degenerate += int(degen.sum())
        out = standardize_groups(r, std_guard)
        degenerate_ok &= bool(np.all(out[degen] == 0.0))
        live = ~degen
        sigma = r[live].std(axis=1)
        worst_mean = max(worst_mean, float(np.max(np.abs(out[live].mean(axis=1)))))
        expect = sigma / (sigma + std_guard)
        worst_std = max(worst_std, float(np.max(np.abs(out[live].std(axis=1) - expect))))
    ok = worst_mean <= 1e-12 and worst_std <= 1e-6 and degenerate_ok
    detail = f"max |mean| {worst_mean:.2e}, max std error {worst_std:.2e}, {n_degenerate} degenerate groups zeroed {degenerate_ok}"
    return "standardization", ok, detail


def small_codebook(n_items: int = 40, T: int = 3, C: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    buckets = rng.permutation(C * C)
    triples = [(i, *divmod(int(buckets[i % (C * C)]), C)) for i in range(n_items)]
    res = assign_residuals(triples)
    items = [Item(i, a, b, r, np.zeros(1)) for (i, a, b), r in zip(triples, res)]
    return assign_sids(items, T, C)


def _rel_error(g: np.ndarray, fd: np.ndarray) -> float:
    denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(g - fd) / denom)


def check_generator_gradient(n_instances: int = 20, n_coords: int = 100, h: float = 1e-5, seed: int = 0):
    """Clipped surrogate (with KL term) against central differences on random coordinates."""
    worst = 0.0
    for inst in range(n_instances):
        rng = np.random.default_rng([seed, inst])
        cb = small_codebook(seed=inst)
        pol = GeneratorPolicy(cb, input_dim=5, embed_dim=6, init_scale=1.0, seed=inst)
        pol.ref_params = pol.params + 0.2 * rng.standard_normal(pol.size)
        pol.old_params = pol.params.copy()
        X = rng.standard_normal((12, 5))
        sids, logp_old = pol.sample(X, rng, under="old")
        pol.params = pol.params + 0.05 * rng.standard_normal(pol.size)
        A = rng.standard_normal(len(X))
        beta = float(rng.choice([0.0, 0.04, 0.5]))
        _, g, _ = surrogate_grad(pol, X, sids, logp_old, A, 0.2, beta)
        coords = rng.choice(pol.size, size=min(n_coords, pol.size), replace=False)
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            e = np.zeros(pol.size)
            e[c] = h
            fp = surrogate_grad(pol, X, sids, logp_old, A, 0.2, beta, params=pol.params + e)[0]
            fm = surrogate_grad(pol, X, sids, logp_old, A, 0.2, beta, params=pol.params - e)[0]
            fd[j] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_error(g[coords], fd))
    return "generator_gradient", worst < 1e-4, f"worst relative error {worst:.2e} over {n_instances} instances"


def check_aggregator_gradient(n_instances: int = 20, n_coords: int = 100, h: float = 1e-5, seed: int = 0):
    """Advantage-weighted log-likelihood minus KL against central differences."""
    worst = 0.0
    for inst in range(n_instances):
        rng = np.random.default_rng([seed, 100 + inst])
        D = int(rng.choice([3, 4]))
        pol = AggregatorPolicy(input_dim=6, n_aspects=D, K=4, init_scale=0.5, seed=inst)
        pol.ref_params = pol.params + 0.3 * rng.standard_normal(pol.size)
        P, G = 10, 8
        batch = PairBatch(rng.standard_normal((P, 6)), rng.choice([0.0, 0.5, 1.0], (P, D)), rng.choice([0.0, 0.5, 1.0], (P, D)))
        levels = pol.sample(batch.X, G, rng)
        w = normalize_levels(levels)
        r = pairwise_reward((w * batch.s_win[:, None]).sum(-1), (w * batch.s_lose[:, None]).sum(-1))
        adv = standardize_groups(r.astype(float)) + 0.1 * rng.standard_normal((P, G))
        beta = float(rng.choice([0.0, 0.04, 1.0]))
        _, g = pairwise_objective(pol, batch, levels, adv, beta)
        coords = rng.choice(pol.size, size=min(n_coords, pol.size), replace=False)
        fd = np.empty(len(coords))
        for j, c in enumerate(coords):
            e = np.zeros(pol.size)
            e[c] = h
            fp = pairwise_objective(pol, batch, levels, adv, beta, params=pol.params + e)[0]
            fm = pairwise_objective(pol, batch, levels, adv, beta, params=pol.params - e)[0]
            fd[j] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_error(g[coords], fd))
    return "aggregator_gradient", worst < 1e-4, f"worst relative error {worst:.2e} over {n_instances} instances"


def check_normalization(codebook=None, n_contexts: int = 8, seed: int = 0):
    """Sequence probabilities over every valid SID sum to 1; each masked next-token distribution sums to 1."""
    if codebook is None:
        from .synthworld import generate_world

        codebook = generate_world(seed=seed, n_users=400).codebook
    rng = np.random.default_rng(seed)
    pol = GeneratorPolicy(codebook, input_dim=7, embed_dim=16, init_scale=1.5, seed=seed)
    X = rng.standard_normal((n_contexts, 7)) * 2
    total = np.exp(pol.all_item_log_probs(X)).sum(axis=1)
    seq_err = float(np.max(np.abs(total - 1.0)))
    step_err = 0.0
    prefixes = {()}
    for t in range(codebook.levels):
        for pre in sorted(prefixes):
            probs = pol.next_token_probs(X, pre)
            step_err = max(step_err, float(np.max(np.abs(probs.sum(axis=1) - 1.0))))
        prefixes = {tuple(s[: t + 1]) for s in codebook.backward}
    ok = seq_err <= 1e-6 and step_err <= 1e-9
    return "normalization", ok, f"{len(codebook)} SIDs, sequence error {seq_err:.2e}, per-step error {step_err:.2e}"


# -- brute-force metric oracles ---------------------------------------------


def _oracle_hr(items, target, K):
    for i in range(K):
        if items[i] == target:
            return 1
    return 0


def _oracle_ndcg(items, target, K):
    for i in range(K):
        if items[i] == target:
            return 1.0 / np.log2(i + 2)
    return 0.0


def _oracle_pair_auc(scores, pairs):
    total = 0.0
    for w, l in pairs:
        if scores[w] > scores[l]:
            total += 1.0
        elif scores[w] == scores[l]:
            total += 0.5
    return total / len(pairs)


def _oracle_point_acc(P, G):
    n, D = P.shape
    total = 0.0
    for d in range(D):
        hits = 0
        for i in range(n):
            if P[i, d] == G[i, d]:
                hits += 1
        total += hits / n
    return total / D


def check_metric_oracles(n: int = 10_000, seed: int = 0):
    rng = np.random.default_rng(seed)
    mismatches = {"hr": 0, "ndcg": 0, "pair_auc": 0, "point_acc": 0}
    alphabets = [np.array(a) for a in ((-1.0, -0.5, 0.0, 0.5, 1.0), (0.0, 0.5, 1.0), (0.0, 0.5, 1.0))]
    sizes = np.array([len(a) for a in alphabets])
    # instance shapes drawn up front; per-instance values come from one uniform block each
    Ls = rng.integers(1, 30, n).tolist()
    targets = rng.integers(0, 60, n).tolist()
    ms = rng.integers(2, 12, n).tolist()
    n_pairs = rng.integers(1, 10, n).tolist()
    ks = rng.integers(1, 8, n).tolist()
    for i in range(n):
        L, target = Ls[i], targets[i]
        items = tuple(rng.permutation(60)[:L].tolist())
        u = rng.random(1 + ms[i] + 2 * n_pairs[i] + 6 * ks[i])
        K = 1 + int(u[0] * L)
        rl = RankedList(items)
        mismatches["hr"] += int(hr_at_k(rl, target, K) != _oracle_hr(items, target, K))
        mismatches["ndcg"] += int(ndcg_at_k(rl, target, K) != _oracle_ndcg(items, target, K))

        m, npr = ms[i], n_pairs[i]
        scores = np.floor(u[1 : 1 + m] * 4)
        v = u[1 + m : 1 + m + 2 * npr]
        win = (v[:npr] * m).astype(int)
        lose = (win + 1 + (v[npr:] * (m - 1)).astype(int)) % m
        pairs = list(zip(win.tolist(), lose.tolist()))
        mismatches["pair_auc"] += int(pair_auc(scores, pairs) != _oracle_pair_auc(scores, pairs))

        k = ks[i]
        idx = (u[1 + m + 2 * npr :].reshape(2, k, 3) * sizes).astype(int)
        P = np.stack([alphabets[d][idx[0, :, d]] for d in range(3)], axis=1)
        G = np.stack([alphabets[d][idx[1, :, d]] for d in range(3)], axis=1)
        pred = [AspectScores(*r) for r in P.tolist()]
        gold = [AspectScores(*r) for r in G.tolist()]
        mismatches["point_acc"] += int(point_acc(pred, gold) != _oracle_point_acc(P, G))
    ok = not any(mismatches.values())
    return "metric_oracles", ok, f"{n} instances each, mismatches {mismatches}"


def run_all(quick: bool = True):
    """Reduced sizes by default so the CLI check finishes in seconds."""
    if quick:
        yield check_fusion_bound(100_000)
        yield check_standardization(10_000)
        yield check_generator_gradient(3, 40)
        yield check_aggregator_gradient(3, 40)
        yield check_normalization()
        yield check_metric_oracles(1_000)
    else:
        yield check_fusion_bound()
        yield check_standardization()
        yield check_generator_gradient()
        yield check_aggregator_gradient()
        yield check_normalization()
        yield check_metric_oracles()
