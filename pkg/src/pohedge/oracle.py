"""Brute-force references: exact discrete Bayes filter, observation tree,
discrete-time quadratic hedging recursion, one-step expectations and
orthogonality estimators.

Everything here enumerates the discretized model directly from the
coefficient snapshot and deliberately avoids the continuous-time formulas in
:mod:`pohedge.filtering` and :mod:`pohedge.decomp`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ObservationError, TreeSizeError
from .model import ModelSpec, snapshot

MAX_TREE_NODES = 5_000_000
CLASS_DECIMALS = 12


# ---------------------------------------------------------------------------
# event transition matrices of the discretized model
# ---------------------------------------------------------------------------


def _rates(sn, measure):
    if measure == "P":
        return np.broadcast_to(sn.eta[None, :, None], sn.k1.shape)
    return (1.0 - sn.alpha_f[:, None, :] * sn.z) * sn.eta[None, :, None]


def _log_signal(sn, h, measure):
    """Per-regime mean log-return over the step, plus sigma^2/2 times h."""
    if measure == "P":
        return sn.mu * h
    b = np.sum(sn.k1 * _rates(sn, measure), axis=1)
    return -np.log1p(h * b)


def event_matrices(spec: ModelSpec, t, s_mid, h, measure, classes):
    """E[n, e, j, i] = P(event e, X' = x_i | X = x_j, S_mid) for e = none, classes."""
    sn = snapshot(spec, t, s_mid)
    prob = _rates(sn, measure) * h  # (N, m, d)
    k1 = np.round(sn.k1, CLASS_DECIMALS)
    n, m, d = prob.shape
    E = np.zeros((n, 1 + len(classes), d, d))
    jj = np.arange(d)
    E[:, 0, jj, jj] = 1.0 - prob.sum(axis=1)
    known = np.zeros_like(k1, dtype=bool)
    for k in range(m):
        for j in range(d):
            i = sn.dest[k, j]
            silent = k1[:, k, j] == 0.0
            E[:, 0, j, i] += np.where(silent, prob[:, k, j], 0.0)
            known[:, k, j] |= silent
            for c, kappa in enumerate(classes):
                hit = k1[:, k, j] == kappa
                E[:, 1 + c, j, i] += np.where(hit, prob[:, k, j], 0.0)
                known[:, k, j] |= hit
    if not known.all():
        raise ContractError("relative jump size outside the tree's event classes")
    return E


def jump_classes(spec: ModelSpec, t, s) -> list:
    sn = snapshot(spec, t, s)
    vals = np.unique(np.round(sn.k1, CLASS_DECIMALS))
    return [float(v) for v in vals if v != 0.0]


# ---------------------------------------------------------------------------
# exact Bayes filter of the discretized model
# ---------------------------------------------------------------------------


def bayes_step(prior, lik, E):
    """posterior_i proportional to sum_j prior_j lik_j E[j, i] (rows vectorized)."""
    post = np.einsum("nj,nj,nji->ni", prior, lik, E)
    mass = post.sum(axis=1)
    if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
        raise ObservationError("observation inconsistent with model: zero total likelihood")
    return post / mass[:, None]


def _binomial_up(spec, t, s, h, measure):
    sn = snapshot(spec, t, s)
    u = np.exp(sn.sigma * math.sqrt(h))
    growth = np.exp(_log_signal(sn, h, measure))
    return (growth - 1.0 / u[:, None]) / (u - 1.0 / u)[:, None], u


def exact_hmm_filter(spec: ModelSpec, t, S, z, measure="P", prior=None, likelihood="gaussian"):
    """Exact posterior of the regime for the discretized model.

    ``S`` (N, n+1) and ``z`` (N, n) are observed prices and price jumps.
    ``likelihood='gaussian'`` matches :mod:`pohedge.simulate`; ``'binomial'``
    matches the observation tree.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n_paths, n1 = S.shape
    prior = spec.initial_law if prior is None else np.asarray(prior, dtype=float)
    out = np.empty((n_paths, n1, spec.d))
    out[:, 0] = prior
    for n in range(n1 - 1):
        h = t[n + 1] - t[n]
        s = S[:, n]
        s_mid = S[:, n + 1] - z[:, n]
        r = np.log(s_mid / s)
        if likelihood == "gaussian":
            sn = snapshot(spec, t[n], s)
            var = sn.sigma**2 * h
            mean = _log_signal(sn, h, measure) - 0.5 * var[:, None]
            ll = -((r[:, None] - mean) ** 2) / (2 * var[:, None])
            lik = np.exp(ll - ll.max(axis=1, keepdims=True))
        elif likelihood == "binomial":
            q, _ = _binomial_up(spec, t[n], s, h, measure)
            lik = np.where(r[:, None] > 0, q, 1.0 - q)
        else:
            raise ValueError(f"unknown likelihood {likelihood!r}")
        rel = np.round(z[:, n] / s_mid, CLASS_DECIMALS)
        classes = sorted(set(jump_classes(spec, t[n], s_mid)) | {float(v) for v in rel if v != 0})
        E = event_matrices(spec, t[n], s_mid, h, measure, classes)
        e = np.array([0 if v == 0 else 1 + classes.index(float(v)) for v in rel])
        out[:, n + 1] = bayes_step(out[:, n], lik, E[np.arange(n_paths), e])
    return out


# ---------------------------------------------------------------------------
# observation tree
# ---------------------------------------------------------------------------


@dataclass
class TreeLevel:
    t: float
    S: np.ndarray  # (N,)
    pi: np.ndarray | None = None  # (N, d) filter under P
    pi_star: np.ndarray | None = None  # (N, d) filter under P*
    PP: np.ndarray | None = None  # (N, B, d, d) transitions under P
    PS: np.ndarray | None = None  # (N, B, d, d) transitions under P*
    dS: np.ndarray | None = None  # (N, B)


@dataclass
class ObservationTree:
    """Exhaustive tree of observation histories of the discretized model.

    Each step has ``B = 2 (1 + C)`` branches: a binomial diffusion move
    (``S u`` or ``S / u`` with ``u = exp(sigma sqrt(h))``, common to all
    regimes so the branch itself carries no regime label) followed by either
    no observed jump or one of the ``C`` observable relative jump classes.
    Regime-dependent branch probabilities match the first moment of the
    simulated dynamics under each measure.  Children of node ``a`` at level
    ``n`` sit at indices ``a*B .. a*B + B - 1`` of level ``n + 1``.
    """

    spec: ModelSpec
    h: float
    start_index: int
    classes: list
    levels: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return 2 * (1 + len(self.classes))

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def n_nodes(self) -> int:
        return sum(lv.S.size for lv in self.levels)

    @property
    def root(self) -> TreeLevel:
        return self.levels[0]

    @property
    def leaves(self) -> TreeLevel:
        return self.levels[-1]

    def refilter(self, prior, prior_star=None) -> None:
        """Recompute the node filters for new root priors (structure unchanged)."""
        prior = np.asarray(prior, dtype=float)
        prior_star = prior if prior_star is None else np.asarray(prior_star, dtype=float)
        self.levels[0].pi = prior[None, :].copy()
        self.levels[0].pi_star = prior_star[None, :].copy()
        for lv, nxt in zip(self.levels[:-1], self.levels[1:]):
            nxt.pi = _propagate(lv.pi, lv.PP)
            nxt.pi_star = _propagate(lv.pi_star, lv.PS)

    def branch_probs(self, level: int, measure="P") -> np.ndarray:
        lv = self.levels[level]
        if measure == "P":
            return np.einsum("nj,nbji->nb", lv.pi, lv.PP)
        return np.einsum("nj,nbji->nb", lv.pi_star, lv.PS)

    def to_json(self) -> str:
        doc = {"schema": "pohedge.tree/1", "h": self.h, "start_index": self.start_index,
               "classes": self.classes, "levels": []}
        for lv in self.levels:
            item = {"t": lv.t, "S": lv.S.tolist(), "pi": lv.pi.tolist(), "pi_star": lv.pi_star.tolist()}
            if lv.PP is not None:
                item["PP"] = lv.PP.tolist()
                item["PS"] = lv.PS.tolist()
            doc["levels"].append(item)
        return json.dumps(doc, sort_keys=True)


def _propagate(pi, P):
    un = np.einsum("nj,nbji->nbi", pi, P)
    mass = un.sum(axis=2, keepdims=True)
    # children unreachable under the current filter inherit a uniform-prior update
    fallback = P.sum(axis=2)
    fb_mass = fallback.sum(axis=2, keepdims=True)
    safe = np.where(fb_mass > 0, fallback / np.where(fb_mass > 0, fb_mass, 1.0), 1.0 / pi.shape[1])
    out = np.where(mass > 0, un / np.where(mass > 0, mass, 1.0), safe)
    return out.reshape(-1, pi.shape[1])


def estimate_tree_nodes(branching: int, depth: int) -> int:
    return sum(branching**k for k in range(depth + 1))


def build_tree(spec: ModelSpec, n_steps: int, s_root=None, prior=None, prior_star=None,
               start_index: int = 0, max_nodes: int = MAX_TREE_NODES) -> ObservationTree:
    """Tree over grid steps ``start_index .. n_steps`` of a uniform grid on [0, T]."""
    h = spec.T / n_steps
    s_root = spec.s0 if s_root is None else float(s_root)
    depth = n_steps - start_index
    classes = jump_classes(spec, start_index * h, [s_root])
    est = estimate_tree_nodes(2 * (1 + len(classes)), depth)
    if est > max_nodes:
        raise TreeSizeError(f"observation tree would have {est} nodes (limit {max_nodes})", est)
    tree = ObservationTree(spec, h, start_index, classes)
    S = np.array([s_root])
    d = spec.d
    for n in range(start_index, n_steps):
        t = n * h
        q_up, u = _binomial_up(spec, t, S, h, "P")
        qs_up, _ = _binomial_up(spec, t, S, h, "Pstar")
        for q in (q_up, qs_up):
            if np.any(q < 0) or np.any(q > 1):
                raise ContractError("binomial branch probability outside [0, 1]; refine the grid")
        s_mid = np.stack([S * u, S / u], axis=1)  # (N, 2)
        flat_mid = s_mid.ravel()
        if set(jump_classes(spec, t, flat_mid)) - set(classes):
            raise ContractError("jump classes vary across the tree; unsupported")
        EP = event_matrices(spec, t, flat_mid, h, "P", classes).reshape(S.size, 2, -1, d, d)
        ES = event_matrices(spec, t, flat_mid, h, "Pstar", classes).reshape(S.size, 2, -1, d, d)
        diff_p = np.stack([q_up, 1 - q_up], axis=1)  # (N, 2, d)
        diff_s = np.stack([qs_up, 1 - qs_up], axis=1)
        PP = (diff_p[:, :, None, :, None] * EP).reshape(S.size, -1, d, d)
        PS = (diff_s[:, :, None, :, None] * ES).reshape(S.size, -1, d, d)
        kappa = np.array([0.0] + classes)
        child_S = (s_mid[:, :, None] * (1 + kappa)[None, None, :]).reshape(S.size, -1)
        tree.levels.append(TreeLevel(t, S, PP=PP, PS=PS, dS=child_S - S[:, None]))
        S = child_S.ravel()
    tree.levels.append(TreeLevel(n_steps * h, S))
    prior = spec.initial_law if prior is None else prior
    tree.refilter(prior, prior_star)
    return tree


def payoff_table(spec: ModelSpec, S) -> np.ndarray:
    """H(T, x_i, S) for all regimes, shape (N, d)."""
    return np.stack([np.broadcast_to(spec.payoff(spec.T, i, S), np.shape(S)) for i in range(spec.d)], axis=-1)


def tree_value_function(tree: ObservationTree) -> list:
    """Backward P*-expectation of pi_T(H): per level an (N, d) table of g(node, x_j)."""
    lv = tree.leaves
    g_leaf = np.sum(lv.pi * payoff_table(tree.spec, lv.S), axis=1)
    G = np.repeat(g_leaf[:, None], tree.spec.d, axis=1)
    out = [G]
    for level in reversed(tree.levels[:-1]):
        Gc = G.reshape(level.S.size, tree.B, tree.spec.d)
        G = np.einsum("nbji,nbi->nj", level.PS, Gc)
        out.append(G)
    return out[::-1]


# ---------------------------------------------------------------------------
# discrete-time quadratic hedging (local risk minimization) on the tree
# ---------------------------------------------------------------------------


@dataclass
class DiscreteFSResult:
    theta: list  # per level (N,)
    value: list  # per level (N,)
    degenerate: list  # per level boolean flags where Var(dS) = 0
    leaf_residual: np.ndarray  # payoff - V0 - sum theta dS per leaf (projected payoff)

    @property
    def theta0(self) -> float:
        return float(self.theta[0][0])

    @property
    def U0(self) -> float:
        return float(self.value[0][0])


def discrete_fs(tree: ObservationTree, payoff: str = "projected") -> DiscreteFSResult:
    """Backward recursion minimizing the one-step conditional quadratic risk under P.

    ``payoff='projected'`` hedges pi_T(H) with node weights Q(b | node);
    ``payoff='full'`` hedges H(T, X_T, S_T) with joint weights
    pi_j P(b, X' = x_i | x_j).  The hedge ratio only uses observation history.
    """
    spec = tree.spec
    lv = tree.leaves
    H = payoff_table(spec, lv.S)
    V = np.sum(lv.pi * H, axis=1) if payoff == "projected" else H
    thetas, values, flags = [], [], []
    for level in reversed(tree.levels[:-1]):
        n, B, d = level.S.size, tree.B, spec.d
        if V.ndim == 1:
            wb = np.einsum("nj,nbji->nb", level.pi, level.PP)
            Vc = V.reshape(n, B)
            EV = np.sum(wb * Vc, axis=1)
            EdS = np.sum(wb * level.dS, axis=1)
            cov = np.sum(wb * (Vc - EV[:, None]) * (level.dS - EdS[:, None]), axis=1)
        else:
            w = np.einsum("nj,nbji->nbi", level.pi, level.PP)
            wb = w.sum(axis=2)
            Vc = V.reshape(n, B, d)
            EV = np.einsum("nbi,nbi->n", w, Vc)
            EdS = np.sum(wb * level.dS, axis=1)
            cov = np.einsum("nbi,nbi,nb->n", w, Vc - EV[:, None, None], level.dS - EdS[:, None])
        var = np.sum(wb * (level.dS - EdS[:, None]) ** 2, axis=1)
        flat = var <= 1e-300
        theta = np.where(flat, 0.0, cov / np.where(flat, 1.0, var))
        V = EV - theta * EdS
        thetas.append(theta)
        values.append(V)
        flags.append(flat)
    thetas, values, flags = thetas[::-1], values[::-1], flags[::-1]
    # forward replay of the hedge to the leaves
    gains = np.zeros(1)
    for level, th in zip(tree.levels[:-1], thetas):
        gains = (gains[:, None] + th[:, None] * level.dS).ravel()
    proj = np.sum(lv.pi * H, axis=1)
    return DiscreteFSResult(thetas, values, flags, proj - values[0][0] - gains)


def discrete_fs_weak(tree: ObservationTree, payoff: str = "full") -> DiscreteFSResult:
    """Hedge ratios making the residual weakly orthogonal to the F-martingale part.

    With ``dM_n = dS_n - E[dS_n | node, X_n]`` the ratio at a node solves
    ``E[(xi - sum_{k >= n} theta_k dS_k) dM_n | H_n] = 0``; earlier terms drop
    out because they are H_n-measurable and ``E[dM_n | H_n] = 0``.  The backward
    state is the regime-conditional continuation value
    ``Z_n(node, x) = E[xi - sum_{k >= n} theta_k dS_k | node, X_n = x]``.
    When regimes are observed (d = 1) this is the usual discrete FS recursion.
    """
    spec = tree.spec
    lv = tree.leaves
    H = payoff_table(spec, lv.S)
    Z = H if payoff == "full" else np.repeat(np.sum(lv.pi * H, axis=1)[:, None], spec.d, axis=1)
    thetas, values, flags = [], [], []
    for level in reversed(tree.levels[:-1]):
        n, B, d = level.S.size, tree.B, spec.d
        Zc = Z.reshape(n, B, d)
        pb = level.PP.sum(axis=3)  # (n, B, d_from)
        m = np.einsum("nbj,nb->nj", pb, level.dS)
        dev = level.dS[:, :, None] - m[:, None, :]  # dM per branch and starting regime
        cont = np.einsum("nbji,nbi->nbj", level.PP, Zc)
        A = np.einsum("nj,nbj,nbj->n", level.pi, cont, dev)
        C = np.einsum("nj,nbj,nb,nbj->n", level.pi, pb, level.dS, dev)
        flat = np.abs(C) <= 1e-300
        theta = np.where(flat, 0.0, A / np.where(flat, 1.0, C))
        Z = np.einsum("nbj->nj", cont) - theta[:, None] * m
        thetas.append(theta)
        values.append(np.sum(level.pi * Z, axis=1))
        flags.append(flat)
    thetas, values, flags = thetas[::-1], values[::-1], flags[::-1]
    gains = np.zeros(1)
    for level, th in zip(tree.levels[:-1], thetas):
        gains = (gains[:, None] + th[:, None] * level.dS).ravel()
    proj = np.sum(lv.pi * H, axis=1)
    return DiscreteFSResult(thetas, values, flags, proj - values[0][0] - gains)


# ---------------------------------------------------------------------------
# one-step expectations (Dynkin oracle)
# ---------------------------------------------------------------------------


def one_step_expectation(spec: ModelSpec, which: str, f, point, h: float, n_quad: int = 40) -> float:
    """E[f(state after one discretized step of length h)] by quadrature and event enumeration."""
    from .filtering import ks_step

    measure = "P" if which == "P_pair" else "Pstar"
    if which == "Pstar_full":
        t, x, s, p = point
        p = np.asarray(p, dtype=float)
    else:
        t, x, s = point
    i = int(spec.regimes.index_of(x))
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_quad)
    weights = weights / weights.sum()
    sn = snapshot(spec, t, [s])
    sig = float(sn.sigma[0])
    log_mean = float(_log_signal(sn, h, measure)[0, i]) - 0.5 * sig**2 * h
    s_mid = s * np.exp(log_mean + sig * math.sqrt(h) * nodes)  # (Q,)
    post = snapshot(spec, t, s_mid)
    prob = _rates(post, measure)[:, :, i] * h  # (Q, m)
    k1 = post.k1[:, :, i]
    total = np.zeros_like(s_mid)
    if which == "Pstar_full":
        # filter moves driven by the observed step; the P filter is the state variable
        p_rep = np.repeat(p[None, :], s_mid.size, axis=0)
        s_rep = np.full(s_mid.size, float(s))
        p_none, _ = ks_step(spec, t, h, s_rep, s_mid, np.zeros_like(s_mid), p_rep, "P")
    none_prob = 1.0 - prob.sum(axis=1)
    for q in range(s_mid.size):
        if which == "Pstar_full":
            val = none_prob[q] * f(t + h, i, s_mid[q], p_none[q])
        else:
            val = none_prob[q] * f(t + h, i, s_mid[q])
        for k in range(spec.m):
            dest = int(post.dest[k, i])
            s_new = s_mid[q] * (1 + k1[q, k])
            if which == "Pstar_full":
                zz = s_mid[q] * k1[q, k]
                p_new, _ = ks_step(spec, t, h, np.array([float(s)]), s_mid[q : q + 1], np.array([zz]),
                                   p[None, :], "P")
                val += prob[q, k] * f(t + h, dest, s_new, p_new[0])
            else:
                val += prob[q, k] * f(t + h, dest, s_new)
        total[q] = val
    return float(weights @ total)


# ---------------------------------------------------------------------------
# weak orthogonality
# ---------------------------------------------------------------------------


def orthogonality_estimate(A_T, integrals, n_se: float = 3.0) -> list:
    """Per test process: mean of ``A_T * sum(phi dM)`` with its standard error."""
    A_T = np.asarray(A_T, dtype=float)
    integrals = np.atleast_2d(np.asarray(integrals, dtype=float))
    if integrals.shape[0] != A_T.size:
        integrals = integrals.T
    out = []
    for k in range(integrals.shape[1]):
        prod = A_T * integrals[:, k]
        est = float(prod.mean()) if prod.size else 0.0
        se = float(prod.std(ddof=1) / math.sqrt(prod.size)) if prod.size > 1 else 0.0
        out.append({"estimate": est, "se": se, "passed": abs(est) <= n_se * se or est == 0.0})
    return out
