"""Value function g(t, x, s, p) = E*[pi_T(H) | X_t = x, S_t = s, pi_t = p] and V^H.

Two representations share the :class:`GApprox` interface:

* :class:`LatticeG` -- exact backward expectation on the observation tree of
  the discretized model, re-rooted at the query point; partial derivatives by
  central finite differences.
* :class:`RegressionG` -- least-squares Monte Carlo on a P*-ensemble, per time
  slice and per regime, polynomial basis in ``(s/s0, p_1..p_{d-1})`` with
  analytic partials.

``p`` is always accepted unnormalized: g is extended to the positive orthant
as a function of ``p / sum(p)`` (lattice) or of ``p_1..p_{d-1}`` (regression);
either extension has the same derivative along the simplex, which is all the
hedge formula uses.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr

from .errors import GridMismatchError
from .model import ModelSpec, spec_from_dict
from .oracle import build_tree, payoff_table, tree_value_function

FD_REL_STEP_S = 1e-4
FD_ABS_STEP_P = 1e-4


def terminal_value(spec: ModelSpec, s, p) -> np.ndarray:
    """Final condition sum_i p_i H(T, x_i, s) for rows of (s, p)."""
    p = np.atleast_2d(p)
    return np.sum(p * payoff_table(spec, np.atleast_1d(s)), axis=1) / p.sum(axis=1)


class GApprox:
    kind = "abstract"

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    # all methods take s (N,), p (N, d) and return per-regime values
    def values(self, t, s, p) -> np.ndarray:
        raise NotImplementedError

    def grad_s(self, t, s, p) -> np.ndarray:
        raise NotImplementedError

    def grad_p(self, t, s, p) -> np.ndarray:
        """(N, d, d) array with [n, i, j] = dg(t, x_i, s, p)/dp_j."""
        raise NotImplementedError

    def __call__(self, t, x, s, p) -> float:
        i = int(self.spec.regimes.index_of(x))
        return float(self.values(t, np.array([float(s)]), np.asarray(p, dtype=float)[None])[0, i])


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------


class LatticeG(GApprox):
    kind = "lattice"

    def __init__(self, spec: ModelSpec, n_steps: int, cache_size: int = 16):
        super().__init__(spec)
        self.n_steps = int(n_steps)
        self.h = spec.T / self.n_steps
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    def index_of(self, t) -> int:
        k = int(round(t / self.h))
        if abs(k * self.h - t) > 1e-9 * max(1.0, self.spec.T) or not 0 <= k <= self.n_steps:
            raise GridMismatchError(f"t={t} is not on the lattice grid (h={self.h})")
        return k

    def tree(self, k: int, s: float, p=None):
        key = (k, float(s))
        tr = self._cache.get(key)
        if tr is None:
            tr = build_tree(self.spec, self.n_steps, s_root=s, start_index=k,
                            prior=self.spec.initial_law if p is None else p)
            self._cache[key] = tr
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        if p is not None:
            tr.refilter(np.asarray(p, dtype=float) / np.sum(p))
        return tr

    def point(self, k: int, s: float, p) -> np.ndarray:
        """g(t_k, x_i, s, p) for all regimes."""
        p = np.asarray(p, dtype=float)
        if k == self.n_steps:
            return np.repeat(terminal_value(self.spec, [s], p[None]), self.spec.d)
        return tree_value_function(self.tree(k, s, p))[0][0].copy()

    def values(self, t, s, p):
        k = self.index_of(t)
        s = np.atleast_1d(s)
        p = np.atleast_2d(p)
        return np.stack([self.point(k, si, pi) for si, pi in zip(s, p)])

    def grad_s(self, t, s, p):
        k = self.index_of(t)
        out = []
        for si, pi in zip(np.atleast_1d(s), np.atleast_2d(p)):
            eps = FD_REL_STEP_S * si
            out.append((self.point(k, si + eps, pi) - self.point(k, si - eps, pi)) / (2 * eps))
        return np.stack(out)

    def grad_p(self, t, s, p):
        k = self.index_of(t)
        d = self.spec.d
        out = []
        for si, pi in zip(np.atleast_1d(s), np.atleast_2d(p)):
            pi = np.asarray(pi, dtype=float) / np.sum(pi)
            jac = np.empty((d, d))
            for j in range(d):
                e = np.zeros(d)
                e[j] = FD_ABS_STEP_P
                if pi[j] >= FD_ABS_STEP_P:
                    jac[:, j] = (self.point(k, si, pi + e) - self.point(k, si, pi - e)) / (2 * FD_ABS_STEP_P)
                else:
                    jac[:, j] = (self.point(k, si, pi + e) - self.point(k, si, pi)) / FD_ABS_STEP_P
            out.append(jac)
        return np.stack(out)

    def to_dict(self):
        return {"schema": "pohedge.gapprox/1", "representation": "lattice", "n_steps": self.n_steps,
                "spec": self.spec.to_dict()}


def solve_g_lattice(spec: ModelSpec, n_steps: int) -> LatticeG:
    if n_steps > 8:
        warnings.warn("lattice depth above 8 may exceed the tree-size limit", stacklevel=2)
    g = LatticeG(spec, n_steps)
    g.tree(0, spec.s0)  # fail early on size or probability issues
    return g


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


def monomial_exponents(n_vars: int, degree: int) -> np.ndarray:
    exps = [e for e in itertools.product(range(degree + 1), repeat=n_vars) if sum(e) <= degree]
    exps.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return np.array(exps, dtype=int)


def _features(spec, s, p):
    """Regression variables: s / s0 and the first d-1 filter coordinates."""
    return np.column_stack([np.atleast_1d(s) / spec.s0, np.atleast_2d(p)[:, : spec.d - 1]])


def _design(exps, v):
    return np.prod(v[:, None, :] ** exps[None, :, :], axis=2)


def _design_grad(exps, v, var):
    e = exps[:, var]
    shifted = exps.copy()
    shifted[:, var] = np.maximum(e - 1, 0)
    return e[None, :] * np.prod(v[:, None, :] ** shifted[None, :, :], axis=2)


def _pivoted_lstsq(X, y, rcond=1e-10):
    """Least squares dropping columns that pivoted QR finds dependent."""
    if X.shape[0] == 0:
        return np.zeros(X.shape[1]), np.zeros(X.shape[1], dtype=bool), np.nan
    scale = np.sqrt(np.mean(X**2, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    _, R, piv = qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rcond * diag[0])) if diag.size and diag[0] > 0 else 0
    keep = np.zeros(X.shape[1], dtype=bool)
    keep[piv[:rank]] = True
    coef = np.zeros(X.shape[1])
    sol, *_ = np.linalg.lstsq(Xs[:, keep], y, rcond=None)
    coef[keep] = sol / scale[keep]
    cond = float(diag[0] / diag[rank - 1]) if rank else np.inf
    return coef, keep, cond


@dataclass
class SliceFit:
    coef: np.ndarray  # (d, n_terms) basis coefficients
    kept: np.ndarray  # (d, n_terms) columns retained
    r2: np.ndarray  # (d,)
    root_se: np.ndarray  # (d,) standard error of the intercept
    n_obs: np.ndarray  # (d,)
    pooled: np.ndarray  # (d,) regime fell back to a pooled fit
    borrowed_from: int | None = None
    lo: np.ndarray | None = None  # (d, n_vars) training range of the regression variables
    hi: np.ndarray | None = None

    def clipped(self, v: np.ndarray, i: int) -> np.ndarray:
        """Evaluation points clamped into regime ``i``'s training box."""
        if self.lo is None:
            return v
        return np.clip(v, self.lo[i], self.hi[i])


class RegressionG(GApprox):
    kind = "regression"

    def __init__(self, spec, t_grid, degree, slices, control_powers):
        super().__init__(spec)
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.degree = degree
        self.slices = slices
        self.control_powers = tuple(control_powers)
        self.exps = monomial_exponents(spec.d, degree)

    def index_of(self, t) -> int:
        k = int(np.argmin(np.abs(self.t_grid - t)))
        if abs(self.t_grid[k] - t) > 1e-9 * max(1.0, self.spec.T):
            raise GridMismatchError(f"t={t} is not on the regression grid")
        return k

    @property
    def r2(self):
        return np.array([sl.r2 for sl in self.slices[:-1]])

    def _slice_for_derivatives(self, k):
        sl = self.slices[k]
        return self.slices[sl.borrowed_from] if sl.borrowed_from is not None else sl

    def values(self, t, s, p):
        k = self.index_of(t)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if k == len(self.t_grid) - 1:
            return np.repeat(terminal_value(self.spec, s, p)[:, None], self.spec.d, axis=1)
        sl = self.slices[k]
        v = _features(self.spec, s, p)
        return np.column_stack([_design(self.exps, sl.clipped(v, i)) @ sl.coef[i] for i in range(self.spec.d)])

    def grad_s(self, t, s, p):
        k = self.index_of(t)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if k == len(self.t_grid) - 1:
            return _terminal_grad_s(self.spec, s, p)
        sl = self._slice_for_derivatives(k)
        v = _features(self.spec, s, p)
        return np.column_stack([_design_grad(self.exps, sl.clipped(v, i), 0) @ sl.coef[i]
                                for i in range(self.spec.d)]) / self.spec.s0

    def grad_p(self, t, s, p):
        k = self.index_of(t)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        p = np.atleast_2d(np.asarray(p, dtype=float))
        d = self.spec.d
        out = np.zeros((s.size, d, d))
        if k == len(self.t_grid) - 1:
            H = payoff_table(self.spec, s)
            tot = p.sum(axis=1, keepdims=True)
            val = np.sum(p * H, axis=1, keepdims=True) / tot
            out[:] = ((H - val) / tot)[:, None, :]
            return out
        sl = self._slice_for_derivatives(k)
        v = _features(self.spec, s, p)
        for i in range(d):
            vi = sl.clipped(v, i)
            for j in range(d - 1):
                out[:, i, j] = _design_grad(self.exps, vi, 1 + j) @ sl.coef[i]
        return out

    def to_dict(self):
        return {
            "schema": "pohedge.gapprox/1",
            "representation": "regression",
            "degree": self.degree,
            "control_powers": list(self.control_powers),
            "t_grid": self.t_grid.tolist(),
            "spec": self.spec.to_dict(),
            "slices": [{"coef": sl.coef.tolist(), "kept": sl.kept.tolist(), "r2": sl.r2.tolist(),
                        "root_se": sl.root_se.tolist(), "n_obs": sl.n_obs.tolist(),
                        "pooled": sl.pooled.tolist(), "borrowed_from": sl.borrowed_from,
                        "lo": None if sl.lo is None else sl.lo.tolist(),
                        "hi": None if sl.hi is None else sl.hi.tolist()}
                       for sl in self.slices],
        }


def _terminal_grad_s(spec, s, p, eps=FD_REL_STEP_S):
    up = terminal_value(spec, s * (1 + eps), p)
    dn = terminal_value(spec, s * (1 - eps), p)
    return np.repeat(((up - dn) / (2 * eps * s))[:, None], spec.d, axis=1)


def control_variates(S, k, s0, powers):
    """Zero-mean P* regressors sum_{m >= k} (S_m / s0)^q (S_{m+1} - S_m)."""
    dS = np.diff(S[:, k:], axis=1)
    lev = S[:, k:-1] / s0
    return np.column_stack([np.sum(lev**q * dS, axis=1) for q in powers]) if powers else np.empty((S.shape[0], 0))


def fit_g_regression(spec: ModelSpec, ensemble, basis_degree: int = 3, pi=None,
                     control_powers=(0, 1, 2), min_obs_factor: int = 3) -> RegressionG:
    """Least-squares Monte Carlo fit of g on a P*-ensemble.

    For each slice k and regime i, regress the terminal value pi_T(H) (P
    filter) of the paths sitting in x_i at t_k on polynomials of
    ``(S_k / s0, pi_k)``.  Martingale control variates (discrete stochastic
    integrals of powers of S against dS, which have zero P* conditional
    mean) enter the design but not the fitted g.  Slices whose state design is
    rank deficient (t = 0, where every path shares S and pi) keep their
    intercept and borrow slope coefficients from the nearest full-rank slice.
    """
    from .filtering import filter_ensemble

    if ensemble.measure != "Pstar":
        raise ValueError("regression needs an ensemble simulated under Pstar")
    if pi is None:
        pi = filter_ensemble(spec, ensemble, "P").pi
    S, X = ensemble.S, ensemble.x_idx
    n_steps = ensemble.n_steps
    exps = monomial_exponents(spec.d, basis_degree)
    nb = len(exps)
    target = np.sum(pi[:, -1] * payoff_table(spec, S[:, -1]), axis=1)
    slices = []
    for k in range(n_steps):
        v = _features(spec, S[:, k], pi[:, k])
        B = _design(exps, v)
        C = control_variates(S, k, spec.s0, control_powers)
        full = np.hstack([B, C])
        coef = np.zeros((spec.d, nb))
        kept = np.zeros((spec.d, nb), dtype=bool)
        r2 = np.full(spec.d, np.nan)
        se = np.full(spec.d, np.nan)
        n_obs = np.zeros(spec.d, dtype=int)
        pooled = np.zeros(spec.d, dtype=bool)
        lo = np.zeros((spec.d, v.shape[1]))
        hi = np.zeros((spec.d, v.shape[1]))
        rank_deficient = False
        for i in range(spec.d):
            rows = X[:, k] == i
            n_obs[i] = int(rows.sum())
            if n_obs[i] < min_obs_factor * full.shape[1]:
                rows = np.ones_like(rows)
                pooled[i] = True
            if rows.any():
                lo[i], hi[i] = v[rows].min(axis=0), v[rows].max(axis=0)
            c, keep, _ = _pivoted_lstsq(full[rows], target[rows])
            if not keep[:nb].all():
                rank_deficient = True
            coef[i] = c[:nb]
            kept[i] = keep[:nb]
            resid = target[rows] - full[rows] @ c
            tss = np.sum((target[rows] - target[rows].mean()) ** 2)
            r2[i] = 1 - np.sum(resid**2) / tss if tss > 0 else 1.0
            se[i] = _intercept_se(full[rows][:, keep], resid)
        slices.append(SliceFit(coef, kept, r2, se, n_obs, pooled, None, lo, hi))
        if rank_deficient and k > 0:
            warnings.warn(f"rank-deficient regression design at slice {k}; terms dropped", stacklevel=2)
    full_rank = [k for k, sl in enumerate(slices) if sl.kept.all()]
    for k, sl in enumerate(slices):
        if not sl.kept.all() and full_rank:
            sl.borrowed_from = min(full_rank, key=lambda j: (abs(j - k), j))
    slices.append(SliceFit(np.zeros((spec.d, nb)), np.ones((spec.d, nb), dtype=bool), np.ones(spec.d),
                           np.zeros(spec.d), np.full(spec.d, S.shape[0]), np.zeros(spec.d, dtype=bool)))
    return RegressionG(spec, ensemble.t, basis_degree, slices, control_powers)


START_SPREAD = 0.2


def training_ensemble(spec: ModelSpec, n_steps: int, n_paths: int, master_seed: int,
                      spread: float = START_SPREAD):
    """P*-ensemble with dispersed starting states, and its P-filter.

    Paths from a single root make ``(S_k, pi_k)`` nearly collinear in the
    first slices, so a polynomial in both extrapolates badly off that curve.
    Starting from ``S_0 = s0 exp(spread Z)``, ``pi_0 ~ Dirichlet(1, .., 1)``
    and ``X_0 ~ pi_0`` fills the state space the hedge is evaluated on.
    The start draws use their own seed stream, disjoint from the per-path ones.
    """
    from .filtering import filter_observations
    from .simulate import simulate_dispersed

    rng = np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(1,)))
    lo, hi = spec.s_range
    s_start = np.clip(spec.s0 * np.exp(spread * rng.standard_normal(n_paths)), lo, hi)
    pi0 = rng.dirichlet(np.ones(spec.d), size=n_paths)
    u = rng.random(n_paths)
    x_start = np.minimum((u[:, None] >= np.cumsum(pi0, axis=1)).sum(axis=1), spec.d - 1)
    ens = simulate_dispersed(spec, n_steps, "Pstar", n_paths, master_seed, s_start, x_start)
    pi, _ = filter_observations(spec, ens.t, ens.S, ens.z, "P", prior=pi0)
    return ens, pi


def _intercept_se(X, resid):
    n, q = X.shape
    if n <= q or q == 0:
        return np.nan
    s2 = resid @ resid / (n - q)
    try:
        cov = s2 * np.linalg.inv(X.T @ X)
    except np.linalg.LinAlgError:
        return np.nan
    # the intercept is the all-ones column when present
    ones = np.flatnonzero(np.all(X == X[0], axis=0))
    return float(math.sqrt(cov[ones[0], ones[0]])) if ones.size else np.nan


# ---------------------------------------------------------------------------
# closed-form representation (tests and special cases)
# ---------------------------------------------------------------------------


class AnalyticG(GApprox):
    """g from user callables ``value(t, i, s, p)``, ``ds(...)``, ``dp(...) -> (d,)``."""

    kind = "analytic"

    def __init__(self, spec, value, ds, dp):
        super().__init__(spec)
        self._value, self._ds, self._dp = value, ds, dp

    def _table(self, fn, t, s, p):
        s = np.atleast_1d(s)
        p = np.atleast_2d(p)
        return np.array([[fn(t, i, si, pi) for i in range(self.spec.d)] for si, pi in zip(s, p)])

    def values(self, t, s, p):
        return self._table(self._value, t, s, p)

    def grad_s(self, t, s, p):
        return self._table(self._ds, t, s, p)

    def grad_p(self, t, s, p):
        return self._table(self._dp, t, s, p)


# ---------------------------------------------------------------------------
# value process and serialization
# ---------------------------------------------------------------------------


@dataclass
class ValuePath:
    t: np.ndarray
    V: np.ndarray  # (n+1,) or (N, n+1)


def value_process(g: GApprox, path, filter_p, filter_pstar, indices=None) -> ValuePath:
    """V^H_t = sum_i g(t, x_i, S_t, pi_t) pi*_t(f_i) on the path grid (or a subset)."""
    S = np.atleast_2d(path.S)
    pi = filter_p.pi if filter_p.pi.ndim == 3 else filter_p.pi[None]
    pis = filter_pstar.pi if filter_pstar.pi.ndim == 3 else filter_pstar.pi[None]
    if pi.shape[1] != S.shape[1] or pis.shape[1] != S.shape[1]:
        raise GridMismatchError("filters and path use different grids")
    idx = range(S.shape[1]) if indices is None else indices
    V = np.full(S.shape, np.nan)
    for k in idx:
        V[:, k] = np.sum(g.values(path.t[k], S[:, k], pi[:, k]) * pis[:, k], axis=1)
    return ValuePath(path.t, V[0] if np.ndim(path.S) == 1 else V)


def save_g(g: GApprox, dest) -> None:
    with open(dest, "w") as fh:
        json.dump(g.to_dict(), fh, sort_keys=True)


def load_g(src) -> GApprox:
    with open(src) as fh:
        doc = json.load(fh)
    if doc.get("schema") != "pohedge.gapprox/1":
        raise ValueError("unsupported g document")
    spec = spec_from_dict(doc["spec"])
    if doc["representation"] == "lattice":
        return LatticeG(spec, doc["n_steps"])
    slices = []
    for sd in doc["slices"]:
        slices.append(SliceFit(np.array(sd["coef"]), np.array(sd["kept"], dtype=bool), np.array(sd["r2"]),
                               np.array(sd["root_se"]), np.array(sd["n_obs"]), np.array(sd["pooled"], dtype=bool),
                               sd["borrowed_from"],
                               None if sd.get("lo") is None else np.array(sd["lo"]),
                               None if sd.get("hi") is None else np.array(sd["hi"])))
    return RegressionG(spec, doc["t_grid"], doc["degree"], slices, doc["control_powers"])
