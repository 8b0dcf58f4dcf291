"""Structure-condition quantities and the minimal martingale measure."""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import AdmissibilityError
from .model import Check, ModelSpec, ValidationReport, evaluation_grid, snapshot


@dataclass(frozen=True)
class StructureQuantities:
    alpha_F: float
    alpha_H: float
    a: float  # density of <M> under full information
    a_H: float  # density of <N> under the observation filtration


def _kernel_sums(spec: ModelSpec, t, x, s):
    i = int(spec.regimes.index_of(x))
    sn = snapshot(spec, t, [s])
    z = sn.z[0, :, i]
    return sn.mu[0, i], float(sn.sigma[0]), z, spec.eta


def alpha_F(spec: ModelSpec, t: float, x: float, s: float) -> float:
    mu, sig, z, eta = _kernel_sums(spec, t, x, s)
    return float((s * mu + z @ eta) / (s**2 * sig**2 + (z * z) @ eta))


def _projected_sums(spec: ModelSpec, t, s, pi):
    pi = np.asarray(pi, dtype=float)
    sn = snapshot(spec, t, [s])
    z = sn.z[0]  # (m, d)
    num = s * (sn.mu[0] @ pi) + np.einsum("kd,k,d->", z, spec.eta, pi)
    den = s**2 * sn.sigma[0] ** 2 + np.einsum("kd,k,d->", z * z, spec.eta, pi)
    return float(num), float(den)


def alpha_H(spec: ModelSpec, t: float, s: float, pi) -> float:
    """alpha^H with nu^H = sum_i pi_i nu^F(t, x_i, s, .)."""
    num, den = _projected_sums(spec, t, s, pi)
    return num / den


def structure_quantities(spec: ModelSpec, t, x, s, pi) -> StructureQuantities:
    mu, sig, z, eta = _kernel_sums(spec, t, x, s)
    a = s**2 * sig**2 + (z * z) @ eta
    num, a_h = _projected_sums(spec, t, s, pi)
    return StructureQuantities(float((s * mu + z @ eta) / a), num / a_h, float(a), a_h)


def admissibility_check(spec: ModelSpec, grid_density: int = 9) -> ValidationReport:
    """Grid check of ``alpha^F s K1 < 1`` for every atom and regime."""
    ts, ss = evaluation_grid(spec, grid_density)
    prod = []
    for t in ts:
        sn = snapshot(spec, t, ss)
        prod.append(sn.alpha_f[:, None, :] * sn.z)  # (n_s, m, d)
    prod = np.stack(prod)
    ok = prod < 1.0
    flat = prod.reshape(len(ts), len(ss), -1)
    pos = np.unravel_index(np.argmax(flat), flat.shape)
    k, i = np.unravel_index(pos[2], prod.shape[2:])
    point = {"t": float(ts[pos[0]]), "s": float(ss[pos[1]]),
             "atom": str(spec.marks.atoms[k]), "x": float(spec.regimes.values[i])}
    worst = float(flat[pos])
    checks = [
        Check("alpha_F s K1 < 1", bool(ok.all()), worst, point,
              "" if ok.all() else f"minimal martingale measure undefined: alpha_F s K1 = {worst:.4g}"),
        # exponential-moment surrogate: bounded total jump intensity
        Check("finite total mark mass", bool(np.isfinite(spec.marks.total_mass)),
              spec.marks.total_mass, None, ""),
    ]
    return ValidationReport(checks)


_ADMISSIBLE: "weakref.WeakKeyDictionary[ModelSpec, ValidationReport]" = weakref.WeakKeyDictionary()


def require_admissible(spec: ModelSpec, grid_density: int = 9) -> None:
    rep = _ADMISSIBLE.get(spec)
    if rep is None:
        rep = admissibility_check(spec, grid_density)
        _ADMISSIBLE[spec] = rep
    if not rep.passed:
        raise AdmissibilityError(rep.failed()[0].message)


def eta_star(spec: ModelSpec, t: float, x: float, s: float, atom) -> float:
    k = spec.marks.atoms.index(atom) if not isinstance(atom, (int, np.integer)) else int(atom)
    i = int(spec.regimes.index_of(x))
    val = float(snapshot(spec, t, [s]).eta_star[0, k, i])
    if val < 0:
        raise AdmissibilityError(f"negative P* intensity {val:.4g} for atom {atom!r}")
    return val


# ---------------------------------------------------------------------------
# density of the minimal martingale measure along simulated paths
# ---------------------------------------------------------------------------


@dataclass
class DensityPath:
    t: np.ndarray
    L: np.ndarray  # (n+1,) or (N, n+1)

    @property
    def terminal(self):
        return self.L[..., -1]


def doleans_density(spec: ModelSpec, path) -> DensityPath:
    """Density dP*/dP on the path's grid (one path or a whole ensemble).

    This is the exact likelihood ratio between the discretized P* and P
    dynamics used by :mod:`pohedge.simulate`.  The Gaussian factor is
    ``exp(-theta dW - theta^2 h / 2)`` with ``theta`` the drift difference over
    ``sigma`` (``-> alpha^F s sigma`` as h -> 0); an atom firing contributes
    ``eta*_k / eta_k = 1 - alpha^F s K1``; a step without firing contributes
    the ratio of no-event probabilities, which carries the compensator.
    """
    from .simulate import as_arrays, step_kernel

    require_admissible(spec)
    arr = as_arrays(path)
    n = arr.dW.shape[1]
    h = spec.T / n
    logL = np.zeros((arr.S.shape[0], n + 1))
    rows = np.arange(arr.S.shape[0])
    for step in range(n):
        t = arr.t[step]
        xi = arr.x_idx[:, step]
        sp = step_kernel(spec, t, arr.S[:, step], xi, h, "P")
        ss = step_kernel(spec, t, arr.S[:, step], xi, h, "Pstar")
        theta = (sp.log_drift - ss.log_drift) / sp.sigma
        dw = arr.dW[:, step]
        s_mid = arr.S[:, step] * np.exp(sp.log_drift * h + sp.sigma * dw)
        pp = step_kernel(spec, t, s_mid, xi, h, "P").probs
        ps = step_kernel(spec, t, s_mid, xi, h, "Pstar").probs
        atom = arr.atom[:, step]
        fired = atom >= 0
        k = np.where(fired, atom, 0)
        num = np.where(fired, ps[rows, k], 1.0 - ps.sum(axis=1))
        den = np.where(fired, pp[rows, k], 1.0 - pp.sum(axis=1))
        if np.any(num <= 0):
            raise AdmissibilityError("nonpositive density factor encountered")
        logL[:, step + 1] = logL[:, step] - theta * dw - 0.5 * theta**2 * h + np.log(num / den)
    L = np.exp(logL)
    return DensityPath(arr.t, L[0] if arr.single else L)


def second_moment_flag(L_T: np.ndarray, threshold: float = 10.0) -> dict:
    """Empirical E[L_T^2] with a heavy-tail flag (no verification claimed)."""
    m2 = float(np.mean(L_T**2))
    share = float(np.max(L_T) / np.sum(L_T)) if L_T.size else 0.0
    return {"second_moment": m2, "max_weight_share": share, "heavy_tail_suspected": m2 > threshold}
