"""Finite-dimensional Kushner-Stratonovich filter for the hidden regime.

Between observed price jumps the filter follows

    d pi_i = (b_i - int w_i nu^H(dz)) dt + gamma_i dI

with ``gamma_i = pi_i (m_i - pi(m)) / sigma``.  Here ``m`` is the regime
signal in the log-return (``mu1`` under P; minus the jump compensation
``sum_k K1 eta*_k`` under P*).  The dt-term reduces to

    sum_{unobservable (k,j)} pi_j r_kj [dest(k,j)=i] - pi_i sum_k r_ki
        + pi_i sum_{observable (k,j)} pi_j r_kj

where an atom is observable in regime j when it moves the price.  Each step
uses an explicit Euler drift, a Milstein correction for the gain and a
clip-and-renormalize projection; observed jumps are handled by exact Bayes.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ObservationError
from .model import ModelSpec, snapshot
from .simulate import Path, PathSet, log_drift_table

JUMP_MATCH_RTOL = 1e-9


@dataclass
class FilterCoefficients:
    drift: np.ndarray  # (N, d)
    gain: np.ndarray  # (N, d)
    signal: np.ndarray  # (N, d) regime signal m
    sigma: np.ndarray  # (N,)


def _dest_onehot(dest: np.ndarray, d: int) -> np.ndarray:
    return (dest[:, :, None] == np.arange(d)).astype(float)  # (m, d_from, d_to)


def filter_coefficients(spec: ModelSpec, t: float, s, p, measure: str, h: float | None = None):
    s = np.atleast_1d(np.asarray(s, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    sn = snapshot(spec, t, s)
    rates = sn.rates(measure)
    obs = sn.observable()
    D = _dest_onehot(sn.dest, spec.d)
    inflow = np.einsum("nkj,nj,kji->ni", np.where(obs, 0.0, rates), p, D)
    outflow = p * rates.sum(axis=1)
    obs_total = np.einsum("nkj,nj->n", np.where(obs, rates, 0.0), p)
    drift = inflow - outflow + p * obs_total[:, None]
    if measure == "P":
        m = sn.mu
    elif h is None:
        m = -np.einsum("nkd,nkd->nd", sn.k1, sn.eta_star)
    else:
        m = log_drift_table(spec, t, s, h, measure)
    gain = p * (m - np.sum(p * m, axis=1, keepdims=True)) / sn.sigma[:, None]
    return FilterCoefficients(drift, gain, m, sn.sigma)


def project_simplex(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, 0.0, None)
    return q / q.sum(axis=-1, keepdims=True)


def _match(spec: ModelSpec, t, s, z):
    sn = snapshot(spec, t, s)
    zz = sn.z  # (N, m, d)
    tol = JUMP_MATCH_RTOL * np.maximum(1.0, np.abs(z))[:, None, None]
    return sn, (np.abs(zz - z[:, None, None]) <= tol) & sn.observable()


def jump_update(spec: ModelSpec, p, t: float, s_minus, z, measure: str) -> np.ndarray:
    """Exact Bayes update of the filter at an observed price jump ``z``.

    posterior_i is proportional to
    ``sum_j p_j sum_{k: s K1_kj = z, dest(k,j) = i} rate_kj``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    s_minus = np.atleast_1d(np.asarray(s_minus, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    sn, hit = _match(spec, t, s_minus, z)
    D = _dest_onehot(sn.dest, spec.d)
    rates = np.where(hit, sn.rates(measure), 0.0)
    post = np.einsum("nkj,kji->ni", rates * p[:, None, :], D)
    mass = post.sum(axis=1)
    if np.any(mass <= 0):
        # z is producible but the filter gave its source regimes zero weight
        # (possible after clipping); fall back to a uniform-prior update
        uniform = np.einsum("nkj,kji->ni", rates, D)
        umass = uniform.sum(axis=1)
        if np.any((mass <= 0) & (umass <= 0)):
            bad = int(np.flatnonzero((mass <= 0) & (umass <= 0))[0])
            raise ObservationError(
                f"observation inconsistent with model: no atom produces z={z[bad]:.6g} at s={s_minus[bad]:.6g}")
        post = np.where(mass[:, None] > 0, post, uniform)
        mass = np.where(mass > 0, mass, umass)
    return post / mass[:, None]


def jump_update_rn(spec: ModelSpec, p, t: float, s_minus: float, z: float, measure: str) -> np.ndarray:
    """Same update written as ``pi(f_i) + w^{f_i}(z)`` with the Radon-Nikodym form.

    w^f(z) = [d pi(f nu^F)/d nu^H (z) + d pi(Lbar f)/d nu^H (z)] - pi(f), where
    ``Lbar f(x, z) = sum_{k: z_k(x) = z} rate_k (f(x + K0_k) - f(x))`` is the
    regime-jump operator restricted to atoms producing price jump z.
    """
    p = np.asarray(p, dtype=float)
    d = spec.d
    sn = snapshot(spec, t, [s_minus])
    rates = sn.rates(measure)[0]
    zz = sn.z[0]
    tol = JUMP_MATCH_RTOL * max(1.0, abs(z))
    nu_f = np.zeros(d)  # nu^F_j({z})
    lbar = np.zeros((d, d))  # lbar[j, i] = Lbar f_i (x_j, z)
    for j in range(d):
        for k in range(spec.m):
            if zz[k, j] != 0.0 and abs(zz[k, j] - z) <= tol:
                nu_f[j] += rates[k, j]
                lbar[j, sn.dest[k, j]] += rates[k, j]
                lbar[j, j] -= rates[k, j]
    nu_h = float(p @ nu_f)
    if nu_h <= 0:
        raise ObservationError(f"observation inconsistent with model: z={z:.6g}")
    pi_f_nu = p * nu_f  # pi(f_i nu^F)(z)
    pi_lbar = p @ lbar  # pi(Lbar f_i)(z)
    w = (pi_f_nu + pi_lbar) / nu_h - p
    return p + w


@dataclass
class FilterTrajectory:
    t: np.ndarray
    pi: np.ndarray  # (n+1, d) or (N, n+1, d)
    dI: np.ndarray  # (n,) or (N, n)
    measure: str

    def to_csv(self) -> str:
        if self.pi.ndim != 2:
            raise ValueError("CSV export is per path")
        buf = io.StringIO()
        d = self.pi.shape[1]
        buf.write(",".join(["t"] + [f"p_{i + 1}" for i in range(d)] + ["dI"]) + "\r\n")
        for n in range(self.t.size):
            cells = [repr(float(self.t[n]))] + [repr(float(v)) for v in self.pi[n]]
            cells.append(repr(float(self.dI[n - 1])) if n > 0 else "")
            buf.write(",".join(cells) + "\r\n")
        return buf.getvalue()

    def __getitem__(self, i) -> "FilterTrajectory":
        return FilterTrajectory(self.t, self.pi[i], self.dI[i], self.measure)


def ks_step(spec, t, h, s, s_mid, z, p, measure, milstein=True):
    """Advance the filter over one step given observed (S_n, S_mid, z)."""
    fc = filter_coefficients(spec, t, s, p, measure, h)
    r = np.log(s_mid / s)
    pm = np.sum(p * fc.signal, axis=1)
    dI = (r - (pm - 0.5 * fc.sigma**2) * h) / fc.sigma
    q = p + fc.drift * h + fc.gain * dI[:, None]
    if milstein:
        c = fc.signal / fc.sigma[:, None]
        cbar = np.sum(p * c, axis=1, keepdims=True)
        l1 = fc.gain * (c - cbar) - p * np.sum(fc.gain * c, axis=1, keepdims=True)
        q += 0.5 * l1 * (dI**2 - h)[:, None]
    q = project_simplex(q)
    jumped = z != 0.0
    if np.any(jumped):
        q[jumped] = jump_update(spec, q[jumped], t, s_mid[jumped], z[jumped], measure)
    return q, dI


def filter_observations(spec: ModelSpec, t, S, z, measure: str, prior=None, milstein=True):
    """Run the filter on observed price paths ``S`` (N, n+1) with jumps ``z`` (N, n)."""
    S = np.atleast_2d(S)
    z = np.atleast_2d(z)
    n_paths, n1 = S.shape
    prior = spec.initial_law if prior is None else np.asarray(prior, dtype=float)
    pi = np.empty((n_paths, n1, spec.d))
    dI = np.empty((n_paths, n1 - 1))
    pi[:, 0] = prior
    for n in range(n1 - 1):
        if n_paths == 0:
            break
        h = t[n + 1] - t[n]
        pi[:, n + 1], dI[:, n] = ks_step(spec, t[n], h, S[:, n], S[:, n + 1] - z[:, n], z[:, n],
                                         pi[:, n], measure, milstein)
    return pi, dI


def filter_path(spec: ModelSpec, path: Path, measure: str, prior=None, milstein=True) -> FilterTrajectory:
    pi, dI = filter_observations(spec, path.t, path.S[None], path.z[None], measure, prior, milstein)
    return FilterTrajectory(path.t, pi[0], dI[0], measure)


def filter_ensemble(spec: ModelSpec, ps: PathSet, measure: str, prior=None, milstein=True) -> FilterTrajectory:
    pi, dI = filter_observations(spec, ps.t, ps.S, ps.z, measure, prior, milstein)
    return FilterTrajectory(ps.t, pi, dI, measure)


def innovation_increments(spec: ModelSpec, path: Path, traj: FilterTrajectory) -> np.ndarray:
    """Observable innovation increments (log-return minus filtered drift, over sigma)."""
    if traj.t.shape != path.t.shape or not np.array_equal(traj.t, path.t):
        from .errors import GridMismatchError

        raise GridMismatchError("filter trajectory and path use different grids")
    out = np.empty(path.n_steps)
    for n in range(path.n_steps):
        h = path.t[n + 1] - path.t[n]
        s = path.S[n : n + 1]
        fc = filter_coefficients(spec, path.t[n], s, traj.pi[n][None], traj.measure, h)
        r = np.log((path.S[n + 1] - path.z[n]) / path.S[n])
        out[n] = (r - (traj.pi[n] @ fc.signal[0] - 0.5 * fc.sigma[0] ** 2) * h) / fc.sigma[0]
    return out
