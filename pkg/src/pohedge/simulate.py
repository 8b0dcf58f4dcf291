"""Path simulation of the regime/price pair under P and under P*.

Discretization (shared by the filter, the density and the oracles): on each
step of length h the price first diffuses,

    S_mid = S_n exp(a(t_n, X_n, S_n) h + sigma(t_n, S_n) dW),

with log-drift ``a = mu1 - sigma^2/2`` under P and
``a = -log(1 + h b*)/h - sigma^2/2``, ``b* = sum_k K1_k eta*_k``, under P*
(this makes S an exact one-step P*-martingale when coefficients do not depend
on s).  Then at most one atom fires, atom k with probability ``rate_k h``
(rates evaluated at ``(t_n, X_n, S_mid)``), moving X to its destination and S
to ``S_mid (1 + K1_k)``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .errors import StepSizeError
from .model import ModelSpec, evaluation_grid, require_valid, snapshot

MAX_STEP_PROB = 0.1
MEASURES = ("P", "Pstar")


def _check_measure(measure):
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")


@dataclass
class StepKernel:
    log_drift: np.ndarray  # (N,)
    sigma: np.ndarray  # (N,)
    probs: np.ndarray  # (N, m) firing probabilities
    k1: np.ndarray  # (N, m) relative jump sizes
    dest: np.ndarray  # (N, m) destination regime index


def step_kernel(spec: ModelSpec, t: float, s, x_idx, h: float, measure: str) -> StepKernel:
    """One-step transition ingredients for paths sitting in regimes ``x_idx``."""
    sn = snapshot(spec, t, s)
    rows = np.arange(sn.s.size)
    x_idx = np.broadcast_to(np.asarray(x_idx), sn.s.shape)
    k1 = sn.k1[rows, :, x_idx]
    rates = sn.rates(measure)[rows, :, x_idx]
    sig = sn.sigma
    if measure == "P":
        a = sn.mu[rows, x_idx] - 0.5 * sig**2
    else:
        b = np.sum(k1 * rates, axis=1)
        a = -np.log1p(h * b) / h - 0.5 * sig**2
    return StepKernel(a, sig, rates * h, k1, sn.dest[:, x_idx].T)


def log_drift_table(spec: ModelSpec, t: float, s, h: float, measure: str) -> np.ndarray:
    """Per-regime log-drift plus sigma^2/2, shape (N, d); the filter's signal."""
    sn = snapshot(spec, t, s)
    if measure == "P":
        return sn.mu
    b = np.einsum("nkd,nkd->nd", sn.k1, sn.eta_star)
    return -np.log1p(h * b) / h


def required_steps(spec: ModelSpec, measure: str, grid_density: int = 9) -> int:
    """Smallest n with sum_k rate_k h <= 0.1 over the validation grid."""
    ts, ss = evaluation_grid(spec, grid_density)
    worst = 0.0
    for t in ts:
        sn = snapshot(spec, t, ss)
        worst = max(worst, float(sn.rates(measure).sum(axis=1).max()))
    return max(1, math.ceil(worst * spec.T / MAX_STEP_PROB - 1e-12))


def check_step_size(spec: ModelSpec, n_steps: int, measure: str) -> None:
    need = required_steps(spec, measure)
    if n_steps < need:
        raise StepSizeError(
            f"total jump probability per step exceeds {MAX_STEP_PROB}; use n_steps >= {need}", need)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpEvent:
    index: int  # grid index at which the post-jump value is recorded
    atom: object
    z: float
    x_before: float
    x_after: float


@dataclass
class Path:
    t: np.ndarray
    x_idx: np.ndarray
    X: np.ndarray
    S: np.ndarray
    dW: np.ndarray
    atom: np.ndarray  # atom index fired on each step, -1 if none
    z: np.ndarray  # observed price jump on each step (0 if none)
    measure: str
    atoms: tuple = ()

    @property
    def n_steps(self) -> int:
        return self.dW.size

    @property
    def h(self) -> float:
        return float(self.t[-1] / self.n_steps)

    @property
    def events(self) -> list:
        out = []
        for n in np.flatnonzero(self.atom >= 0):
            out.append(JumpEvent(int(n) + 1, self.atoms[self.atom[n]], float(self.z[n]),
                                 float(self.X[n]), float(self.X[n + 1])))
        return out

    def to_csv(self, density=None) -> str:
        buf = io.StringIO()
        cols = ["t", "X", "S", "jump", "atom", "z"] + (["L"] if density is not None else [])
        buf.write(",".join(cols) + "\r\n")
        for n in range(self.t.size):
            fired = n > 0 and self.atom[n - 1] >= 0
            row = [repr(float(self.t[n])), repr(float(self.X[n])), repr(float(self.S[n])),
                   "1" if fired else "0", str(self.atoms[self.atom[n - 1]]) if fired else "",
                   repr(float(self.z[n - 1])) if n > 0 else "0.0"]
            if density is not None:
                row.append(repr(float(density[n])))
            buf.write(",".join(row) + "\r\n")
        return buf.getvalue()


@dataclass
class PathSet:
    """Ensemble stored as stacked arrays; ``paths[i]`` gives a :class:`Path`."""

    t: np.ndarray
    x_idx: np.ndarray  # (N, n+1)
    S: np.ndarray  # (N, n+1)
    dW: np.ndarray  # (N, n)
    atom: np.ndarray  # (N, n)
    z: np.ndarray  # (N, n)
    measure: str
    master_seed: int | None
    regime_values: np.ndarray
    atoms: tuple = ()
    seed_policy: str = field(default="numpy.default_rng([master_seed, path_index])")

    def __len__(self):
        return self.S.shape[0]

    def __getitem__(self, i) -> Path:
        return Path(self.t, self.x_idx[i], self.regime_values[self.x_idx[i]], self.S[i], self.dW[i],
                    self.atom[i], self.z[i], self.measure, self.atoms)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def X(self):
        return self.regime_values[self.x_idx]

    @property
    def n_steps(self):
        return self.dW.shape[1]

    @property
    def S_mid(self):
        """Pre-jump prices at the end of each step, recovered from observables."""
        return self.S[:, 1:] - self.z


@dataclass
class _Arrays:
    t: np.ndarray
    x_idx: np.ndarray
    S: np.ndarray
    dW: np.ndarray
    atom: np.ndarray
    z: np.ndarray
    single: bool


def as_arrays(obj) -> _Arrays:
    if isinstance(obj, Path):
        return _Arrays(obj.t, obj.x_idx[None], obj.S[None], obj.dW[None], obj.atom[None],
                       obj.z[None], True)
    return _Arrays(obj.t, obj.x_idx, obj.S, obj.dW, obj.atom, obj.z, False)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def path_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(index)])


def _draw(spec, n_steps, rngs):
    n = len(rngs)
    u0 = np.empty(n)
    normals = np.empty((n, n_steps))
    unif = np.empty((n, n_steps))
    for r, g in enumerate(rngs):
        u0[r] = g.random()
        normals[r] = g.standard_normal(n_steps)
        unif[r] = g.random(n_steps)
    cdf = np.cumsum(spec.initial_law)
    x0 = np.minimum(np.searchsorted(cdf, u0, side="right"), spec.d - 1)
    return x0, normals, unif


def _select(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    k = (u[:, None] >= cum).sum(axis=1)
    return np.where(k < probs.shape[1], k, -1)


def advance(spec: ModelSpec, t, s, x_idx, dw, atom_or_u, h, measure, draw=True):
    """One step of the discretized dynamics (vectorized over paths).

    With ``draw=True`` the last positional argument is a uniform variate used
    to pick the event; otherwise it is the atom index already chosen (replay).
    Returns ``(s_next, x_next, atom, z)``.
    """
    ker = step_kernel(spec, t, s, x_idx, h, measure)
    s_mid = s * np.exp(ker.log_drift * h + ker.sigma * dw)
    post = step_kernel(spec, t, s_mid, x_idx, h, measure)
    if np.any(post.probs.sum(axis=1) > MAX_STEP_PROB + 1e-12):
        worst = float(post.probs.sum(axis=1).max())
        raise StepSizeError("jump probability per step exceeds the cap along a path",
                            math.ceil(worst / h * spec.T / MAX_STEP_PROB))
    atom = _select(post.probs, atom_or_u) if draw else np.asarray(atom_or_u)
    fired = atom >= 0
    rows = np.arange(s.size)
    k = np.where(fired, atom, 0)
    k1 = np.where(fired, post.k1[rows, k], 0.0)
    z = s_mid * k1
    s_next = s_mid + z
    x_next = np.where(fired, post.dest[rows, k], x_idx)
    return s_next, x_next, atom, z


def _run(spec, n_steps, measure, x0, normals, unif, s_start=None):
    n_paths = x0.size
    h = spec.T / n_steps
    t = np.linspace(0.0, spec.T, n_steps + 1)
    S = np.empty((n_paths, n_steps + 1))
    X = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    atom = np.empty((n_paths, n_steps), dtype=np.int64)
    z = np.empty((n_paths, n_steps))
    dW = normals * math.sqrt(h)
    S[:, 0] = spec.s0 if s_start is None else s_start
    X[:, 0] = x0
    for n in range(n_steps):
        if n_paths == 0:
            break
        S[:, n + 1], X[:, n + 1], atom[:, n], z[:, n] = advance(
            spec, t[n], S[:, n], X[:, n], dW[:, n], unif[:, n], h, measure)
    return t, X, S, dW, atom, z


def _prepare(spec, n_steps, measure):
    _check_measure(measure)
    require_valid(spec)
    if measure == "Pstar":
        from .mmm import require_admissible

        require_admissible(spec)
    check_step_size(spec, n_steps, measure)


def simulate_ensemble(spec: ModelSpec, n_steps: int, measure: str, n_paths: int,
                      master_seed: int) -> PathSet:
    _prepare(spec, n_steps, measure)
    rngs = [path_rng(master_seed, i) for i in range(n_paths)]
    x0, normals, unif = _draw(spec, n_steps, rngs)
    t, X, S, dW, atom, z = _run(spec, n_steps, measure, x0, normals, unif)
    return PathSet(t, X, S, dW, atom, z, measure, master_seed, spec.regimes.values, spec.marks.atoms)


def simulate_dispersed(spec: ModelSpec, n_steps: int, measure: str, n_paths: int, master_seed: int,
                       s_start, x_start) -> PathSet:
    """Ensemble whose paths start from given per-path states ``(s_start, x_start)``."""
    _prepare(spec, n_steps, measure)
    rngs = [path_rng(master_seed, i) for i in range(n_paths)]
    _, normals, unif = _draw(spec, n_steps, rngs)
    x0 = np.asarray(x_start, dtype=np.int64).reshape(n_paths)
    s_start = np.asarray(s_start, dtype=float).reshape(n_paths)
    t, X, S, dW, atom, z = _run(spec, n_steps, measure, x0, normals, unif, s_start)
    return PathSet(t, X, S, dW, atom, z, measure, master_seed, spec.regimes.values, spec.marks.atoms)


def simulate_path(spec: ModelSpec, n_steps: int, measure: str, seed) -> Path:
    """Single path; ``seed`` is an int or a ``(master_seed, index)`` pair.

    ``simulate_path(spec, n, m, (s, i))`` equals path ``i`` of
    ``simulate_ensemble(spec, n, m, N, s)``.
    """
    _prepare(spec, n_steps, measure)
    rng = path_rng(*seed) if isinstance(seed, (tuple, list)) else np.random.default_rng(seed)
    x0, normals, unif = _draw(spec, n_steps, [rng])
    t, X, S, dW, atom, z = _run(spec, n_steps, measure, x0, normals, unif)
    return PathSet(t, X, S, dW, atom, z, measure, None, spec.regimes.values, spec.marks.atoms)[0]


def replay(spec: ModelSpec, path):
    """Recompute (S, X index) from stored increments and atom choices."""
    arr = as_arrays(path)
    measure = path.measure
    n_steps = arr.dW.shape[1]
    h = spec.T / n_steps
    S = np.empty_like(arr.S)
    X = np.empty_like(arr.x_idx)
    S[:, 0] = arr.S[:, 0]
    X[:, 0] = arr.x_idx[:, 0]
    for n in range(n_steps):
        S[:, n + 1], X[:, n + 1], _, _ = advance(
            spec, arr.t[n], S[:, n], X[:, n], arr.dW[:, n], arr.atom[:, n], h, measure, draw=False)
    if arr.single:
        return S[0], X[0]
    return S, X


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

_MAGIC = b"POHE"
_VERSION = 1


def write_ensemble(ps: PathSet, dest) -> None:
    """Binary ensemble: header then little-endian float64 blocks."""
    n_paths, n1 = ps.S.shape
    header = _MAGIC + struct.pack("<HBII", _VERSION, MEASURES.index(ps.measure), n_paths, n1 - 1)
    atoms = "\x1f".join(str(a) for a in ps.atoms).encode()
    header += struct.pack("<HI", ps.regime_values.size, len(atoms)) + atoms
    blocks = [ps.regime_values, ps.t, ps.x_idx, ps.S, ps.dW, ps.atom, ps.z]
    with open(dest, "wb") as fh:
        fh.write(header)
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_ensemble(src) -> PathSet:
    raw = FsPath(src).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not an ensemble file")
    version, mcode, n_paths, n_steps = struct.unpack_from("<HBII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported ensemble version {version}")
    off = 4 + struct.calcsize("<HBII")
    d, alen = struct.unpack_from("<HI", raw, off)
    off += struct.calcsize("<HI")
    atoms = tuple(raw[off:off + alen].decode().split("\x1f")) if alen else ()
    off += alen

    def take(count, shape):
        nonlocal off
        out = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return out.astype(float)

    rv = take(d, (d,))
    t = take(n_steps + 1, (n_steps + 1,))
    x = take(n_paths * (n_steps + 1), (n_paths, n_steps + 1)).astype(np.int64)
    S = take(n_paths * (n_steps + 1), (n_paths, n_steps + 1))
    dW = take(n_paths * n_steps, (n_paths, n_steps))
    atom = take(n_paths * n_steps, (n_paths, n_steps)).astype(np.int64)
    z = take(n_paths * n_steps, (n_paths, n_steps))
    return PathSet(t, x, S, dW, atom, z, MEASURES[mcode], None, rv, atoms)
