"""Hidden-regime jump-diffusion model: parameterization, validation, generators.

The regime ``X`` lives in a finite set ``x_1..x_d`` and the price ``S`` follows

    dS = S (mu1(t, X, S) dt + sigma1(t, S) dW + int K1(zeta; t, X-, S-) N(dt, dzeta))
    dX = int K0(zeta; t, X-) N(dt, dzeta)

driven by a Poisson measure with a *finite* set of atoms ``zeta_k`` firing at
rates ``eta_k``.  Every integral against ``eta`` is therefore a finite sum.

Coefficient callbacks take a regime *index* ``i`` (not the regime value) so
that they can be evaluated on arrays of paths:

    mu1(t, i, s), sigma1(t, s), K0(k, t, i) -> regime jump, K1(k, t, i, s)
"""
from __future__ import annotations

import json
import math
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ContractError, ModelValidationError

# ---------------------------------------------------------------------------
# built-in coefficient callbacks
# ---------------------------------------------------------------------------


class _Builtin:
    kind = ""

    def to_dict(self) -> dict:
        raise NotImplementedError


class Constant(_Builtin):
    """Constant drift/volatility; works for both ``(t, i, s)`` and ``(t, s)``."""

    kind = "constant"

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, t, *args):
        s = np.asarray(args[-1], dtype=float)
        return np.full(np.broadcast(*[np.asarray(a) for a in args]).shape, self.value) if s.ndim else self.value

    def to_dict(self):
        return {"type": self.kind, "value": self.value}


class RegimeTable(_Builtin):
    kind = "regime"

    def __init__(self, values: Sequence[float]):
        self.values = np.asarray(values, dtype=float)

    def __call__(self, t, i, s):
        return self.values[np.asarray(i)] + 0.0 * np.asarray(s, dtype=float)

    def to_dict(self):
        return {"type": self.kind, "values": self.values.tolist()}


class AffineInS(_Builtin):
    """``a + b * s``; usable as ``mu1(t, i, s)`` or ``sigma1(t, s)``."""

    kind = "affine_s"

    def __init__(self, a: float, b: float):
        self.a, self.b = float(a), float(b)

    def __call__(self, t, *args):
        s = np.asarray(args[-1], dtype=float)
        return self.a + self.b * s + 0.0 * np.asarray(args[0]) if len(args) > 1 else self.a + self.b * s

    def to_dict(self):
        return {"type": self.kind, "a": self.a, "b": self.b}


class AtomRegimeTable(_Builtin):
    """Relative price jump ``K1(k, t, i, s) = values[k][i]``."""

    kind = "regime"

    def __init__(self, values):
        self.values = np.atleast_2d(np.asarray(values, dtype=float))

    def __call__(self, k, t, i, s):
        return self.values[k, np.asarray(i)] + 0.0 * np.asarray(s, dtype=float)

    def to_dict(self):
        return {"type": self.kind, "values": self.values.tolist()}


class AtomConstant(AtomRegimeTable):
    kind = "constant"

    def __init__(self, values):
        self.per_atom = np.asarray(values, dtype=float).ravel()
        super().__init__(self.per_atom[:, None])

    def __call__(self, k, t, i, s):
        return self.per_atom[k] + 0.0 * np.asarray(i) + 0.0 * np.asarray(s, dtype=float)

    def to_dict(self):
        return {"type": self.kind, "values": self.per_atom.tolist()}


class RegimeMap(_Builtin):
    """Regime jump sending ``x_i`` to ``x_{dest[k][i]}`` when atom ``k`` fires."""

    kind = "regime_map"

    def __init__(self, dest, regime_values):
        self.dest = np.atleast_2d(np.asarray(dest, dtype=int))
        self.regime_values = np.asarray(regime_values, dtype=float)

    def __call__(self, k, t, i):
        i = np.asarray(i)
        return self.regime_values[self.dest[k, i]] - self.regime_values[i]

    def to_dict(self):
        return {"type": self.kind, "dest": self.dest.tolist()}


class NoRegimeJump(_Builtin):
    kind = "none"

    def __call__(self, k, t, i):
        return 0.0 * np.asarray(i, dtype=float)

    def to_dict(self):
        return {"type": self.kind}


# payoffs H(T, i, s) ----------------------------------------------------------


class Payoff(_Builtin):
    def __init__(self, regime_values=None):
        self.regime_values = regime_values


class Call(Payoff):
    kind = "call"

    def __init__(self, strike):
        self.strike = float(strike)

    def __call__(self, t, i, s):
        return np.maximum(np.asarray(s, dtype=float) - self.strike, 0.0) + 0.0 * np.asarray(i)

    def to_dict(self):
        return {"type": self.kind, "strike": self.strike}


class Put(Call):
    kind = "put"

    def __call__(self, t, i, s):
        return np.maximum(self.strike - np.asarray(s, dtype=float), 0.0) + 0.0 * np.asarray(i)


class RegimeCall(Payoff):
    kind = "regime_call"

    def __init__(self, strikes):
        self.strikes = np.asarray(strikes, dtype=float)

    def __call__(self, t, i, s):
        return np.maximum(np.asarray(s, dtype=float) - self.strikes[np.asarray(i)], 0.0)

    def to_dict(self):
        return {"type": self.kind, "strikes": self.strikes.tolist()}


class Linear(Payoff):
    """``slope[i] * s + intercept[i]`` (scalars broadcast over regimes)."""

    kind = "linear"

    def __init__(self, slope=1.0, intercept=0.0):
        self.slope = np.atleast_1d(np.asarray(slope, dtype=float))
        self.intercept = np.atleast_1d(np.asarray(intercept, dtype=float))

    def __call__(self, t, i, s):
        i = np.asarray(i)
        a = self.slope[i] if self.slope.size > 1 else self.slope[0]
        b = self.intercept[i] if self.intercept.size > 1 else self.intercept[0]
        return a * np.asarray(s, dtype=float) + b + 0.0 * i

    def to_dict(self):
        sl = self.slope.tolist() if self.slope.size > 1 else float(self.slope[0])
        ic = self.intercept.tolist() if self.intercept.size > 1 else float(self.intercept[0])
        return {"type": self.kind, "slope": sl, "intercept": ic}


class ConstantPayoff(Payoff):
    kind = "constant"

    def __init__(self, value):
        self.value = float(value)

    def __call__(self, t, i, s):
        return self.value + 0.0 * np.asarray(s, dtype=float) + 0.0 * np.asarray(i)

    def to_dict(self):
        return {"type": self.kind, "value": self.value}


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkSpace:
    atoms: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if len(self.atoms) < 1 or len(self.atoms) != w.size:
            raise ModelValidationError("mark space needs m >= 1 atoms with one weight each")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ModelValidationError("mark weights must be positive and finite")

    @property
    def m(self) -> int:
        return len(self.atoms)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True)
class RegimeSet:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.size < 2:
            raise ModelValidationError("need at least two regimes")
        if np.unique(v).size != v.size:
            raise ModelValidationError("regime values must be distinct")

    @property
    def d(self) -> int:
        return self.values.size

    def index_of(self, x, atol=1e-12):
        x = np.asarray(x, dtype=float)
        hit = np.abs(x[..., None] - self.values) <= atol * (1.0 + np.abs(self.values))
        if not np.all(hit.any(axis=-1)):
            raise ModelValidationError(f"value(s) {x[~hit.any(axis=-1)]} not in regime set")
        return hit.argmax(axis=-1)


@dataclass(frozen=True)
class Bounds:
    c1: float = 10.0
    c2: float = 1e-3
    c3: float = 10.0
    c4: float = 10.0


@dataclass(frozen=True)
class CoefficientSet:
    mu1: Callable
    sigma1: Callable
    K0: Callable
    K1: Callable
    bounds: Bounds = field(default_factory=Bounds)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    regimes: RegimeSet
    marks: MarkSpace
    coeffs: CoefficientSet
    x0: float
    s0: float
    T: float
    payoff: Callable
    prior: np.ndarray | None = None
    s_range: tuple | None = None
    name: str = "model"

    def __post_init__(self):
        if not self.s0 > 0:
            raise ModelValidationError("s0 must be positive")
        if not self.T > 0:
            raise ModelValidationError("horizon T must be positive")
        self.regimes.index_of(self.x0)
        p = self.prior
        if p is not None:
            p = np.asarray(p, dtype=float)
            if p.shape != (self.d,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise ModelValidationError("prior must be a probability vector over the regimes")
            object.__setattr__(self, "prior", p)
        if self.s_range is None:
            object.__setattr__(self, "s_range", (self.s0 / 4.0, self.s0 * 4.0))

    @property
    def d(self) -> int:
        return self.regimes.d

    @property
    def m(self) -> int:
        return self.marks.m

    @property
    def eta(self) -> np.ndarray:
        return self.marks.weights

    @property
    def x0_index(self) -> int:
        return int(self.regimes.index_of(self.x0))

    @property
    def initial_law(self) -> np.ndarray:
        """Law of ``X_0``; the point mass at ``x0`` unless a prior was given."""
        if self.prior is not None:
            return self.prior
        p = np.zeros(self.d)
        p[self.x0_index] = 1.0
        return p

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        c = self.coeffs
        try:
            coeffs = {k: getattr(c, k).to_dict() for k in ("mu1", "sigma1", "K0", "K1")}
            payoff = self.payoff.to_dict()
        except AttributeError as exc:
            raise ContractError("only built-in coefficients serialize") from exc
        out = {
            "name": self.name,
            "regimes": self.regimes.values.tolist(),
            "marks": [{"id": a, "weight": float(w)} for a, w in zip(self.marks.atoms, self.eta)],
            "coefficients": coeffs,
            "bounds": {k: getattr(c.bounds, k) for k in ("c1", "c2", "c3", "c4")},
            "x0": self.x0,
            "s0": self.s0,
            "T": self.T,
            "payoff": payoff,
            "s_range": list(self.s_range),
        }
        if self.prior is not None:
            out["prior"] = self.prior.tolist()
        return out

    def replace(self, **changes) -> "ModelSpec":
        kw = {k: getattr(self, k) for k in
              ("regimes", "marks", "coeffs", "x0", "s0", "T", "payoff", "prior", "s_range", "name")}
        kw.update(changes)
        return ModelSpec(**kw)


def _mu_from(desc):
    kind = desc["type"]
    if kind == "constant":
        return Constant(desc["value"])
    if kind == "regime":
        return RegimeTable(desc["values"])
    if kind == "affine_s":
        return AffineInS(desc["a"], desc["b"])
    raise ModelValidationError(f"unknown drift/volatility descriptor {kind!r}")


def _payoff_from(desc):
    kind = desc["type"]
    if kind == "call":
        return Call(desc["strike"])
    if kind == "put":
        return Put(desc["strike"])
    if kind == "regime_call":
        return RegimeCall(desc["strikes"])
    if kind == "linear":
        return Linear(desc.get("slope", 1.0), desc.get("intercept", 0.0))
    if kind == "constant":
        return ConstantPayoff(desc["value"])
    raise ModelValidationError(f"unknown payoff descriptor {kind!r}")


def spec_from_dict(doc: dict) -> ModelSpec:
    try:
        regimes = RegimeSet(doc["regimes"])
        marks = MarkSpace([m["id"] for m in doc["marks"]], [m["weight"] for m in doc["marks"]])
        cd = doc["coefficients"]
        k0 = cd.get("K0", {"type": "none"})
        if k0["type"] == "regime_map":
            K0 = RegimeMap(k0["dest"], regimes.values)
        elif k0["type"] == "none":
            K0 = NoRegimeJump()
        else:
            raise ModelValidationError(f"unknown K0 descriptor {k0['type']!r}")
        k1 = cd["K1"]
        if k1["type"] == "regime":
            K1 = AtomRegimeTable(k1["values"])
        elif k1["type"] == "constant":
            K1 = AtomConstant(k1["values"])
        else:
            raise ModelValidationError(f"unknown K1 descriptor {k1['type']!r}")
        if isinstance(K0, RegimeMap) and K0.dest.shape != (marks.m, regimes.d):
            raise ModelValidationError("K0 dest table must be m x d")
        if K1.values.shape not in ((marks.m, regimes.d), (marks.m, 1)):
            raise ModelValidationError("K1 table must be m x d")
        bounds = Bounds(**doc.get("bounds", {}))
        coeffs = CoefficientSet(_mu_from(cd["mu1"]), _mu_from(cd["sigma1"]), K0, K1, bounds)
        return ModelSpec(
            regimes=regimes,
            marks=marks,
            coeffs=coeffs,
            x0=float(doc["x0"]),
            s0=float(doc["s0"]),
            T=float(doc["T"]),
            payoff=_payoff_from(doc["payoff"]),
            prior=doc.get("prior"),
            s_range=tuple(doc["s_range"]) if "s_range" in doc else None,
            name=doc.get("name", "model"),
        )
    except KeyError as exc:
        raise ModelValidationError(f"missing field {exc.args[0]!r} in model document") from exc


def load_spec(path) -> ModelSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# vectorized coefficient snapshots
# ---------------------------------------------------------------------------


@dataclass
class Snapshot:
    """All coefficients at time ``t`` for a vector of prices ``s`` (shape (N,))."""

    s: np.ndarray
    mu: np.ndarray  # (N, d)
    sigma: np.ndarray  # (N,)
    k1: np.ndarray  # (N, m, d)
    dest: np.ndarray  # (m, d) regime index after atom k fires from regime j
    eta: np.ndarray  # (m,)

    @property
    def z(self) -> np.ndarray:
        return self.s[:, None, None] * self.k1

    @property
    def alpha_f(self) -> np.ndarray:
        """Mean-variance tradeoff density alpha^F at each regime, (N, d)."""
        z = self.z
        num = self.s[:, None] * self.mu + np.einsum("nkd,k->nd", z, self.eta)
        den = (self.s * self.sigma)[:, None] ** 2 + np.einsum("nkd,k->nd", z * z, self.eta)
        return num / den

    @property
    def eta_star(self) -> np.ndarray:
        """Atom rates under the minimal martingale measure, (N, m, d)."""
        return (1.0 - self.alpha_f[:, None, :] * self.z) * self.eta[None, :, None]

    def rates(self, measure: str) -> np.ndarray:
        if measure == "P":
            return np.broadcast_to(self.eta[None, :, None], self.k1.shape).copy()
        return self.eta_star

    def observable(self) -> np.ndarray:
        return self.k1 != 0.0


def destinations(spec: ModelSpec, t: float) -> np.ndarray:
    d, m = spec.d, spec.m
    idx = np.arange(d)
    vals = spec.regimes.values
    dest = np.empty((m, d), dtype=int)
    for k in range(m):
        jump = np.broadcast_to(np.asarray(spec.coeffs.K0(k, t, idx), dtype=float), (d,))
        dest[k] = spec.regimes.index_of(vals + jump, atol=1e-9)
    return dest


def snapshot(spec: ModelSpec, t: float, s) -> Snapshot:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n, d, m = s.size, spec.d, spec.m
    c = spec.coeffs
    mu = np.empty((n, d))
    k1 = np.empty((n, m, d))
    for i in range(d):
        mu[:, i] = np.broadcast_to(c.mu1(t, i, s), (n,))
        for k in range(m):
            k1[:, k, i] = np.broadcast_to(c.K1(k, t, i, s), (n,))
    sigma = np.broadcast_to(np.asarray(c.sigma1(t, s), dtype=float), (n,)).copy()
    return Snapshot(s=s, mu=mu, sigma=sigma, k1=k1, dest=destinations(spec, t), eta=spec.eta)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    worst_value: float | None = None
    worst_point: dict | None = None
    message: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "worst_value": self.worst_value,
                "worst_point": self.worst_point, "message": self.message}


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {"schema": "pohedge.validation/1", "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


def evaluation_grid(spec: ModelSpec, grid_density: int):
    ts = np.linspace(0.0, spec.T, grid_density)
    ss = np.geomspace(spec.s_range[0], spec.s_range[1], grid_density)
    return ts, ss


def _worst(name, values, ok, ts, ss, spec, msg, lower_is_worse=False):
    """Reduce a (n_t, n_s, ...) array of a constraint value to a Check."""
    vals = np.asarray(values, dtype=float)
    flat = vals.reshape(vals.shape[0], vals.shape[1], -1)
    pos = np.unravel_index(np.argmin(flat) if lower_is_worse else np.argmax(flat), flat.shape)
    point = {"t": float(ts[pos[0]]), "s": float(ss[pos[1]])}
    if vals.ndim == 3:
        point["x"] = float(spec.regimes.values[pos[2]])
    elif vals.ndim == 4:
        k, i = np.unravel_index(pos[2], vals.shape[2:])
        point["atom"] = str(spec.marks.atoms[k])
        point["x"] = float(spec.regimes.values[i])
    return Check(name, bool(np.all(ok)), float(flat[pos]), point, "" if np.all(ok) else msg)


def validate_model(spec: ModelSpec, grid_density: int = 9) -> ValidationReport:
    """Check the standing assumptions on a dense ``[0,T] x [s_min,s_max] x regimes`` grid."""
    ts, ss = evaluation_grid(spec, grid_density)
    b = spec.coeffs.bounds
    snaps = [snapshot(spec, t, ss) for t in ts]
    mu = np.stack([sn.mu for sn in snaps])
    sig = np.stack([sn.sigma for sn in snaps])
    k1 = np.stack([sn.k1 for sn in snaps])
    for label, arr in (("mu1", mu), ("sigma1", sig), ("K1", k1)):
        if not np.all(np.isfinite(arr)):
            raise ModelValidationError(f"non-finite {label} value on the validation grid")
    pay = np.stack([np.stack([spec.payoff(spec.T, i, ss) for i in range(spec.d)], axis=-1)] * 1)
    if not np.all(np.isfinite(pay)):
        raise ModelValidationError("non-finite payoff value on the validation grid")

    checks = []
    checks.append(_worst("mu1 < c1", mu, mu < b.c1, ts, ss, spec, f"drift bound c1={b.c1} violated"))
    checks.append(Check("c2 > 0", b.c2 > 0, b.c2, None, "" if b.c2 > 0 else "c2 must be positive"))
    checks.append(_worst("sigma1 > c2", sig, sig > b.c2, ts, ss, spec,
                         f"volatility lower bound c2={b.c2} violated", lower_is_worse=True))
    checks.append(_worst("sigma1 < c3", sig, sig < b.c3, ts, ss, spec, f"volatility upper bound c3={b.c3} violated"))
    checks.append(_worst("K1 < c4", k1, k1 < b.c4, ts, ss, spec, f"jump bound c4={b.c4} violated"))
    checks.append(_worst("1 + K1 > 0", 1 + k1, 1 + k1 > 0, ts, ss, spec, "1 + K1 > 0 violated",
                         lower_is_worse=True))
    closure_ok, bad = True, ""
    for t in ts:
        try:
            destinations(spec, t)
        except ModelValidationError as exc:
            closure_ok, bad = False, f"K0 leaves the regime set at t={t:g}: {exc}"
            break
    checks.append(Check("regime closure", closure_ok, None, None, bad))
    intensity = np.einsum("tnkd,k->tnd", (k1 != 0).astype(float), spec.eta)
    if np.any(k1 != 0):
        checks.append(_worst("eta(D_t) > 0", intensity, intensity > 0, ts, ss, spec,
                             "observable jump intensity is not strictly positive", lower_is_worse=True))
    else:
        # continuous prices: no jump observation enters the filter
        checks.append(Check("eta(D_t) > 0", True, 0.0, None, "vacuous: K1 is identically zero"))
    pmax = float(np.max(np.abs(pay)))
    checks.append(Check("payoff bounded", bool(np.isfinite(pmax)), pmax, None, ""))
    from .mmm import admissibility_check

    checks.extend(admissibility_check(spec, grid_density).checks)
    return ValidationReport(checks)


_VALIDATED: "weakref.WeakKeyDictionary[ModelSpec, ValidationReport]" = weakref.WeakKeyDictionary()


def require_valid(spec: ModelSpec, grid_density: int = 9) -> ValidationReport:
    rep = _VALIDATED.get(spec)
    if rep is None:
        rep = validate_model(spec, grid_density)
        _VALIDATED[spec] = rep
    if not rep.passed:
        names = ", ".join(c.name for c in rep.failed())
        raise ModelValidationError(f"spec failed validation: {names}", rep)
    return rep


# ---------------------------------------------------------------------------
# Levy kernel
# ---------------------------------------------------------------------------


@dataclass
class LevyKernel:
    """Compensator of the price-jump measure at a single state ``(t, x, s)``."""

    atoms: tuple
    z: np.ndarray
    destination: np.ndarray
    rate: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.z != 0.0)

    @property
    def intensity(self) -> float:
        return float(self.rate[self.active].sum())

    def nu(self, lo: float, hi: float) -> float:
        """``nu^F((lo, hi])`` with the origin removed."""
        sel = (self.z > lo) & (self.z <= hi) & (self.z != 0.0)
        return float(self.rate[sel].sum())

    def grouped(self) -> dict:
        out: dict = {}
        for k in self.active:
            key = float(self.z[k])
            out[key] = out.get(key, 0.0) + float(self.rate[k])
        return out


def levy_kernel(spec: ModelSpec, t: float, x: float, s: float, measure: str = "P") -> LevyKernel:
    i = int(spec.regimes.index_of(x))
    sn = snapshot(spec, t, [s])
    rates = sn.rates(measure)[0, :, i]
    return LevyKernel(spec.marks.atoms, sn.z[0, :, i].copy(),
                      spec.regimes.values[sn.dest[:, i]], rates.copy())


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@dataclass
class TestFunction:
    """Test function with the partial derivatives a generator needs.

    Pair functions have signature ``(t, i, s)``; full-state functions take an
    extra simplex argument ``p`` (1-d array of length d).  ``dp`` returns the
    gradient in ``p``, ``dpp`` the Hessian and ``dsp`` the mixed ``s``/``p``
    derivatives.
    """

    __test__ = False  # not a pytest class

    value: Callable
    dt: Callable | None = None
    ds: Callable | None = None
    dss: Callable | None = None
    dp: Callable | None = None
    dpp: Callable | None = None
    dsp: Callable | None = None


_NEEDS = {
    "P_pair": ("dt", "ds", "dss"),
    "Pstar_pair": ("dt", "ds", "dss"),
    "Pstar_full": ("dt", "ds", "dss", "dp", "dpp", "dsp"),
}


def apply_generator(spec: ModelSpec, which: str, f: TestFunction, point: Sequence) -> float:
    """Apply one of the three Markov generators to ``f`` at ``point``.

    ``point`` is ``(t, x, s)`` for the pair generators and ``(t, x, s, p)`` for
    ``Pstar_full``; ``x`` is a regime value.
    """
    if which not in _NEEDS:
        raise ContractError(f"unknown generator {which!r}")
    missing = [n for n in _NEEDS[which] if getattr(f, n) is None]
    if missing:
        raise ContractError(f"test function lacks derivative callbacks: {missing}")
    if which == "Pstar_full":
        t, x, s, p = point
        p = np.asarray(p, dtype=float)
    else:
        t, x, s = point
    i = int(spec.regimes.index_of(x))
    sn = snapshot(spec, t, [s])
    sig = float(sn.sigma[0])
    k1 = sn.k1[0, :, i]
    dest = sn.dest[:, i]

    if which != "Pstar_full":
        base = f.value(t, i, s)
        out = f.dt(t, i, s) + 0.5 * sig**2 * s**2 * f.dss(t, i, s)
        rates = sn.rates("P" if which == "P_pair" else "Pstar")[0, :, i]
        jumps = sum(rates[k] * (f.value(t, dest[k], s * (1 + k1[k])) - base) for k in range(spec.m))
        if which == "P_pair":
            return float(out + sn.mu[0, i] * s * f.ds(t, i, s) + jumps)
        return float(out + jumps - f.ds(t, i, s) * s * np.dot(k1, rates))

    # full (X, S, pi) generator under P*; pi is the P-filter
    from .filtering import filter_coefficients, jump_update

    base = f.value(t, i, s, p)
    fc = filter_coefficients(spec, t, np.array([s]), p[None, :], "P")
    gamma = fc.gain[0]
    drift = fc.drift[0]  # b_i - int w_i nu^H(dz)
    mu = sn.mu[0]
    alpha = sn.alpha_f[0, i]
    ell = (mu[i] - mu @ p) / sig - s * sig * alpha
    dp = np.asarray(f.dp(t, i, s, p))
    out = f.dt(t, i, s, p)
    out += ell * gamma @ dp + drift @ dp
    out += 0.5 * sig**2 * s**2 * f.dss(t, i, s, p)
    out += sig * s * gamma @ np.asarray(f.dsp(t, i, s, p))
    out += 0.5 * gamma @ np.asarray(f.dpp(t, i, s, p)) @ gamma
    eta_star = sn.eta_star[0, :, i]
    for k in range(spec.m):
        if k1[k] != 0.0:
            z = s * k1[k]
            p_new = jump_update(spec, p[None, :], t, np.array([s]), np.array([z]), "P")[0]
        else:
            p_new = p
        out += eta_star[k] * (f.value(t, dest[k], s * (1 + k1[k]), p_new) - base)
    out -= f.ds(t, i, s, p) * s * np.dot(k1, eta_star)
    return float(out)


def scenario_path(name: str) -> Path:
    return Path(__file__).parent / "scenarios" / f"{name}.json"


def load_scenario(name: str) -> ModelSpec:
    return load_spec(scenario_path(name))


def isclose_rel(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


__all__ = [
    "MarkSpace", "RegimeSet", "Bounds", "CoefficientSet", "ModelSpec", "LevyKernel", "Snapshot",
    "ValidationReport", "TestFunction", "validate_model", "require_valid", "levy_kernel",
    "apply_generator", "snapshot", "spec_from_dict", "load_spec", "load_scenario",
    "Constant", "RegimeTable", "AffineInS", "AtomRegimeTable", "AtomConstant", "RegimeMap",
    "NoRegimeJump", "Call", "Put", "RegimeCall", "Linear", "ConstantPayoff",
]

_ = math  # keep import for callers doing scalar work
