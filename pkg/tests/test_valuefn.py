import numpy as np
import pytest

from pohedge.errors import GridMismatchError
from pohedge.filtering import filter_path
from pohedge.simulate import simulate_ensemble, simulate_path
from pohedge.valuefn import (LatticeG, fit_g_regression, load_g, monomial_exponents, save_g, solve_g_lattice,
                             terminal_value, training_ensemble, value_process)

from conftest import NO_JUMPS

STOCK = {"type": "linear", "slope": [1.0, 1.0], "intercept": 0.0}
CASH = {"type": "linear", "slope": [0.0, 0.0], "intercept": 5.0}
P = np.array([[0.3, 0.7]])


def test_lattice_constant_claim(make_spec):
    g = LatticeG(make_spec(payoff=CASH), 4)
    assert np.allclose(g.values(0.25, [90.0], P), 5.0)
    assert np.allclose(g.grad_s(0.25, [90.0], P), 0.0, atol=1e-8)
    assert np.allclose(g.grad_p(0.25, [90.0], P), 0.0, atol=1e-8)


def test_lattice_stock_is_martingale(make_spec):
    g = LatticeG(make_spec(payoff=STOCK), 4)
    assert np.allclose(g.values(0.5, [110.0], P), 110.0, rtol=1e-12)
    assert np.allclose(g.grad_s(0.5, [110.0], P), 1.0, atol=1e-6)
    assert np.allclose(g.grad_p(0.5, [110.0], P), 0.0, atol=1e-6)


def test_lattice_terminal_and_grid(small):
    g = solve_g_lattice(small, 4)
    assert np.allclose(g.values(1.0, [80.0], P)[0], terminal_value(small, [80.0], P)[0])
    assert g(1.0, 1.0, 80.0, P[0]) == pytest.approx(80.0 * (0.3 + 0.7 * 0.6))
    with pytest.raises(GridMismatchError):
        g.values(0.3, [80.0], P)


def test_lattice_normalizes_p(small):
    g = LatticeG(small, 3)
    assert np.allclose(g.values(0.0, [100.0], P), g.values(0.0, [100.0], 2 * P))


def test_monomials():
    e = monomial_exponents(2, 2)
    assert e.tolist() == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]


def test_regression_reproduces_stock(make_spec):
    # with the zero-mean controls the claim S_T is fitted exactly by g = s
    spec = make_spec(payoff=STOCK)
    ens, pi = training_ensemble(spec, 8, 400, 3)
    g = fit_g_regression(spec, ens, pi=pi)
    s = np.array([80.0, 100.0, 130.0])
    p = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    for t in (0.25, 0.5, 0.875):
        assert np.allclose(g.values(t, s, p), s[:, None], rtol=1e-8)
        assert np.allclose(g.grad_s(t, s, p), 1.0, atol=1e-8)


def test_regression_needs_pstar(small):
    with pytest.raises(ValueError):
        fit_g_regression(small, simulate_ensemble(small, 4, "P", 10, 0))


def test_training_ensemble(small):
    ens, pi = training_ensemble(small, 4, 300, 9)
    assert ens.measure == "Pstar" and pi.shape == (300, 5, 2)
    assert np.ptp(ens.S[:, 0]) > 10 and np.allclose(pi.sum(axis=2), 1.0)
    again, _ = training_ensemble(small, 4, 300, 9)
    assert np.array_equal(ens.S, again.S)


def test_regression_close_to_lattice(small):
    ens, pi = training_ensemble(small, 4, 4000, 2)
    reg = fit_g_regression(small, ens, pi=pi)
    lat = LatticeG(small, 4)
    s, p = np.array([95.0]), np.array([[0.6, 0.4]])
    assert np.allclose(reg.values(0.5, s, p), lat.values(0.5, s, p), rtol=0.02)


@pytest.mark.parametrize("kind", ["lattice", "regression"])
def test_save_load(tmp_path, small, kind):
    if kind == "lattice":
        g = LatticeG(small, 4)
    else:
        ens, pi = training_ensemble(small, 4, 500, 1)
        g = fit_g_regression(small, ens, pi=pi)
    save_g(g, tmp_path / "g.json")
    back = load_g(tmp_path / "g.json")
    s, p = np.array([90.0, 120.0]), np.array([[0.1, 0.9], [0.5, 0.5]])
    t = 0.25 if kind == "lattice" else 0.5
    assert np.allclose(back.values(t, s, p), g.values(t, s, p), rtol=1e-14)


def test_value_process(make_spec):
    spec = make_spec(payoff=STOCK, K1=NO_JUMPS)
    path = simulate_path(spec, 4, "P", 1)
    g = LatticeG(spec, 4)
    vp = value_process(g, path, filter_path(spec, path, "P"), filter_path(spec, path, "Pstar"))
    assert np.allclose(vp.V, path.S, rtol=1e-12)
    with pytest.raises(GridMismatchError):
        value_process(g, path, filter_path(spec, simulate_path(spec, 8, "P", 1), "P"),
                      filter_path(spec, path, "Pstar"))
