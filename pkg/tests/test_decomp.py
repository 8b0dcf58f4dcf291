import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pohedge.decomp import (HedgeReport, continuous_case_integrand, hedge_arrays, hedge_integrand, hedge_series,
                            martingale_increments, residual_paths, tree_comparison)
from pohedge.errors import ContractError
from pohedge.filtering import filter_ensemble
from pohedge.simulate import simulate_ensemble
from pohedge.valuefn import AnalyticG, LatticeG

from conftest import NO_JUMPS

STOCK = {"type": "linear", "slope": [1.0, 1.0], "intercept": 0.0}
CASH = {"type": "linear", "slope": [0.0, 0.0], "intercept": 5.0}


def stock_g(spec):
    return AnalyticG(spec, lambda t, i, s, p: s, lambda t, i, s, p: 1.0, lambda t, i, s, p: np.zeros(spec.d))


def cash_g(spec):
    return AnalyticG(spec, lambda t, i, s, p: 5.0, lambda t, i, s, p: 0.0, lambda t, i, s, p: np.zeros(spec.d))


@settings(max_examples=25, deadline=None)
@given(s=st.floats(40.0, 250.0), a=st.floats(0.01, 0.99), b=st.floats(0.01, 0.99), jumps=st.booleans())
def test_stock_is_hedged_one_for_one(make_spec, s, a, b, jumps):
    spec = make_spec(payoff=STOCK) if jumps else make_spec(payoff=STOCK, K1=NO_JUMPS)
    out = hedge_arrays(spec, stock_g(spec), 0.2, [s], [[a, 1 - a]], [[b, 1 - b]])
    assert out.H_H[0] == pytest.approx(1.0, abs=1e-12)
    assert out.phi_H[0] == pytest.approx(0.0, abs=1e-12)
    assert out.beta_H_alt[0] == pytest.approx(1.0, abs=1e-12)


def test_cash_needs_no_hedge(make_spec):
    spec = make_spec(payoff=CASH)
    tr = hedge_integrand(spec, cash_g(spec), 0.0, 100.0, [0.5, 0.5], [0.4, 0.6])
    assert tr.beta_H == pytest.approx(0.0, abs=1e-12)


def test_continuous_case_matches_general_formula(make_spec):
    spec = make_spec(payoff={"type": "call", "strike": 100.0}, K1=NO_JUMPS)
    g = LatticeG(spec, 4)
    pi, pis = np.array([[0.3, 0.7]]), np.array([[0.35, 0.65]])
    a = continuous_case_integrand(spec, g, 0.25, [100.0], pis, pi)
    b = hedge_arrays(spec, g, 0.25, [100.0], pi, pis)
    # the general formula also carries the P*-filter gain term, which vanishes without jumps
    assert a[0] == pytest.approx(b.beta_H[0], rel=1e-10)


def test_continuous_case_contracts(small, make_spec):
    with pytest.raises(ContractError):
        continuous_case_integrand(small, stock_g(small), 0.0, [100.0], [[0.5, 0.5]])
    spec = make_spec(K1=NO_JUMPS)
    with pytest.raises(ContractError):
        continuous_case_integrand(spec, stock_g(spec), 0.0, [100.0], [[0.5, 0.5]])


def run_stock(spec, n_paths=20, n_steps=8):
    ens = simulate_ensemble(spec, n_steps, "P", n_paths, 4)
    pi = filter_ensemble(spec, ens, "P").pi
    pis = filter_ensemble(spec, ens, "Pstar").pi
    g = stock_g(spec)
    hedge = hedge_series(spec, g, ens.t, ens.S, pi, pis)
    return ens, pi, pis, hedge, residual_paths(spec, g, ens.t, ens.S, ens.x_idx, pi, pis, hedge)


def test_residual_identity(make_spec):
    ens, pi, pis, hedge, res = run_stock(make_spec(payoff=STOCK))
    assert hedge.beta_H.shape == (20, 8)
    assert np.allclose(res.A_T, 0.0, atol=1e-9)
    assert np.allclose(res.G, 0.0, atol=1e-9)
    assert np.allclose(res.U0, 100.0)


def test_martingale_increments_are_centered(small):
    ens = simulate_ensemble(small, 16, "P", 4000, 6)
    dM = martingale_increments(small, ens.t, ens.S, ens.x_idx)
    se = dM.std(axis=0) / np.sqrt(dM.shape[0])
    assert np.all(np.abs(dM.mean(axis=0)) < 4.5 * se)


def test_report_csv_and_summary(make_spec):
    ens, pi, pis, hedge, res = run_stock(make_spec(payoff=STOCK), n_paths=3, n_steps=4)
    rep = HedgeReport(ens.t, ens.S, pi, pis, hedge, res)
    lines = rep.path_csv(1).split("\r\n")
    assert lines[0] == "t,S,pi_1,pi_2,pistar_1,pistar_2,H_H,phi_H,beta_H,V_H,G"
    assert len(lines) == 7 and lines[5].count(",,,") == 1
    summ = rep.summary()
    assert summ["n_paths"] == 3 and summ["A_T_mean"] == pytest.approx(0.0, abs=1e-9)


def test_tree_comparison_for_stock(make_spec):
    out = tree_comparison(make_spec(payoff=STOCK), 3)
    assert out["beta_H"] == pytest.approx(1.0, abs=1e-6)
    assert out["theta0_projected"] == pytest.approx(1.0, abs=1e-12)
    assert out["oracle_xi_vs_projected_max_gap"] < 1e-12
