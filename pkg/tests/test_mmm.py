import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pohedge.errors import AdmissibilityError
from pohedge.mmm import (admissibility_check, alpha_F, alpha_H, doleans_density, eta_star, require_admissible,
                         second_moment_flag, structure_quantities)
from pohedge.simulate import simulate_ensemble, simulate_path


def test_alpha_F_by_hand(small):
    # regime 0: mu 0.25, both atoms move the price
    s = 100.0
    num = s * 0.25 + s * (-0.1) * 0.2 + s * 0.08 * 0.15
    den = s**2 * 0.25**2 + (s * 0.1) ** 2 * 0.2 + (s * 0.08) ** 2 * 0.15
    assert alpha_F(small, 0.0, 0.0, s) == pytest.approx(num / den, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(s=st.floats(30.0, 300.0), x=st.sampled_from([0.0, 1.0]))
def test_alpha_H_on_vertex_is_alpha_F(small, s, x):
    p = np.eye(2)[int(x)]
    assert alpha_H(small, 0.3, s, p) == pytest.approx(alpha_F(small, 0.3, x, s), rel=1e-12)


def test_structure_quantities(small):
    q = structure_quantities(small, 0.0, 1.0, 120.0, [0.4, 0.6])
    assert q.alpha_F == pytest.approx(alpha_F(small, 0.0, 1.0, 120.0))
    assert q.alpha_H == pytest.approx(alpha_H(small, 0.0, 120.0, [0.4, 0.6]))
    assert q.a > 0 and q.a_H > 0


def test_eta_star(small):
    a = alpha_F(small, 0.0, 0.0, 100.0)
    assert eta_star(small, 0.0, 0.0, 100.0, "shock") == pytest.approx(0.15 * (1 - a * 8.0), rel=1e-12)
    # the shock atom does not move the price in regime 1
    assert eta_star(small, 0.0, 1.0, 100.0, 1) == pytest.approx(0.15)


def test_inadmissible(make_spec):
    spec = make_spec(mu1={"type": "regime", "values": [0.9, 0.9]},
                     K1={"type": "regime", "values": [[0.9, 0.9], [0.9, 0.9]]})
    rep = admissibility_check(spec)
    assert not rep.passed and rep.failed()[0].worst_value > 1
    with pytest.raises(AdmissibilityError):
        require_admissible(spec)


def test_density_starts_at_one(small):
    L = doleans_density(small, simulate_path(small, 32, "P", 5))
    assert L.L[0] == 1.0 and np.all(L.L > 0)


def test_density_has_unit_mean(small):
    ens = simulate_ensemble(small, 32, "P", 20000, 11)
    L = doleans_density(small, ens).terminal
    se = L.std() / np.sqrt(L.size)
    assert abs(L.mean() - 1.0) < 4 * se


def test_density_reweights_price(small):
    # under the reweighted measure the price has no drift
    ens = simulate_ensemble(small, 32, "P", 20000, 12)
    L = doleans_density(small, ens).terminal
    y = L * ens.S[:, -1] - small.s0
    assert abs(y.mean()) < 4 * y.std() / np.sqrt(y.size)


def test_second_moment_flag():
    out = second_moment_flag(np.ones(10))
    assert out["second_moment"] == 1.0 and not out["heavy_tail_suspected"]
    assert second_moment_flag(np.array([0.0, 100.0]))["heavy_tail_suspected"]
