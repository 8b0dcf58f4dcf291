import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pohedge.errors import ContractError, ModelValidationError
from pohedge.model import (TestFunction, apply_generator, levy_kernel, snapshot, spec_from_dict,
                           validate_model)

from conftest import NO_JUMPS


def test_round_trip(small):
    again = spec_from_dict(small.to_dict())
    assert again.to_dict() == small.to_dict()


def test_shipped_scenario_validates(small):
    rep = validate_model(small)
    assert rep.passed
    assert rep.to_dict()["schema"] == "pohedge.validation/1"


@pytest.mark.parametrize("path,value,name", [
    (("coefficients", "K1", "values", 0, 0), -1.5, "1 + K1 > 0"),
    (("coefficients", "mu1", "values", 0), 2.0, "mu1 < c1"),
    (("coefficients", "sigma1", "value"), 0.01, "sigma1 > c2"),
    (("coefficients", "sigma1", "value"), 3.0, "sigma1 < c3"),
])
def test_violations_are_named(small_doc, path, value, name):
    doc = copy.deepcopy(small_doc)
    doc["bounds"]["c4"] = 5.0
    node = doc
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    rep = validate_model(spec_from_dict(doc))
    assert not rep.passed
    assert name in [c.name for c in rep.failed()]


def test_missing_field_is_reported(small_doc):
    doc = copy.deepcopy(small_doc)
    del doc["coefficients"]["sigma1"]
    with pytest.raises(ModelValidationError, match="sigma1"):
        spec_from_dict(doc)


def test_bad_prior_rejected(small_doc):
    doc = copy.deepcopy(small_doc)
    doc["prior"] = [0.7, 0.7]
    with pytest.raises(ModelValidationError):
        spec_from_dict(doc)


def test_continuous_prices_validate(make_spec):
    rep = validate_model(make_spec(K1=NO_JUMPS))
    assert rep.passed


def test_levy_kernel_matches_table(small):
    k = levy_kernel(small, 0.0, 0.0, 100.0)
    assert np.allclose(k.z, [-10.0, 8.0])
    assert k.intensity == pytest.approx(0.35)
    assert k.nu(-11, -9) == pytest.approx(0.2)
    k1 = levy_kernel(small, 0.0, 1.0, 100.0)
    assert list(k1.active) == [0]


def test_eta_star_keeps_price_martingale(small):
    sn = snapshot(small, 0.3, np.array([70.0, 100.0, 150.0]))
    drift = sn.s[:, None] * sn.mu + np.einsum("nkd,k->nd", sn.z, sn.eta)
    # under P* the compensated jumps absorb the drift: mu s + sum z eta* = mu s + sum z eta - alpha a = 0
    a = (sn.s * sn.sigma)[:, None] ** 2 + np.einsum("nkd,k->nd", sn.z**2, sn.eta)
    assert np.allclose(drift - sn.alpha_f * a, 0.0)
    assert np.all(sn.eta_star > 0)


def _pair(c):
    return TestFunction(value=lambda t, i, s: c[i] * s, dt=lambda t, i, s: 0.0,
                        ds=lambda t, i, s: c[i], dss=lambda t, i, s: 0.0)


def test_price_is_a_pstar_martingale(small):
    f = _pair([1.0, 1.0])
    for x in (0.0, 1.0):
        assert apply_generator(small, "Pstar_pair", f, (0.2, x, 90.0)) == pytest.approx(0.0, abs=1e-10)


def test_generator_needs_derivatives(small):
    with pytest.raises(ContractError):
        apply_generator(small, "Pstar_full", _pair([1, 1]), (0.0, 0.0, 100.0, [0.5, 0.5]))
    with pytest.raises(ContractError):
        apply_generator(small, "nope", _pair([1, 1]), (0.0, 0.0, 100.0))


@settings(max_examples=25, deadline=None)
@given(mu=st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=2),
       k1=st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=2),
       w=st.floats(0.01, 2.0))
def test_descriptors_round_trip(small_doc, mu, k1, w):
    doc = copy.deepcopy(small_doc)
    doc["coefficients"]["mu1"] = {"type": "regime", "values": mu}
    doc["coefficients"]["K1"] = {"type": "regime", "values": [k1, [0.0, 0.0]]}
    doc["marks"][0]["weight"] = w
    spec = spec_from_dict(doc)
    assert spec_from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    sn = snapshot(spec, 0.0, [100.0])
    assert np.allclose(sn.z[0, 0], 100.0 * np.asarray(k1))
