import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pohedge.errors import StepSizeError
from pohedge.simulate import (MAX_STEP_PROB, read_ensemble, replay, required_steps, simulate_dispersed,
                              simulate_ensemble, simulate_path, step_kernel, write_ensemble)


def test_same_seed_same_ensemble(small):
    a = simulate_ensemble(small, 16, "P", 50, 7)
    b = simulate_ensemble(small, 16, "P", 50, 7)
    assert np.array_equal(a.S, b.S) and np.array_equal(a.atom, b.atom)


def test_single_path_is_ensemble_member(small):
    ens = simulate_ensemble(small, 16, "Pstar", 5, 3)
    p = simulate_path(small, 16, "Pstar", (3, 4))
    assert np.array_equal(p.S, ens.S[4]) and np.array_equal(p.x_idx, ens.x_idx[4])


def test_replay_is_bit_exact(small):
    ens = simulate_ensemble(small, 32, "P", 200, 11)
    S, X = replay(small, ens)
    assert np.array_equal(S, ens.S) and np.array_equal(X, ens.x_idx)


def test_binary_round_trip(small, tmp_path):
    ens = simulate_ensemble(small, 8, "Pstar", 20, 5)
    write_ensemble(ens, tmp_path / "e.bin")
    back = read_ensemble(tmp_path / "e.bin")
    for name in ("t", "x_idx", "S", "dW", "atom", "z"):
        assert np.array_equal(getattr(back, name), getattr(ens, name))
    assert back.measure == "Pstar" and back.atoms == ens.atoms


def test_empty_ensemble(small, tmp_path):
    ens = simulate_ensemble(small, 8, "P", 0, 1)
    assert len(ens) == 0
    write_ensemble(ens, tmp_path / "e.bin")
    assert len(read_ensemble(tmp_path / "e.bin")) == 0


def test_step_size_rule(small):
    n = required_steps(small, "Pstar")
    with pytest.raises(StepSizeError) as exc:
        simulate_ensemble(small, 1, "Pstar", 1, 1)
    assert exc.value.required_steps >= n > 1


def test_jumps_match_atoms(small):
    ens = simulate_ensemble(small, 64, "P", 300, 2)
    fired = ens.atom >= 0
    assert fired.any()
    # observed jump equals S_mid * K1 of the fired atom in the pre-jump regime
    k1 = np.array([[-0.1, -0.1], [0.08, 0.0]])
    rows, cols = np.nonzero(fired)
    s_mid = ens.S[rows, cols + 1] - ens.z[rows, cols]
    expect = s_mid * k1[ens.atom[rows, cols], ens.x_idx[rows, cols]]
    assert np.allclose(ens.z[rows, cols], expect)
    assert np.all(ens.z[~fired] == 0.0)


def test_csv_layout(small):
    p = simulate_path(small, 4, "P", 9)
    lines = p.to_csv().split("\r\n")
    assert lines[0] == "t,X,S,jump,atom,z"
    assert len([ln for ln in lines if ln]) == 6


def test_dispersed_start(small):
    ens = simulate_dispersed(small, 4, "Pstar", 3, 1, [80.0, 100.0, 120.0], [0, 1, 0])
    assert np.array_equal(ens.S[:, 0], [80.0, 100.0, 120.0])
    assert np.array_equal(ens.x_idx[:, 0], [0, 1, 0])


@settings(max_examples=30, deadline=None)
@given(s=st.floats(30.0, 300.0), x=st.integers(0, 1), measure=st.sampled_from(["P", "Pstar"]))
def test_step_probabilities(small, s, x, measure):
    ker = step_kernel(small, 0.0, np.array([s]), np.array([x]), 1.0 / 64, measure)
    assert np.all(ker.probs >= 0)
    assert ker.probs.sum() <= MAX_STEP_PROB


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_prices_stay_positive(small, seed):
    ens = simulate_ensemble(small, 16, "Pstar", 20, seed)
    assert np.all(ens.S > 0)
