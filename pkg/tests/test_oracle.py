import numpy as np
import pytest

from pohedge.errors import TreeSizeError
from pohedge.oracle import (build_tree, discrete_fs, discrete_fs_weak, estimate_tree_nodes, exact_hmm_filter,
                            one_step_expectation, orthogonality_estimate, tree_value_function)

from conftest import NO_JUMPS

STOCK = {"type": "linear", "slope": [1.0, 1.0], "intercept": 0.0}
CASH = {"type": "linear", "slope": [0.0, 0.0], "intercept": 5.0}


def leaf_probs(tree, measure="P"):
    w = np.ones(1)
    for k in range(tree.depth):
        w = (w[:, None] * tree.branch_probs(k, measure)).ravel()
    return w


@pytest.fixture(scope="module")
def tree3(small):
    return build_tree(small, 8, start_index=5)


def test_branch_probabilities_sum_to_one(tree3):
    for k in range(tree3.depth):
        for m in ("P", "Pstar"):
            assert np.allclose(tree3.branch_probs(k, m).sum(axis=1), 1.0, atol=1e-13)


def test_price_is_a_tree_martingale_under_pstar(tree3):
    w = leaf_probs(tree3, "Pstar")
    assert w @ tree3.leaves.S == pytest.approx(tree3.root.S[0], rel=1e-12)


def test_node_filters_match_exact_posterior(small, tree3):
    # follow one path down the tree and run the exact discrete HMM on it
    rng = np.random.default_rng(0)
    idx, S, z = 0, [tree3.root.S[0]], []
    for k in range(tree3.depth):
        lv = tree3.levels[k]
        b = int(rng.integers(tree3.B))
        child = idx * tree3.B + b
        s_new = tree3.levels[k + 1].S[child]
        cls = b % (1 + len(tree3.classes))
        kappa = 0.0 if cls == 0 else tree3.classes[cls - 1]
        z.append(s_new - s_new / (1 + kappa))
        S.append(s_new)
        idx = child
    t = np.array([lv.t for lv in tree3.levels])
    exact = exact_hmm_filter(small, t, np.array(S)[None], np.array(z)[None], "P", likelihood="binomial")
    assert np.allclose(exact[0, -1], tree3.leaves.pi[idx], atol=1e-10)


def test_constant_payoff_needs_no_hedge(make_spec):
    res = discrete_fs(build_tree(make_spec(payoff=CASH), 3))
    assert res.U0 == pytest.approx(5.0) and all(np.allclose(th, 0.0) for th in res.theta)


def test_holding_the_stock_replicates_it(make_spec):
    tree = build_tree(make_spec(payoff=STOCK), 3)
    for fs in (discrete_fs(tree, "projected"), discrete_fs(tree, "full"), discrete_fs_weak(tree)):
        assert all(np.allclose(th, 1.0, atol=1e-12) for th in fs.theta)
        assert np.max(np.abs(fs.leaf_residual)) < 1e-9
    assert tree_value_function(tree)[0][0, 0] == pytest.approx(100.0, rel=1e-12)


def test_projected_and_full_agree(tree3):
    a, b = discrete_fs(tree3, "projected"), discrete_fs(tree3, "full")
    assert all(np.allclose(x, y, atol=1e-12) for x, y in zip(a.theta, b.theta))


def test_cost_has_zero_mean(tree3):
    res = discrete_fs(tree3)
    assert leaf_probs(tree3) @ res.leaf_residual == pytest.approx(0.0, abs=1e-9)


def test_weak_equals_strong_without_hidden_signal(make_spec):
    spec = make_spec(mu1={"type": "constant", "value": 0.1}, K1=NO_JUMPS,
                     payoff={"type": "linear", "slope": [1.0, 0.6], "intercept": 0.0})
    tree = build_tree(spec, 4)
    a, b = discrete_fs(tree, "full"), discrete_fs_weak(tree)
    assert all(np.allclose(x, y, atol=1e-12) for x, y in zip(a.theta, b.theta))


def test_tree_size_limit(small):
    with pytest.raises(TreeSizeError) as err:
        build_tree(small, 8, max_nodes=1000)
    assert err.value.estimated_nodes == estimate_tree_nodes(6, 8)


def test_one_step_expectation_of_constant(small):
    assert one_step_expectation(small, "P_pair", lambda t, i, s: 2.0, (0.0, 0.0, 100.0), 0.01) == \
        pytest.approx(2.0, abs=1e-12)


def test_orthogonality_estimate():
    out = orthogonality_estimate(np.zeros(5), np.ones((5, 2)))
    assert len(out) == 2 and all(o["passed"] and o["estimate"] == 0.0 for o in out)
    big = orthogonality_estimate(np.ones(100), np.ones(100) + 0.01 * np.arange(100))
    assert not big[0]["passed"]
