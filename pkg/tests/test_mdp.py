import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpi.harness import random_mdp, random_policy
from dpi.mdp import (TabularMdp, TabularPolicy, discounted_visitation, evaluate_exact,
                     exact_value_iteration, expectation_switch_check, garnet_generate, pdl_gap,
                     policy_matrices, solve_linear, visitation_tv_bound_check)


def brute_force_values(mdp, policy, sweeps=5000):
    """Oracle: iterate the Bellman expectation operator with dense arrays."""
    P = np.einsum("sa,sat->st", policy.probs, mdp.transitions)
    c = np.einsum("sa,sa->s", policy.probs, mdp.costs)
    v = np.zeros(mdp.num_states)
    for _ in range(sweeps):
        v = c + mdp.gamma * P @ v
    return v


def test_garnet_full_scale_branching():
    mdp = garnet_generate(7, 1000, 5, 2)
    assert mdp.transitions.shape == (1000, 5, 1000)
    assert np.all((mdp.transitions > 0).sum(axis=2) == 2)
    assert np.all((mdp.costs >= 0) & (mdp.costs <= 1))


def test_garnet_single_state():
    mdp = garnet_generate(0, 1, 1, 1)
    assert mdp.transitions[0, 0, 0] == 1.0


def test_garnet_determinism():
    a, b = garnet_generate(3, 40, 3, 2), garnet_generate(3, 40, 3, 2)
    assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.costs, b.costs)
    assert not np.array_equal(a.costs, garnet_generate(4, 40, 3, 2).costs)


def test_garnet_rejects_bad_branching():
    with pytest.raises(ValueError):
        garnet_generate(0, 3, 2, 4)


def test_mdp_validation():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(ValueError):
        TabularMdp(P * 1.1, np.zeros((2, 1)), np.array([0.5, 0.5]), 0.9)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 1)), np.array([0.7, 0.7]), 0.9)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 1)), np.array([0.5, 0.5]), 1.0)


def test_constant_cost_value():
    mdp = garnet_generate(1, 20, 3, 2, gamma=0.9)
    mdp = TabularMdp(mdp.transitions, np.full((20, 3), 2.5), mdp.rho0, 0.9)
    ev = evaluate_exact(mdp, TabularPolicy.uniform(20, 3))
    assert np.allclose(ev.v, 25.0, atol=1e-10)


def test_two_state_cycle_visitation():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    mdp = TabularMdp(P, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.5)
    ev = evaluate_exact(mdp, TabularPolicy.uniform(2, 1))
    assert np.allclose(ev.d, [2 / 3, 1 / 3], atol=1e-12)


def test_evaluate_matches_brute_force_and_bellman():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, 15, 3, 0.9)
    pi = random_policy(rng, 15, 3)
    ev = evaluate_exact(mdp, pi)
    assert np.allclose(ev.v, brute_force_values(mdp, pi), atol=1e-9)
    P_pi, c_pi = policy_matrices(mdp, pi)
    assert np.max(np.abs(ev.v - (c_pi + mdp.gamma * P_pi @ ev.v))) <= 1e-10


def test_evaluate_matches_monte_carlo():
    mdp = garnet_generate(5, 50, 4, 2, gamma=0.9)
    pi = random_policy(np.random.default_rng(1), 50, 4)
    j = evaluate_exact(mdp, pi).j
    rng = np.random.default_rng(2)
    n, horizon = 100_000, 200
    cum_P = np.cumsum(mdp.transitions, axis=2)
    cum_pi = np.cumsum(pi.probs, axis=1)
    s = rng.integers(0, 50, size=n)
    total = np.zeros(n)
    for t in range(horizon):
        a = (rng.random(n)[:, None] > cum_pi[s]).sum(axis=1).clip(max=3)
        total += mdp.gamma**t * mdp.costs[s, a]
        s = (rng.random(n)[:, None] > cum_P[s, a]).sum(axis=1).clip(max=49)
    se = total.std() / np.sqrt(n)
    assert abs(total.mean() - j) <= 3 * se + mdp.gamma**horizon / (1 - mdp.gamma)


def test_sparse_iterative_solver_matches_dense():
    mdp = garnet_generate(2, 400, 3, 2, gamma=0.99)
    P_pi, c_pi = policy_matrices(mdp, TabularPolicy.uniform(400, 3))
    import scipy.sparse as sp
    M = sp.eye(400) - 0.99 * P_pi
    assert np.allclose(solve_linear(M, c_pi), np.linalg.solve(M.toarray(), c_pi), atol=1e-8)


def test_visitation_is_distribution():
    mdp = garnet_generate(2, 30, 3, 2, gamma=0.95)
    P_pi, _ = policy_matrices(mdp, TabularPolicy.uniform(30, 3))
    d = discounted_visitation(P_pi, mdp.rho0, mdp.gamma)
    assert abs(d.sum() - 1) < 1e-12 and np.all(d >= -1e-15)


def test_pdl_identical_policies():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, 10, 3, 0.9)
    pi = random_policy(rng, 10, 3)
    lhs, rhs = pdl_gap(mdp, pi, pi)
    assert abs(lhs) < 1e-12 and abs(rhs) < 1e-10


def test_pdl_against_optimal_is_nonnegative():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, 20, 3, 0.9)
    _, pi_star = exact_value_iteration(mdp, tol=1e-12)
    lhs, rhs = pdl_gap(mdp, random_policy(rng, 20, 3), pi_star)
    assert rhs >= -1e-10 and abs(lhs - rhs) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), S=st.integers(1, 20), A=st.integers(1, 4),
       gamma=st.floats(0.0, 0.99))
def test_pdl_identity_property(seed, S, A, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, gamma)
    lhs, rhs = pdl_gap(mdp, random_policy(rng, S, A), random_policy(rng, S, A))
    assert abs(lhs - rhs) <= 1e-8


def test_visitation_bound_identical():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, 8, 2, 0.9)
    pi = random_policy(rng, 8, 2)
    tv_d, alpha, bound = visitation_tv_bound_check(mdp, pi, pi)
    assert tv_d < 1e-12 and alpha == 0


def test_visitation_bound_single_state_difference():
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng, 6, 2, 0.8)
    pi1 = TabularPolicy.deterministic(np.zeros(6, dtype=int), 2)
    actions = np.zeros(6, dtype=int)
    actions[2] = 1
    pi2 = TabularPolicy.deterministic(actions, 2)
    tv_d, alpha, bound = visitation_tv_bound_check(mdp, pi1, pi2)
    p = evaluate_exact(mdp, pi1).d[2]
    assert alpha == pytest.approx(p, abs=1e-14)
    assert bound == pytest.approx(2 * p / 0.2, rel=1e-12)
    assert tv_d <= bound


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), S=st.integers(1, 20), A=st.integers(1, 4),
       gamma=st.floats(0.0, 0.99))
def test_visitation_bound_property(seed, S, A, gamma):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A, gamma)
    tv_d, _, bound = visitation_tv_bound_check(mdp, random_policy(rng, S, A), random_policy(rng, S, A))
    assert tv_d <= bound + 1e-10


def test_expectation_switch_cases():
    p = np.array([0.2, 0.8])
    assert expectation_switch_check(p, p, [1.0, -3.0])[0] == 0.0
    diff, bound = expectation_switch_check([1.0, 0.0], [0.0, 1.0], [1.5, -1.5])
    assert diff == bound == 3.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 12), scale=st.floats(1e-3, 1e3))
def test_expectation_switch_property(seed, n, scale):
    rng = np.random.default_rng(seed)
    diff, bound = expectation_switch_check(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n)),
                                           scale * rng.standard_normal(n))
    assert diff <= bound


def test_value_iteration_gamma_zero():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, 5, 3, 0.0)
    q, _ = exact_value_iteration(mdp)
    assert np.array_equal(q, mdp.costs)


def test_value_iteration_single_state():
    mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[0.3, 0.7]]), np.ones(1), 0.9)
    q, greedy = exact_value_iteration(mdp, tol=1e-12)
    assert q.min() == pytest.approx(3.0, abs=1e-10)
    assert greedy.probs[0, 0] == 1.0


def test_value_iteration_beats_random_policies():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, 100, 3, 0.9)
    _, greedy = exact_value_iteration(mdp, tol=1e-10)
    j_star = evaluate_exact(mdp, greedy).j
    for _ in range(1000):
        assert j_star <= evaluate_exact(mdp, random_policy(rng, 100, 3)).j + 1e-9


def test_value_iteration_contraction():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng, 30, 3, 0.8)
    S, A = 30, 3
    q = mdp.costs.copy()
    prev = None
    for _ in range(30):
        q_next = mdp.costs + mdp.gamma * (mdp.transitions @ q.min(axis=1))
        res = np.max(np.abs(q_next - q))
        if prev is not None and prev > 1e-12:
            assert res <= mdp.gamma * prev + 1e-12
        prev, q = res, q_next
