"""One test per acceptance criterion, each at its stated tolerance and budget.

Every test prints a PASS/FAIL line (collected again in the terminal summary)
before asserting. The long-running trend checks carry the ``slow`` marker;
they are part of the default run.
"""
import math
import time

import numpy as np
import pytest

from dpi.harness import (ExperimentConfig, check_expectation_switch, check_improvement_bound, check_pdl,
                         check_visitation_bound, episodes_to_threshold, evaluate_policy, garnet_for,
                         lqr_reference_cost, make_env, run_cpi_discrete, run_dpi_continuous, run_dpi_discrete,
                         run_robust)
from dpi.envs import TrajectoryBatch
from dpi.local_model import LinearGaussianDynamics, fit_time_varying_linear, ridge_solve
from dpi.lqr import QuadraticCostModel, env_cost_quadratic, riccati_gains, soft_lqr_backward
from dpi.mdp import evaluate_exact, exact_value_iteration
from dpi.policy import GaussianPolicy, fisher_vector_product, policy_kl

# cartpole settings used by the trend criteria: linear mean, frozen exploration noise
CARTPOLE = dict(arch="linear", learn_std=False, alpha=0.2, beta=0.1, ridge=1e-6, mu_bounds=(1e-3, 1e6))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def test_pdl_identity(acceptance):
    res, secs = timed(check_pdl, 0, instances=200, max_states=50, tol=1e-8)
    ok = res.passed and res.instances == 200 and secs < 10
    acceptance(1, "performance difference identity", ok,
               f"{res.violations}/200 violations, {res.detail}, {secs:.2f}s (budget 10s)")
    assert ok


def test_visitation_bound(acceptance):
    res, secs = timed(check_visitation_bound, 1, instances=200)
    ok = res.passed and res.instances == 200 and secs < 10
    acceptance(2, "visitation TV bound", ok,
               f"{res.violations}/200 violations, worst slack {res.worst_slack:.3e}, {secs:.2f}s (budget 10s)")
    assert ok


def test_expectation_switch(acceptance):
    res, secs = timed(check_expectation_switch, 2, instances=500)
    ok = res.passed and res.instances == 500 and secs < 1
    acceptance(3, "expectation switch bound", ok,
               f"{res.violations}/500 violations, worst slack {res.worst_slack:.3e}, {secs:.3f}s (budget 1s)")
    assert ok


def test_improvement_bound(acceptance):
    res, secs = timed(check_improvement_bound, 3, instances=20, gamma=0.5, grid=0.05)
    ok = res.passed and res.instances == 20 and secs < 300
    acceptance(4, "two-trust-region improvement bound", ok,
               f"{res.violations}/20 violations, {res.detail}, {secs:.1f}s (budget 300s)")
    assert ok


def unrolled_descent(A, B, Q, R, T, gamma, s0, iters=50_000):
    """Accelerated gradient descent on the open-loop action sequence of the deterministic LTI cost."""
    ds, da = B.shape
    Phi = [np.eye(ds)]
    G = [np.zeros((ds, T * da))]
    for t in range(T - 1):
        Phi.append(A @ Phi[-1])
        nxt = A @ G[-1]
        nxt[:, t * da:(t + 1) * da] += B
        G.append(nxt)
    H = np.zeros((T * da, T * da))
    lin = np.zeros(T * da)
    const = 0.0
    for t in range(T):
        w = gamma**t
        H += 2 * w * G[t].T @ Q @ G[t]
        H[t * da:(t + 1) * da, t * da:(t + 1) * da] += 2 * w * R
        lin += 2 * w * G[t].T @ Q @ Phi[t] @ s0
        const += w * s0 @ Phi[t].T @ Q @ Phi[t] @ s0
    step = 1.0 / np.linalg.eigvalsh(H).max()
    u = prev = np.zeros(T * da)
    for k in range(1, iters + 1):
        y = u + (k - 1) / (k + 2) * (u - prev)
        prev, u = u, y - step * (H @ y + lin)
    return 0.5 * u @ H @ u + lin @ u + const


def test_lqr_exactness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    T, worst_gain, worst_cost = 30, 0.0, -math.inf
    for _ in range(10):
        ds, da = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        A = rng.standard_normal((ds, ds))
        A *= 1.05 / max(1.0, np.abs(np.linalg.eigvals(A)).max())
        B = rng.standard_normal((ds, da))
        L = rng.standard_normal((ds, ds))
        Q = L @ L.T / ds + 0.1 * np.eye(ds)
        R = (0.1 + rng.random()) * np.eye(da)
        gamma = float(rng.uniform(0.9, 1.0))
        C, g, k = env_cost_quadratic(Q, R, np.zeros(ds))
        cost = QuadraticCostModel(np.repeat(C[None], T, 0), np.repeat(g[None], T, 0), np.full(T, k), ds)
        dyn = LinearGaussianDynamics.stationary(A, B, np.zeros(ds), np.zeros((ds, ds)), T)
        eta, chain = soft_lqr_backward(dyn, cost, gamma, temperature=1e-14)
        worst_gain = max(worst_gain, float(np.abs(eta.K - riccati_gains(A, B, Q, R, T, gamma)).max()))
        s0 = rng.standard_normal(ds)
        worst_cost = max(worst_cost, float(chain.value(0, s0)[0] - unrolled_descent(A, B, Q, R, T, gamma, s0)))
    secs = time.perf_counter() - t0
    ok = worst_gain <= 1e-8 and worst_cost <= 1e-6 and secs < 30
    acceptance(5, "LQR exactness", ok, f"max gain error {worst_gain:.2e}, max (LQR - descent) cost "
               f"{worst_cost:.2e}, {secs:.1f}s (budget 30s)")
    assert ok


def test_ridge_exactness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        N, d, m = int(rng.integers(3, 80)), int(rng.integers(1, 10)), int(rng.integers(1, 5))
        X, Y = rng.standard_normal((N, d)), rng.standard_normal((N, m))
        lam = 10.0 ** rng.uniform(-6, 1)
        oracle = np.linalg.solve(X.T @ X / N + lam * np.eye(d), X.T @ Y / N)
        worst = max(worst, float(np.abs(ridge_solve(X, Y, lam) - oracle).max()))
    ds, da, T, K = 4, 2, 6, 50
    A, B, c = rng.standard_normal((ds, ds)), rng.standard_normal((ds, da)), rng.standard_normal(ds)
    S, U = rng.standard_normal((K, T, ds)), rng.standard_normal((K, T, da))
    batch = TrajectoryBatch(S, U, S @ A.T + U @ B.T + c, np.zeros((K, T)), 0)
    dyn, _ = fit_time_varying_linear(batch, ridge=1e-8, pool_window=1)
    recovery = max(float(np.abs(dyn.A - A).max()), float(np.abs(dyn.B - B).max()), float(np.abs(dyn.c - c).max()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and recovery <= 1e-6 and secs < 5
    acceptance(6, "ridge fit exactness", ok, f"max normal-equation error {worst:.2e}, "
               f"noiseless recovery error {recovery:.2e}, {secs:.2f}s (budget 5s)")
    assert ok


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_gradient_checks(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_score, worst_emp, worst_kl = 0.0, 0.0, 0.0
    for i in range(50):
        arch = ("linear", "mlp")[i % 2]
        ds, da = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        pol = GaussianPolicy.create(arch, ds, da, seed=i, hidden=8)
        pol = pol.with_theta(0.5 * rng.standard_normal(pol.num_params))
        n = pol.num_params
        s = rng.standard_normal((12, ds))
        a = pol.sample(s, rng)
        eye = np.eye(n)
        # score: central differences of log pi
        h = 1e-5
        fd = np.stack([(pol.with_theta(pol.theta + h * e).log_prob(s, a)
                        - pol.with_theta(pol.theta - h * e).log_prob(s, a)) / (2 * h) for e in eye], axis=1)
        worst_score = max(worst_score, relative_error(pol.grad_log_prob(s, a), fd))
        v = rng.standard_normal(n)
        # empirical Fisher from finite-difference scores
        worst_emp = max(worst_emp, relative_error(fisher_vector_product(pol, s, a, v, damping=0.0),
                                                  fd.T @ (fd @ v) / s.shape[0]))

        # analytic Fisher against the finite-difference Hessian of the mean KL
        def quad(u, hh=1e-4):
            kl = lambda th: policy_kl(pol, pol.with_theta(th), s).mean()
            return (kl(pol.theta + hh * u) + kl(pol.theta - hh * u)) / hh**2

        hv = np.array([(quad(e + v) - quad(e - v)) / 4 for e in eye])
        worst_kl = max(worst_kl, relative_error(fisher_vector_product(pol, s, a, v, 0.0, "analytic"), hv))
    secs = time.perf_counter() - t0
    ok = max(worst_score, worst_emp, worst_kl) <= 1e-3 and secs < 30
    acceptance(7, "gradient checks", ok, f"max rel. error score {worst_score:.1e}, empirical FVP {worst_emp:.1e}, "
               f"KL-Hessian FVP {worst_kl:.1e} over 50 configs, {secs:.1f}s (budget 30s)")
    assert ok


@pytest.mark.slow
def test_dual_bracketing_on_cartpole(acceptance):
    cfg = ExperimentConfig(track="cartpole", iterations=50, **CARTPOLE)
    (rec, _), secs = timed(run_dpi_continuous, cfg, 0)
    rows = rec.rows[:-1]
    kl = np.array([r["kl"] for r in rows])
    flagged = np.array([r["bracket_limit"] for r in rows])
    inside = (kl >= 0.9 * cfg.alpha) & (kl <= 1.1 * cfg.alpha)
    ok_window = bool(np.all(inside | flagged)) and len(rows) == 50
    solves = np.array([r["solves"] for r in rows])
    median_late = float(np.median(solves[10:]))
    ok = ok_window and median_late <= 3 and secs < 300
    acceptance(8, "dual bracketing", ok, f"{int(np.sum(inside | flagged))}/50 iterations in window or flagged "
               f"({int(flagged.sum())} flagged), median solves after iteration 10 = {median_late:g} "
               f"(first 10: {solves[:10].tolist()}), {secs:.0f}s (budget 300s)")
    assert ok


@pytest.mark.slow
def test_garnet_dpi_beats_cpi(acceptance):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(track="tabular").validate()
    dpi_eps, cpi_eps, lines = [], [], []
    for seed in range(10):
        mdp = garnet_for(cfg, seed)
        _, greedy = exact_value_iteration(mdp, tol=1e-10)
        j_star = evaluate_exact(mdp, greedy).j
        dpi, _ = run_dpi_discrete(cfg, seed, mdp=mdp)
        cpi, _ = run_cpi_discrete(cfg, seed, mdp=mdp)
        dpi_eps.append(episodes_to_threshold(dpi, 1.1 * j_star))
        cpi_eps.append(episodes_to_threshold(cpi, 1.1 * j_star))
        lines.append(f"seed {seed}: J* {j_star:.3f}; DPI J {dpi.column('cost_mean')[[0, -1]].round(3).tolist()}; "
                     f"CPI J {cpi.column('cost_mean')[[0, -1]].round(3).tolist()}")
    secs = time.perf_counter() - t0
    med_dpi, med_cpi = float(np.median(dpi_eps)), float(np.median(cpi_eps))
    print("\n".join(lines))
    ok = med_dpi < med_cpi and secs < 1800
    acceptance(9, "Garnet DPI vs CPI episodes to 1.1 J*", ok,
               f"median episodes DPI {med_dpi:g} vs CPI {med_cpi:g} (inf = not reached within "
               f"{cfg.iterations * cfg.episodes} episodes); {lines[0]}; {secs:.0f}s (budget 1800s)")
    assert ok


@pytest.mark.slow
def test_cartpole_reaches_reference(acceptance):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(track="cartpole", iterations=100, episodes=20, **CARTPOLE)
    reached, upright, details = 0, 0, []
    for seed in range(10):
        rec, policy = run_dpi_continuous(cfg, seed)
        env = make_env(cfg.validate(), seed)
        ref = lqr_reference_cost(env)
        eps = episodes_to_threshold(rec, 2 * ref)
        reached += eps <= 2000
        _, _, batch = evaluate_policy(env, policy, 10, seed)
        held = batch.mask.all(axis=1) & np.all(np.abs(batch.states[:, :, 2]) < 0.2, axis=1)
        upright += int(held.sum()) >= 9
        details.append(f"{seed}:{eps:g}ep/{int(held.sum())}up")
    secs = time.perf_counter() - t0
    ok = reached >= 8 and upright == 10 and secs < 1200
    acceptance(10, "cartpole within 2x LQR reference", ok,
               f"{reached}/10 seeds reach 2x reference within 2000 episodes, {upright}/10 final policies upright "
               f"on >=9/10 rollouts [{' '.join(details)}], {secs:.0f}s (budget 1200s)")
    assert ok


@pytest.mark.slow
def test_robust_beats_single_environment(acceptance):
    t0 = time.perf_counter()
    robust_cost, single_cost = [], []
    for seed in range(5):
        for robust, out in ((True, robust_cost), (False, single_cost)):
            cfg = ExperimentConfig(track="robust", iterations=100, robust=robust, num_envs=10, num_test=3,
                                   perturb_scale=0.3, **CARTPOLE)
            rec, _ = run_robust(cfg, seed)
            out.append(rec.rows[-1]["cost_mean"])
            budget = rec.rows[-1]["episodes"]
    secs = time.perf_counter() - t0
    med_r, med_s = float(np.median(robust_cost)), float(np.median(single_cost))
    paired = float(np.median(np.subtract(robust_cost, single_cost)))
    ok = med_r < med_s and secs < 2400
    acceptance(11, "robust vs single-env held-out cost", ok,
               f"median held-out cost robust {med_r:.3f} vs single {med_s:.3f} at {budget} episodes; "
               f"per seed robust {np.round(robust_cost, 3).tolist()} single {np.round(single_cost, 3).tolist()}; "
               f"median paired difference {paired:+.3f}; {secs:.0f}s (budget 2400s)")
    assert ok


def test_alpha_zero_reproduces_cpi(acceptance):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(track="tabular", iterations=50).validate()
    mdp = garnet_for(cfg, 0)
    dpi, dpi_pol = run_dpi_discrete(cfg, 0, alpha=0.0, mdp=mdp)
    cpi, cpi_pol = run_cpi_discrete(cfg, 0, mdp=mdp)
    secs = time.perf_counter() - t0
    same = (len(dpi.rows) == len(cpi.rows)
            and all(np.array_equal(np.array(list(a.values()), dtype=float), np.array(list(b.values()), dtype=float),
                                   equal_nan=True)
                    for a, b in zip(dpi.without_timing(), cpi.without_timing()))
            and np.array_equal(dpi_pol.probs, cpi_pol.probs))
    ok = same and secs < 60
    acceptance(12, "alpha -> 0 reproduces CPI", ok,
               f"{'identical' if same else 'different'} records ({len(dpi.rows)} rows) and policies, "
               f"{secs:.1f}s (budget 60s)")
    assert ok
