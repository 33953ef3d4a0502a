"""Discrete DPI (AggreVaTeD-VI) and the CPI baseline on tabular MDPs.

Both algorithms share model estimation, cost-sensitive classification and the
conservative mixture update; they differ only in whose disadvantage supplies
the cost vectors (the trust-region expert eta_n for DPI, pi_n itself for CPI).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from dpi.dual import DEFAULT_MU_BOUNDS, DualState, dual_update_bracket
from dpi.errors import NonConvergenceError
from dpi.mdp import (TabularMdp, TabularPolicy, discounted_visitation, evaluate_exact,
                     greedy_policy, solve_linear, tv_per_state)

LOG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    counts: np.ndarray  # [S, A, S] int
    start_counts: np.ndarray  # [S] int
    states: np.ndarray  # every state visited by the rollouts, in visit order
    num_episodes: int

    @cached_property
    def visited(self) -> np.ndarray:
        return self.counts.sum(axis=2) > 0

    @cached_property
    def p_hat(self) -> np.ndarray:
        """Count-normalized MLE; unvisited (s, a) pairs self-loop."""
        S, A, _ = self.counts.shape
        totals = self.counts.sum(axis=2, keepdims=True)
        p = np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)
        s_idx, a_idx = np.nonzero(~self.visited)
        p[s_idx, a_idx, s_idx] = 1.0
        return p

    @cached_property
    def sparse_p_hat(self) -> sp.csr_matrix:
        S, A, _ = self.counts.shape
        return sp.csr_matrix(self.p_hat.reshape(S * A, S))

    @cached_property
    def rho_hat(self) -> np.ndarray:
        return self.start_counts / self.start_counts.sum()

    def as_mdp(self, costs: np.ndarray, gamma: float) -> TabularMdp:
        return TabularMdp(self.p_hat, costs, self.rho_hat, gamma)


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum rows end at exactly 1.0, so the index never runs past the last entry
    return (u[:, None] > cum).sum(axis=1)


def estimate_model(mdp: TabularMdp, policy: TabularPolicy, num_episodes: int, horizon: int,
                   seed: int) -> EmpiricalModel:
    """Roll out ``policy`` and count (s, a, s') transitions.

    Episode k draws all of its randomness from its own stream seeded by
    (seed, k), so results do not depend on how episodes are batched.
    """
    if num_episodes < 1 or horizon < 1:
        raise ValueError("num_episodes and horizon must be >= 1")
    S, A = mdp.num_states, mdp.num_actions
    cum_rho = np.cumsum(mdp.rho0)
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_P = np.cumsum(mdp.transitions, axis=2)
    cum_rho[-1] = cum_pi[:, -1] = cum_P[:, :, -1] = 1.0

    draws = np.stack([np.random.default_rng([seed, k]).random((horizon + 1, 2))
                      for k in range(num_episodes)])  # [K, H+1, 2]
    s = _inverse_cdf(cum_rho, draws[:, 0, 0])
    start_counts = np.bincount(s, minlength=S)
    visits = np.empty((horizon, num_episodes), dtype=int)
    acts = np.empty_like(visits)
    nexts = np.empty_like(visits)
    for t in range(horizon):
        a = _inverse_cdf(cum_pi[s], draws[:, t + 1, 0])
        s_next = _inverse_cdf(cum_P[s, a], draws[:, t + 1, 1])
        visits[t], acts[t], nexts[t] = s, a, s_next
        s = s_next
    flat = (visits.ravel() * A + acts.ravel()) * S + nexts.ravel()
    counts = np.bincount(flat, minlength=S * A * S).reshape(S, A, S)
    return EmpiricalModel(counts, start_counts, visits.T.ravel(), num_episodes)


def _softmin(q: np.ndarray, tau: float) -> np.ndarray:
    if tau == 0.0:
        return q.min(axis=1)
    m = q.min(axis=1)
    return m - tau * np.log(np.exp(-(q - m[:, None]) / tau).sum(axis=1))


def _soft_greedy(q: np.ndarray, v: np.ndarray, tau: float) -> np.ndarray:
    if tau == 0.0:
        return greedy_policy(q).probs
    eta = np.exp(-(q - v[:, None]) / tau)
    return eta / eta.sum(axis=1, keepdims=True)


def soft_value_iteration(model: EmpiricalModel, surrogate_cost: np.ndarray, gamma: float,
                         tol: float = 1e-8, temperature: float = 1.0,
                         v_init: np.ndarray | None = None, max_iters: int = 10**4):
    """Entropy-regularized (softmin-backup) value iteration under the estimated model.

    Solves V(s) = -tau log sum_a exp(-(c'(s,a) + gamma <p_hat(s,a), V>) / tau)
    to a sup-norm residual <= tol and returns (eta, q, v) with
    eta(a|s) = exp(-(Q(s,a) - V(s)) / tau). ``temperature=0`` is hard VI.

    Between residual checks the iterate jumps to the exact (soft) value of
    the current greedy policy, i.e. policy iteration; the fixed point is the
    same as plain sweeps but it is reached in a handful of linear solves.
    """
    S, A = surrogate_cost.shape
    P = model.sparse_p_hat
    tau = float(temperature)
    v = np.zeros(S) if v_init is None else np.array(v_init, dtype=float)
    collapse = sp.kron(sp.eye(S), np.ones((1, A)), format="csr")
    eye = sp.eye(S, format="csr")

    def backup(v):
        q = surrogate_cost + gamma * (P @ v).reshape(S, A)
        return q, _softmin(q, tau)

    residual = np.inf
    for _ in range(max_iters):
        q, v_next = backup(v)
        residual = float(np.max(np.abs(v_next - v)))
        if residual <= tol:
            break
        eta = _soft_greedy(q, v_next, tau)
        entropy_cost = tau * np.where(eta > 0, eta * np.log(np.maximum(eta, 1e-300)), 0.0)
        c_eta = (eta * surrogate_cost + entropy_cost).sum(axis=1)
        P_eta = collapse @ (sp.diags(eta.ravel()) @ P)
        v_eval = solve_linear(eye - gamma * P_eta, c_eta)
        # keep plain sweeps as the fallback if the solve misbehaves
        v = v_eval if np.all(np.isfinite(v_eval)) else v_next
    else:
        raise NonConvergenceError(f"soft value iteration did not converge in {max_iters} steps",
                                  residual)
    return TabularPolicy(_soft_greedy(q, v_next, tau)), q, v_next


def surrogate_cost(costs: np.ndarray, mu: float, pi_n: TabularPolicy) -> np.ndarray:
    """c'(s, a) = c(s, a) / mu - log pi_n(a|s), with pi_n floored inside the log."""
    return costs / mu - np.log(np.maximum(pi_n.probs, LOG_FLOOR))


def kl_per_state(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise D_KL(p || q) with 0 log 0 = 0 and q floored."""
    ratio = np.log(np.maximum(p, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR))
    return np.where(p > 0, p * ratio, 0.0).sum(axis=1)


def dual_search_discrete(mdp: TabularMdp, model: EmpiricalModel, pi_n: TabularPolicy,
                         alpha: float, mu_bounds=DEFAULT_MU_BOUNDS, mu_init: float | None = None,
                         tol: float = 1e-6, solver: str = "soft"):
    """Trust-region expert: soft VI on c' under p_hat with mu bracketed on the KL.

    The KL is E_{s ~ d_hat}[D_KL(eta(.|s) || pi_n(.|s))] with d_hat the
    visitation of pi_n under the estimated model from the empirical start
    distribution.
    """
    if solver not in ("soft", "hard"):
        raise ValueError(f"unknown solver {solver!r}")
    S, A = mdp.num_states, mdp.num_actions
    P_pi = sp.kron(sp.eye(S), np.ones((1, A))) @ (sp.diags(pi_n.probs.ravel()) @ model.sparse_p_hat)
    d_hat = discounted_visitation(P_pi.tocsr(), model.rho_hat, mdp.gamma)
    temperature = 1.0 if solver == "soft" else 0.0
    warm = {"v": None}

    def solve(mu):
        c_prime = surrogate_cost(mdp.costs, mu, pi_n)
        v_init = warm["v"]
        eta, _, v = soft_value_iteration(model, c_prime, mdp.gamma, tol=tol,
                                         temperature=temperature, v_init=v_init)
        warm["v"] = v
        return eta, float(d_hat @ kl_per_state(eta.probs, pi_n.probs))

    return dual_update_bracket(solve, alpha, mu_bounds, mu_init=mu_init)


def binary_features(state_index, num_states: int) -> np.ndarray:
    """ceil(log2 S) bits of the state id, least significant first, then a bias of 1.

    Accepts a scalar or an array of indices (rows of features).
    """
    idx = np.asarray(state_index)
    if np.any(idx < 0) or np.any(idx >= num_states):
        raise ValueError(f"state index out of range for {num_states} states")
    bits = math.ceil(math.log2(num_states)) if num_states > 1 else 0
    out = ((idx[..., None] >> np.arange(bits)) & 1).astype(float)
    return np.concatenate([out, np.ones(idx.shape + (1,))], axis=-1)


@dataclass(frozen=True, eq=False)
class CsoaaClassifier:
    weights: np.ndarray  # [A, d + 1]
    num_states: int

    def predict_costs(self, states) -> np.ndarray:
        return binary_features(states, self.num_states) @ self.weights.T

    def predict(self, states, tie_tol: float = 1e-12) -> np.ndarray:
        """Argmin action; costs within tie_tol (relative) of the minimum tie to the lowest index."""
        costs = self.predict_costs(states)
        best = costs.min(axis=-1, keepdims=True)
        scale = np.maximum(1.0, np.abs(costs).max(axis=-1, keepdims=True))
        return np.argmax(costs <= best + tie_tol * scale, axis=-1)


def csoaa_fit(states, cost_vectors, ridge: float, num_states: int) -> CsoaaClassifier:
    """Per-action ridge regression of cost vectors on binary state features."""
    states = np.asarray(states)
    Y = np.asarray(cost_vectors, dtype=float)
    if states.size == 0:
        raise ValueError("csoaa_fit needs at least one sample")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    X = binary_features(states, num_states)
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    if ridge == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise np.linalg.LinAlgError("normal equations are singular; use ridge > 0")
    W = np.linalg.solve(gram, X.T @ Y)
    return CsoaaClassifier(W.T, num_states)


def conservative_update(pi_n: TabularPolicy, classifier: CsoaaClassifier, beta: float) -> TabularPolicy:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    S, A = pi_n.probs.shape
    greedy = np.zeros((S, A))
    greedy[np.arange(S), classifier.predict(np.arange(S))] = 1.0
    return TabularPolicy((1.0 - beta) * pi_n.probs + beta * greedy)


@dataclass
class DiscreteConfig:
    alpha: float = 0.05
    beta: float = 0.01
    episodes: int = 20
    horizon: int = 100
    seed: int = 0
    ridge: float = 1e-3
    mu_bounds: tuple = DEFAULT_MU_BOUNDS
    solver: str = "soft"
    advantage_cost: str = "original"
    vi_tol: float = 1e-6


@dataclass
class IterationMetrics:
    j_pi: float
    j_eta: float
    kl: float
    mu: float
    solves: int
    bracket_limit: bool
    episodes: int
    extra: dict = field(default_factory=dict)


def _imitation_step(mdp, pi_n, model, teacher: TabularPolicy, teacher_costs, config):
    """Cost vectors from the teacher's disadvantage under p_hat, then CSOAA + mixture."""
    adv = evaluate_exact(model.as_mdp(teacher_costs, mdp.gamma), teacher).adv
    clf = csoaa_fit(model.states, adv[model.states], config.ridge, mdp.num_states)
    return conservative_update(pi_n, clf, config.beta)


def dpi_discrete_iteration(mdp: TabularMdp, pi_n: TabularPolicy, config: DiscreteConfig,
                           iteration: int = 0, mu_init: float | None = None):
    """One AggreVaTeD-VI iteration. Returns (pi_next, eta_n, metrics, dual_state).

    ``alpha == 0`` is the collapsed trust region: the expert is pi_n itself
    and the iteration coincides with CPI.
    """
    model = estimate_model(mdp, pi_n, config.episodes, config.horizon,
                           seed=_iteration_seed(config.seed, iteration))
    if config.alpha == 0:
        eta, dual = pi_n, DualState(math.inf, math.inf, math.inf, 0.0, 0.0, 0)
    else:
        eta, dual = dual_search_discrete(mdp, model, pi_n, config.alpha, config.mu_bounds,
                                         mu_init=mu_init, tol=config.vi_tol, solver=config.solver)
    if config.advantage_cost == "original":
        teacher_costs = mdp.costs
    elif config.advantage_cost == "surrogate":
        teacher_costs = surrogate_cost(mdp.costs, dual.mu, pi_n) if math.isfinite(dual.mu) else mdp.costs
    else:
        raise ValueError(f"unknown advantage_cost {config.advantage_cost!r}")
    pi_next = _imitation_step(mdp, pi_n, model, eta, teacher_costs, config)
    metrics = IterationMetrics(
        j_pi=evaluate_exact(mdp, pi_n).j, j_eta=evaluate_exact(mdp, eta).j,
        kl=dual.kl_measured, mu=dual.mu, solves=dual.solves,
        bracket_limit=dual.bracket_limit, episodes=config.episodes)
    return pi_next, eta, metrics, dual


def cpi_iteration(mdp: TabularMdp, pi_n: TabularPolicy, config: DiscreteConfig, iteration: int = 0):
    """One CPI iteration: identical pipeline with A^{pi_n} as the cost vectors."""
    model = estimate_model(mdp, pi_n, config.episodes, config.horizon,
                           seed=_iteration_seed(config.seed, iteration))
    pi_next = _imitation_step(mdp, pi_n, model, pi_n, mdp.costs, config)
    j = evaluate_exact(mdp, pi_n).j
    metrics = IterationMetrics(j_pi=j, j_eta=j, kl=0.0, mu=math.inf, solves=0,
                               bracket_limit=False, episodes=config.episodes)
    return pi_next, metrics


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Brute-force check of the two-trust-region improvement bound on tiny MDPs
# ---------------------------------------------------------------------------

def simplex_grid(num_actions: int, step: float) -> np.ndarray:
    n = round(1.0 / step)
    if not math.isclose(n * step, 1.0):
        raise ValueError("grid step must divide 1")
    rows = [c for c in itertools.product(range(n + 1), repeat=num_actions - 1) if sum(c) <= n]
    pts = np.array([list(c) + [n - sum(c)] for c in rows], dtype=float) / n
    return pts


def _evaluate_many(mdp: TabularMdp, policies: np.ndarray):
    """Exact V, J and d for a stack of policies [N, S, A] (tiny MDPs only)."""
    S = mdp.num_states
    P_pi = np.einsum("nsa,sat->nst", policies, mdp.transitions)
    c_pi = np.einsum("nsa,sa->ns", policies, mdp.costs)
    M = np.eye(S) - mdp.gamma * P_pi
    v = np.linalg.solve(M, c_pi[..., None])[..., 0]
    d = (1 - mdp.gamma) * np.linalg.solve(np.swapaxes(M, 1, 2), np.broadcast_to(mdp.rho0, c_pi.shape)[..., None])[..., 0]
    return v, v @ mdp.rho0, d


@dataclass
class Theorem2Result:
    lhs: float
    rhs_bound: float
    delta_alpha: float
    A_n: float
    epsilon: float
    proof_bound: float  # 2 beta eps / (1-g)^2 + A_n / (1-g) - Delta, as the proof derives it
    eta: TabularPolicy
    pi_next: TabularPolicy


def theorem2_check(tiny_mdp: TabularMdp, pi_n: TabularPolicy, alpha: float, beta: float,
                   grid_resolution: float = 0.05) -> Theorem2Result:
    """Brute-force both trust-region problems over a policy grid under the true model.

    eta_n minimizes J subject to E_{d_pi_n} TV(eta, pi_n) <= alpha; pi_{n+1}
    minimizes E_{d_pi_n} E_pi A^{eta_n} subject to the same constraint at
    beta. pi_n is always a candidate, so both problems are feasible.
    """
    S, A = tiny_mdp.num_states, tiny_mdp.num_actions
    if S > 4 or A > 3:
        raise ValueError("theorem2_check is brute force; use S <= 4 and A <= 3")
    pts = simplex_grid(A, grid_resolution)
    combos = np.array(list(itertools.product(range(len(pts)), repeat=S)))
    grid = np.concatenate([pi_n.probs[None], pts[combos]])  # pi_n first wins ties

    ev_n = evaluate_exact(tiny_mdp, pi_n)
    tv = (ev_n.d * tv_per_state(grid, pi_n.probs[None])).sum(axis=1)

    _, j_all, _ = _evaluate_many(tiny_mdp, grid)
    feas_eta = tv <= alpha + 1e-12
    i_eta = int(np.flatnonzero(feas_eta)[np.argmin(j_all[feas_eta])])
    eta = TabularPolicy(grid[i_eta])
    delta = ev_n.j - j_all[i_eta]

    adv_eta = evaluate_exact(tiny_mdp, eta).adv
    surrogate = np.einsum("s,nsa,sa->n", ev_n.d, grid, adv_eta)
    feas_pi = tv <= beta + 1e-12
    i_pi = int(np.flatnonzero(feas_pi)[np.argmin(surrogate[feas_pi])])
    pi_next = TabularPolicy(grid[i_pi])

    A_n = float(surrogate[i_pi])
    eps = float(np.max(np.abs(np.einsum("sa,sa->s", grid[i_pi], adv_eta))))
    g = tiny_mdp.gamma
    lhs = float(j_all[i_pi] - ev_n.j)
    rhs = beta * eps / (1 - g) ** 2 - abs(A_n) / (1 - g) - delta
    proof = 2 * beta * eps / (1 - g) ** 2 + A_n / (1 - g) - delta
    return Theorem2Result(lhs, float(rhs), float(delta), A_n, eps, float(proof), eta, pi_next)
