"""Exact tabular MDP machinery.

Costs are minimized throughout. ``adv`` is the disadvantage Q - V, so a
negative entry marks an action better than the policy's average.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from dpi.errors import NonConvergenceError, NumericalError

STOCHASTIC_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transitions: np.ndarray  # [S, A, S]
    costs: np.ndarray  # [S, A]
    rho0: np.ndarray  # [S]
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        c = np.asarray(self.costs, dtype=float)
        rho0 = np.asarray(self.rho0, dtype=float)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "rho0", rho0)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] == 0 or P.shape[1] == 0:
            raise ValueError(f"transitions must have shape [S, A, S], got {P.shape}")
        if c.shape != P.shape[:2]:
            raise ValueError(f"costs must have shape {P.shape[:2]}, got {c.shape}")
        if rho0.shape != (P.shape[0],):
            raise ValueError(f"rho0 must have shape ({P.shape[0]},), got {rho0.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > STOCHASTIC_ATOL:
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > STOCHASTIC_ATOL:
            raise ValueError("rho0 must be a probability vector")
        if not np.all(np.isfinite(c)):
            raise ValueError("costs must be finite")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @cached_property
    def sparse_transitions(self) -> sp.csr_matrix:
        """Transitions as a CSR matrix of shape [S*A, S]."""
        S, A = self.num_states, self.num_actions
        return sp.csr_matrix(self.transitions.reshape(S * A, S))

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": float(self.gamma),
            "rho0": self.rho0.tolist(),
            "costs": self.costs.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        mdp = cls(
            transitions=np.array(doc["transitions"], dtype=float),
            costs=np.array(doc["costs"], dtype=float),
            rho0=np.array(doc["rho0"], dtype=float),
            gamma=float(doc["gamma"]),
        )
        if (mdp.num_states, mdp.num_actions) != (doc["num_states"], doc["num_actions"]):
            raise ValueError("declared sizes do not match array shapes")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {p.shape}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
            raise ValueError("policy rows must be probability distributions")

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class ExactEvaluation:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    j: float
    d: np.ndarray


def garnet_generate(seed: int, num_states: int, num_actions: int, branches: int,
                    gamma: float = 0.99) -> TabularMdp:
    """Random Garnet MDP with a fixed branching factor.

    Each (s, a) gets ``branches`` distinct successors drawn without replacement
    and weights from a uniform Dirichlet (sorted-uniform spacings). Costs are
    i.i.d. U[0, 1]; the start distribution is uniform.
    """
    if num_states < 1 or num_actions < 1 or branches < 1:
        raise ValueError("num_states, num_actions and branches must be positive")
    if branches > num_states:
        raise ValueError(f"branches ({branches}) exceeds num_states ({num_states})")
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=branches, replace=False)
            cuts = np.sort(rng.random(branches - 1))
            weights = np.diff(np.concatenate(([0.0], cuts, [1.0])))
            P[s, a, succ] = weights
    costs = rng.random((S, A))
    return TabularMdp(P, costs, np.full(S, 1.0 / S), gamma)


def policy_matrices(mdp: TabularMdp, policy: TabularPolicy):
    """State-to-state transition matrix and expected cost under ``policy``."""
    pi = policy.probs
    if pi.shape != mdp.costs.shape:
        raise ValueError(f"policy shape {pi.shape} does not match MDP {mdp.costs.shape}")
    S, A = pi.shape
    weights = sp.diags(pi.reshape(-1)) @ mdp.sparse_transitions  # [S*A, S]
    P_pi = (sp.kron(sp.eye(S), np.ones((1, A))) @ weights).tocsr()
    c_pi = np.einsum("sa,sa->s", pi, mdp.costs)
    return P_pi, c_pi


DENSE_SOLVE_MAX = 256


def solve_linear(M, b: np.ndarray) -> np.ndarray:
    """Solve M x = b for the well-conditioned (I - gamma P) systems used here.

    Small systems go to LAPACK; large sparse ones to BiCGSTAB (Garnet graphs
    fill in badly under sparse LU), falling back to a dense solve.
    """
    n = b.shape[0]
    x = None
    if n > DENSE_SOLVE_MAX and sp.issparse(M):
        # a breakdown (exact convergence hit mid-step) shows up as a 0/0 in scipy
        with np.errstate(invalid="ignore", divide="ignore"):
            x, info = spla.bicgstab(sp.csr_matrix(M), b, rtol=1e-13, atol=0.0, maxiter=10 * n)
        if info != 0 or not np.all(np.isfinite(x)):
            x = None
    if x is None:
        dense = M.toarray() if sp.issparse(M) else np.asarray(M)
        x = np.linalg.solve(dense, b)
    if not np.all(np.isfinite(x)):
        dense = M.toarray() if sp.issparse(M) else np.asarray(M)
        raise NumericalError(f"linear solve produced non-finite values (cond={np.linalg.cond(dense):.3e})")
    return x


def discounted_visitation(P_pi, rho0: np.ndarray, gamma: float) -> np.ndarray:
    """d = (1 - gamma) * rho0^T (I - gamma P_pi)^{-1}, renormalized."""
    S = rho0.size
    d = (1.0 - gamma) * solve_linear((sp.eye(S) - gamma * P_pi).T, rho0)
    return d / d.sum()


def evaluate_exact(mdp: TabularMdp, policy: TabularPolicy) -> ExactEvaluation:
    P_pi, c_pi = policy_matrices(mdp, policy)
    S, A = mdp.num_states, mdp.num_actions
    v = solve_linear(sp.eye(S) - mdp.gamma * P_pi, c_pi)
    q = mdp.costs + mdp.gamma * (mdp.sparse_transitions @ v).reshape(S, A)
    d = discounted_visitation(P_pi, mdp.rho0, mdp.gamma)
    return ExactEvaluation(v=v, q=q, adv=q - v[:, None], j=float(mdp.rho0 @ v), d=d)


def pdl_gap(mdp: TabularMdp, pi: TabularPolicy, pi_prime: TabularPolicy) -> tuple[float, float]:
    """Both sides of the performance difference identity, computed exactly.

    lhs = J(pi) - J(pi'), rhs = E_{s~d_pi, a~pi}[A^{pi'}(s, a)] / (1 - gamma).
    """
    ev = evaluate_exact(mdp, pi)
    ev_prime = evaluate_exact(mdp, pi_prime)
    lhs = ev.j - ev_prime.j
    rhs = float(ev.d @ np.einsum("sa,sa->s", pi.probs, ev_prime.adv)) / (1.0 - mdp.gamma)
    return lhs, rhs


def tv_per_state(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p1 - p2).sum(axis=-1)


def visitation_tv_bound_check(mdp: TabularMdp, pi1: TabularPolicy, pi2: TabularPolicy):
    """Returns (||d_pi1 - d_pi2||_1, alpha, 2 alpha / (1 - gamma))."""
    d1 = evaluate_exact(mdp, pi1).d
    d2 = evaluate_exact(mdp, pi2).d
    alpha = float(d1 @ tv_per_state(pi1.probs, pi2.probs))
    tv_d = float(np.abs(d1 - d2).sum())
    return tv_d, alpha, 2.0 * alpha / (1.0 - mdp.gamma)


def expectation_switch_check(p, q, f):
    """Returns (|<p, f> - <q, f>|, max|f| * ||p - q||_1)."""
    p, q, f = (np.asarray(x, dtype=float) for x in (p, q, f))
    diff = abs(float((p - q) @ f))
    bound = float(np.max(np.abs(f)) * np.abs(p - q).sum())
    return diff, bound


def greedy_policy(q: np.ndarray) -> TabularPolicy:
    # np.argmin returns the lowest index among exact ties
    return TabularPolicy.deterministic(np.argmin(q, axis=1), q.shape[1])


def exact_value_iteration(mdp: TabularMdp, tol: float = 1e-8, max_iters: int = 10**6):
    """Hard value iteration on Q until the sup-norm Bellman residual is <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A = mdp.num_states, mdp.num_actions
    P = mdp.sparse_transitions
    q = mdp.costs.copy()
    residual = np.inf
    for _ in range(max_iters):
        q_next = mdp.costs + mdp.gamma * (P @ q.min(axis=1)).reshape(S, A)
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        if residual <= tol:
            break
    else:
        raise NonConvergenceError(f"value iteration did not converge in {max_iters} sweeps", residual)
    # q is one sweep past the residual measurement; its own residual is <= gamma * tol
    return q, greedy_policy(q)
