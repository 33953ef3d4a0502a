"""Trust-region expert for the continuous track: maximum-entropy LQR.

Quadratics are stored as f(z) = 0.5 z^T M z + m^T z + m0. For Q-functions z
stacks (s, a); value functions act on s alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from dpi.errors import NumericalError
from dpi.local_model import LinearGaussianDynamics
from dpi.policy import GaussianPolicy, gaussian_kl

PD_REG_START = 1e-6
PD_REG_MAX_DOUBLINGS = 60


@dataclass(frozen=True, eq=False)
class QuadraticCostModel:
    C: np.ndarray  # [T, ds+da, ds+da]
    g: np.ndarray  # [T, ds+da]
    k: np.ndarray  # [T]
    state_dim: int

    def __call__(self, t: int, s, a) -> np.ndarray:
        z = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
        return 0.5 * np.einsum("ni,ij,nj->n", z, self.C[t], z) + z @ self.g[t] + self.k[t]

    @property
    def horizon(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True, eq=False)
class TimeVaryingLinearGaussianPolicy:
    """eta_t(a|s) = N(K[t] s + k[t], P[t])."""
    K: np.ndarray  # [T, da, ds]
    k: np.ndarray  # [T, da]
    P: np.ndarray  # [T, da, da]
    policy_id: str = "tvlg"

    @property
    def state_dim(self) -> int:
        return self.K.shape[2]

    @property
    def action_dim(self) -> int:
        return self.K.shape[1]

    def mean(self, t: int, s) -> np.ndarray:
        return np.asarray(s) @ self.K[t].T + self.k[t]

    def act(self, s, t: int, noise=None) -> np.ndarray:
        m = self.mean(t, s)
        return m if noise is None else m + noise @ np.linalg.cholesky(self.P[t]).T

    def to_json(self) -> str:
        return json.dumps({"K": self.K.tolist(), "k": self.k.tolist(), "P": self.P.tolist()})


@dataclass(frozen=True, eq=False)
class QuadraticValueChain:
    Vss: np.ndarray  # [T+1, ds, ds]
    vs: np.ndarray  # [T+1, ds]
    v0: np.ndarray  # [T+1]
    Qzz: np.ndarray  # [T, ds+da, ds+da]
    qz: np.ndarray  # [T]
    q0: np.ndarray  # [T]
    state_dim: int
    pd_reg: np.ndarray  # [T] regularizer added to the action block

    def value(self, t: int, s) -> np.ndarray:
        s = np.atleast_2d(s)
        return 0.5 * np.einsum("ni,ij,nj->n", s, self.Vss[t], s) + s @ self.vs[t] + self.v0[t]

    def q(self, t: int, s, a) -> np.ndarray:
        z = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
        return 0.5 * np.einsum("ni,ij,nj->n", z, self.Qzz[t], z) + z @ self.qz[t] + self.q0[t]

    def advantage(self, t: int, s, a) -> np.ndarray:
        return self.q(t, s, a) - self.value(t, s)

    def grad_a_q(self, t: int, s, a) -> np.ndarray:
        ds = self.state_dim
        z = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)
        return (z @ self.Qzz[t].T + self.qz[t])[:, ds:]


def env_cost_quadratic(Q, R, target, mu: float = 1.0):
    """(s - s*)^T Q (s - s*) + a^T R a, divided by mu, as (C, g, k) on z = (s, a)."""
    Q, R, target = (np.asarray(x, dtype=float) for x in (Q, R, target))
    ds, da = Q.shape[0], R.shape[0]
    C = np.zeros((ds + da, ds + da))
    C[:ds, :ds] = 2.0 * Q
    C[ds:, ds:] = 2.0 * R
    g = np.concatenate([-2.0 * Q @ target, np.zeros(da)])
    return C / mu, g / mu, float(target @ Q @ target) / mu


def build_surrogate_cost(Q, R, target, mu: float, pi_n: GaussianPolicy, batch,
                         horizon: int | None = None, include_cost: bool = True,
                         include_log_prob: bool = True) -> QuadraticCostModel:
    """Quadratic model of c / mu - log pi_n(a|s) for each timestep.

    The policy mean is linearized at the batch-mean state of timestep t,
    which makes the model exact for a linear-mean policy.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    ds, da = pi_n.state_dim, pi_n.action_dim
    T = batch.horizon if horizon is None else horizon
    C0, g0, k0 = env_cost_quadratic(Q, R, target, mu)
    cov = pi_n.covariance
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("policy covariance is singular") from exc
    S_inv = np.linalg.inv(cov)
    logdet_term = 0.5 * np.linalg.slogdet(2.0 * np.pi * cov)[1]
    s_bar = masked_state_means(batch.states, batch.mask)
    C = np.zeros((T, ds + da, ds + da))
    g = np.zeros((T, ds + da))
    k = np.zeros(T)
    for t in range(T):
        if include_cost:
            C[t] += C0
            g[t] += g0
            k[t] += k0
        if include_log_prob:
            J = pi_n.mean_jacobian(s_bar[t])
            offset = pi_n.mean(s_bar[t][None])[0] - J @ s_bar[t]
            M = np.hstack([-J, np.eye(da)])
            C[t] += M.T @ S_inv @ M
            g[t] -= M.T @ S_inv @ offset
            k[t] += 0.5 * offset @ S_inv @ offset + logdet_term
    return QuadraticCostModel(C, g, k, ds)


def masked_state_means(states, mask) -> np.ndarray:
    """Per-timestep mean of the usable states; timesteps with none reuse the last anchor."""
    K, T, ds = states.shape
    out = np.zeros((T, ds))
    last = states[:, 0].mean(axis=0)
    for t in range(T):
        if mask[:, t].any():
            last = states[mask[:, t], t].mean(axis=0)
        out[t] = last
    return out


def _expected_next_value(F, f, Sigma, Vss, vs, v0, gamma):
    """gamma E[V(F z + f + w)] with w ~ N(0, Sigma), as a quadratic in z."""
    VF = Vss @ F
    M = gamma * F.T @ VF
    m = gamma * (F.T @ (Vss @ f + vs))
    m0 = gamma * (0.5 * f @ Vss @ f + vs @ f + v0 + 0.5 * np.trace(Vss @ Sigma))
    return M, m, m0


def _regularized_cholesky(H: np.ndarray, t: int):
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    reg = PD_REG_START
    eye = np.eye(H.shape[0])
    for _ in range(PD_REG_MAX_DOUBLINGS):
        try:
            return np.linalg.cholesky(H + reg * eye), reg
        except np.linalg.LinAlgError:
            reg *= 2.0
    raise NumericalError(f"action curvature at timestep {t} is not positive definite after regularization")


def soft_lqr_backward(dynamics: LinearGaussianDynamics, cost: QuadraticCostModel, gamma: float,
                      temperature: float = 1.0):
    """Discounted maximum-entropy LQR by backward dynamic programming.

    Q_t = c'_t + gamma E[V_{t+1}], V_{T} = 0. The policy mean minimizes Q_t in
    a, its covariance is temperature * H^{-1} with H the action curvature,
    and V_t is the soft minimum -temperature log int exp(-Q_t / temperature) da.
    Gains do not depend on the temperature.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    T, ds, da = dynamics.horizon, dynamics.state_dim, dynamics.action_dim
    if cost.horizon < T:
        raise ValueError("cost model is shorter than the dynamics horizon")
    K = np.zeros((T, da, ds))
    kk = np.zeros((T, da))
    P = np.zeros((T, da, da))
    Vss = np.zeros((T + 1, ds, ds))
    vs = np.zeros((T + 1, ds))
    v0 = np.zeros(T + 1)
    Qzz = np.zeros((T, ds + da, ds + da))
    qz = np.zeros((T, ds + da))
    q0 = np.zeros(T)
    regs = np.zeros(T)
    for t in range(T - 1, -1, -1):
        F = np.hstack([dynamics.A[t], dynamics.B[t]])
        M, m, m0 = _expected_next_value(F, dynamics.c[t], dynamics.Sigma[t], Vss[t + 1], vs[t + 1],
                                        v0[t + 1], gamma)
        Qt = cost.C[t] + M
        Qt = 0.5 * (Qt + Qt.T)
        qt = cost.g[t] + m
        Qzz[t], qz[t], q0[t] = Qt, qt, cost.k[t] + m0
        Q_ss, Q_sa, Q_aa = Qt[:ds, :ds], Qt[:ds, ds:], Qt[ds:, ds:]
        q_s, q_a = qt[:ds], qt[ds:]
        L, regs[t] = _regularized_cholesky(Q_aa, t)
        H_inv = np.linalg.inv(L @ L.T)
        K[t] = -H_inv @ Q_sa.T
        kk[t] = -H_inv @ q_a
        P[t] = temperature * 0.5 * (H_inv + H_inv.T)
        # value of the regularized mean policy under the true Q
        Vt = Q_ss + K[t].T @ Q_aa @ K[t] + K[t].T @ Q_sa.T + Q_sa @ K[t]
        Vss[t] = 0.5 * (Vt + Vt.T)
        vs[t] = q_s + K[t].T @ Q_aa @ kk[t] + K[t].T @ q_a + Q_sa @ kk[t]
        q_min = 0.5 * kk[t] @ Q_aa @ kk[t] + q_a @ kk[t] + q0[t]
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        # soft minimum: min_a Q - (temperature / 2) log det(2 pi temperature H^{-1})
        v0[t] = q_min - 0.5 * temperature * (da * np.log(2.0 * np.pi * temperature) - logdet)
    eta = TimeVaryingLinearGaussianPolicy(K, kk, P)
    chain = QuadraticValueChain(Vss, vs, v0, Qzz, qz, q0, ds, regs)
    return eta, chain


def evaluate_linear_policy(dynamics: LinearGaussianDynamics, cost: QuadraticCostModel, gamma: float,
                           K, k, P) -> QuadraticValueChain:
    """Exact Q and V of the linear-Gaussian policy N(K_t s + k_t, P_t) (no entropy term)."""
    T, ds, da = dynamics.horizon, dynamics.state_dim, dynamics.action_dim
    Vss = np.zeros((T + 1, ds, ds))
    vs = np.zeros((T + 1, ds))
    v0 = np.zeros(T + 1)
    Qzz = np.zeros((T, ds + da, ds + da))
    qz = np.zeros((T, ds + da))
    q0 = np.zeros(T)
    for t in range(T - 1, -1, -1):
        F = np.hstack([dynamics.A[t], dynamics.B[t]])
        M, m, m0 = _expected_next_value(F, dynamics.c[t], dynamics.Sigma[t], Vss[t + 1], vs[t + 1],
                                        v0[t + 1], gamma)
        Qt = cost.C[t] + M
        Qzz[t], qz[t], q0[t] = 0.5 * (Qt + Qt.T), cost.g[t] + m, cost.k[t] + m0
        # V(s) = E_a Q(s, a) with a = K s + k + noise
        G = np.vstack([np.eye(ds), K[t]])  # z = G s + (0, k)
        h = np.concatenate([np.zeros(ds), k[t]])
        Vt = G.T @ Qzz[t] @ G
        Vss[t] = 0.5 * (Vt + Vt.T)
        vs[t] = G.T @ (Qzz[t] @ h + qz[t])
        v0[t] = 0.5 * h @ Qzz[t] @ h + qz[t] @ h + q0[t] + 0.5 * np.trace(Qzz[t][ds:, ds:] @ P[t])
    return QuadraticValueChain(Vss, vs, v0, Qzz, qz, q0, ds, np.zeros(T))


def expected_kl(eta: TimeVaryingLinearGaussianPolicy, pi_n: GaussianPolicy, states, gamma: float,
                mask=None) -> float:
    """Discount-weighted mean of KL(eta_t(.|s) || pi_n(.|s)) over batch states [K, T, ds].

    Each state at timestep t carries weight gamma^t; the weights are
    normalized so the result is an average KL per state.
    """
    states = np.asarray(states, dtype=float)
    K_eps, T, ds = states.shape
    if ds != eta.state_dim or ds != pi_n.state_dim or eta.action_dim != pi_n.action_dim:
        raise ValueError("dimension mismatch between expert, policy and states")
    mask = np.ones((K_eps, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    cov_pi = pi_n.covariance
    w = gamma ** np.arange(T)
    total, norm = 0.0, 0.0
    for t in range(T):
        s = states[mask[:, t], t]
        if s.shape[0] == 0:
            continue
        kl = gaussian_kl(eta.mean(t, s), eta.P[t], pi_n.mean(s), cov_pi)
        total += w[t] * kl.sum()
        norm += w[t] * s.shape[0]
    if norm == 0.0:
        raise ValueError("no usable states for the KL estimate")
    return float(total / norm)


def riccati_gains(A, B, Q, R, horizon: int, gamma: float = 1.0, N=None) -> np.ndarray:
    """Finite-horizon discrete Riccati recursion for sum gamma^t (s^T Q s + 2 s^T N a + a^T R a).

    Returns gains K_t (a = K_t s), t = 0..horizon-1.
    """
    A, B, Q, R = (np.asarray(x, dtype=float) for x in (A, B, Q, R))
    N = np.zeros((A.shape[0], B.shape[1])) if N is None else np.asarray(N, dtype=float)
    P = np.zeros_like(A)
    gains = []
    for _ in range(horizon):
        S = R + gamma * B.T @ P @ B
        L = N.T + gamma * B.T @ P @ A
        Kt = -np.linalg.solve(S, L)
        P = Q + gamma * A.T @ P @ A + L.T @ Kt
        P = 0.5 * (P + P.T)
        gains.append(Kt)
    return np.array(gains[::-1])
