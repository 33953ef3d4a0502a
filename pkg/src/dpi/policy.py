"""Gaussian reactive policy and the natural-gradient imitation update.

Gradients are derived by hand. The flat parameter vector is laid out as
  linear: W [da, ds], b [da], log_std [da]
  mlp:    W1 [h, ds], b1 [h], W2 [da, h], b2 [da], log_std [da]
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from dpi.errors import NumericalError

LOG_2PI = np.log(2.0 * np.pi)


def _layout(arch: str, ds: int, da: int, hidden: int):
    if arch == "linear":
        return [("W", (da, ds)), ("b", (da,)), ("log_std", (da,))]
    if arch == "mlp":
        return [("W1", (hidden, ds)), ("b1", (hidden,)), ("W2", (da, hidden)), ("b2", (da,)),
                ("log_std", (da,))]
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """pi(a|s) = N(m(s), diag(exp(2 log_std))), immutable; updates return new objects."""
    arch: str
    state_dim: int
    action_dim: int
    theta: np.ndarray
    hidden: int = 32
    policy_id: str = "gaussian"

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (self.num_params,):
            raise ValueError(f"theta must have {self.num_params} entries, got {theta.shape}")

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in _layout(self.arch, self.state_dim, self.action_dim, self.hidden))

    def unpack(self, theta=None) -> dict:
        theta = self.theta if theta is None else theta
        out, pos = {}, 0
        for name, shape in _layout(self.arch, self.state_dim, self.action_dim, self.hidden):
            n = int(np.prod(shape))
            out[name] = theta[pos:pos + n].reshape(shape)
            pos += n
        return out

    @classmethod
    def create(cls, arch: str, state_dim: int, action_dim: int, seed: int = 0, hidden: int = 32,
               init_std: float = 1.0, init_scale: float = 0.0) -> "GaussianPolicy":
        """Random hidden layer (variance 1/ds), output layer scaled by ``init_scale``."""
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in _layout(arch, state_dim, action_dim, hidden):
            if name == "log_std":
                parts.append(np.full(shape, np.log(init_std)))
            elif name == "W1":
                parts.append(rng.standard_normal(shape) / np.sqrt(state_dim))
            elif name in ("W", "W2"):
                parts.append(init_scale * rng.standard_normal(shape) / np.sqrt(shape[1]))
            else:
                parts.append(np.zeros(shape))
        return cls(arch, state_dim, action_dim, np.concatenate([p.ravel() for p in parts]), hidden)

    def with_theta(self, theta) -> "GaussianPolicy":
        return GaussianPolicy(self.arch, self.state_dim, self.action_dim, theta, self.hidden, self.policy_id)

    @property
    def log_std(self) -> np.ndarray:
        return self.theta[-self.action_dim:]

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(np.exp(2.0 * self.log_std))

    # mean function and its derivatives
    def _forward(self, s):
        p = self.unpack()
        if self.arch == "linear":
            return s @ p["W"].T + p["b"], None
        h = np.tanh(s @ p["W1"].T + p["b1"])
        return h @ p["W2"].T + p["b2"], h

    def mean(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self._forward(s)[0]

    def mean_jacobian(self, s) -> np.ndarray:
        """d m / d s at a single state; shape [da, ds]."""
        p = self.unpack()
        if self.arch == "linear":
            return p["W"].copy()
        h = np.tanh(p["W1"] @ np.asarray(s, dtype=float) + p["b1"])
        return p["W2"] @ ((1.0 - h**2)[:, None] * p["W1"])

    def mean_vjp(self, s, u) -> np.ndarray:
        """Per-sample u^T (d m / d theta); shape [N, num_params], log_std block zero."""
        p = self.unpack()
        N = s.shape[0]
        if self.arch == "linear":
            blocks = [(u[:, :, None] * s[:, None, :]).reshape(N, -1), u]
        else:
            h = np.tanh(s @ p["W1"].T + p["b1"])
            dpre = (u @ p["W2"]) * (1.0 - h**2)
            blocks = [(dpre[:, :, None] * s[:, None, :]).reshape(N, -1), dpre,
                      (u[:, :, None] * h[:, None, :]).reshape(N, -1), u]
        blocks.append(np.zeros((N, self.action_dim)))
        return np.concatenate(blocks, axis=1)

    def mean_jvp(self, s, v) -> np.ndarray:
        """(d m / d theta) v per sample; shape [N, da]."""
        p = self.unpack()
        dp = self.unpack(v)
        if self.arch == "linear":
            return s @ dp["W"].T + dp["b"]
        h = np.tanh(s @ p["W1"].T + p["b1"])
        dh = (1.0 - h**2) * (s @ dp["W1"].T + dp["b1"])
        return h @ dp["W2"].T + dh @ p["W2"].T + dp["b2"]

    # density
    def log_prob(self, s, a) -> np.ndarray:
        s, a = np.asarray(s, dtype=float), np.asarray(a, dtype=float)
        z = (a - self.mean(s)) * np.exp(-self.log_std)
        return -0.5 * np.sum(z**2 + LOG_2PI + 2.0 * self.log_std, axis=-1)

    def grad_log_prob(self, s, a) -> np.ndarray:
        """Per-sample gradient of log pi(a|s) w.r.t. theta; shape [N, num_params]."""
        s, a = np.atleast_2d(s), np.atleast_2d(a)
        diff = a - self.mean(s)
        inv_var = np.exp(-2.0 * self.log_std)
        g = self.mean_vjp(s, diff * inv_var)
        g[:, -self.action_dim:] = diff**2 * inv_var - 1.0
        return g

    def act(self, s, t: int = 0, noise=None) -> np.ndarray:
        m = self.mean(s)
        return m if noise is None else m + np.exp(self.log_std) * noise

    def sample(self, s, rng: np.random.Generator) -> np.ndarray:
        m = self.mean(s)
        return m + np.exp(self.log_std) * rng.standard_normal(m.shape)

    # persistence
    def to_dict(self) -> dict:
        return {"arch": self.arch, "state_dim": self.state_dim, "action_dim": self.action_dim,
                "hidden": self.hidden, "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianPolicy":
        return cls(doc["arch"], doc["state_dim"], doc["action_dim"], np.array(doc["theta"], dtype=float),
                   doc.get("hidden", 32))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gaussian_kl(mean_p, cov_p, mean_q, cov_q) -> np.ndarray:
    """KL(N(mean_p, cov_p) || N(mean_q, cov_q)), batched over leading mean axes."""
    d = cov_p.shape[-1]
    try:
        Lq = np.linalg.cholesky(cov_q)
        np.linalg.cholesky(cov_p)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular covariance in Gaussian KL") from exc
    cov_q_inv = np.linalg.inv(cov_q)
    diff = mean_q - mean_p
    trace = np.trace(cov_q_inv @ cov_p, axis1=-2, axis2=-1)
    maha = np.einsum("...i,...ij,...j->...", diff, cov_q_inv, diff)
    logdet_q = 2.0 * np.sum(np.log(np.diagonal(Lq, axis1=-2, axis2=-1)), axis=-1)
    logdet_p = np.linalg.slogdet(cov_p)[1]
    return 0.5 * (trace + maha - d + logdet_q - logdet_p)


def policy_kl(policy_p: GaussianPolicy, policy_q: GaussianPolicy, s) -> np.ndarray:
    """Per-state KL(pi_p(.|s) || pi_q(.|s)) for diagonal Gaussian policies."""
    var_p = np.exp(2.0 * policy_p.log_std)
    var_q = np.exp(2.0 * policy_q.log_std)
    diff = policy_q.mean(s) - policy_p.mean(s)
    return 0.5 * np.sum(var_p / var_q + diff**2 / var_q - 1.0 + np.log(var_q / var_p), axis=-1)


def discount_weights(horizon: int, gamma: float) -> np.ndarray:
    """gamma^t normalized to mean one over the horizon."""
    w = gamma ** np.arange(horizon)
    return w / w.mean()


def imitation_gradient(policy: GaussianPolicy, states, actions, advantages, weights=None,
                       standardize: bool = True) -> np.ndarray:
    """Score-function estimate (1/N) sum w grad log pi(a|s) A(s, a).

    ``states``/``actions`` are flattened [N, d]; ``advantages`` and
    ``weights`` are length N.
    """
    adv = np.asarray(advantages, dtype=float).ravel()
    if adv.size == 0:
        raise ValueError("empty batch")
    if standardize:
        std = adv.std()
        adv = (adv - adv.mean()) / std if std > 0 else np.zeros_like(adv)
    if weights is not None:
        adv = adv * np.asarray(weights, dtype=float).ravel()
    g = policy.grad_log_prob(states, actions)
    return g.T @ adv / adv.size


def fisher_vector_product(policy: GaussianPolicy, states, actions, v, damping: float = 1e-4,
                          mode: str = "empirical") -> np.ndarray:
    """F v + damping v without forming F.

    ``empirical``: F = (1/N) sum g g^T over the sampled score vectors.
    ``analytic``: the expected Fisher of the Gaussian at the batch states,
    i.e. the Hessian of the mean KL at the current parameters.
    """
    v = np.asarray(v, dtype=float)
    states = np.atleast_2d(states)
    N = states.shape[0]
    if mode == "empirical":
        g = policy.grad_log_prob(states, actions)
        return g.T @ (g @ v) / N + damping * v
    if mode == "analytic":
        inv_var = np.exp(-2.0 * policy.log_std)
        out = policy.mean_vjp(states, policy.mean_jvp(states, v) * inv_var).sum(axis=0) / N
        out[-policy.action_dim:] = 2.0 * v[-policy.action_dim:]
        return out + damping * v
    raise ValueError(f"unknown Fisher mode {mode!r}")


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], b, iters: int = 50,
                       tol: float = 1e-8) -> CgResult:
    """Solve A x = b for symmetric positive definite A given as a callable."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CgResult(x, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    for it in range(1, iters + 1):
        Ap = apply(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            raise NumericalError(f"conjugate gradient hit non-positive curvature ({pAp})")
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise NumericalError("conjugate gradient produced non-finite residual")
        if np.sqrt(rr_new) <= tol * b_norm:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CgResult(x, it, float(np.sqrt(rr) / b_norm))


@dataclass
class NgdReport:
    grad_norm: list = field(default_factory=list)
    grad_finv_grad: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    quad_kl: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    cg_residual: list = field(default_factory=list)
    skipped: bool = False

    @property
    def total_quad_kl(self) -> float:
        return float(sum(self.quad_kl))


def ngd_update(policy: GaussianPolicy, gradient: Callable[[GaussianPolicy], np.ndarray],
               fvp: Callable[[GaussianPolicy, np.ndarray], np.ndarray], beta: float, k_steps: int = 1,
               cg_iters: int = 50, cg_tol: float = 1e-8):
    """k natural-gradient descent steps, each with (dtheta)^T F (dtheta) = beta / k.

    ``gradient(policy)`` and ``fvp(policy, v)`` are re-evaluated at every step
    on the same batch.
    """
    if beta <= 0 or k_steps < 1:
        raise ValueError("beta must be positive and k_steps >= 1")
    report = NgdReport()
    for _ in range(k_steps):
        g = gradient(policy)
        gnorm = float(np.linalg.norm(g))
        report.grad_norm.append(gnorm)
        if gnorm == 0.0:
            report.grad_finv_grad.append(0.0)
            report.step_size.append(0.0)
            report.quad_kl.append(0.0)
            report.cg_iterations.append(0)
            report.cg_residual.append(0.0)
            continue
        apply = lambda v, pol=policy: fvp(pol, v)
        cg = conjugate_gradient(apply, g, cg_iters, cg_tol)
        gfg = float(g @ cg.x)
        Fx = apply(cg.x)
        xFx = float(cg.x @ Fx)
        report.grad_finv_grad.append(gfg)
        report.cg_iterations.append(cg.iterations)
        report.cg_residual.append(cg.residual)
        if not (gfg > 0 and xFx > 0 and np.isfinite(xFx)):
            report.skipped = True
            report.step_size.append(0.0)
            report.quad_kl.append(0.0)
            continue
        step = np.sqrt((beta / k_steps) / xFx)
        report.step_size.append(float(step))
        report.quad_kl.append(float(step**2 * xFx))
        policy = policy.with_theta(policy.theta - step * cg.x)
    return policy, report
