"""Continuous-control environments with known quadratic costs, and rollouts."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0  # kg
    pole_mass: float = 0.1  # kg
    half_length: float = 0.5  # m
    gravity: float = 9.8  # m/s^2
    dt: float = 0.02  # s
    force_limit: float = 10.0  # N
    integrator: str = "semi-implicit-euler"  # or "rk4"

    def __post_init__(self):
        if self.integrator not in ("semi-implicit-euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        for name in ("cart_mass", "pole_mass", "half_length", "gravity", "dt", "force_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.dt > 0.05:
            raise ValueError("dt must be <= 0.05 s")


def cartpole_derivatives(params: CartpoleParams, s: np.ndarray, force) -> np.ndarray:
    """Time derivative of (x, x_dot, theta, theta_dot); theta = 0 is upright.

    Vectorized over a leading batch axis.
    """
    _, x_dot, theta, theta_dot = np.moveaxis(s, -1, 0)
    total = params.cart_mass + params.pole_mass
    pml = params.pole_mass * params.half_length
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + pml * theta_dot**2 * sin) / total
    theta_acc = (params.gravity * sin - cos * temp) / (
        params.half_length * (4.0 / 3.0 - params.pole_mass * cos**2 / total))
    x_acc = temp - pml * theta_acc * cos / total
    return np.stack([x_dot, x_acc, theta_dot, theta_acc], axis=-1)


def cartpole_step(params: CartpoleParams, s, a) -> np.ndarray:
    """One step of the cart-pole ODE with the force clipped (held over the step).

    Semi-implicit Euler by default, classic RK4 if ``params.integrator`` says so.
    ``s`` is (..., 4), ``a`` is (..., 1) or scalar.
    """
    s = np.asarray(s, dtype=float)
    force = np.clip(np.asarray(a, dtype=float).reshape(s.shape[:-1]), -params.force_limit,
                    params.force_limit)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(force))):
        raise ValueError("cartpole_step received non-finite input")
    if params.integrator == "rk4":
        h = params.dt
        k1 = cartpole_derivatives(params, s, force)
        k2 = cartpole_derivatives(params, s + 0.5 * h * k1, force)
        k3 = cartpole_derivatives(params, s + 0.5 * h * k2, force)
        k4 = cartpole_derivatives(params, s + h * k3, force)
        return s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    deriv = cartpole_derivatives(params, s, force)
    x_dot = s[..., 1] + params.dt * deriv[..., 1]
    theta_dot = s[..., 3] + params.dt * deriv[..., 3]
    return np.stack([s[..., 0] + params.dt * x_dot, x_dot,
                     s[..., 2] + params.dt * theta_dot, theta_dot], axis=-1)


def _psd_check(M: np.ndarray, name: str, strict: bool) -> None:
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    floor = 1e-12 if strict else -1e-12
    if eig.min() < floor and not (strict and eig.min() > 0):
        raise ValueError(f"{name} must be {'positive definite' if strict else 'PSD'}")


@dataclass(frozen=True, eq=False)
class ContinuousEnv:
    """Known-cost environment: s' = step(s, a) + N(0, noise_cov).

    Cost c(s, a) = (s - s*)^T Q (s - s*) + a^T R a. A velocity-tracking task
    q (s_v - v*)^2 is the special case Q = q e_v e_v^T with v* at index v of
    the target.
    """
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float
    init_mean: np.ndarray
    init_cov: np.ndarray
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    Q: np.ndarray
    R: np.ndarray
    target: np.ndarray
    noise_cov: np.ndarray | None = None
    name: str = "env"
    params: object = None
    linear: tuple | None = None  # (A, B, c) when the dynamics are exactly linear
    # states outside this region end the usable part of an episode for learning
    valid_region: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        ds, da = self.state_dim, self.action_dim
        for attr, shape in (("Q", (ds, ds)), ("R", (da, da)), ("target", (ds,)),
                            ("init_mean", (ds,)), ("init_cov", (ds, ds))):
            val = np.asarray(getattr(self, attr), dtype=float)
            if val.shape != shape:
                raise ValueError(f"{attr} must have shape {shape}, got {val.shape}")
            object.__setattr__(self, attr, val)
        _psd_check(self.Q, "Q", strict=False)
        _psd_check(self.R, "R", strict=True)
        _psd_check(self.init_cov, "init_cov", strict=False)
        if self.noise_cov is not None:
            nc = np.asarray(self.noise_cov, dtype=float)
            if nc.shape != (ds, ds):
                raise ValueError(f"noise_cov must have shape {(ds, ds)}")
            _psd_check(nc, "noise_cov", strict=False)
            object.__setattr__(self, "noise_cov", nc)

    def cost(self, s, a) -> np.ndarray:
        e = np.asarray(s) - self.target
        a = np.asarray(a)
        return np.einsum("...i,ij,...j->...", e, self.Q, e) + np.einsum("...i,ij,...j->...", a, self.R, a)

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        return self.init_mean + _sqrt_psd(self.init_cov) @ rng.standard_normal(self.state_dim)


def _sqrt_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


CARTPOLE_Q = np.diag([1.0, 0.1, 10.0, 0.1])
CARTPOLE_R = np.array([[0.01]])


def cartpole_env(params: CartpoleParams | None = None, horizon: int = 100, gamma: float = 0.995,
                 init_std: float = 0.05, noise_std: float = 0.0, name: str = "cartpole",
                 fail_angle: float | None = 0.5) -> ContinuousEnv:
    """Cart-pole balancing; an episode's learning data stops once |theta| > fail_angle."""
    params = params or CartpoleParams()
    region = None if fail_angle is None else (lambda s: np.abs(s[..., 2]) <= fail_angle)
    return ContinuousEnv(
        state_dim=4, action_dim=1, horizon=horizon, gamma=gamma,
        init_mean=np.zeros(4), init_cov=init_std**2 * np.eye(4),
        step=lambda s, a: cartpole_step(params, s, a),
        Q=CARTPOLE_Q, R=CARTPOLE_R, target=np.zeros(4),
        noise_cov=noise_std**2 * np.eye(4) if noise_std > 0 else None,
        name=name, params=params, valid_region=region)


def lti_env(A, B, c=None, Sigma=None, Q=None, R=None, target=None, horizon: int = 30,
            gamma: float = 1.0, init_mean=None, init_cov=None) -> ContinuousEnv:
    """Exact linear-Gaussian system s' = A s + B a + c + N(0, Sigma)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    ds = A.shape[0]
    B = B.reshape(ds, -1)
    da = B.shape[1]
    if A.shape != (ds, ds):
        raise ValueError(f"A must be square, got {A.shape}")
    c = np.zeros(ds) if c is None else np.asarray(c, dtype=float)
    if c.shape != (ds,):
        raise ValueError(f"c must have shape ({ds},)")
    Sigma = None if Sigma is None else np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma is not None and not np.any(Sigma):
        Sigma = None
    return ContinuousEnv(
        state_dim=ds, action_dim=da, horizon=horizon, gamma=gamma,
        init_mean=np.zeros(ds) if init_mean is None else init_mean,
        init_cov=np.eye(ds) if init_cov is None else init_cov,
        step=lambda s, a: s @ A.T + a @ B.T + c,
        Q=np.eye(ds) if Q is None else Q, R=np.eye(da) if R is None else R,
        target=np.zeros(ds) if target is None else target,
        noise_cov=Sigma, name="lti", linear=(A, B, c))


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    states: np.ndarray  # [K, T, ds]
    actions: np.ndarray  # [K, T, da]
    next_states: np.ndarray  # [K, T, ds]
    costs: np.ndarray  # [K, T]
    seed: int
    policy_id: str = ""
    mask: np.ndarray | None = None  # [K, T] bool, True up to the first exit from the valid region

    def __post_init__(self):
        K, T, ds = self.states.shape
        if (self.actions.shape[:2] != (K, T) or self.next_states.shape != (K, T, ds)
                or self.costs.shape != (K, T)):
            raise ValueError("inconsistent trajectory array shapes")
        mask = np.ones((K, T), dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != (K, T):
            raise ValueError("mask must have shape [K, T]")
        object.__setattr__(self, "mask", mask)

    @property
    def num_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for k in range(self.num_episodes):
                fh.write(json.dumps({
                    "episode": k, "seed": self.seed, "policy": self.policy_id,
                    "states": self.states[k].tolist(), "actions": self.actions[k].tolist(),
                    "next_states": self.next_states[k].tolist(), "costs": self.costs[k].tolist(),
                    "mask": self.mask[k].tolist(),
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrajectoryBatch":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path} holds no episodes")
        return cls(np.array([r["states"] for r in rows]), np.array([r["actions"] for r in rows]),
                   np.array([r["next_states"] for r in rows]), np.array([r["costs"] for r in rows]),
                   seed=rows[0]["seed"], policy_id=rows[0]["policy"],
                   mask=np.array([r["mask"] for r in rows], dtype=bool))

    def flat(self):
        """Masked (states, actions, timesteps) flattened across episodes."""
        k_idx, t_idx = np.nonzero(self.mask)
        return self.states[k_idx, t_idx], self.actions[k_idx, t_idx], t_idx


ROLLOUT_BLOCK = 16


def _rollout_chunk(env: ContinuousEnv, policy, seed: int, episodes: range, deterministic: bool):
    ds, da, T = env.state_dim, env.action_dim, env.horizon
    K = len(episodes)
    s0 = np.empty((K, ds))
    eps_a = np.empty((K, T, da))
    eps_s = np.empty((K, T, ds))
    for i, k in enumerate(episodes):
        rng = np.random.default_rng([seed, k])
        s0[i] = env.sample_initial(rng)
        eps_a[i] = rng.standard_normal((T, da))
        eps_s[i] = rng.standard_normal((T, ds))
    noise_root = None if env.noise_cov is None else _sqrt_psd(env.noise_cov)
    states = np.empty((K, T, ds))
    actions = np.empty((K, T, da))
    nexts = np.empty((K, T, ds))
    s = s0
    for t in range(T):
        a = policy.act(s, t, None if deterministic else eps_a[:, t])
        s_next = env.step(s, a)
        if noise_root is not None:
            s_next = s_next + eps_s[:, t] @ noise_root.T
        states[:, t], actions[:, t], nexts[:, t] = s, a, s_next
        s = s_next
    return states, actions, nexts


def collect_trajectories(env: ContinuousEnv, policy, K: int, seed: int, workers: int = 1,
                         deterministic: bool = False) -> TrajectoryBatch:
    """Roll out ``policy`` for K episodes.

    ``policy.act(states, t, noise)`` maps a batch of states to actions, using
    the given standard-normal draws (or the mean action when ``noise`` is None).
    Episode k uses its own random stream seeded by (seed, k), so the batch is
    identical for any ``workers``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if getattr(policy, "state_dim", env.state_dim) != env.state_dim or \
            getattr(policy, "action_dim", env.action_dim) != env.action_dim:
        raise ValueError("policy and environment dimensions differ")
    # Fixed-size blocks: batched BLAS results can depend on the row count, so
    # the block layout must not depend on the number of workers.
    blocks = [range(lo, min(lo + ROLLOUT_BLOCK, K)) for lo in range(0, K, ROLLOUT_BLOCK)]
    run = lambda ch: _rollout_chunk(env, policy, seed, ch, deterministic)
    if workers <= 1 or len(blocks) == 1:
        parts = [run(ch) for ch in blocks]
    else:
        with ThreadPoolExecutor(min(workers, len(blocks))) as pool:
            parts = list(pool.map(run, blocks))
    states, actions, nexts = (np.concatenate(x) for x in zip(*parts))
    mask = None
    if env.valid_region is not None:
        # a transition is usable while both endpoints stay inside the region
        inside = env.valid_region(states) & env.valid_region(nexts)
        mask = np.cumprod(inside, axis=1).astype(bool)
    return TrajectoryBatch(states, actions, nexts, env.cost(states, actions), seed,
                           policy_id=getattr(policy, "policy_id", type(policy).__name__), mask=mask)


@dataclass
class RobustFamily:
    envs: list
    params: list
    num_test: int = 3

    @property
    def train(self) -> list[int]:
        return list(range(len(self.envs) - self.num_test))

    @property
    def test(self) -> list[int]:
        return list(range(len(self.envs) - self.num_test, len(self.envs)))


def make_robust_family(base: CartpoleParams, M: int, perturb_scale: float, seed: int,
                       num_test: int = 3, **env_kwargs) -> RobustFamily:
    """M cartpoles with pole mass and length scaled by U[1-p, 1+p] factors.

    The first M - num_test environments are for training, the rest for testing.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    if not 0 <= perturb_scale < 1:
        raise ValueError("perturb_scale must lie in [0, 1)")
    if not 1 <= num_test < M:
        raise ValueError("num_test must leave at least one training environment")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1 - perturb_scale, 1 + perturb_scale, size=(M, 2))
    params = [replace(base, pole_mass=base.pole_mass * fm, half_length=base.half_length * fl)
              for fm, fl in factors]
    envs = [cartpole_env(p, name=f"cartpole-{i}", **env_kwargs) for i, p in enumerate(params)]
    return RobustFamily(envs, params, num_test)


def linearize(env: ContinuousEnv, s0=None, a0=None, eps: float = 1e-6):
    """Central-difference linearization of the deterministic step at (s0, a0)."""
    s0 = np.zeros(env.state_dim) if s0 is None else np.asarray(s0, dtype=float)
    a0 = np.zeros(env.action_dim) if a0 is None else np.asarray(a0, dtype=float)
    f0 = env.step(s0[None], a0[None])[0]
    A = np.empty((env.state_dim, env.state_dim))
    B = np.empty((env.state_dim, env.action_dim))
    for i in range(env.state_dim):
        d = np.zeros(env.state_dim)
        d[i] = eps
        A[:, i] = (env.step((s0 + d)[None], a0[None])[0] - env.step((s0 - d)[None], a0[None])[0]) / (2 * eps)
    for j in range(env.action_dim):
        d = np.zeros(env.action_dim)
        d[j] = eps
        B[:, j] = (env.step(s0[None], (a0 + d)[None])[0] - env.step(s0[None], (a0 - d)[None])[0]) / (2 * eps)
    return A, B, f0 - A @ s0 - B @ a0
