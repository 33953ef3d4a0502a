"""Time-varying linear-Gaussian dynamics fitted by ridge regression."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from dpi.envs import TrajectoryBatch

COV_JITTER = 1e-6
DEFAULT_RIDGE = 1e-4
DEFAULT_POOL_WINDOW = 5


@dataclass(frozen=True, eq=False)
class LinearGaussianDynamics:
    """s_{t+1} = A[t] s_t + B[t] a_t + c[t] + N(0, Sigma[t]) for t = 0..T-1."""
    A: np.ndarray  # [T, ds, ds]
    B: np.ndarray  # [T, ds, da]
    c: np.ndarray  # [T, ds]
    Sigma: np.ndarray  # [T, ds, ds]

    def __post_init__(self):
        T, ds, _ = self.A.shape
        if self.B.shape[:2] != (T, ds) or self.c.shape != (T, ds) or self.Sigma.shape != (T, ds, ds):
            raise ValueError("inconsistent dynamics array shapes")
        for name in ("A", "B", "c", "Sigma"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def action_dim(self) -> int:
        return self.B.shape[2]

    @classmethod
    def stationary(cls, A, B, c, Sigma, horizon: int) -> "LinearGaussianDynamics":
        ds = np.shape(A)[0]
        Sigma = np.zeros((ds, ds)) if Sigma is None else Sigma
        tile = lambda x: np.repeat(np.asarray(x, dtype=float)[None], horizon, axis=0)
        return cls(tile(A), tile(B), tile(c), tile(Sigma))

    def predict(self, t: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return s @ self.A[t].T + a @ self.B[t].T + self.c[t]

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k).tolist() for k in ("A", "B", "c", "Sigma")})

    @classmethod
    def from_json(cls, text: str) -> "LinearGaussianDynamics":
        doc = json.loads(text)
        return cls(*(np.array(doc[k], dtype=float) for k in ("A", "B", "c", "Sigma")))


@dataclass(frozen=True)
class FitReport:
    residual_rms: np.ndarray  # [T]
    pooled: bool
    pool_window: int
    ridge: float
    sample_counts: np.ndarray  # [T]


def window_indices(t: int, horizon: int, pool_window: int) -> range:
    """Centered window of timesteps around t, clipped at the ends."""
    half = pool_window // 2
    lo = max(0, t - half)
    hi = min(horizon, lo + pool_window)
    lo = max(0, hi - pool_window)
    return range(lo, hi)


def ridge_solve(X: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    """argmin_W (1/N) ||X W - Y||^2 + ridge ||W||^2 for every column of Y."""
    N, d = X.shape
    gram = X.T @ X / N + ridge * np.eye(d)
    return np.linalg.solve(gram, X.T @ Y / N)


def fit_time_varying_linear(batch: TrajectoryBatch, ridge: float = DEFAULT_RIDGE,
                            pool_window: int | None = None, min_samples: int | None = None):
    """Per-timestep ridge fit of s' on (s, a, 1), with residual covariance.

    The penalty covers A, B and the intercept c. ``pool_window=None`` picks 1
    when there are enough episodes per timestep and 5 otherwise. Only
    transitions flagged in ``batch.mask`` are used; where a window holds fewer
    than ``min_samples`` of them (default 2 (ds + da + 1) for masked batches)
    it is widened until it does.
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    K, T, ds = batch.states.shape
    da = batch.actions.shape[2]
    if K == 0 or T == 0:
        raise ValueError("empty trajectory batch")
    if pool_window is None:
        pool_window = DEFAULT_POOL_WINDOW if K < 2 * (ds + da + 1) else 1
    if pool_window < 1:
        raise ValueError("pool_window must be >= 1")
    mask = batch.mask
    masked = not mask.all()
    if min_samples is None:
        min_samples = 2 * (ds + da + 1) if masked else 2
    total = int(mask.sum())
    if total < 2:
        raise ValueError(f"only {total} usable transitions; increase K or pool_window")
    min_samples = min(min_samples, total)

    X_all = np.concatenate([batch.states, batch.actions, np.ones((K, T, 1))], axis=2)
    per_t = mask.sum(axis=0)
    A = np.empty((T, ds, ds))
    B = np.empty((T, ds, da))
    c = np.empty((T, ds))
    Sigma = np.empty((T, ds, ds))
    rms = np.empty(T)
    counts = np.empty(T, dtype=int)
    widest = pool_window
    for t in range(T):
        width = pool_window
        idx = window_indices(t, T, width)
        while per_t[idx.start:idx.stop].sum() < min_samples and width < T:
            width = min(2 * width, T)
            idx = window_indices(t, T, width)
        widest = max(widest, width)
        sel = mask[:, idx]
        X = X_all[:, idx][sel]
        Y = batch.next_states[:, idx][sel]
        if X.shape[0] < 2:
            raise ValueError(f"timestep {t} has {X.shape[0]} samples; increase K or pool_window")
        W = ridge_solve(X, Y, ridge)
        A[t], B[t], c[t] = W[:ds].T, W[ds:ds + da].T, W[-1]
        resid = Y - X @ W
        Sigma[t] = resid.T @ resid / X.shape[0] + COV_JITTER * np.eye(ds)
        rms[t] = np.sqrt(np.mean(resid**2))
        counts[t] = X.shape[0]
    report = FitReport(rms, widest > 1, widest, float(ridge), counts)
    return LinearGaussianDynamics(A, B, c, Sigma), report


def standardized_residuals(dynamics: LinearGaussianDynamics, batch: TrajectoryBatch) -> np.ndarray:
    """Residuals whitened by the Cholesky factor of Sigma[t]; shape [K, T, ds]."""
    K, T, ds = batch.states.shape
    if K == 0:
        raise ValueError("empty held-out batch")
    if T > dynamics.horizon:
        raise ValueError("batch is longer than the dynamics horizon")
    out = np.empty((K, T, ds))
    for t in range(T):
        resid = batch.next_states[:, t] - dynamics.predict(t, batch.states[:, t], batch.actions[:, t])
        L = np.linalg.cholesky(dynamics.Sigma[t])
        out[:, t] = np.linalg.solve(L, resid.T).T
    return out


def model_error_report(dynamics: LinearGaussianDynamics, batch_heldout: TrajectoryBatch) -> float:
    """Mean Gaussian negative log-likelihood per held-out transition."""
    z = standardized_residuals(dynamics, batch_heldout)
    T, ds = z.shape[1], z.shape[2]
    logdet = np.array([np.linalg.slogdet(dynamics.Sigma[t])[1] for t in range(T)])
    nll = 0.5 * (np.sum(z**2, axis=2) + logdet[None] + ds * np.log(2 * np.pi))
    return float(nll[batch_heldout.mask].mean())
