"""Experiment orchestration: DPI and baseline loops, persistence and checks."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dpi.dual import dual_update_bracket
from dpi.envs import (CartpoleParams, ContinuousEnv, cartpole_env, collect_trajectories, linearize,
                      lti_env, make_robust_family)
from dpi.errors import NumericalError
from dpi.local_model import LinearGaussianDynamics, fit_time_varying_linear
from dpi.lqr import (QuadraticCostModel, TimeVaryingLinearGaussianPolicy, build_surrogate_cost,
                     evaluate_linear_policy, expected_kl, riccati_gains, soft_lqr_backward)
from dpi.mdp import (TabularMdp, TabularPolicy, evaluate_exact, exact_value_iteration,
                     expectation_switch_check, garnet_generate, pdl_gap, visitation_tv_bound_check)
from dpi.policy import GaussianPolicy, fisher_vector_product, imitation_gradient, ngd_update
from dpi.tabular import DiscreteConfig, cpi_iteration, dpi_discrete_iteration, theorem2_check

TRACKS = ("tabular", "cpi", "cartpole", "lti", "robust", "npg", "verify")
CONTINUOUS_TRACKS = ("cartpole", "lti", "robust", "npg")
EVAL_STREAM = 10**6


@dataclass
class ExperimentConfig:
    track: str = "cartpole"
    seeds: list = field(default_factory=lambda: [0])
    iterations: int = 100
    episodes: int = 20
    horizon: int | None = None  # None: 100 for tabular and cartpole, 30 for lti
    alpha: float = 0.05
    beta: float = 0.01
    mu_bounds: tuple = (1e-3, 1e3)
    ridge: float | None = None  # None: 1e-3 for CSOAA, 1e-4 for dynamics fits
    gamma: float | None = None  # None: 0.99 tabular, 1.0 lti, 0.995 cartpole
    arch: str = "linear"
    hidden: int = 32
    init_std: float = 1.0
    init_scale: float = 0.0  # scale of the initial output layer; 0 gives a zero mean
    learn_std: bool = True
    baseline: str = "dpi"  # dpi | cpi | npg
    advantage_cost: str | None = None  # continuous: surrogate | cost; tabular: original | surrogate
    k_steps: int = 1
    cg_iters: int = 50
    cg_tol: float = 1e-8
    damping: float = 1e-4
    fisher: str = "empirical"
    standardize: bool = True
    pool_window: int | None = None
    eval_episodes: int = 20
    count_eval: bool = False
    workers: int = 1  # threads for episode collection within a run
    jobs: int = 1  # seeds run in parallel processes
    # tabular
    num_states: int = 1000
    num_actions: int = 5
    branches: int = 2
    solver: str = "soft"
    # cartpole
    fail_angle: float | None = 0.5
    noise_std: float = 0.0
    # robust
    num_envs: int = 10
    num_test: int = 3
    perturb_scale: float = 0.3
    robust: bool = True
    # verify
    verify_gamma: float = 0.5
    corrupt_pdl: bool = False
    out: str = "runs/out"

    def __post_init__(self):
        self.seeds = [int(s) for s in np.atleast_1d(self.seeds)]
        self.mu_bounds = tuple(float(m) for m in self.mu_bounds)

    @property
    def is_tabular(self) -> bool:
        return self.track in ("tabular", "cpi")

    def resolved(self) -> "ExperimentConfig":
        """Copy with track-dependent defaults filled in."""
        cfg = dataclasses.replace(self)
        if cfg.horizon is None:
            cfg.horizon = 30 if cfg.track == "lti" else 100
        if cfg.gamma is None:
            cfg.gamma = 0.99 if cfg.is_tabular else (1.0 if cfg.track == "lti" else 0.995)
        if cfg.ridge is None:
            cfg.ridge = 1e-3 if cfg.is_tabular else 1e-4
        if cfg.advantage_cost is None:
            cfg.advantage_cost = "original" if cfg.is_tabular else "surrogate"
        if cfg.track == "cpi":
            cfg.baseline = "cpi"
        if cfg.track == "npg":
            cfg.baseline = "npg"
        return cfg

    def validate(self) -> "ExperimentConfig":
        cfg = self.resolved()
        problems = []
        if cfg.track not in TRACKS:
            problems.append(f"track must be one of {TRACKS}")
        if not cfg.alpha > 0:
            problems.append("alpha must be > 0")
        if not 0 < cfg.beta <= (1.0 if cfg.is_tabular else math.inf):
            problems.append("beta must be > 0 (and <= 1 for the mixture update)")
        if cfg.episodes < 1 or cfg.iterations < 1 or cfg.horizon < 1:
            problems.append("episodes, iterations and horizon must be >= 1")
        if not cfg.seeds:
            problems.append("at least one seed is required")
        lo, hi = cfg.mu_bounds
        if not 0 < lo <= hi:
            problems.append("mu_bounds must satisfy 0 < lo <= hi")
        if cfg.ridge < 0 or (not cfg.is_tabular and cfg.ridge == 0):
            problems.append("ridge must be positive")
        if not 0 <= cfg.gamma <= 1 or (cfg.is_tabular and cfg.gamma >= 1):
            problems.append("gamma out of range")
        if cfg.arch not in ("linear", "mlp"):
            problems.append("arch must be linear or mlp")
        if cfg.baseline not in ("dpi", "cpi", "npg"):
            problems.append("baseline must be dpi, cpi or npg")
        allowed = ("original", "surrogate") if cfg.is_tabular else ("surrogate", "cost")
        if cfg.advantage_cost not in allowed:
            problems.append(f"advantage_cost must be one of {allowed}")
        if cfg.fisher not in ("empirical", "analytic"):
            problems.append("fisher must be empirical or analytic")
        if cfg.k_steps < 1 or cfg.eval_episodes < 1 or cfg.workers < 1 or cfg.jobs < 1:
            problems.append("k_steps, eval_episodes, workers and jobs must be >= 1")
        if not 0 <= cfg.perturb_scale < 1:
            problems.append("perturb_scale must lie in [0, 1)")
        if not 1 <= cfg.num_test < cfg.num_envs:
            problems.append("num_test must be in [1, num_envs)")
        if problems:
            raise ValueError("; ".join(problems))
        return cfg

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["mu_bounds"] = list(self.mu_bounds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

ROW_FIELDS = ("iteration", "episodes", "cost_mean", "cost_stderr", "expert_cost", "kl", "mu",
              "solves", "bracket_limit", "failed", "wall_ms")
_INT_FIELDS = {"iteration", "episodes", "solves"}
_BOOL_FIELDS = {"bracket_limit", "failed"}


@dataclass
class RunRecord:
    method: str
    track: str
    seed: int
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, **row) -> None:
        missing = set(ROW_FIELDS) - set(row)
        if missing:
            raise ValueError(f"row is missing {sorted(missing)}")
        if self.rows and row["episodes"] <= self.rows[-1]["episodes"]:
            raise ValueError("cumulative episodes must strictly increase")
        self.rows.append({k: row[k] for k in ROW_FIELDS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def without_timing(self) -> list:
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.rows]

    def to_dict(self) -> dict:
        return {"method": self.method, "track": self.track, "seed": self.seed,
                "rows": self.rows, "notes": self.notes}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(doc["method"], doc["track"], int(doc["seed"]), [dict(r) for r in doc["rows"]],
                   list(doc.get("notes", [])))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _parse(name: str, text: str):
    if name in _BOOL_FIELDS:
        return text == "true"
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method", "track", "seed") + ROW_FIELDS)
        for rec in records:
            for row in rec.rows:
                writer.writerow([rec.method, rec.track, rec.seed] + [_fmt(row[k]) for k in ROW_FIELDS])


def read_records_csv(path) -> list:
    records: dict = {}
    with open(path, newline="") as fh:
        for line in csv.DictReader(fh):
            key = (line["method"], line["track"], int(line["seed"]))
            rec = records.setdefault(key, RunRecord(*key))
            rec.rows.append({k: _parse(k, line[k]) for k in ROW_FIELDS})
    return list(records.values())


def write_records_json(records, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1))


def read_records_json(path) -> list:
    return [RunRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


def _stream(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Tabular track
# ---------------------------------------------------------------------------

def _discrete_config(cfg: ExperimentConfig, seed: int, alpha: float | None = None) -> DiscreteConfig:
    return DiscreteConfig(alpha=cfg.alpha if alpha is None else alpha, beta=cfg.beta,
                          episodes=cfg.episodes, horizon=cfg.horizon, seed=seed, ridge=cfg.ridge,
                          mu_bounds=cfg.mu_bounds, solver=cfg.solver, advantage_cost=cfg.advantage_cost)


def garnet_for(cfg: ExperimentConfig, seed: int) -> TabularMdp:
    return garnet_generate(seed, cfg.num_states, cfg.num_actions, cfg.branches, cfg.gamma)


def _run_tabular(cfg: ExperimentConfig, seed: int, use_expert: bool, alpha: float | None = None,
                 mdp: TabularMdp | None = None):
    cfg = cfg.validate() if alpha is None else cfg.resolved()
    mdp = garnet_for(cfg, seed) if mdp is None else mdp
    dcfg = _discrete_config(cfg, seed, alpha)
    pi = TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    record = RunRecord("dpi" if use_expert else "cpi", "tabular", seed)
    mu = None
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        if use_expert:
            pi_next, _, m, dual = dpi_discrete_iteration(mdp, pi, dcfg, it, mu_init=mu)
            if math.isfinite(dual.mu):
                mu = dual.mu
        else:
            pi_next, m = cpi_iteration(mdp, pi, dcfg, it)
        record.add(iteration=it, episodes=it * cfg.episodes, cost_mean=m.j_pi, cost_stderr=0.0,
                   expert_cost=m.j_eta, kl=m.kl, mu=m.mu, solves=m.solves,
                   bracket_limit=m.bracket_limit, failed=False,
                   wall_ms=(time.perf_counter() - t0) * 1e3)
        pi = pi_next
    record.add(iteration=cfg.iterations, episodes=cfg.iterations * cfg.episodes,
               cost_mean=evaluate_exact(mdp, pi).j, cost_stderr=0.0, expert_cost=math.nan,
               kl=math.nan, mu=math.nan, solves=0, bracket_limit=False, failed=False, wall_ms=0.0)
    return record, pi


def run_dpi_discrete(cfg: ExperimentConfig, seed: int = 0, alpha: float | None = None,
                     mdp: TabularMdp | None = None):
    """AggreVaTeD-VI on a Garnet MDP; ``alpha=0`` collapses the expert trust region."""
    return _run_tabular(cfg, seed, use_expert=True, alpha=alpha, mdp=mdp)


def run_cpi_discrete(cfg: ExperimentConfig, seed: int = 0, mdp: TabularMdp | None = None):
    return _run_tabular(cfg, seed, use_expert=False, mdp=mdp)


def episodes_to_threshold(record: RunRecord, threshold: float) -> float:
    """First cumulative episode count whose cost is <= threshold (inf if never)."""
    for row in record.rows:
        if row["cost_mean"] <= threshold:
            return float(row["episodes"])
    return math.inf


# ---------------------------------------------------------------------------
# Continuous track
# ---------------------------------------------------------------------------

def make_env(cfg: ExperimentConfig, seed: int = 0) -> ContinuousEnv:
    if cfg.track == "lti":
        return default_lti_env(cfg.horizon, cfg.gamma, seed)
    return cartpole_env(horizon=cfg.horizon, gamma=cfg.gamma, fail_angle=cfg.fail_angle,
                        noise_std=cfg.noise_std)


def default_lti_env(horizon: int = 30, gamma: float = 1.0, seed: int = 0, noise: float = 0.01) -> ContinuousEnv:
    """A mildly unstable 2-state, 1-action double-integrator-like system."""
    A = np.array([[1.0, 0.1], [0.05, 1.0]])
    B = np.array([[0.0], [0.1]])
    return lti_env(A, B, Sigma=noise**2 * np.eye(2), Q=np.diag([1.0, 0.1]), R=0.1 * np.eye(1),
                   horizon=horizon, gamma=gamma, init_cov=0.25 * np.eye(2))


class _MeanPolicy:
    """Deterministic wrapper used for evaluation rollouts."""

    def __init__(self, policy):
        self.policy = policy
        self.state_dim = policy.state_dim
        self.action_dim = policy.action_dim
        self.policy_id = getattr(policy, "policy_id", "policy")

    def act(self, s, t, noise=None):
        return self.policy.act(s, t, None)


def evaluate_policy(env: ContinuousEnv, policy, episodes: int, seed: int):
    """Mean and standard error of the undiscounted episode cost of the mean action."""
    batch = collect_trajectories(env, _MeanPolicy(policy), episodes, _stream(seed, EVAL_STREAM),
                                 deterministic=True)
    totals = batch.costs.sum(axis=1)
    stderr = totals.std(ddof=1) / math.sqrt(len(totals)) if len(totals) > 1 else 0.0
    return float(totals.mean()), float(stderr), batch


def lqr_reference_policy(env: ContinuousEnv) -> TimeVaryingLinearGaussianPolicy:
    """Finite-horizon LQR on the linearization of ``env`` at the target with zero force."""
    A, B, c = linearize(env, env.target)
    K = riccati_gains(A, B, env.Q, env.R, env.horizon, env.gamma)
    T, da = env.horizon, env.action_dim
    k = -np.einsum("tij,j->ti", K, env.target)
    return TimeVaryingLinearGaussianPolicy(K, k, np.repeat(1e-12 * np.eye(da)[None], T, axis=0), "lqr")


def lqr_reference_cost(env: ContinuousEnv, episodes: int = 20, seed: int = 0) -> float:
    return evaluate_policy(env, lqr_reference_policy(env), episodes, seed)[0]


def _init_policy(cfg: ExperimentConfig, env: ContinuousEnv, seed: int) -> GaussianPolicy:
    return GaussianPolicy.create(cfg.arch, env.state_dim, env.action_dim, seed=_stream(seed, 7),
                                 hidden=cfg.hidden, init_std=cfg.init_std,
                                 init_scale=cfg.init_scale)


@dataclass
class ExpertSolution:
    eta: TimeVaryingLinearGaussianPolicy
    chain: object
    dual: object
    dynamics: LinearGaussianDynamics


def solve_expert(env: ContinuousEnv, policy: GaussianPolicy, batch, cfg: ExperimentConfig,
                 mu_init: float | None) -> ExpertSolution:
    """Fit local dynamics and bracket mu on soft LQR until the KL trust region binds."""
    dyn, _ = fit_time_varying_linear(batch, cfg.ridge, cfg.pool_window)

    def solve(mu):
        cost = build_surrogate_cost(env.Q, env.R, env.target, mu, policy, batch)
        eta, chain = soft_lqr_backward(dyn, cost, env.gamma)
        return (eta, chain), expected_kl(eta, policy, batch.states, env.gamma, batch.mask)

    (eta, chain), dual = dual_update_bracket(solve, cfg.alpha, cfg.mu_bounds, mu_init=mu_init)
    if cfg.advantage_cost == "cost":
        cost = build_surrogate_cost(env.Q, env.R, env.target, dual.mu, policy, batch,
                                    include_log_prob=False)
        chain = evaluate_linear_policy(dyn, cost, env.gamma, eta.K, eta.k, eta.P)
    return ExpertSolution(eta, chain, dual, dyn)


def expert_advantages(chain, states, actions, timesteps) -> np.ndarray:
    adv = np.empty(len(timesteps))
    for t in np.unique(timesteps):
        sel = timesteps == t
        adv[sel] = chain.advantage(int(t), states[sel], actions[sel])
    return adv


def _param_mask(policy: GaussianPolicy, learn_std: bool) -> np.ndarray:
    mask = np.ones(policy.num_params)
    if not learn_std:
        mask[-policy.action_dim:] = 0.0
    return mask


def _ngd_step(policy: GaussianPolicy, data: list, cfg: ExperimentConfig):
    """One natural-gradient update on a list of (states, actions, advantages, weights) groups.

    The gradient is summed over groups and the Fisher averaged over all samples.
    """
    mask = _param_mask(policy, cfg.learn_std)
    S_all = np.concatenate([d[0] for d in data])
    A_all = np.concatenate([d[1] for d in data])

    def grad(p):
        return mask * sum(imitation_gradient(p, s, a, adv, w, cfg.standardize) for s, a, adv, w in data)

    def fvp(p, v):
        return mask * fisher_vector_product(p, S_all, A_all, mask * v, cfg.damping, cfg.fisher)

    return ngd_update(policy, grad, fvp, cfg.beta, cfg.k_steps, cfg.cg_iters, cfg.cg_tol)


def _imitation_data(env, batch, chain):
    S, A, tt = batch.flat()
    return S, A, expert_advantages(chain, S, A, tt), env.gamma ** tt


def _eval_row(record, it, episodes, env_eval, policy, cfg, seed, **extra):
    means, errs = [], []
    for env in env_eval:
        m, e, _ = evaluate_policy(env, policy, cfg.eval_episodes, seed)
        means.append(m)
        errs.append(e)
    record.add(iteration=it, episodes=episodes, cost_mean=float(np.mean(means)),
               cost_stderr=float(np.sqrt(np.sum(np.square(errs))) / len(errs)), **extra)


def _empty_extra(failed=False, wall_ms=0.0):
    return dict(expert_cost=math.nan, kl=math.nan, mu=math.nan, solves=0, bracket_limit=False,
                failed=failed, wall_ms=wall_ms)


def _continuous_loop(cfg: ExperimentConfig, seed: int, train_envs: list, eval_envs: list, method: str,
                     advantage_source):
    """Shared driver: collect on every training env, build advantages, one NGD step."""
    policy = _init_policy(cfg, train_envs[0], seed)
    record = RunRecord(method, cfg.track, seed)
    mus = [None] * len(train_envs)
    episodes = 0
    eval_cost = cfg.eval_episodes * len(eval_envs) if cfg.count_eval else 0
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        extra = _empty_extra()
        try:
            data, kls, mu_used, solves, limits, expert_costs = [], [], [], [], [], []
            # the same random stream on every training env (common random numbers)
            batch_seed = _stream(seed, it)
            for i, env in enumerate(train_envs):
                batch = collect_trajectories(env, policy, cfg.episodes * advantage_source.batch_scale,
                                             batch_seed, cfg.workers)
                group, info = advantage_source(env, policy, batch, cfg, mus[i])
                data.append(group)
                if info is not None:
                    mus[i] = info.dual.mu
                    kls.append(info.dual.kl_measured)
                    mu_used.append(info.dual.mu)
                    solves.append(info.dual.solves)
                    limits.append(info.dual.bracket_limit)
                    expert_costs.append(evaluate_policy(env, info.eta, cfg.eval_episodes, seed)[0])
            new_policy, report = _ngd_step(policy, data, cfg)
            if kls:
                extra.update(expert_cost=float(np.mean(expert_costs)), kl=float(np.mean(kls)),
                             mu=float(np.exp(np.mean(np.log(mu_used)))), solves=int(sum(solves)),
                             bracket_limit=bool(any(limits)))
        except (NumericalError, np.linalg.LinAlgError) as exc:
            new_policy = policy
            extra["failed"] = True
            record.notes.append(f"iteration {it}: {exc}")
        extra["wall_ms"] = (time.perf_counter() - t0) * 1e3
        _eval_row(record, it, episodes, eval_envs, policy, cfg, seed, **extra)
        episodes += cfg.episodes * advantage_source.batch_scale * len(train_envs) + eval_cost
        policy = new_policy
    _eval_row(record, cfg.iterations, episodes, eval_envs, policy, cfg, seed, **_empty_extra())
    return record, policy


class _ExpertAdvantage:
    batch_scale = 1

    def __call__(self, env, policy, batch, cfg, mu_init):
        sol = solve_expert(env, policy, batch, cfg, mu_init)
        return _imitation_data(env, batch, sol.chain), sol


class _MonteCarloAdvantage:
    """Discounted cost-to-go minus a least-squares baseline on quadratic state-time features."""
    batch_scale = 1

    def __call__(self, env, policy, batch, cfg, mu_init):
        K, T, _ = batch.states.shape
        disc = env.gamma ** np.arange(T)
        # G_t = sum_{t' >= t} gamma^{t'-t} c_t'
        G = np.cumsum((batch.costs * disc)[:, ::-1], axis=1)[:, ::-1] / disc
        S, A, tt = batch.flat()
        k_idx, t_idx = np.nonzero(batch.mask)
        returns = G[k_idx, t_idx]
        feats = baseline_features(S, tt, T)
        w = np.linalg.lstsq(feats, returns, rcond=None)[0]
        return (S, A, returns - feats @ w, env.gamma ** tt), None


def baseline_features(states, timesteps, horizon: int) -> np.ndarray:
    s = np.atleast_2d(states)
    iu = np.triu_indices(s.shape[1])
    quad = (s[:, :, None] * s[:, None, :])[:, iu[0], iu[1]]
    tau = np.asarray(timesteps, dtype=float)[:, None] / horizon
    return np.hstack([np.ones((s.shape[0], 1)), s, quad, tau, tau**2, tau**3])


def run_dpi_continuous(cfg: ExperimentConfig, seed: int = 0):
    """DPI with a soft-LQR expert on cartpole or the LTI system."""
    cfg = cfg.validate()
    env = make_env(cfg, seed)
    return _continuous_loop(cfg, seed, [env], [env], "dpi", _ExpertAdvantage())


def run_npg_baseline(cfg: ExperimentConfig, seed: int = 0):
    """Same loop with Monte Carlo advantages of the current policy instead of A^eta."""
    cfg = cfg.validate()
    env = make_env(cfg, seed)
    return _continuous_loop(cfg, seed, [env], [env], "npg", _MonteCarloAdvantage())


def robust_family(cfg: ExperimentConfig, seed: int):
    return make_robust_family(CartpoleParams(), cfg.num_envs, cfg.perturb_scale, _stream(seed, 11),
                              cfg.num_test, horizon=cfg.horizon, gamma=cfg.gamma,
                              fail_angle=cfg.fail_angle, noise_std=cfg.noise_std)


def run_robust(cfg: ExperimentConfig, seed: int = 0):
    """Robust DPI over the training environments, or (``cfg.robust=False``) the single-env control arm.

    The control arm trains on one randomly picked training environment with
    as many episodes per iteration as the robust arm collects in total, so
    both arms consume the same episode budget. Test cost is measured on the
    held-out environments only.
    """
    cfg = cfg.validate()
    family = robust_family(cfg, seed)
    train = [family.envs[i] for i in family.train]
    test = [family.envs[i] for i in family.test]
    if cfg.robust:
        return _continuous_loop(cfg, seed, train, test, "robust", _ExpertAdvantage())
    pick = int(np.random.default_rng(_stream(seed, 13)).integers(len(train)))
    source = _ExpertAdvantage()
    source.batch_scale = len(train)
    record, policy = _continuous_loop(cfg, seed, [train[pick]], test, "single", source)
    record.notes.append(f"trained on environment {family.train[pick]}")
    return record, policy


def run_seed(cfg: ExperimentConfig, seed: int):
    """Dispatch one (config, seed) run to the loop selected by track and baseline."""
    cfg = cfg.validate()
    if cfg.track == "verify":
        raise ValueError("the verify track has no per-seed run; call verify()")
    if cfg.is_tabular:
        return (run_cpi_discrete if cfg.baseline == "cpi" else run_dpi_discrete)(cfg, seed)
    if cfg.track == "robust":
        return run_robust(cfg, seed)
    if cfg.baseline == "npg":
        return run_npg_baseline(cfg, seed)
    if cfg.baseline == "cpi":
        raise ValueError("the cpi baseline exists only on the tabular track")
    return run_dpi_continuous(cfg, seed)


def run_sweep(cfg: ExperimentConfig) -> list:
    """All seeds of ``cfg``, ``cfg.jobs`` at a time; results are in seed order."""
    cfg = cfg.validate()
    if cfg.jobs == 1 or len(cfg.seeds) == 1:
        return [run_seed(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))


# ---------------------------------------------------------------------------
# Theory verification
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    instances: int
    violations: int
    worst_slack: float  # min over instances of (bound - observed); negative means violated
    detail: str = ""
    offending: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int, gamma: float) -> TabularMdp:
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    return TabularMdp(P, rng.random((num_states, num_actions)), rng.dirichlet(np.ones(num_states)), gamma)


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(num_actions), size=num_states))


def check_pdl(seed: int = 0, instances: int = 200, max_states: int = 50, tol: float = 1e-8,
              corrupt: float = 1.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, []
    max_gap = 0.0
    for i in range(instances):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, 6))
        mdp = random_mdp(rng, S, A, float(rng.uniform(0.5, 0.99)))
        pi, pi2 = random_policy(rng, S, A), random_policy(rng, S, A)
        lhs, rhs = pdl_gap(mdp, pi, pi2)
        gap = abs(lhs - corrupt * rhs)
        max_gap = max(max_gap, gap)
        worst = min(worst, tol - gap)
        if gap > tol:
            bad.append({"mdp": mdp.to_dict(), "pi": pi.probs.tolist(), "pi_prime": pi2.probs.tolist(),
                        "lhs": lhs, "rhs": corrupt * rhs})
    return CheckResult("performance difference identity", instances, len(bad), worst,
                       f"max |lhs - rhs| = {max_gap:.3e}", bad)


def check_visitation_bound(seed: int = 1, instances: int = 200, max_states: int = 50,
                           atol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, []
    for _ in range(instances):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, 6))
        mdp = random_mdp(rng, S, A, float(rng.uniform(0.5, 0.99)))
        pi1 = random_policy(rng, S, A)
        # mix toward pi1 so that small alphas are exercised too
        lam = rng.random()
        pi2 = TabularPolicy(lam * pi1.probs + (1 - lam) * random_policy(rng, S, A).probs)
        tv_d, alpha, bound = visitation_tv_bound_check(mdp, pi1, pi2)
        worst = min(worst, bound - tv_d)
        if tv_d > bound + atol:
            bad.append({"mdp": mdp.to_dict(), "pi1": pi1.probs.tolist(), "pi2": pi2.probs.tolist(),
                        "tv_d": tv_d, "bound": bound})
    return CheckResult("visitation TV bound", instances, len(bad), worst, "", bad)


def check_expectation_switch(seed: int = 2, instances: int = 500) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, []
    for _ in range(instances):
        n = int(rng.integers(1, 30))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        f = rng.normal(scale=rng.uniform(0.1, 10), size=n)
        diff, bound = expectation_switch_check(p, q, f)
        worst = min(worst, bound - diff)
        if diff > bound:
            bad.append({"p": p.tolist(), "q": q.tolist(), "f": f.tolist()})
    return CheckResult("expectation switch bound", instances, len(bad), worst, "", bad)


def check_improvement_bound(seed: int = 3, instances: int = 20, gamma: float = 0.5, alpha: float = 0.1,
                            beta: float = 0.05, grid: float = 0.05) -> CheckResult:
    """Brute-force the two-trust-region improvement bound on 3-state, 2-action MDPs.

    A violation is an excess over the printed bound beyond 2 * grid / (1 - gamma)^2,
    the discretization allowance for the policy grid.
    """
    rng = np.random.default_rng(seed)
    slack = 2 * grid / (1 - gamma) ** 2
    worst, bad = math.inf, []
    proof_excess = 0.0
    for _ in range(instances):
        mdp = random_mdp(rng, 3, 2, gamma)
        pi_n = random_policy(rng, 3, 2)
        res = theorem2_check(mdp, pi_n, alpha, beta, grid)
        worst = min(worst, res.rhs_bound + slack - res.lhs)
        proof_excess = max(proof_excess, res.lhs - res.proof_bound)
        if res.lhs > res.rhs_bound + slack:
            bad.append({"mdp": mdp.to_dict(), "pi_n": pi_n.probs.tolist(), "lhs": res.lhs,
                        "bound": res.rhs_bound})
    return CheckResult("two-trust-region improvement bound", instances, len(bad), worst,
                       f"slack {slack:.3g}; max excess over the derived bound {proof_excess:.3e}", bad)


def verify(cfg: ExperimentConfig | None = None) -> list:
    cfg = cfg or ExperimentConfig(track="verify")
    seed = cfg.seeds[0]
    return [
        check_pdl(seed, corrupt=1.01 if cfg.corrupt_pdl else 1.0),
        check_visitation_bound(seed + 1),
        check_expectation_switch(seed + 2),
        check_improvement_bound(seed + 3, gamma=cfg.verify_gamma),
    ]


def format_report(results: list) -> str:
    lines = [f"{'check':40s} {'instances':>9s} {'violations':>10s} {'worst slack':>12s}  detail"]
    for r in results:
        lines.append(f"{r.name:40s} {r.instances:9d} {r.violations:10d} {r.worst_slack:12.3e}  {r.detail}")
    return "\n".join(lines)
