"""Bracketing search on the Lagrange multiplier of the expert trust region.

Shared by the tabular (soft value iteration) and continuous (soft LQR)
expert solvers. ``solve(mu)`` must return ``(solution, kl)``; larger ``mu``
weights the KL penalty more and so yields a smaller KL.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

DEFAULT_MU_BOUNDS = (1e-3, 1e3)


@dataclass
class DualState:
    mu: float
    mu_min: float
    mu_max: float
    kl_measured: float
    alpha_target: float
    solves: int = 0
    bracket_limit: bool = False


def dual_update_bracket(solve: Callable[[float], tuple[Any, float]], alpha: float,
                        mu_bounds: tuple[float, float] = DEFAULT_MU_BOUNDS,
                        mu_init: float | None = None, max_solves: int = 60,
                        rel_width: float = 1e-6):
    """Find mu with 0.9 alpha <= KL(mu) <= 1.1 alpha by geometric bracketing.

    Starts at ``mu_init`` (a warm start from the previous outer iteration) or
    at the lower bound. On a KL violation the lower end moves up to mu and mu
    grows by at most 10x; otherwise the upper end moves down and mu shrinks
    by at most 10x. Returns the accepted solution and the final DualState; if
    the bracket collapses or the solve budget runs out the best iterate seen
    is returned with ``bracket_limit`` set.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    mu_min, mu_max = map(float, mu_bounds)
    if not 0 < mu_min <= mu_max:
        raise ValueError(f"invalid mu bounds {mu_bounds}")
    mu = mu_min if mu_init is None else min(max(float(mu_init), mu_min), mu_max)
    lo, hi = 0.9 * alpha, 1.1 * alpha

    history = []
    for n_solves in range(1, max_solves + 1):
        solution, kl = solve(mu)
        history.append((mu, kl, solution))
        if lo <= kl <= hi:
            return solution, DualState(mu, mu_min, mu_max, kl, alpha, n_solves)
        if kl > alpha:
            mu_min = mu
            mu = min(math.sqrt(mu_min * mu_max), 10.0 * mu_min)
        else:
            mu_max = mu
            mu = max(math.sqrt(mu_min * mu_max), 0.1 * mu_max)
        if (mu_max - mu_min) <= rel_width * mu_max:
            break

    # Best effort: the most cost-driven (smallest mu) iterate inside the
    # upper KL limit, else the smallest-KL iterate.
    feasible = [h for h in history if h[1] <= hi]
    best = min(feasible, key=lambda h: h[0]) if feasible else min(history, key=lambda h: h[1])
    state = DualState(best[0], min(mu_min, best[0]), max(mu_max, best[0]), best[1], alpha,
                      len(history), bracket_limit=True)
    return best[2], state
