import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpi.dual import dual_update_bracket


def monotone(scale):
    calls = []

    def solve(mu):
        calls.append(mu)
        return mu, scale / mu

    return solve, calls


def test_monotone_terminates_inside_window():
    solve, _ = monotone(1.0)
    mu, state = dual_update_bracket(solve, alpha=0.05, mu_bounds=(1e-3, 1e3))
    assert 0.045 <= state.kl_measured <= 0.055
    assert not state.bracket_limit and mu == state.mu


def test_immediate_acceptance_uses_one_solve():
    solve, calls = monotone(0.05 * 1e-3)
    _, state = dual_update_bracket(solve, alpha=0.05, mu_bounds=(1e-3, 1e3))
    assert state.solves == 1 and len(calls) == 1


def test_constant_kl_sets_bracket_limit():
    _, state = dual_update_bracket(lambda mu: (mu, 1.0), alpha=0.05, mu_bounds=(1e-3, 1e3))
    assert state.bracket_limit
    _, state = dual_update_bracket(lambda mu: (mu, 1e-6), alpha=0.05, mu_bounds=(1e-3, 1e3))
    assert state.bracket_limit and state.kl_measured <= 0.055


def test_warm_start_saves_solves():
    solve, _ = monotone(3.0)
    _, cold = dual_update_bracket(solve, 0.05)
    solve, _ = monotone(3.0)
    _, warm = dual_update_bracket(solve, 0.05, mu_init=cold.mu)
    assert warm.solves == 1 < cold.solves


def test_step_rules():
    solve, calls = monotone(1.0)
    dual_update_bracket(solve, alpha=0.05, mu_bounds=(1e-3, 1e3))
    # first violation: mu grows tenfold (geometric midpoint is larger)
    assert calls[1] == pytest.approx(1e-2)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        dual_update_bracket(lambda mu: (mu, 0.0), alpha=0.0)
    with pytest.raises(ValueError):
        dual_update_bracket(lambda mu: (mu, 0.0), alpha=0.1, mu_bounds=(1.0, 0.5))


@settings(max_examples=200, deadline=None)
@given(log_scale=st.floats(-6, 6), power=st.floats(0.3, 3.0), alpha=st.floats(1e-3, 1.0))
def test_window_or_flag_property(log_scale, power, alpha):
    scale = 10.0**log_scale
    _, state = dual_update_bracket(lambda mu: (None, scale / mu**power), alpha)
    in_window = 0.9 * alpha <= state.kl_measured <= 1.1 * alpha
    assert in_window or state.bracket_limit
    reachable = scale / 1e3**power <= 1.1 * alpha and scale / 1e-3**power >= 0.9 * alpha
    if reachable:
        assert in_window
    assert math.isfinite(state.mu)
