import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groklab.dynamics import (
    ReducedState,
    derivative,
    integrate,
    lyapunov,
    lyapunov_rate,
    rk4_step,
)

unit = st.floats(0.0, 1.0)


def test_derivative_examples():
    assert np.array_equal(derivative([1.0, 1.0, 1.0], 1), np.zeros(3))
    for s in ([0.0, 0.3, 0.7], [0.2, 0.0, 0.9], [0.4, 0.5, 0.0]):
        assert np.array_equal(derivative(s, 0), np.zeros(3))
    assert np.allclose(derivative([0.5, 0.5, 0.5], 1), 0.21875, rtol=0, atol=1e-16)


def test_derivative_rejects_bad_delta():
    with pytest.raises(ValueError):
        derivative([0.5, 0.5, 0.5], 2)


def test_state_validation():
    assert np.array_equal(ReducedState(0.1, 0.2, 0.3).as_array(), [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        ReducedState(0.5, 0.2, 0.3, delta=2)


def test_lyapunov_examples():
    assert lyapunov([1, 1, 1]) == (0.0, 0.0)
    V, Vdot = lyapunov([0.5, 0.5, 0.5])
    assert V == 0.75 and Vdot == pytest.approx(-0.328125, abs=1e-16)
    assert lyapunov([0, 0, 0]) == (3.0, 0.0)


def test_lyapunov_closed_form_is_half_the_chain_rule_rate():
    rng = np.random.default_rng(0)
    S = rng.random((1000, 3))
    _, closed = lyapunov(S)
    rate = lyapunov_rate(S, 1)
    assert np.max(np.abs(2 * closed - rate)) < 1e-12
    # the closed form without the factor 2 misses by |closed| which is far above 1e-12
    assert np.max(np.abs(closed - rate)) > 1e-3


@settings(max_examples=200, deadline=None)
@given(x=unit, w=unit, u=unit)
def test_lyapunov_rate_non_positive_in_cube(x, w, u):
    assert lyapunov_rate([x, w, u], 1) <= 1e-15
    assert lyapunov([x, w, u])[1] <= 1e-15


def test_integrate_equilibrium_constant():
    tr = integrate([1.0, 1.0, 1.0], 1, 0.01, 1.0)
    assert np.all(tr.states == 1.0) and not tr.left_cube and np.isnan(tr.exit_time)
    assert len(tr.t) == 101 and tr.t[-1] == pytest.approx(1.0)


def test_integrate_centre_converges():
    tr = integrate([0.5, 0.5, 0.5], 1, 0.01, 100.0)
    x, w, u = tr.final
    assert abs(x * w * u - 1) < 1e-3
    assert np.all(np.diff(tr.V()) <= 1e-9)
    assert not tr.left_cube


def test_integrate_delta_zero_product_decreases():
    tr = integrate([0.5, 0.5, 0.5], 0, 0.01, 50.0)
    prod = tr.states.prod(axis=1)
    assert np.all(np.diff(prod) < 0) and prod[-1] < 0.1


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0.05, 0.95), w=st.floats(0.05, 0.95), u=st.floats(0.05, 0.95))
def test_differences_of_squares_conserved(x, w, u):
    # d/dt (x^2 - w^2) = -2 (xwu - delta) (xwu - xwu) = 0 for both deltas
    tr = integrate([x, w, u], 1, 0.01, 20.0)
    s = tr.states
    assert np.allclose(s[:, 0] ** 2 - s[:, 1] ** 2, x * x - w * w, atol=1e-9)
    assert np.allclose(s[:, 0] ** 2 - s[:, 2] ** 2, x * x - u * u, atol=1e-9)


def test_unequal_start_leaves_cube_and_is_flagged():
    # x^2 - w^2 is conserved, so with w > x the limit xwu = 1 needs w > 1
    tr = integrate([0.2, 0.9, 0.9], 1, 0.01, 100.0)
    assert tr.left_cube and 0 < tr.exit_time < 100
    assert abs(tr.final.prod() - 1) < 1e-3


def test_batch_matches_single():
    starts = np.array([[0.5, 0.5, 0.5], [0.2, 0.9, 0.9], [0.7, 0.6, 0.8]])
    batch = integrate(starts, 1, 0.01, 5.0)
    for k, s in enumerate(starts):
        single = integrate(s, 1, 0.01, 5.0)
        assert np.array_equal(batch.states[:, k], single.states)
        assert batch.left_cube[k] == single.left_cube


def test_rk4_fourth_order():
    start = np.array([0.3, 0.6, 0.8])
    T = 2.0
    fine = integrate(start, 1, 0.0025, T).final
    errs = [np.linalg.norm(integrate(start, 1, h, T).final - fine) for h in (0.02, 0.01, 0.005)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    # halving h cuts the error by about 2^4 = 16
    assert all(10 < r < 20 for r in ratios), ratios


def test_rk4_step_single_step_matches_formula():
    s = np.array([0.4, 0.5, 0.6])
    h = 0.1
    k1 = derivative(s)
    k2 = derivative(s + h / 2 * k1)
    k3 = derivative(s + h / 2 * k2)
    k4 = derivative(s + h * k3)
    assert np.allclose(rk4_step(s, 1, h), s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), rtol=0, atol=1e-16)


def test_integrate_argument_checks():
    with pytest.raises(ValueError):
        integrate([0.5, 0.5, 0.5], 1, 0.0)
    with pytest.raises(ValueError):
        integrate([0.5, 0.5], 1)


def test_trajectory_csv(tmp_path):
    tr = integrate([0.5, 0.5, 0.5], 1, 0.1, 1.0)
    path = tr.to_csv(tmp_path / "traj.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x", "w", "u", "V"]
    assert len(rows) == 12
    assert float(rows[-1][4]) == pytest.approx(tr.V()[-1], rel=1e-15)
    batch = integrate(np.array([[0.5, 0.5, 0.5], [0.3, 0.3, 0.3]]), 1, 0.1, 1.0)
    with pytest.raises(ValueError):
        batch.to_csv(tmp_path / "b.csv")
    batch.to_csv(tmp_path / "b.csv", index=1)
