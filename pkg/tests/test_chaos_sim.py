import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from koopman_transfer.chaos_sim import (
    C_MINUS,
    C_PLUS,
    IntegratorConfig,
    LorenzParams,
    equilibria,
    flow_map,
    flow_map_batch,
    integrate,
    integrate_batch,
    lorenz_deriv,
)
from koopman_transfer.errors import StepSizeUnderflow


def test_vector_field_by_hand():
    assert np.array_equal(lorenz_deriv(np.array([1.0, 2.0, 3.0])), [10.0, 23.0, -6.0])


def test_vector_field_vanishes_at_equilibria():
    for c in equilibria():
        assert np.abs(lorenz_deriv(c)).max() < 1e-12


def test_equilibria_values():
    r = np.sqrt(8.0 / 3.0 * 27.0)
    assert np.allclose(C_PLUS, [r, r, 27.0])
    assert np.allclose(C_MINUS, [-r, -r, 27.0])


def test_equilibria_stay_put():
    for c in equilibria():
        traj = integrate(c, 1024)
        assert np.abs(traj - c).max() < 1e-6


def test_self_convergence():
    coarse = integrate([1.0, 1.0, 1.0], 256)
    fine = integrate([1.0, 1.0, 1.0], 256, IntegratorConfig(rtol=1e-12, atol=1e-12))
    assert np.abs(coarse - fine).max() < 1e-6


def test_agrees_with_scipy_dop853():
    t = np.arange(257) * 0.01
    ref = solve_ivp(lambda _, y: lorenz_deriv(y), (0, t[-1]), [1.0, 1.0, 1.0],
                    method="DOP853", rtol=1e-13, atol=1e-13, t_eval=t).y.T
    assert np.abs(integrate([1.0, 1.0, 1.0], 256) - ref).max() < 1e-7


def test_output_shape_and_first_sample():
    traj = integrate([3.0, -2.0, 20.0], 10)
    assert traj.shape == (11, 3)
    assert np.array_equal(traj[0], [3.0, -2.0, 20.0])


def test_batch_matches_single_rows_bitwise(rng):
    s0 = rng.uniform(-15, 15, size=(5, 3)) + [0, 0, 25]
    batch = integrate_batch(s0, 200)
    for i in range(5):
        assert np.array_equal(batch[i], integrate(s0[i], 200))


def test_flow_map_identity_at_zero_time():
    assert np.array_equal(flow_map([1.0, 1.0, 1.0], 0.0), [1.0, 1.0, 1.0])


def test_flow_map_semigroup():
    a = flow_map(flow_map([1.0, 1.0, 1.0], 0.05), 0.05)
    b = flow_map([1.0, 1.0, 1.0], 0.1)
    assert np.abs(a - b).max() < 1e-8


def test_flow_map_equilibrium_plus_noise():
    out = flow_map(C_PLUS, 0.1, noise=(0.5, 0.0, 0.0))
    assert np.abs(out - (C_PLUS + [0.5, 0, 0])).max() < 1e-6


def test_flow_map_matches_integrate_samples():
    traj = integrate([2.0, 5.0, 18.0], 7)
    assert np.abs(flow_map([2.0, 5.0, 18.0], 0.07) - traj[7]).max() < 1e-8


def test_flow_map_rejects_negative_time():
    with pytest.raises(ValueError):
        flow_map_batch(np.zeros((1, 3)), -0.1)


def test_step_size_underflow_is_reported():
    cfg = IntegratorConfig(rtol=1e-16, atol=1e-300, min_internal_step=1e-3)
    with pytest.raises(StepSizeUnderflow):
        integrate_batch(np.array([[1.0, 1.0, 1.0]]), 5, cfg, LorenzParams(), seeds=[11])


@settings(max_examples=25, deadline=None)
@given(st.floats(-20, 20), st.floats(-25, 25), st.floats(5, 45))
def test_trajectories_stay_bounded(x, y, z):
    traj = integrate([x, y, z], 100)
    assert np.all(np.isfinite(traj))
    assert np.abs(traj).max() < 200
