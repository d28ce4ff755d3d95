import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavecomp.dynamics import (DEFAULT_BOUNDS, FirstPrincipleModel, ModelVariation, SystemState,
                               VARIATION_KINDS, make_default_variation, make_variated, saturate,
                               source_variation, step_first_principle, step_model, variation_from_section,
                               wrap_angle)
from wavecomp.errors import ConfigError, DynamicsError, ModelStateError

DEFAULT = make_default_variation()
REST = np.zeros(6)
ZERO = np.zeros(3)

finite = st.floats(-50, 50, allow_nan=False)


def test_default_variation_values():
    v = make_default_variation()
    assert v.control_bounds == (112.0, 112.0, 82.0)
    assert v.control_latency == 0.0
    assert v.mass == 60.0
    assert not v.hydrodynamics_enabled
    assert v.control_offset_fraction == 0.0
    assert v.geometry == (0.68, 0.75, 0.19)


def test_full_thrust_from_rest_gives_f_over_m():
    res = step_first_principle(REST, [112.0, 0.0, 0.0], ZERO, DEFAULT, 0.05)
    # a = 112 / 60 m/s^2 over 0.05 s
    assert res.next_state[3] == pytest.approx(0.09333333333333334, abs=1e-12)
    # semi-implicit Euler: the position uses the updated velocity
    assert res.next_state[0] == pytest.approx(0.09333333333333334 * 0.05, abs=1e-12)


def test_rest_is_a_fixed_point():
    res = step_first_principle(REST, ZERO, ZERO, DEFAULT, 0.05)
    assert np.array_equal(res.next_state, REST)


def test_constant_velocity_drift():
    s = np.array([0, 0, 0, 1.0, 0, 0])
    res = step_first_principle(s, ZERO, ZERO, DEFAULT, 0.05)
    assert res.next_state[0] == pytest.approx(0.05, abs=1e-15)
    assert res.next_state[3] == 1.0


def test_latency_impulse_shift():
    v = make_variated("ctrl_latency")
    assert v.control_latency == pytest.approx(0.100)
    lag = v.latency_steps(0.05)
    assert lag == 2
    model = FirstPrincipleModel(v)
    state, queue = REST, None
    applied = []
    for t in range(6):
        u = np.array([50.0, -20.0, 10.0]) if t == 1 else ZERO
        res = model.step(state, u, ZERO, 0.05, queue)
        applied.append(res.applied_control)
        state, queue = res.next_state, res.queue
    nonzero = [t for t, a in enumerate(applied) if np.any(a != 0)]
    assert nonzero == [1 + lag]
    assert np.array_equal(applied[1 + lag], [50.0, -20.0, 10.0])


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=3, max_size=3))
def test_saturation_idempotent(u):
    b = np.array(DEFAULT_BOUNDS)
    once = saturate(np.array(u), b)
    assert np.array_equal(saturate(once, b), once)
    assert np.all(np.abs(once) <= b)


def test_offset_then_saturation():
    v = make_variated("ctrl_offset")
    assert v.control_offset_fraction == pytest.approx(0.3)
    res = step_first_principle(REST, [100.0, 0.0, -82.0], ZERO, v, 0.05)
    assert np.allclose(res.applied_control, [112.0, 0.3 * 112, -82 + 0.3 * 82])


def test_variation_table():
    assert make_variated("smaller_mass").mass == 50.0
    assert make_variated("larger_mass").mass == 70.0
    assert make_variated("smaller_ctrl").control_bounds == (86.0, 86.0, 62.0)
    assert make_variated("hydrodynamics").hydrodynamics_enabled
    cad = make_variated("cad_geometry")
    assert cad.inertia_yaw > DEFAULT.inertia_yaw and cad.mass == DEFAULT.mass
    gt = make_variated("empirical_ground_truth")
    assert gt.hydrodynamics_enabled and gt.control_latency == pytest.approx(0.1)
    assert all(s > 0 for s in gt.process_noise_std)
    for kind in VARIATION_KINDS:
        make_variated(kind)
    # source side of the "larger" variations is the reduced model
    assert source_variation("larger_ctrl").control_bounds == (86.0, 86.0, 62.0)
    assert max(source_variation("larger_vel").velocity_limits[:2]) < 1.0


def test_unknown_variation_lists_names():
    with pytest.raises(ConfigError, match="smaller_mass"):
        make_variated("bigger_robot")


def test_invalid_variations_rejected():
    with pytest.raises(ConfigError):
        ModelVariation(mass=0.0)
    with pytest.raises(ConfigError):
        ModelVariation(control_offset_fraction=1.0)
    with pytest.raises(ConfigError):
        ModelVariation(control_latency=0.07).latency_steps(0.05)


def test_bad_inputs():
    with pytest.raises(DynamicsError):
        step_first_principle([0, 0, 0, np.nan, 0, 0], ZERO, ZERO, DEFAULT, 0.05)
    with pytest.raises(ConfigError):
        step_first_principle(REST, ZERO, ZERO, DEFAULT, 0.0)
    with pytest.raises(ConfigError):
        step_first_principle(REST, ZERO, ZERO, DEFAULT, -0.05)


def test_step_model_dispatch_and_unloaded_model():
    rng = np.random.default_rng(3)
    model = FirstPrincipleModel(DEFAULT)
    for _ in range(100):
        s = rng.normal(size=6)
        u = rng.uniform(-150, 150, size=3)
        d = rng.normal(scale=30, size=3)
        a = step_model(model, s, u, d).next_state
        b = step_first_principle(s, u, d, DEFAULT).next_state
        assert np.array_equal(a, b)
    with pytest.raises(ModelStateError):
        step_model(None, REST, ZERO, ZERO)


class _ZeroDelta:
    control_bounds = np.array(DEFAULT_BOUNDS)

    def queue_length(self, dt=0.05):
        return 0

    def step(self, state, commanded, disturbance, dt=0.05, queue=None, rng=None):
        from wavecomp.dynamics import StepResult

        return StepResult(np.array(state, dtype=float) + 0.0, saturate(commanded, self.control_bounds),
                          np.asarray(disturbance), None)


def test_step_model_with_zero_delta_handle():
    s = np.array([0.3, -0.2, 1.0, 0.1, 0.0, -0.2])
    assert np.array_equal(step_model(_ZeroDelta(), s, [5, 5, 5], ZERO).next_state, s)


@settings(max_examples=50)
@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=3, max_size=3),
       st.lists(finite, min_size=3, max_size=3))
def test_determinism_and_velocity_limits(s, u, d):
    s, u, d = np.array(s) / 10, np.array(u) * 3, np.array(d)
    a = step_first_principle(s, u, d, DEFAULT)
    b = step_first_principle(s, u, d, DEFAULT)
    assert np.array_equal(a.next_state, b.next_state)
    assert np.all(np.abs(a.next_state[3:]) <= np.array(DEFAULT.velocity_limits))
    yaw = a.next_state[2]
    assert -math.pi < yaw <= math.pi


@settings(max_examples=50)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi))
def test_drag_dissipates_energy(u, v, r, yaw):
    var = make_variated("hydrodynamics")
    m, iz = var.mass, var.inertia_yaw
    fa = var.added_mass_factors
    M = np.array([m + fa[0] * m, m + fa[1] * m, iz + fa[2] * iz])
    s = np.array([0.0, 0.0, yaw, u, v, r])
    for _ in range(20):
        nxt = step_first_principle(s, ZERO, ZERO, var).next_state
        e0 = 0.5 * np.sum(M * s[3:] ** 2)
        e1 = 0.5 * np.sum(M * nxt[3:] ** 2)
        assert e1 <= e0 + 1e-12
        s = nxt


def test_yaw_wraps_near_pi():
    s = np.array([0.0, 0.0, math.pi - 1e-3, 0.0, 0.0, math.pi / 2])
    yaw = step_first_principle(s, ZERO, ZERO, DEFAULT).next_state[2]
    assert -math.pi < yaw <= math.pi
    assert yaw < 0
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi


def test_batched_step_matches_rowwise():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(7, 6))
    u = rng.uniform(-120, 120, size=(7, 3))
    d = rng.normal(scale=40, size=(7, 3))
    batch = step_first_principle(s, u, d, DEFAULT).next_state
    rows = np.array([step_first_principle(s[i], u[i], d[i], DEFAULT).next_state for i in range(7)])
    assert np.allclose(batch, rows, rtol=0, atol=1e-15)


def test_process_noise_needs_rng():
    gt = make_variated("empirical_ground_truth")
    with pytest.raises(ConfigError):
        step_first_principle(REST, ZERO, ZERO, gt, queue=np.zeros((2, 3)))
    a = step_first_principle(REST, ZERO, ZERO, gt, queue=np.zeros((2, 3)), rng=np.random.default_rng(1))
    b = step_first_principle(REST, ZERO, ZERO, gt, queue=np.zeros((2, 3)), rng=np.random.default_rng(1))
    assert np.array_equal(a.next_state, b.next_state)


def test_state_and_section_helpers():
    st_ = SystemState.from_array([1, 2, 3, 0.1, 0.2, 0.3])
    assert np.array_equal(np.asarray(st_), [1, 2, 3, 0.1, 0.2, 0.3])
    v = variation_from_section({"kind": "smaller_mass", "control_bounds": "100, 100, 70"})
    assert v.mass == 50.0 and v.control_bounds == (100.0, 100.0, 70.0)
    with pytest.raises(ConfigError):
        variation_from_section({"wingspan": "3"})
