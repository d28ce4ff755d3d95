"""Planar (surge, sway, yaw) rigid-body model of the robot.

State vector layout is ``[x, y, yaw, vx, vy, yaw_rate]``: pose in the world
frame, velocities in the body frame.  Actions are body-frame ``[fx, fy, tau]``.
Disturbances are given in the world frame and rotated into the body frame.

Every step function accepts a leading batch dimension, so a stack of rollout
workers can be advanced with one call.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol

import numpy as np

from .errors import ConfigError, DynamicsError, ModelStateError

STATE_DIM = 6
ACTION_DIM = 3
DEFAULT_DT = 0.05

CUBOID_GEOMETRY = (0.68, 0.75, 0.19)
DEFAULT_BOUNDS = (112.0, 112.0, 82.0)
DEFAULT_VELOCITY_LIMITS = (1.0, 1.0, math.pi / 2)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


def cuboid_yaw_inertia(mass, geometry):
    length, width, _ = geometry
    return mass * (length**2 + width**2) / 12.0


@dataclass(frozen=True)
class SystemState:
    x_pos: float = 0.0
    y_pos: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self):
        return np.array(dataclasses.astuple(self), dtype=float)

    def __array__(self, dtype=None, copy=None):
        return self.as_array().astype(dtype or float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (STATE_DIM,):
            raise DynamicsError(f"state must have shape (6,), got {arr.shape}")
        return cls(*map(float, arr))


@dataclass(frozen=True)
class ControlAction:
    fx: float = 0.0
    fy: float = 0.0
    tau: float = 0.0

    def as_array(self):
        return np.array(dataclasses.astuple(self), dtype=float)

    def __array__(self, dtype=None, copy=None):
        return self.as_array().astype(dtype or float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (ACTION_DIM,):
            raise DynamicsError(f"action must have shape (3,), got {arr.shape}")
        return cls(*map(float, arr))


def _triple(value, name):
    arr = tuple(float(v) for v in value)
    if len(arr) != 3:
        raise ConfigError(f"{name} needs 3 per-axis values, got {len(arr)}")
    return arr


@dataclass(frozen=True)
class ModelVariation:
    """Physical configuration of the first-principle model.

    Drag and added-mass coefficients only act when ``hydrodynamics_enabled``.
    Added mass is given as fractions of mass (surge, sway) and yaw inertia.
    """

    name: str = "default"
    mass: float = 60.0
    inertia_yaw: float = field(default_factory=lambda: cuboid_yaw_inertia(60.0, CUBOID_GEOMETRY))
    geometry: tuple = CUBOID_GEOMETRY
    hydrodynamics_enabled: bool = False
    added_mass_factors: tuple = (0.25, 0.5, 0.3)
    drag_linear: tuple = (25.0, 35.0, 4.0)
    drag_quadratic: tuple = (40.0, 60.0, 3.0)
    velocity_limits: Optional[tuple] = DEFAULT_VELOCITY_LIMITS
    control_bounds: tuple = DEFAULT_BOUNDS
    control_offset_fraction: float = 0.0
    control_offset_sign: tuple = (1.0, 1.0, 1.0)
    control_latency: float = 0.0
    process_noise_std: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("geometry", "added_mass_factors", "drag_linear", "drag_quadratic",
                     "control_bounds", "control_offset_sign", "process_noise_std"):
            object.__setattr__(self, name, _triple(getattr(self, name), name))
        if self.velocity_limits is not None:
            object.__setattr__(self, "velocity_limits", _triple(self.velocity_limits, "velocity_limits"))
            if min(self.velocity_limits) <= 0:
                raise ConfigError("velocity_limits must be positive")
        if not self.mass > 0:
            raise ConfigError(f"mass must be positive, got {self.mass}")
        if not self.inertia_yaw > 0:
            raise ConfigError(f"inertia_yaw must be positive, got {self.inertia_yaw}")
        if min(self.control_bounds) <= 0:
            raise ConfigError("control_bounds must be positive")
        if not 0.0 <= self.control_offset_fraction < 1.0:
            raise ConfigError("control_offset_fraction must lie in [0, 1)")
        if self.control_latency < 0:
            raise ConfigError("control_latency must be >= 0")
        if min(self.process_noise_std) < 0:
            raise ConfigError("process_noise_std must be >= 0")

    def latency_steps(self, dt):
        steps = self.control_latency / dt
        n = int(round(steps))
        if abs(steps - n) > 1e-9:
            raise ConfigError(
                f"control_latency {self.control_latency} is not a multiple of dt={dt}")
        return n

    @property
    def bounds(self):
        return np.asarray(self.control_bounds)


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    applied_control: np.ndarray
    applied_disturbance: np.ndarray
    queue: Optional[np.ndarray] = None


def saturate(u, bounds):
    bounds = np.asarray(bounds, dtype=float)
    return np.clip(u, -bounds, bounds)


def body_to_world_rates(yaw, nu):
    """Apply the planar Jacobian J(yaw) to body velocities."""
    c, s = np.cos(yaw), np.sin(yaw)
    u, v, r = nu[..., 0], nu[..., 1], nu[..., 2]
    return np.stack([c * u - s * v, s * u + c * v, r], axis=-1)


def world_to_body(yaw, f):
    c, s = np.cos(yaw), np.sin(yaw)
    fx, fy, tau = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([c * fx + s * fy, -s * fx + c * fy, tau], axis=-1)


def _check_finite(**arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise DynamicsError(f"non-finite {name}: {np.asarray(arr).tolist()}")


def _check_dt(dt):
    if not (np.isfinite(dt) and dt > 0):
        raise ConfigError(f"dt must be positive, got {dt}")


def step_first_principle(state, commanded, disturbance, variation: ModelVariation,
                         dt=DEFAULT_DT, queue=None, rng=None) -> StepResult:
    """Advance the model one step with semi-implicit Euler.

    ``queue`` holds the commands still in flight when the variation has
    control latency, oldest first, shape ``(L, *batch, 3)``; ``None`` means
    an empty (all-zero) pipeline.  Process noise needs ``rng``.
    """
    _check_dt(dt)
    state = np.asarray(state, dtype=float)
    commanded = np.asarray(commanded, dtype=float)
    disturbance = np.asarray(disturbance, dtype=float)
    _check_finite(state=state, commanded=commanded, disturbance=disturbance)
    if state.shape[-1] != STATE_DIM or commanded.shape[-1] != ACTION_DIM or disturbance.shape[-1] != 3:
        raise DynamicsError(
            f"bad shapes state={state.shape} action={commanded.shape} disturbance={disturbance.shape}")
    v = variation
    lag = v.latency_steps(dt)
    batch = np.broadcast_shapes(state.shape[:-1], commanded.shape[:-1])

    if lag > 0:
        if queue is None:
            queue = np.zeros((lag,) + batch + (3,))
        queue = np.asarray(queue, dtype=float)
        if queue.shape[0] != lag:
            raise DynamicsError(f"latency queue must hold {lag} commands, got {queue.shape[0]}")
        raw = queue[0]
        new_queue = np.concatenate([queue[1:], np.broadcast_to(commanded, batch + (3,))[None]], axis=0)
    else:
        raw = commanded
        new_queue = None

    bounds = np.asarray(v.control_bounds)
    if v.control_offset_fraction:
        raw = raw + v.control_offset_fraction * np.asarray(v.control_offset_sign) * bounds
    applied = saturate(raw, bounds)

    yaw = state[..., 2]
    nu = state[..., 3:]
    force = applied + world_to_body(yaw, disturbance)
    if any(v.process_noise_std):
        if rng is None:
            raise ConfigError("process noise is enabled but no rng was supplied")
        force = force + rng.normal(size=force.shape) * np.asarray(v.process_noise_std)

    m, iz = v.mass, v.inertia_yaw
    if v.hydrodynamics_enabled:
        fa = v.added_mass_factors
        ma_x, ma_y, ma_n = fa[0] * m, fa[1] * m, fa[2] * iz
    else:
        ma_x = ma_y = ma_n = 0.0
    inertia = np.array([m + ma_x, m + ma_y, iz + ma_n])
    u, vy, r = nu[..., 0], nu[..., 1], nu[..., 2]
    coriolis = np.stack([-(m + ma_y) * vy * r, (m + ma_x) * u * r, (ma_y - ma_x) * u * vy], axis=-1)
    accel_force = force - coriolis
    if v.hydrodynamics_enabled:
        damping = (np.asarray(v.drag_linear) + np.asarray(v.drag_quadratic) * np.abs(nu)) * nu
        accel_force = accel_force - damping
    nu_next = nu + dt * accel_force / inertia
    if v.velocity_limits is not None:
        lim = np.asarray(v.velocity_limits)
        nu_next = np.clip(nu_next, -lim, lim)

    eta = state[..., :3] + dt * body_to_world_rates(yaw, nu_next)
    eta = np.concatenate([eta[..., :2], wrap_angle(eta[..., 2])[..., None]], axis=-1)
    next_state = np.concatenate([eta, nu_next], axis=-1)
    return StepResult(next_state, applied, np.broadcast_to(disturbance, applied.shape).copy(), new_queue)


class DynamicsHandle(Protocol):
    control_bounds: np.ndarray

    def queue_length(self, dt: float) -> int: ...

    def step(self, state, commanded, disturbance, dt=DEFAULT_DT, queue=None, rng=None) -> StepResult: ...


@dataclass(frozen=True)
class FirstPrincipleModel:
    """Immutable handle over a :class:`ModelVariation`."""

    variation: ModelVariation = field(default_factory=lambda: make_default_variation())

    @property
    def control_bounds(self):
        return np.asarray(self.variation.control_bounds)

    @property
    def mass(self):
        return self.variation.mass

    @property
    def inertia_yaw(self):
        return self.variation.inertia_yaw

    @property
    def velocity_limits(self):
        return self.variation.velocity_limits

    def queue_length(self, dt=DEFAULT_DT):
        return self.variation.latency_steps(dt)

    def step(self, state, commanded, disturbance, dt=DEFAULT_DT, queue=None, rng=None):
        return step_first_principle(state, commanded, disturbance, self.variation, dt, queue, rng)


def step_model(model, state, commanded, disturbance, dt=DEFAULT_DT, queue=None, rng=None) -> StepResult:
    """Step any dynamics handle (first-principle variation or empirical net)."""
    if isinstance(model, ModelVariation):
        model = FirstPrincipleModel(model)
    if model is None or not hasattr(model, "step"):
        raise ModelStateError("dynamics model is not loaded")
    return model.step(state, commanded, disturbance, dt=dt, queue=queue, rng=rng)


def make_default_variation() -> ModelVariation:
    """Source-task model: 60 kg cuboid, no hydrodynamics, no latency."""
    return ModelVariation()


_SMALL_VEL = (0.7, 0.7, math.pi / 3)
_SMALL_CTRL = (86.0, 86.0, 62.0)


def _variants():
    d = make_default_variation()
    rep = dataclasses.replace
    return {
        "smaller_mass": rep(d, name="smaller_mass", mass=50.0),
        "larger_mass": rep(d, name="larger_mass", mass=70.0),
        # CAD geometry changes yaw inertia only; drag areas stay as configured
        "cad_geometry": rep(d, name="cad_geometry", inertia_yaw=1.35 * d.inertia_yaw),
        "hydrodynamics": rep(d, name="hydrodynamics", hydrodynamics_enabled=True),
        "smaller_vel": rep(d, name="smaller_vel", velocity_limits=_SMALL_VEL),
        "larger_vel": rep(d, name="larger_vel", velocity_limits=DEFAULT_VELOCITY_LIMITS),
        "smaller_ctrl": rep(d, name="smaller_ctrl", control_bounds=_SMALL_CTRL),
        "larger_ctrl": rep(d, name="larger_ctrl", control_bounds=DEFAULT_BOUNDS),
        "ctrl_offset": rep(d, name="ctrl_offset", control_offset_fraction=0.3),
        "ctrl_latency": rep(d, name="ctrl_latency", control_latency=0.100),
        "empirical_ground_truth": rep(
            d, name="empirical_ground_truth", hydrodynamics_enabled=True, control_latency=0.100,
            process_noise_std=tuple(0.01 * b for b in DEFAULT_BOUNDS)),
    }


VARIATION_KINDS = tuple(_variants())


def make_variated(kind: str) -> ModelVariation:
    """Variated (target-side) model for one row of the model-variation table."""
    table = _variants()
    if kind not in table:
        raise ConfigError(f"unknown variation {kind!r}; valid: {', '.join(VARIATION_KINDS)}")
    return table[kind]


def source_variation(kind: str) -> ModelVariation:
    """Original (source-side) model paired with ``make_variated(kind)``.

    For ``larger_vel`` and ``larger_ctrl`` the table's original model is the
    reduced one, so the variated model coincides with the default.
    """
    d = make_default_variation()
    if kind == "larger_vel":
        return dataclasses.replace(d, name="source_smaller_vel", velocity_limits=_SMALL_VEL)
    if kind == "larger_ctrl":
        return dataclasses.replace(d, name="source_smaller_ctrl", control_bounds=_SMALL_CTRL)
    make_variated(kind)
    return d


def _parse_value(key, text, current):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[model] {key}: expected a boolean, got {text!r}")
    if key == "velocity_limits" and text.lower() in ("none", "off", ""):
        return None
    try:
        if isinstance(current, tuple) or key == "velocity_limits":
            return tuple(float(p) for p in text.replace(",", " ").split())
        if isinstance(current, str):
            return text
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"[model] {key}: cannot parse {text!r}") from exc


def variation_from_section(section: Mapping[str, str]) -> ModelVariation:
    """Build a variation from a ``[model]`` config section.

    ``kind`` selects a base (``default`` or a variation name); any other key
    overrides the matching field, e.g. ``mass = 55`` or
    ``control_bounds = 100, 100, 70``.
    """
    section = dict(section)
    kind = section.pop("kind", "default").strip()
    base = make_default_variation() if kind == "default" else make_variated(kind)
    names = {f.name for f in dataclasses.fields(ModelVariation)}
    updates = {}
    for key, text in section.items():
        if key not in names:
            raise ConfigError(f"[model] unknown key {key!r}")
        updates[key] = _parse_value(key, text, getattr(base, key))
    return dataclasses.replace(base, **updates)
