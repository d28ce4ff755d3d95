"""Sum-of-sinusoids wave forces: parameter sampling, synthesis, trace files.

Parameters are held per axis (X, Y, yaw) as ``(3, k)`` arrays of amplitude,
angular frequency and phase; a disturbance sample at time ``t`` on one axis
is ``sum_i A_i sin(w_i t + phi_i)`` with ``t = step * dt`` measured from the
start of the episode.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import signal

from .errors import ConfigError, TraceParseError

# Component schedule for five waves: amplitude as a fraction of the axis
# control bound and period in seconds.
TABLE_AMPLITUDE = ((0.0, 0.5), (0.5, 1.0), (0.5, 1.0), (0.5, 1.0), (0.0, 0.5))
TABLE_PERIOD = ((1.0, 2.0), (2.0, 4.0), (2.0, 4.0), (2.0, 4.0), (4.0, 8.0))
AXES = ("fx", "fy", "tau")


class WaveTriple(NamedTuple):
    amplitude: float
    angular_frequency: float
    phase: float


class ComponentRange(NamedTuple):
    amplitude: tuple  # fraction of bound (lo, hi)
    period: tuple  # seconds (lo, hi)

    @property
    def omega(self):
        return (2 * math.pi / self.period[1], 2 * math.pi / self.period[0])


def component_ranges(k, amplitude_scale=1.0):
    """Sampling ranges for ``k`` components.

    Component ``i`` sits at position ``i / (k - 1)`` along the five-column
    schedule (``0.5`` when ``k == 1``) and its range bounds are linearly
    interpolated between neighbouring columns.  ``k == 5`` reproduces the
    schedule exactly; ``k == 2`` takes the first and last columns.
    ``amplitude_scale`` multiplies both amplitude bounds.
    """
    if k < 1:
        raise ConfigError(f"number of disturbance components must be >= 1, got {k}")
    knots = np.linspace(0.0, 1.0, len(TABLE_AMPLITUDE))
    pos = np.array([0.5]) if k == 1 else np.linspace(0.0, 1.0, k)
    amp = np.asarray(TABLE_AMPLITUDE)
    per = np.asarray(TABLE_PERIOD)
    out = []
    for s in pos:
        a = tuple(float(np.interp(s, knots, amp[:, j])) * amplitude_scale for j in range(2))
        p = tuple(float(np.interp(s, knots, per[:, j])) for j in range(2))
        out.append(ComponentRange(a, p))
    return tuple(out)


def wrap_phase(phi):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(phi, dtype=float) + np.pi, 2 * np.pi) - np.pi


@dataclass(frozen=True, eq=False)
class DisturbanceParams:
    amplitude: np.ndarray  # (3, k)
    omega: np.ndarray  # (3, k)
    phase: np.ndarray  # (3, k)

    def __post_init__(self):
        arrays = [np.array(getattr(self, n), dtype=float) for n in ("amplitude", "omega", "phase")]
        for name, arr in zip(("amplitude", "omega", "phase"), arrays):
            if arr.ndim != 2 or arr.shape[0] != 3:
                raise ConfigError(f"{name} must have shape (3, k), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"non-finite {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not arrays[0].shape == arrays[1].shape == arrays[2].shape:
            raise ConfigError("amplitude, omega and phase must share one shape")
        if np.any(arrays[0] < 0):
            raise ConfigError("amplitudes must be >= 0")
        if np.any(arrays[1] <= 0):
            raise ConfigError("angular frequencies must be > 0")
        if np.any(arrays[2] < -np.pi) or np.any(arrays[2] >= np.pi):
            raise ConfigError("phases must lie in [-pi, pi)")

    @property
    def k(self):
        return self.amplitude.shape[1]

    def triples(self, axis):
        return [WaveTriple(float(a), float(w), float(p))
                for a, w, p in zip(self.amplitude[axis], self.omega[axis], self.phase[axis])]

    def __eq__(self, other):
        if not isinstance(other, DisturbanceParams):
            return NotImplemented
        return (np.array_equal(self.amplitude, other.amplitude)
                and np.array_equal(self.omega, other.omega)
                and np.array_equal(self.phase, other.phase))

    def __hash__(self):
        return hash((self.amplitude.tobytes(), self.omega.tobytes(), self.phase.tobytes()))


@dataclass(frozen=True, eq=False)
class DisturbanceTrace:
    dt: float
    samples: np.ndarray  # (n, 3)
    t0_step: int = 0

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
            raise ConfigError(f"trace samples must have shape (n, 3), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ConfigError("trace contains non-finite samples")
        if not self.dt > 0:
            raise ConfigError(f"trace dt must be positive, got {self.dt}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def times(self):
        return (self.t0_step + np.arange(len(self.samples))) * self.dt

    def __eq__(self, other):
        if not isinstance(other, DisturbanceTrace):
            return NotImplemented
        return (self.dt == other.dt and self.t0_step == other.t0_step
                and np.array_equal(self.samples, other.samples))

    __hash__ = None


def sample_params(rng, bounds, k=5, amplitude_scale=1.0, shared_axes=False,
                  amplitude_overshoot=1.0) -> DisturbanceParams:
    """Draw one parameter set.

    Draw order is component-major then axis: for each component the three
    amplitudes, then periods, then phases.  ``shared_axes`` draws one set of
    frequencies and phases used on all axes (amplitudes still scale by each
    axis bound).  ``amplitude_overshoot`` stretches the upper amplitude bound.
    """
    ranges = component_ranges(k, amplitude_scale)
    bounds = np.asarray(bounds, dtype=float)
    amp = np.empty((3, k))
    omega = np.empty((3, k))
    phase = np.empty((3, k))
    n_axes = 1 if shared_axes else 3
    for i, rg in enumerate(ranges):
        lo, hi = rg.amplitude
        frac = rng.uniform(lo, hi * amplitude_overshoot, size=n_axes)
        period = rng.uniform(rg.period[0], rg.period[1], size=n_axes)
        ph = rng.uniform(-np.pi, np.pi, size=n_axes)
        amp[:, i] = frac * bounds
        omega[:, i] = 2 * np.pi / period
        phase[:, i] = ph
    return DisturbanceParams(amp, omega, phase)


def wave_sum(amplitude, omega, phase, t):
    """Evaluate sinusoid sums.

    ``amplitude``, ``omega``, ``phase`` have shape ``(..., 3, k)`` and ``t``
    has shape ``(..., n)`` (seconds); the result has shape ``(..., n, 3)``.
    """
    t = np.asarray(t, dtype=float)
    arg = omega[..., None, :, :] * t[..., :, None, None] + phase[..., None, :, :]
    return np.sum(amplitude[..., None, :, :] * np.sin(arg), axis=-1)


def synthesize(params: DisturbanceParams, t0_step, horizon, dt) -> DisturbanceTrace:
    """Disturbance samples for steps ``t0_step .. t0_step + horizon - 1``."""
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    t = (t0_step + np.arange(horizon)) * dt
    return DisturbanceTrace(dt, wave_sum(params.amplitude, params.omega, params.phase, t), int(t0_step))


@dataclass(frozen=True)
class TargetTraceConfig:
    """Held-out disturbance process, richer than the training distribution."""

    n_components: int = 2
    amplitude_scale: float = 1.0
    amplitude_overshoot: float = 1.5
    drift_fraction: float = 0.3
    drift_period: tuple = (20.0, 60.0)
    noise_fraction: float = 0.1
    noise_cutoff_hz: float = 1.0


def _lowpass_noise(rng, length, dt, cutoff_hz):
    nyquist = 0.5 / dt
    b, a = signal.butter(2, min(cutoff_hz / nyquist, 0.99))
    warm = 200
    white = rng.standard_normal((length + warm, 3))
    filtered = signal.lfilter(b, a, white, axis=0)[warm:]
    impulse = np.zeros(4000)
    impulse[0] = 1.0
    gain = np.sqrt(np.sum(signal.lfilter(b, a, impulse) ** 2))
    return filtered / gain


def make_target_trace(rng, bounds, length, dt, config: TargetTraceConfig = TargetTraceConfig()) -> DisturbanceTrace:
    """Synthesize a held-out target-task trace.

    Sinusoids drawn with amplitudes up to ``amplitude_overshoot`` times the
    schedule's upper bound, each with a slow sinusoidal amplitude drift,
    plus low-pass Gaussian noise with standard deviation
    ``noise_fraction * bound``.  With no drift, no noise, no overshoot and
    five components this is exactly :func:`synthesize` of the drawn params.
    """
    if length < 1:
        raise ConfigError(f"trace length must be >= 1, got {length}")
    bounds = np.asarray(bounds, dtype=float)
    params = sample_params(rng, bounds, config.n_components, config.amplitude_scale,
                           amplitude_overshoot=config.amplitude_overshoot)
    if not config.drift_fraction and not config.noise_fraction:
        return synthesize(params, 0, length, dt)
    t = np.arange(length) * dt
    amp = params.amplitude
    if config.drift_fraction:
        periods = rng.uniform(*config.drift_period, size=amp.shape)
        offsets = rng.uniform(-np.pi, np.pi, size=amp.shape)
        drift = 1.0 + config.drift_fraction * np.sin(
            2 * np.pi * t[:, None, None] / periods + offsets)  # (n, 3, k)
        arg = params.omega * t[:, None, None] + params.phase
        samples = np.sum(amp * drift * np.sin(arg), axis=-1)
    else:
        samples = synthesize(params, 0, length, dt).samples.copy()
    if config.noise_fraction:
        samples = samples + config.noise_fraction * bounds * _lowpass_noise(
            rng, length, dt, config.noise_cutoff_hz)
    return DisturbanceTrace(dt, samples, 0)


TRACE_HEADER = ["t", "fx", "fy", "tau"]


def write_trace(trace: DisturbanceTrace, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t, row in zip(trace.times, trace.samples):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def read_trace(path, dt=None) -> DisturbanceTrace:
    """Read a ``t,fx,fy,tau`` CSV.  ``dt`` is needed only for one-row files."""
    path = Path(path)
    times, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}, got {header}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TraceParseError(f"expected 4 columns, got {len(row)}", path, lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise TraceParseError(str(exc), path, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise TraceParseError("non-finite value", path, lineno)
            times.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise TraceParseError("trace has no samples", path)
    times = np.asarray(times)
    if len(times) > 1:
        est = (times[-1] - times[0]) / (len(times) - 1)
        dt_found = float(f"{est:.12g}")
        if dt is not None and not math.isclose(dt, dt_found, rel_tol=1e-9):
            raise TraceParseError(f"time step {dt_found} differs from expected {dt}", path)
        dt = dt_found
    elif dt is None:
        raise TraceParseError("cannot infer dt from a single sample; pass dt", path)
    if dt <= 0:
        raise TraceParseError(f"time column must increase, step {dt}", path)
    t0 = int(round(times[0] / dt))
    expected = (t0 + np.arange(len(times))) * dt
    bad = np.nonzero(np.abs(times - expected) > 1e-9 * np.maximum(1.0, np.abs(expected)))[0]
    if len(bad):
        raise TraceParseError("non-uniform time step", path, int(bad[0]) + 2)
    return DisturbanceTrace(dt, np.asarray(rows), t0)
