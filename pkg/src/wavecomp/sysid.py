"""Learned delta-state dynamics fitted to random-control data.

A ground-truth simulator (by default the ``empirical_ground_truth``
variation) is driven with uniformly random commands in still water; a
proportional recentering command takes over near the walls of a safety
box.  An MLP is fitted to normalized ``(x_t, u_t) -> x_{t+1} - x_t`` pairs
and wrapped as a dynamics handle that the transfer stage can use as its
target model.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (DEFAULT_DT, FirstPrincipleModel, ModelVariation, StepResult, body_to_world_rates,
                       make_variated, saturate, world_to_body, wrap_angle)
from .errors import DynamicsError, FormatError, TrainingError
from .neural import (FeedforwardSpec, NetworkParams, OptimizerConfig, OptimizerState, backward, forward,
                     init_feedforward, load_checkpoint, merge_prefixed, optimize_step, save_checkpoint,
                     split_prefixed)

log = logging.getLogger(__name__)

LOG_FIELDS = ["t", "x", "y", "yaw", "vx", "vy", "yawrate", "fx", "fy", "tau"]
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrajectoryLog:
    """One continuous trajectory: ``actions[i]`` is commanded at ``states[i]``.

    The last row's action is never applied and is stored as zeros.
    """

    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.times)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self) > 1 else DEFAULT_DT


def recentering_action(states, box, bounds, margin=0.75, kp=150.0, kd=200.0):
    """Body-frame PD command pushing the robot back toward the box centre.

    Returns ``(action, active)``.  The command activates once a position
    leaves the inner box ``box - margin``, leaving room to brake.
    """
    states = np.atleast_2d(states)
    pos = states[:, :2]
    inner = max(box - margin, 0.0)
    excess = pos - np.clip(pos, -inner, inner)
    active = np.any(excess != 0.0, axis=1)
    vw = body_to_world_rates(states[:, 2], states[:, 3:])[:, :2]
    fw = np.zeros((len(states), 3))
    fw[:, :2] = -kp * excess - kd * vw
    u = saturate(world_to_body(states[:, 2], fw), bounds)
    u[:, 2] = 0.0
    return u, active


def collect_random_trajectories(ground_truth: ModelVariation, n_steps, rng, box=3.0, margin=0.75,
                                dt=DEFAULT_DT, hold_steps=(5, 20)) -> TrajectoryLog:
    """Drive ``ground_truth`` with random commands for ``n_steps`` steps.

    Commands are uniform within the control bounds, each held for a random
    number of steps in ``hold_steps`` (inclusive).  Holding matters when
    the ground truth has command latency: with a fresh command every step
    the next state would carry no information about the current command.
    Near the box walls the recentering command replaces the translational
    part.  No disturbance.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    lo_hold, hi_hold = int(hold_steps[0]), int(hold_steps[1])
    if not 1 <= lo_hold <= hi_hold:
        raise ValueError(f"bad hold range {hold_steps}")
    model = FirstPrincipleModel(ground_truth)
    bounds = np.asarray(ground_truth.control_bounds)
    states = np.zeros((n_steps + 1, 6))
    actions = np.zeros((n_steps + 1, 3))
    lag = model.queue_length(dt)
    queue = np.zeros((lag, 3)) if lag else None
    zero = np.zeros(3)
    held, remaining = np.zeros(3), 0
    for i in range(n_steps):
        if remaining == 0:
            held = rng.uniform(-bounds, bounds)
            remaining = int(rng.integers(lo_hold, hi_hold + 1))
        remaining -= 1
        u = held.copy()
        rec, active = recentering_action(states[i], box, bounds, margin)
        if active[0]:
            u[:2] = rec[0, :2]
        actions[i] = u
        res = model.step(states[i], u, zero, dt, queue, rng)
        states[i + 1] = res.next_state
        queue = res.queue
    return TrajectoryLog(np.arange(n_steps + 1) * dt, states, actions)


def write_log(log_: TrajectoryLog, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for t, s, a in zip(log_.times, log_.states, log_.actions):
            w.writerow([repr(float(v)) for v in (t, *s, *a)])


def read_log(path) -> TrajectoryLog:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_FIELDS:
            raise FormatError(f"{path}:1: expected header {','.join(LOG_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if len(row) != len(LOG_FIELDS):
                raise FormatError(f"{path}:{lineno}: expected {len(LOG_FIELDS)} columns, got {len(row)}")
    arr = np.array(rows).reshape(-1, len(LOG_FIELDS))
    return TrajectoryLog(arr[:, 0], arr[:, 1:7], arr[:, 7:10])


# -- dataset --------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data, name="feature"):
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        small = std < STD_FLOOR
        if np.any(small):
            warnings.warn(f"{name} columns {np.nonzero(small)[0].tolist()} are constant; std floored at "
                          f"{STD_FLOOR}", RuntimeWarning, stacklevel=3)
            std = np.where(small, STD_FLOOR, std)
        return cls(mean, std)

    def normalize(self, v):
        return (v - self.mean) / self.std

    def denormalize(self, v):
        return v * self.std + self.mean


def transition_pairs(log_: TrajectoryLog):
    """Inputs ``[x_t, u_t]`` and labels ``x_{t+1} - x_t`` (yaw difference wrapped)."""
    if len(log_) < 2:
        raise ValueError("a trajectory log needs at least 2 rows")
    x = log_.states
    inputs = np.concatenate([x[:-1], log_.actions[:-1]], axis=1)
    labels = x[1:] - x[:-1]
    labels[:, 2] = wrap_angle(labels[:, 2])
    return inputs, labels


@dataclass(frozen=True)
class TransitionDataset:
    inputs: np.ndarray
    labels: np.ndarray
    input_stats: NormStats
    label_stats: NormStats
    train_idx: np.ndarray
    val_idx: np.ndarray
    dt: float = DEFAULT_DT

    def split(self, which):
        idx = self.train_idx if which == "train" else self.val_idx
        return (self.input_stats.normalize(self.inputs[idx]), self.label_stats.normalize(self.labels[idx]))


def build_dataset(log_: TrajectoryLog, train_fraction=0.9) -> TransitionDataset:
    """Pair up transitions; the validation set is the contiguous tail.

    A tail split keeps temporally adjacent (nearly identical) pairs from
    straddling train and validation.
    """
    inputs, labels = transition_pairs(log_)
    n = len(inputs)
    n_train = int(round(train_fraction * n))
    if not 0 < n_train <= n:
        raise ValueError(f"train fraction {train_fraction} leaves no training pairs out of {n}")
    train_idx = np.arange(n_train)
    val_idx = np.arange(n_train, n)
    return TransitionDataset(inputs, labels, NormStats.fit(inputs[train_idx], "input"),
                             NormStats.fit(labels[train_idx], "label"), train_idx, val_idx, log_.dt)


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsTrainConfig:
    hidden: tuple = (200, 200, 200)
    batch_size: int = 512
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 8
    min_delta: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class EmpiricalModel:
    """``x_{t+1} = x_t + denormalize(f(normalize([x_t, u_t])))``."""

    spec: FeedforwardSpec
    params: NetworkParams
    input_stats: NormStats
    label_stats: NormStats
    dt: float = DEFAULT_DT

    def predict_delta(self, states, actions):
        z = self.input_stats.normalize(np.concatenate([states, actions], axis=-1))
        y, _ = forward(self.params, self.spec, z)
        return self.label_stats.denormalize(y)

    def predict(self, states, actions):
        nxt = np.asarray(states, dtype=float) + self.predict_delta(states, actions)
        nxt[..., 2] = wrap_angle(nxt[..., 2])
        return nxt


def mse(pred, target):
    return float(np.mean((pred - target) ** 2))


def train_dynamics(dataset: TransitionDataset, config: DynamicsTrainConfig = DynamicsTrainConfig()):
    """Fit the delta model with Adam; early-stop on validation MSE.

    Returns ``(EmpiricalModel, curve)`` where ``curve`` rows are
    ``{"epoch", "train_mse", "val_mse"}`` in normalized units.  The returned
    model holds the best-validation parameters.
    """
    rng = np.random.default_rng(config.seed)
    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    has_val = len(x_va) > 0
    spec = FeedforwardSpec(x_tr.shape[1], tuple(config.hidden), y_tr.shape[1])
    params = init_feedforward(spec, rng)
    opt = OptimizerConfig("adam", config.learning_rate, clip_norm=config.clip_norm)
    state = OptimizerState()
    best, best_score, stale = params.copy(), math.inf, 0
    curve = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            pred, cache = forward(params, spec, x_tr[b])
            err = pred - y_tr[b]
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise TrainingError(f"dynamics training diverged at epoch {epoch} (loss {loss})")
            grads, _ = backward(params, spec, cache, 2.0 * err / err.size)
            optimize_step(params, grads, state, opt)
        train_mse = mse(forward(params, spec, x_tr)[0], y_tr)
        val_mse = mse(forward(params, spec, x_va)[0], y_va) if has_val else train_mse
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingError(f"dynamics training diverged at epoch {epoch}")
        curve.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        log.debug("epoch %d train %.6g val %.6g", epoch, train_mse, val_mse)
        if val_mse < best_score * (1.0 - config.min_delta):
            best, best_score, stale = params.copy(), val_mse, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model = EmpiricalModel(spec, best, dataset.input_stats, dataset.label_stats, dataset.dt)
    return model, curve


def zero_order_hold_mse(dataset: TransitionDataset):
    """Validation MSE (normalized units) of predicting no change."""
    _, y_va = dataset.split("val")
    zero = dataset.label_stats.normalize(np.zeros(dataset.labels.shape[1]))
    return mse(np.broadcast_to(zero, y_va.shape), y_va)


def validation_mse(model: EmpiricalModel, dataset: TransitionDataset):
    x_va, y_va = dataset.split("val")
    return mse(forward(model.params, model.spec, x_va)[0], y_va)


# -- dynamics handle ----------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalHandle:
    """Empirical model exposed through the common step contract.

    Commands are saturated to the configured bounds.  External disturbance
    forces enter as accelerations ``d / m`` (``d / I`` for yaw) integrated
    over one step on top of the learned delta.
    """

    model: EmpiricalModel
    control_bounds: tuple
    mass: float
    inertia_yaw: float
    velocity_limits: tuple = None

    def queue_length(self, dt=DEFAULT_DT):
        return 0

    def step(self, state, commanded, disturbance, dt=DEFAULT_DT, queue=None, rng=None) -> StepResult:
        if not math.isclose(dt, self.model.dt, rel_tol=1e-9):
            raise DynamicsError(f"empirical model was trained at dt={self.model.dt}, asked for dt={dt}")
        state = np.asarray(state, dtype=float)
        disturbance = np.asarray(disturbance, dtype=float)
        applied = saturate(np.asarray(commanded, dtype=float), np.asarray(self.control_bounds))
        nxt = self.model.predict(state, applied)
        yaw = state[..., 2]
        dv = dt * world_to_body(yaw, disturbance) / np.array([self.mass, self.mass, self.inertia_yaw])
        nu = nxt[..., 3:] + dv
        if self.velocity_limits is not None:
            lim = np.asarray(self.velocity_limits)
            nu = np.clip(nu, -lim, lim)
        eta = nxt[..., :3] + dt * body_to_world_rates(yaw, nu - nxt[..., 3:])
        eta[..., 2] = wrap_angle(eta[..., 2])
        return StepResult(np.concatenate([eta, nu], axis=-1), applied,
                          np.broadcast_to(disturbance, applied.shape).copy(), None)


def wrap_empirical(model: EmpiricalModel, variation: ModelVariation = None) -> EmpiricalHandle:
    """Handle using mass, inertia, bounds and velocity limits from ``variation``."""
    v = variation or make_variated("empirical_ground_truth")
    return EmpiricalHandle(model, tuple(v.control_bounds), v.mass, v.inertia_yaw, v.velocity_limits)


def save_empirical(model: EmpiricalModel, path):
    """Checkpoint holding the net and its normalization stats; returns the sha256."""
    stats = NetworkParams({"input_mean": model.input_stats.mean, "input_std": model.input_stats.std,
                           "label_mean": model.label_stats.mean, "label_std": model.label_stats.std})
    path = Path(path)
    digest = save_checkpoint(merge_prefixed({"net": model.params, "stats": stats}), path)
    meta = {"hidden": list(model.spec.hidden_dims), "input_dim": model.spec.input_dim,
            "output_dim": model.spec.output_dim, "dt": model.dt, "sha256": digest,
            "stats": {k: v.tolist() for k, v in stats.items()}}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def load_empirical(path) -> EmpiricalModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = FeedforwardSpec(meta["input_dim"], tuple(meta["hidden"]), meta["output_dim"])
    params = load_checkpoint(path)
    net = split_prefixed(params, "net")
    st = split_prefixed(params, "stats")
    return EmpiricalModel(spec, net, NormStats(st["input_mean"], st["input_std"]),
                          NormStats(st["label_mean"], st["label_std"]), meta["dt"])
