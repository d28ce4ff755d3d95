"""Pose-regulation task shared by the trainers and the evaluation harness.

A :class:`Workers` object advances a batch of independent episodes in one
vectorized call.  Every worker owns a random generator spawned from the
master seed (``SeedSequence(seed).spawn(n)``), so what a worker samples does
not depend on how many other workers run beside it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import disturbance as dist
from .dynamics import DEFAULT_BOUNDS, DEFAULT_DT, FirstPrincipleModel, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskConfig:
    dt: float = DEFAULT_DT
    episode_length: int = 200
    q_diag: tuple = (1.0, 1.0, 0.5, 0.1, 0.1, 0.05)
    r_diag: tuple = (1e-4, 1e-4, 1e-4)
    init_position: float = 1.0  # half-width of the start box (m)
    init_yaw: float = math.pi / 4
    init_velocity_fraction: float = 0.2
    velocity_scale: tuple = (1.0, 1.0, math.pi / 2)
    max_distance: float = 10.0
    position_scale: float = 2.0
    target: tuple = (0.0, 0.0, 0.0)

    @property
    def state_scale(self):
        return np.array([self.position_scale, self.position_scale, math.pi, *self.velocity_scale])


def relative_state(states, target):
    """State error w.r.t. the target pose (yaw difference wrapped)."""
    rel = np.array(states, dtype=float, copy=True)
    rel[..., 0] -= target[0]
    rel[..., 1] -= target[1]
    rel[..., 2] = wrap_angle(rel[..., 2] - target[2])
    return rel


def distance_to_target(states, target=(0.0, 0.0, 0.0)):
    states = np.asarray(states)
    return np.hypot(states[..., 0] - target[0], states[..., 1] - target[1])


def quadratic_reward(x, u, q, r):
    """``-x'Qx - u'Ru`` for diagonal (1-D) or full (2-D) weights; batched."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    xq = x * x @ q if q.ndim == 1 else np.einsum("...i,ij,...j->...", x, q, x)
    ur = u * u @ r if r.ndim == 1 else np.einsum("...i,ij,...j->...", u, r, u)
    return -xq - ur


def sample_initial_state(rng, task: TaskConfig):
    pos = rng.uniform(-task.init_position, task.init_position, size=2) + np.asarray(task.target[:2])
    yaw = wrap_angle(task.target[2] + rng.uniform(-task.init_yaw, task.init_yaw))
    vel = rng.uniform(-1, 1, size=3) * task.init_velocity_fraction * np.asarray(task.velocity_scale)
    return np.concatenate([pos, [yaw], vel])


# -- disturbance sources ------------------------------------------------------

@dataclass(frozen=True)
class EpisodeDisturbance:
    samples: np.ndarray  # (length, 3) world-frame forces for steps 0..length-1
    params: Optional[dist.DisturbanceParams] = None


@dataclass(frozen=True)
class WaveSource:
    """Sinusoid sums drawn from the training distribution each episode."""

    bounds: tuple = DEFAULT_BOUNDS
    k: int = 5
    amplitude_scale: float = 1.0
    shared_axes: bool = False

    def sample(self, rng, length, dt):
        params = dist.sample_params(rng, self.bounds, self.k, self.amplitude_scale, self.shared_axes)
        return EpisodeDisturbance(dist.synthesize(params, 0, length, dt).samples, params)


@dataclass(frozen=True)
class NullSource:
    """No disturbance; episodes still carry zero-amplitude params of size ``k``."""

    k: int = 5

    def sample(self, rng, length, dt):
        z = np.zeros((3, self.k))
        params = dist.DisturbanceParams(z, np.ones((3, self.k)), z)
        return EpisodeDisturbance(np.zeros((length, 3)), params)


@dataclass(frozen=True)
class TargetTraceSource:
    """Fresh held-out trace each episode (stand-in for recorded ocean forces)."""

    bounds: tuple = DEFAULT_BOUNDS
    config: dist.TargetTraceConfig = field(default_factory=dist.TargetTraceConfig)

    def sample(self, rng, length, dt):
        return EpisodeDisturbance(dist.make_target_trace(rng, self.bounds, length, dt, self.config).samples)


@dataclass(frozen=True)
class RecordedTraceSource:
    """Episodes cut from recorded traces at random offsets (wrapping around)."""

    traces: Sequence[dist.DisturbanceTrace]

    def sample(self, rng, length, dt):
        trace = self.traces[int(rng.integers(len(self.traces)))]
        if not math.isclose(trace.dt, dt, rel_tol=1e-9):
            raise ValueError(f"trace dt {trace.dt} does not match task dt {dt}")
        start = int(rng.integers(len(trace)))
        idx = (start + np.arange(length)) % len(trace)
        return EpisodeDisturbance(trace.samples[idx])


# -- batched workers ----------------------------------------------------------

@dataclass
class StepOutcome:
    next_states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    distances: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray

    @property
    def done(self):
        return self.terminated | self.truncated


class Workers:
    """``n`` parallel episodes of the regulation task.

    Disturbance samples cover the episode plus ``lookahead`` extra steps so
    the true future window is defined up to the last step.
    """

    def __init__(self, model, source, task: TaskConfig, n, seed, lookahead=0, bounds=None):
        self.model = model if model is not None else FirstPrincipleModel()
        self.source = source
        self.task = task
        self.n = n
        self.lookahead = lookahead
        self.bounds = np.asarray(self.model.control_bounds if bounds is None else bounds, dtype=float)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = ss.spawn(n + 1)
        self.rngs = [np.random.default_rng(c) for c in children[:n]]
        self.noise_rng = np.random.default_rng(children[n])
        self.lag = self.model.queue_length(task.dt)
        self.states = np.zeros((n, 6))
        self.t = np.zeros(n, dtype=int)
        self.prev_action = np.zeros((n, 3))
        self.queue = np.zeros((self.lag, n, 3)) if self.lag else None
        self.disturbance = np.zeros((n, task.episode_length + lookahead, 3))
        self.params = [None] * n
        self.episode_return = np.zeros(n)
        self.episodes_started = np.zeros(n, dtype=int)
        self.reset(np.arange(n))

    def reset(self, idx):
        length = self.task.episode_length + self.lookahead
        for i in np.atleast_1d(idx):
            rng = self.rngs[i]
            self.states[i] = sample_initial_state(rng, self.task)
            ep = self.source.sample(rng, length, self.task.dt)
            self.disturbance[i] = ep.samples
            self.params[i] = ep.params
            self.t[i] = 0
            self.prev_action[i] = 0.0
            if self.queue is not None:
                self.queue[:, i] = 0.0
            self.episode_return[i] = 0.0
            self.episodes_started[i] += 1

    def param_arrays(self):
        """Stacked true parameters ``(amplitude, omega, phase)``, each ``(n, 3, k)``."""
        if any(p is None for p in self.params):
            raise ValueError("disturbance source does not expose wave parameters")
        return (np.stack([p.amplitude for p in self.params]),
                np.stack([p.omega for p in self.params]),
                np.stack([p.phase for p in self.params]))

    def current_disturbance(self):
        return self.disturbance[np.arange(self.n), self.t]

    def true_window(self, n):
        """Applied disturbances for steps ``t .. t+n-1`` of each worker, ``(B, n, 3)``."""
        idx = np.minimum(self.t[:, None] + np.arange(n), self.disturbance.shape[1] - 1)
        return self.disturbance[np.arange(self.n)[:, None], idx]

    def rewards_for(self, states, actions):
        rel = relative_state(states, self.task.target)
        return quadratic_reward(rel, actions / self.bounds, self.task.q_diag, self.task.r_diag)

    def step(self, actions) -> StepOutcome:
        """Apply commanded ``actions`` (B, 3); no automatic reset."""
        actions = np.asarray(actions, dtype=float)
        rewards = self.rewards_for(self.states, actions)
        res = self.model.step(self.states, actions, self.current_disturbance(), self.task.dt,
                              self.queue, self.noise_rng)
        nxt = res.next_state
        finite = np.all(np.isfinite(nxt), axis=1)
        if not np.all(finite):
            for i in np.nonzero(~finite)[0]:
                log.warning("worker %d produced a non-finite state at step %d; episode aborted", i, self.t[i])
            nxt = np.where(finite[:, None], nxt, self.states)
        if self.queue is not None:
            self.queue = res.queue
        self.states = nxt
        self.prev_action = actions.copy()
        self.t += 1
        d = distance_to_target(nxt, self.task.target)
        terminated = (d > self.task.max_distance) | ~finite
        truncated = (self.t >= self.task.episode_length) & ~terminated
        self.episode_return += rewards
        return StepOutcome(nxt, actions, rewards, d, terminated, truncated)


# -- lockstep evaluation episodes ------------------------------------------------

@dataclass
class EpisodeBatch:
    """``B`` episodes run in lockstep.

    ``states[t]`` is the state before step ``t``; after an episode ends
    (workspace exit or non-finite state) its state is frozen and
    ``lengths`` records how many steps were actually taken.
    """

    states: np.ndarray  # (T+1, B, 6)
    actions: np.ndarray  # (T, B, 3) commanded
    rewards: np.ndarray  # (T, B), zero after the episode ended
    disturbances: np.ndarray  # (T, B, 3) world-frame forces applied
    lengths: np.ndarray  # (B,)
    diverged: np.ndarray  # (B,) bool

    @property
    def distances(self):
        """Distance to the origin target after each step, ``(T, B)``."""
        return distance_to_target(self.states[1:])


def run_episodes(model, task: TaskConfig, x0, disturbances, controller, rng=None, params=None) -> EpisodeBatch:
    """Run one episode per row of ``x0`` against precomputed disturbances.

    ``disturbances`` has shape ``(B, >= T, 3)``; samples past ``T`` are
    only visible to controllers that look ahead.  ``controller`` must
    provide ``start(disturbances, params)`` and
    ``act(states, prev_actions, t) -> actions``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    B, T = len(x0), task.episode_length
    disturbances = np.asarray(disturbances, dtype=float)
    if disturbances.shape[0] != B or disturbances.shape[1] < T:
        raise ValueError(f"disturbances {disturbances.shape} do not cover {B} episodes of {T} steps")
    bounds = np.asarray(model.control_bounds, dtype=float)
    lag = model.queue_length(task.dt)
    queue = np.zeros((lag, B, 3)) if lag else None
    states = np.empty((T + 1, B, 6))
    actions = np.zeros((T, B, 3))
    rewards = np.zeros((T, B))
    states[0] = x0
    alive = np.ones(B, dtype=bool)
    lengths = np.full(B, T)
    diverged = np.zeros(B, dtype=bool)
    prev = np.zeros((B, 3))
    controller.start(disturbances, params)
    for t in range(T):
        s = states[t]
        a = np.asarray(controller.act(s, prev, t), dtype=float)
        res = model.step(s, a, disturbances[:, t], task.dt, queue, rng)
        queue = res.queue
        nxt = res.next_state
        finite = np.all(np.isfinite(nxt), axis=1)
        nxt = np.where(finite[:, None], nxt, s)
        rel = relative_state(s, task.target)
        rewards[t] = np.where(alive, quadratic_reward(rel, a / bounds, task.q_diag, task.r_diag), 0.0)
        actions[t] = a
        ended = alive & (~finite | (distance_to_target(nxt, task.target) > task.max_distance))
        states[t + 1] = np.where(alive[:, None], nxt, s)
        lengths[ended] = t + 1
        diverged |= ended
        alive &= ~ended
        prev = a
    dist_applied = np.swapaxes(disturbances[:, :T], 0, 1).copy()
    return EpisodeBatch(states, actions, rewards, dist_applied, lengths, diverged)


def stack_params(params_list):
    """``(amplitude, omega, phase)`` arrays of shape ``(B, 3, k)``."""
    return (np.stack([p.amplitude for p in params_list]),
            np.stack([p.omega for p in params_list]),
            np.stack([p.phase for p in params_list]))


@dataclass
class EvaluationSet:
    x0: np.ndarray  # (B, 6)
    disturbances: np.ndarray  # (B, T + lookahead, 3)
    params: Optional[tuple]  # stacked arrays or None for trace sources


def make_evaluation_set(seed, n_episodes, task: TaskConfig, source, lookahead=0) -> EvaluationSet:
    """Initial states and disturbances for ``n_episodes``.

    Episode ``i`` draws from child ``i`` of ``SeedSequence(seed)``, so a
    longer evaluation extends a shorter one instead of reshuffling it.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    x0, dists, params = [], [], []
    for child in ss.spawn(n_episodes):
        rng = np.random.default_rng(child)
        x0.append(sample_initial_state(rng, task))
        ep = source.sample(rng, task.episode_length + lookahead, task.dt)
        dists.append(ep.samples)
        params.append(ep.params)
    stacked = stack_params(params) if all(p is not None for p in params) else None
    return EvaluationSet(np.array(x0), np.array(dists), stacked)
