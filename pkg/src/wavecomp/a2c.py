"""Synchronous advantage actor-critic and the generalized control policy.

The policy is a tanh MLP producing a Gaussian mean in a pre-squash space
with a state-independent learned log-std; actions are ``bound * tanh(pre)``,
so every sampled action lies inside the control bounds by construction.
The squash is treated as part of the environment: log-probabilities are
those of the pre-squash sample.

Policy input variants:

``state-only``
    normalized state error (6 values).
``freq-params``
    state + per-axis ``(A / bound, normalized omega, phase / pi)``.
``freq-params-with-phase``
    state + per-axis ``(A / bound, normalized omega, wrap(omega t + phase) / pi)``.
``time-window``
    state + the next ``n`` disturbance samples per axis, divided by the bounds.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import disturbance as dist
from .dynamics import DEFAULT_BOUNDS, FirstPrincipleModel, ModelVariation, make_default_variation
from .env import NullSource, TaskConfig, WaveSource, Workers, quadratic_reward, relative_state
from .errors import ConfigError, TrainingError
from .neural import (FeedforwardSpec, NetworkParams, OptimizerConfig, OptimizerState, backward,
                     check_params, forward, init_feedforward, load_checkpoint, merge_prefixed,
                     optimize_step, save_checkpoint, split_prefixed)

log = logging.getLogger(__name__)

VARIANTS = ("state-only", "freq-params", "freq-params-with-phase", "time-window")
LOG_2PI = math.log(2 * math.pi)
INIT_GAIN = 5.0 / 3.0  # tanh gain; keeps hidden activations from shrinking layer to layer


def reward(state, action, q, r):
    """Task reward ``-x'Qx - u'Ru``; ``state`` is already relative to the target."""
    return quadratic_reward(state, action, q, r)


def gaussian_loss(mu, log_std, pre, advantages, entropy_coef, mean_penalty=0.0):
    """Policy-gradient loss of a diagonal Gaussian and its gradients.

    Returns ``(loss, entropy, logp, d_loss/d_mu, d_loss/d_log_std)`` for
    ``loss = -mean(adv * logp) - entropy_coef * entropy + mean_penalty * mean(|mu|^2)``.
    """
    n = mu.shape[0]
    std = np.exp(log_std)
    z = (pre - mu) / std
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    adv = advantages[:, None]
    loss = -float(np.mean(advantages * logp)) - entropy_coef * entropy
    d_mu = -adv * z / std / n
    if mean_penalty:
        loss += mean_penalty * float(np.mean(np.sum(mu * mu, axis=-1)))
        d_mu = d_mu + 2.0 * mean_penalty * mu / n
    d_log_std = -np.sum(adv * (z * z - 1.0), axis=0) / n - entropy_coef
    return loss, entropy, logp, d_mu, d_log_std


def balance_input_groups(params: NetworkParams, groups):
    """Rescale first-layer rows so each input group gets an equal share of fan-in.

    With plain fan-in init a 60-sample window would shrink the weights on
    the 6 state inputs by ~3x and stall early learning; here each block of
    rows is initialized as if the layer saw ``n_groups * size`` inputs.
    """
    groups = [g for g in groups if g > 0]
    w = params["W0"]
    if sum(groups) != w.shape[0]:
        raise ValueError(f"input groups {groups} do not cover {w.shape[0]} inputs")
    start = 0
    for size in groups:
        w[start:start + size] *= math.sqrt(w.shape[0] / (len(groups) * size))
        start += size
    params["W0"] = w
    return params


class GaussianPolicy:
    """MLP Gaussian policy over a fixed observation layout.

    Trainable tensors: the MLP's ``W*``/``b*`` plus ``log_std``.
    """

    def __init__(self, spec: FeedforwardSpec, params: NetworkParams, bounds):
        self.spec = spec
        self.params = params
        self.bounds = np.asarray(bounds, dtype=float)
        check_params(params, {**spec.shapes(), "log_std": (spec.output_dim,)})

    @classmethod
    def create(cls, input_dim, hidden, bounds, rng, log_std_init=math.log(0.3), output_scale=0.01,
               input_groups=None):
        spec = FeedforwardSpec(input_dim, tuple(hidden), len(bounds))
        params = init_feedforward(spec, rng, output_scale=output_scale, gain=INIT_GAIN)
        if input_groups:
            balance_input_groups(params, input_groups)
        params["log_std"] = np.full(len(bounds), log_std_init)
        return cls(spec, params, bounds)

    def mean(self, obs):
        return forward(self.params, self.spec, obs)

    def features(self, obs):
        return self.mean(obs)[1].features

    def deterministic(self, obs):
        mu, _ = self.mean(obs)
        return self.bounds * np.tanh(mu)

    def sample(self, obs, rng):
        mu, _ = self.mean(obs)
        log_std = self.params["log_std"]
        pre = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        z = (pre - mu) / np.exp(log_std)
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
        return pre, self.bounds * np.tanh(pre), logp

    def loss_and_grads(self, obs, pre, advantages, entropy_coef, mean_penalty=0.0):
        mu, cache = self.mean(obs)
        loss, entropy, _, d_mu, d_ls = gaussian_loss(
            mu, self.params["log_std"], pre, advantages, entropy_coef, mean_penalty)
        grads, _ = backward(self.params, self.spec, cache, d_mu)
        grads["log_std"] = d_ls
        return loss, entropy, grads


class ValueFunction:
    def __init__(self, spec: FeedforwardSpec, params: NetworkParams):
        self.spec = spec
        self.params = params
        check_params(params, spec.shapes())

    @classmethod
    def create(cls, input_dim, hidden, rng, input_groups=None):
        spec = FeedforwardSpec(input_dim, tuple(hidden), 1)
        params = init_feedforward(spec, rng, output_scale=0.1, gain=INIT_GAIN)
        if input_groups:
            balance_input_groups(params, input_groups)
        return cls(spec, params)

    def predict(self, obs):
        return forward(self.params, self.spec, obs)[0][..., 0]

    def loss_and_grads(self, obs, returns):
        v, cache = forward(self.params, self.spec, obs)
        err = v[:, 0] - returns
        loss = 0.5 * float(np.mean(err * err))
        grads, _ = backward(self.params, self.spec, cache, err[:, None] / len(err))
        return loss, grads


# -- the generalized control policy -----------------------------------------

@dataclass(frozen=True)
class GCPLayout:
    """Everything needed to turn (state, disturbance info) into policy input."""

    variant: str = "time-window"
    window: int = 20
    k: int = 5
    amplitude_scale: float = 1.0
    bounds: tuple = DEFAULT_BOUNDS
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown policy variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.window < 1 or self.k < 1:
            raise ConfigError("window and k must be >= 1")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    @property
    def input_dim(self):
        if self.variant == "state-only":
            return 6
        if self.variant == "time-window":
            return 6 + 3 * self.window
        return 6 + 9 * self.k

    @property
    def input_groups(self):
        return (6, self.input_dim - 6)

    @property
    def uses_window(self):
        return self.variant == "time-window"

    @property
    def uses_params(self):
        return self.variant.startswith("freq-params")

    def omega_range(self):
        rngs = dist.component_ranges(self.k, self.amplitude_scale)
        lo = np.array([r.omega[0] for r in rngs])
        hi = np.array([r.omega[1] for r in rngs])
        return lo, hi

    def state_features(self, states):
        return relative_state(states, self.task.target) / self.task.state_scale

    def observe(self, states, t=None, window=None, params=None):
        """Build policy inputs.

        ``window``: disturbances for steps ``t .. t+n-1``, shape ``(B, n, 3)``.
        ``params``: ``(amplitude, omega, phase)`` each ``(B, 3, k)``; with
        ``t`` (steps, ``(B,)``) for the phase-augmented variant.
        """
        s = self.state_features(states)
        if self.variant == "state-only":
            return s
        b = np.asarray(self.bounds)
        if self.variant == "time-window":
            w = np.asarray(window) / b  # (B, n, 3)
            w = np.swapaxes(w, -1, -2).reshape(w.shape[:-2] + (3 * self.window,))
            return np.concatenate([s, w], axis=-1)
        amp, omega, phase = params
        lo, hi = self.omega_range()
        a = amp / b[:, None]
        w = (omega - lo) / (hi - lo)
        if self.variant == "freq-params-with-phase":
            tt = np.asarray(t, dtype=float)[..., None, None] * self.task.dt
            ph = dist.wrap_phase(omega * tt + phase) / np.pi
        else:
            ph = phase / np.pi
        feats = np.stack([a, w, ph], axis=-1).reshape(s.shape[:-1] + (9 * self.k,))
        return np.concatenate([s, feats], axis=-1)

    def observe_true(self, workers: Workers):
        """Policy input using the workers' true disturbance information."""
        window = workers.true_window(self.window) if self.uses_window else None
        params = workers.param_arrays() if self.uses_params else None
        return self.observe(workers.states, workers.t, window, params)


class GCP:
    """Generalized control policy: a :class:`GaussianPolicy` plus its input layout."""

    def __init__(self, layout: GCPLayout, policy: GaussianPolicy):
        self.layout = layout
        self.policy = policy
        if policy.spec.input_dim != layout.input_dim:
            raise ConfigError(f"policy input {policy.spec.input_dim} != layout input {layout.input_dim}")

    @classmethod
    def create(cls, layout: GCPLayout, hidden, rng, log_std_init=math.log(0.3)):
        return cls(layout, GaussianPolicy.create(layout.input_dim, hidden, layout.bounds, rng, log_std_init,
                                                 input_groups=layout.input_groups))

    @property
    def params(self):
        return self.policy.params

    def act(self, states, t=None, window=None, params=None):
        """Deterministic (mean) action."""
        return self.policy.deterministic(self.layout.observe(states, t, window, params))

    def act_with_features(self, states, t=None, window=None, params=None):
        mu, cache = self.policy.mean(self.layout.observe(states, t, window, params))
        return self.policy.bounds * np.tanh(mu), cache.features


# -- rollouts -----------------------------------------------------------------

@dataclass
class RolloutBuffer:
    n_steps: int
    n_workers: int
    obs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    last_values: Optional[np.ndarray] = None
    completed_returns: list = field(default_factory=list)
    completed_extra: list = field(default_factory=list)

    @property
    def capacity(self):
        return self.n_steps * self.n_workers

    def __len__(self):
        return len(self.rewards) * self.n_workers

    @property
    def full(self):
        return len(self.rewards) == self.n_steps and self.last_values is not None

    def clear(self):
        for name in ("obs", "pre", "logp", "rewards", "values", "dones", "completed_returns", "completed_extra"):
            getattr(self, name).clear()
        self.last_values = None

    def add(self, obs, pre, logp, rewards, values, dones):
        if len(self.rewards) >= self.n_steps:
            raise TrainingError("rollout buffer is already full")
        self.obs.append(obs)
        self.pre.append(pre)
        self.logp.append(logp)
        self.rewards.append(rewards)
        self.values.append(values)
        self.dones.append(dones)

    def arrays(self):
        return {name: np.stack(getattr(self, name)) for name in ("obs", "pre", "logp", "rewards", "values", "dones")}


def finish_episode_rewards(rewards, outcome, workers, gamma, bootstrap_values):
    """Fold episode-end values into the last reward.

    Truncated episodes bootstrap from the value of the final observation.
    Early-terminated ones receive the terminal reward for every remaining
    step (discounted), so leaving the workspace is never attractive.
    """
    r = rewards.copy()
    if np.any(outcome.truncated):
        r[outcome.truncated] += gamma * bootstrap_values[outcome.truncated]
    if np.any(outcome.terminated):
        rem = workers.task.episode_length - workers.t[outcome.terminated]
        tail = rewards[outcome.terminated] * (1.0 - gamma ** rem) / (1.0 - gamma)
        r[outcome.terminated] += gamma * tail
    return r


def collect_rollouts(policy: GaussianPolicy, value: ValueFunction, workers: Workers, observe, n_steps, rng,
                     gamma=0.99, reward_scale=1.0, buffer: Optional[RolloutBuffer] = None) -> RolloutBuffer:
    """Run ``n_steps`` on every worker with sampled actions.

    ``observe(workers)`` builds policy inputs.  Finished workers are reset
    (new initial state and new disturbance draw) before the next step.
    """
    buf = buffer if buffer is not None else RolloutBuffer(n_steps, workers.n)
    buf.clear()
    for _ in range(n_steps):
        obs = observe(workers)
        pre, action, logp = policy.sample(obs, rng)
        values = value.predict(obs)
        out = workers.step(action)
        done = out.done
        boot = np.zeros(workers.n)
        if np.any(out.truncated):
            boot = value.predict(observe(workers))
        r = finish_episode_rewards(out.rewards * reward_scale, out, workers, gamma, boot)
        buf.add(obs, pre, logp, r, values, done)
        if np.any(done):
            idx = np.nonzero(done)[0]
            buf.completed_returns.extend(workers.episode_return[idx].tolist())
            workers.reset(idx)
    buf.last_values = value.predict(observe(workers))
    return buf


def compute_returns(rewards, dones, last_values, gamma, values=None, gae_lambda=None):
    """n-step bootstrapped returns (or GAE targets when ``gae_lambda`` is set).

    ``rewards``, ``dones``: ``(T, B)``; episode-end values are already folded
    into the rewards, so a done step does not bootstrap.
    """
    T = rewards.shape[0]
    out = np.empty_like(rewards)
    if gae_lambda is None:
        ret = last_values.astype(float)
        for t in reversed(range(T)):
            ret = rewards[t] + gamma * ret * (1.0 - dones[t])
            out[t] = ret
        return out
    adv = np.zeros_like(last_values, dtype=float)
    for t in reversed(range(T)):
        nxt = last_values if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * nxt * (1.0 - dones[t]) - values[t]
        adv = delta + gamma * gae_lambda * (1.0 - dones[t]) * adv
        out[t] = adv + values[t]
    return out


@dataclass(frozen=True)
class A2CConfig:
    variant: str = "time-window"
    window: int = 20
    k: int = 5
    amplitude_scale: float = 1.0
    disturbance: bool = True
    n_workers: int = 16
    n_steps: int = 8
    total_steps: int = 1_000_000
    gamma: float = 0.99
    entropy_coef: float = 1e-3
    mean_penalty: float = 1e-3
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    clip_norm: float = 1.0
    hidden: tuple = (128, 128)
    log_std_init: float = math.log(0.3)
    normalize_advantages: bool = True
    gae_lambda: Optional[float] = None
    reward_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown policy variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.n_workers < 1 or self.n_steps < 1:
            raise ConfigError("n_workers and n_steps must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class A2CState:
    policy_opt: OptimizerState = field(default_factory=OptimizerState)
    value_opt: OptimizerState = field(default_factory=OptimizerState)


def a2c_update(policy, value: ValueFunction, buffer: RolloutBuffer, config: A2CConfig,
               state: Optional[A2CState] = None):
    """One synchronous update of the actor and the critic from a full buffer.

    ``policy`` is anything with ``params`` and
    ``loss_and_grads(obs, pre, advantages, entropy_coef, mean_penalty)``.
    Returns ``{"policy_loss", "value_loss", "entropy"}``.
    """
    if not buffer.full:
        raise TrainingError("a2c_update needs a full rollout buffer")
    state = state or A2CState()
    arr = buffer.arrays()
    returns = compute_returns(arr["rewards"], arr["dones"].astype(float), buffer.last_values,
                              config.gamma, arr["values"], config.gae_lambda)
    adv = (returns - arr["values"]).reshape(-1)
    if config.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs = arr["obs"].reshape(-1, arr["obs"].shape[-1])
    pre = arr["pre"].reshape(-1, arr["pre"].shape[-1])
    pl, ent, pgrads = policy.loss_and_grads(obs, pre, adv, config.entropy_coef, config.mean_penalty)
    vl, vgrads = value.loss_and_grads(obs, returns.reshape(-1))
    if not (np.isfinite(pl) and np.isfinite(vl)):
        raise TrainingError(
            f"non-finite loss (policy={pl}, value={vl}); returns range "
            f"[{np.nanmin(returns)}, {np.nanmax(returns)}], max |obs| {np.nanmax(np.abs(obs))}")
    optimize_step(policy.params, pgrads, state.policy_opt,
                  OptimizerConfig("adam", config.policy_lr, clip_norm=config.clip_norm))
    optimize_step(value.params, vgrads, state.value_opt,
                  OptimizerConfig("adam", config.value_lr, clip_norm=config.clip_norm))
    return {"policy_loss": pl, "value_loss": vl, "entropy": ent}


CURVE_FIELDS = ["update_idx", "steps", "mean_return", "policy_loss", "value_loss", "entropy"]


@dataclass
class GCPTrainResult:
    gcp: GCP
    value: ValueFunction
    curve: list
    config: A2CConfig


def make_layout(config: A2CConfig, task: TaskConfig, bounds=DEFAULT_BOUNDS) -> GCPLayout:
    return GCPLayout(config.variant, config.window, config.k, config.amplitude_scale, tuple(bounds), task)


def train_gcp(config: A2CConfig, task: TaskConfig = TaskConfig(), model=None, source=None,
              out_dir=None, progress=None) -> GCPTrainResult:
    """Train a GCP (or, for ``state-only``, the conventional baseline) with A2C."""
    model = model or FirstPrincipleModel(make_default_variation())
    bounds = tuple(model.control_bounds)
    if source is None:
        source = (WaveSource(bounds, config.k, config.amplitude_scale) if config.disturbance
                  else NullSource(config.k))
    ss = np.random.SeedSequence(config.seed)
    init_ss, worker_ss, act_ss = ss.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    layout = make_layout(config, task, bounds)
    gcp = GCP.create(layout, config.hidden, init_rng, config.log_std_init)
    value = ValueFunction.create(layout.input_dim, config.hidden, init_rng, layout.input_groups)
    workers = Workers(model, source, task, config.n_workers, worker_ss, lookahead=config.window)
    rng = np.random.default_rng(act_ss)
    state = A2CState()
    buf = RolloutBuffer(config.n_steps, config.n_workers)
    n_updates = max(1, config.total_steps // (config.n_workers * config.n_steps))
    curve = []
    recent = []
    for u in range(n_updates):
        collect_rollouts(gcp.policy, value, workers, layout.observe_true, config.n_steps, rng,
                         config.gamma, config.reward_scale, buf)
        losses = a2c_update(gcp.policy, value, buf, config, state)
        recent.extend(buf.completed_returns)
        recent = recent[-config.n_workers:]
        mean_ret = float(np.mean(recent)) if recent else float("nan")
        curve.append({"update_idx": u, "steps": (u + 1) * config.n_workers * config.n_steps,
                      "mean_return": mean_ret, **losses})
        if progress is not None:
            progress(u, n_updates, curve[-1])
    result = GCPTrainResult(gcp, value, curve, config)
    if out_dir is not None:
        save_gcp(result, out_dir)
    return result


def write_curve(rows, path, fields=CURVE_FIELDS):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in fields})


def _layout_meta(layout: GCPLayout):
    meta = asdict(layout)
    meta["task"] = asdict(layout.task)
    return meta


def _layout_from_meta(meta):
    meta = dict(meta)
    task = TaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.pop("task").items()})
    return GCPLayout(meta["variant"], meta["window"], meta["k"], meta["amplitude_scale"],
                     tuple(meta["bounds"]), task)


def save_gcp(result: GCPTrainResult, out_dir, name="gcp", curve_dir=None):
    """Write ``<name>.wvc`` (policy + value), ``<name>.json`` and the learning curve.

    The curve goes to ``curve_dir`` (default: next to the checkpoint).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = merge_prefixed({"policy": result.gcp.params, "value": result.value.params})
    digest = save_checkpoint(params, out / f"{name}.wvc")
    meta = {"layout": _layout_meta(result.gcp.layout), "hidden": list(result.gcp.policy.spec.hidden_dims),
            "value_hidden": list(result.value.spec.hidden_dims), "config": asdict(result.config),
            "sha256": digest}
    (out / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    curve_dir = Path(curve_dir) if curve_dir is not None else out
    curve_dir.mkdir(parents=True, exist_ok=True)
    write_curve(result.curve, curve_dir / f"{name}_curve.csv")
    return digest


def load_gcp(path):
    """Load ``(GCP, ValueFunction)`` from a ``.wvc`` file with its ``.json`` sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    layout = _layout_from_meta(meta["layout"])
    params = load_checkpoint(path)
    pspec = FeedforwardSpec(layout.input_dim, tuple(meta["hidden"]), 3)
    vspec = FeedforwardSpec(layout.input_dim, tuple(meta["value_hidden"]), 1)
    policy = GaussianPolicy(pspec, split_prefixed(params, "policy"), layout.bounds)
    value = ValueFunction(vspec, split_prefixed(params, "value"))
    return GCP(layout, policy), value


class GCPController:
    """Mean action of a GCP given the true disturbance information.

    For the ``state-only`` variant this is simply the baseline policy.
    """

    def __init__(self, gcp: GCP):
        self.gcp = gcp
        self._dist = None
        self._params = None

    def start(self, disturbances, params):
        lay = self.gcp.layout
        if lay.uses_params and params is None:
            raise ConfigError(f"variant {lay.variant} needs true wave parameters")
        self._dist = disturbances
        self._params = params

    def act(self, states, prev_actions, t):
        lay = self.gcp.layout
        window = None
        if lay.uses_window:
            idx = np.minimum(t + np.arange(lay.window), self._dist.shape[1] - 1)
            window = self._dist[:, idx]
        return self.gcp.act(states, np.full(len(states), t), window, self._params)
