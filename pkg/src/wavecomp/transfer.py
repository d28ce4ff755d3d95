"""Adapting a frozen GCP + ODI to a different (target) model.

Three schemes share one training loop:

``cac``
    a compensator policy adds ``u_c`` to the frozen action ``u_hat``; task reward.
``tmc_control``
    same action composition, reward penalized by the transition mismatch
    ``|x_{t+1} - x_hat_{t+1}|`` where ``x_hat`` comes from the source model
    stepped from the actual target state.
``tmc_feature``
    a fusion head maps ``[GCP penultimate features, compensator features]``
    to the action; initialized so its output equals the frozen GCP's.

The ODI always receives the frozen policy's own previous action ``u_hat``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .a2c import (A2CConfig, A2CState, GCP, GaussianPolicy, INIT_GAIN, RolloutBuffer, ValueFunction,
                  a2c_update, balance_input_groups, finish_episode_rewards, gaussian_loss)
from .dynamics import FirstPrincipleModel, make_default_variation, saturate, wrap_angle
from .env import TaskConfig, Workers
from .errors import ConfigError
from .neural import (FeedforwardSpec, NetworkParams, backward, forward, init_feedforward, load_checkpoint,
                     merge_prefixed, save_checkpoint, split_prefixed)
from .odi import ODI, odi_predict, window_from_params

log = logging.getLogger(__name__)

ALGORITHMS = ("cac", "tmc_control", "tmc_feature")
CURVE_FIELDS = ["episode", "cum_task_reward", "cum_mismatch"]


def mismatch_reward(task_reward, e_next, weight=1.0):
    """``task_reward - weight * |e_next|_2`` (batched over leading axes)."""
    return np.asarray(task_reward) - weight * np.linalg.norm(np.asarray(e_next, dtype=float), axis=-1)


def state_difference(a, b):
    """``a - b`` with the yaw component wrapped."""
    e = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    e[..., 2] = wrap_angle(e[..., 2])
    return e


def parallel_source_step(source_model, state, source_action, predicted_disturbance, dt, queue=None):
    """One source-model step from the actual target state (re-synced every step)."""
    return source_model.step(state, source_action, predicted_disturbance, dt, queue).next_state


def combine_cac(u_hat, u_c, bounds):
    return saturate(np.asarray(u_hat) + np.asarray(u_c), np.asarray(bounds))


# -- tmc-feature fusion -----------------------------------------------------------

def fusion_spec(gcp_features, comp_features, output_dim=3):
    return FeedforwardSpec(gcp_features + comp_features, (gcp_features,), output_dim,
                           activation="linear", output_activation="linear")


def identity_fusion_params(gcp: GCP, comp_features) -> NetworkParams:
    """Fusion head that reproduces the GCP's pre-squash mean exactly.

    First layer: identity on the GCP features, zeros on the compensator's;
    second layer: a copy of the GCP output layer.
    """
    pspec = gcp.policy.spec
    f = pspec.hidden_dims[-1]
    last = pspec.n_layers - 1
    w0 = np.zeros((f + comp_features, f))
    w0[:f] = np.eye(f)
    return NetworkParams({"W0": w0, "b0": np.zeros(f),
                          "W1": gcp.params[f"W{last}"].copy(), "b1": gcp.params[f"b{last}"].copy()})


def combine_tmc_feature(gcp_features, comp_features, fusion_params, bounds, spec=None):
    """Squashed fusion-head output for concatenated features."""
    gcp_features = np.asarray(gcp_features, dtype=float)
    comp_features = np.asarray(comp_features, dtype=float)
    spec = spec or fusion_spec(gcp_features.shape[-1], comp_features.shape[-1], len(bounds))
    x = np.concatenate([gcp_features, comp_features], axis=-1)
    if x.shape[-1] != spec.input_dim:
        raise ConfigError(f"fusion head takes {spec.input_dim} features, got {x.shape[-1]}")
    mean, _ = forward(fusion_params, spec, x)
    return np.asarray(bounds) * np.tanh(mean)


class FusionPolicy:
    """Gaussian policy whose mean is the fusion head over [GCP features, trunk(obs)].

    Inputs are rows ``[f (F values), compensator observation]``.  Trainable:
    ``trunk/*``, ``fusion/*`` and ``log_std``.
    """

    def __init__(self, gcp_features, trunk_spec: FeedforwardSpec, params: NetworkParams, bounds):
        self.gcp_features = gcp_features
        self.trunk_spec = trunk_spec
        self.fusion = fusion_spec(gcp_features, trunk_spec.output_dim, len(bounds))
        self.params = params
        self.bounds = np.asarray(bounds, dtype=float)

    @classmethod
    def create(cls, gcp: GCP, obs_dim, trunk_hidden, comp_features, rng, log_std_init, input_groups=None):
        trunk = FeedforwardSpec(obs_dim, tuple(trunk_hidden), comp_features, output_activation="tanh")
        tp = init_feedforward(trunk, rng, gain=INIT_GAIN)
        if input_groups:
            balance_input_groups(tp, input_groups)
        params = merge_prefixed({"trunk": tp, "fusion": identity_fusion_params(gcp, comp_features)})
        params["log_std"] = np.full(len(gcp.layout.bounds), log_std_init)
        return cls(gcp.policy.spec.hidden_dims[-1], trunk, params, gcp.layout.bounds)

    def _parts(self):
        return split_prefixed(self.params, "trunk"), split_prefixed(self.params, "fusion")

    def mean(self, x):
        f, obs = x[..., :self.gcp_features], x[..., self.gcp_features:]
        tp, fp = self._parts()
        g, tcache = forward(tp, self.trunk_spec, obs)
        mu, fcache = forward(fp, self.fusion, np.concatenate([f, g], axis=-1))
        return mu, (tp, fp, tcache, fcache)

    def deterministic(self, x):
        return self.bounds * np.tanh(self.mean(x)[0])

    def sample(self, x, rng):
        mu, _ = self.mean(x)
        log_std = self.params["log_std"]
        pre = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        z = (pre - mu) / np.exp(log_std)
        logp = np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi), axis=-1)
        return pre, self.bounds * np.tanh(pre), logp

    def loss_and_grads(self, x, pre, advantages, entropy_coef, mean_penalty=0.0):
        mu, (tp, fp, tcache, fcache) = self.mean(x)
        loss, entropy, _, d_mu, d_ls = gaussian_loss(mu, self.params["log_std"], pre, advantages,
                                                     entropy_coef, mean_penalty)
        fgrads, d_in = backward(fp, self.fusion, fcache, d_mu)
        tgrads, _ = backward(tp, self.trunk_spec, tcache, d_in[..., self.gcp_features:])
        grads = merge_prefixed({"trunk": tgrads, "fusion": fgrads})
        grads["log_std"] = d_ls
        return loss, entropy, grads


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TransferConfig:
    algorithm: str = "tmc_feature"
    mismatch_weight: float = 1.0
    parallel_action: str = "source"  # or "combined"
    hidden: tuple = (64, 64)
    comp_features: int = 64
    n_workers: int = 16
    n_steps: int = 8
    total_steps: int = 200_000
    gamma: float = 0.99
    entropy_coef: float = 0.0
    mean_penalty: float = 1e-3
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    clip_norm: float = 1.0
    log_std_init: float = math.log(0.3)
    reward_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown transfer algorithm {self.algorithm!r}; valid: {', '.join(ALGORITHMS)}")
        if self.parallel_action not in ("source", "combined"):
            raise ConfigError("parallel_action must be 'source' or 'combined'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def uses_mismatch(self):
        return self.algorithm.startswith("tmc")

    def a2c(self):
        return A2CConfig(n_workers=self.n_workers, n_steps=self.n_steps, gamma=self.gamma,
                         entropy_coef=self.entropy_coef, mean_penalty=self.mean_penalty, policy_lr=self.policy_lr,
                         value_lr=self.value_lr, clip_norm=self.clip_norm, reward_scale=self.reward_scale)


class Adapter:
    """Frozen GCP + ODI with a trainable compensator; builds observations and actions."""

    def __init__(self, config: TransferConfig, gcp: GCP, odi: Optional[ODI], policy, value: ValueFunction):
        self.config = config
        self.gcp = gcp
        self.odi = odi
        self.policy = policy
        self.value = value
        self.bounds = np.asarray(gcp.layout.bounds)

    @classmethod
    def create(cls, config: TransferConfig, gcp: GCP, odi: Optional[ODI], rng):
        obs_dim = gcp.layout.input_dim + 3
        groups = (6, gcp.layout.input_dim - 6, 3)
        if config.algorithm == "tmc_feature":
            policy = FusionPolicy.create(gcp, obs_dim, config.hidden, config.comp_features, rng,
                                         config.log_std_init, groups)
        else:
            policy = GaussianPolicy.create(obs_dim, config.hidden, gcp.layout.bounds, rng, config.log_std_init,
                                           input_groups=groups)
        value = ValueFunction.create(obs_dim, config.hidden, rng, groups)
        return cls(config, gcp, odi, policy, value)

    def source_view(self, states, prev_hat, t, hidden, true_params=None):
        """Estimate, frozen action and observation pieces for one step.

        Returns a dict with ``est``, ``hidden`` (advanced, not yet committed),
        ``u_hat``, ``features``, ``d_hat`` (predicted disturbance at ``t``)
        and ``obs`` (compensator input).
        """
        lay = self.gcp.layout
        if self.odi is None:
            est, h = true_params, hidden
        else:
            est, h = odi_predict(self.odi, states, prev_hat, hidden, t)
        window = window_from_params(lay, t, *est) if lay.uses_window else None
        gobs = lay.observe(states, t, window, est)
        mu, cache = self.gcp.policy.mean(gobs)
        u_hat = self.bounds * np.tanh(mu)
        d_hat = (window[:, 0] if window is not None
                 else window_from_params(_one_step(lay), t, *est)[:, 0])
        obs = np.concatenate([gobs, u_hat / self.bounds], axis=-1)
        return {"est": est, "hidden": h, "u_hat": u_hat, "features": cache.features, "d_hat": d_hat, "obs": obs}

    def policy_input(self, view):
        if self.config.algorithm == "tmc_feature":
            return np.concatenate([view["features"], view["obs"]], axis=-1)
        return view["obs"]

    def compose(self, view, action):
        """Command sent to the target model given the policy's squashed output."""
        if self.config.algorithm == "tmc_feature":
            return action
        return combine_cac(view["u_hat"], action, self.bounds)

    def deterministic(self, view):
        return self.compose(view, self.policy.deterministic(self.policy_input(view)))


def _one_step(layout):
    return replace(layout, window=1)


class TransferController:
    """Deterministic adapted controller for :func:`wavecomp.env.run_episodes`.

    ``history`` keeps ``(u_hat, d_hat)`` per step so the mismatch against
    the source model can be recomputed after the episode.
    """

    def __init__(self, adapter: Adapter, unadapted=False):
        self.adapter = adapter
        self.unadapted = unadapted
        self.hidden = None
        self.prev_hat = None
        self.params = None
        self.history = []

    def start(self, disturbances, params):
        n = len(disturbances)
        if self.adapter.odi is None and params is None:
            raise ConfigError("oracle identification needs true wave parameters")
        self.params = params
        self.hidden = self.adapter.odi.initial_hidden(n) if self.adapter.odi is not None else None
        self.prev_hat = np.zeros((n, 3))
        self.history = []

    def act(self, states, prev_actions, t):
        view = self.adapter.source_view(states, self.prev_hat, t, self.hidden, self.params)
        self.hidden = view["hidden"]
        self.prev_hat = view["u_hat"]
        self.history.append((view["u_hat"], view["d_hat"]))
        if self.unadapted:
            return view["u_hat"]
        return self.adapter.deterministic(view)


@dataclass
class TransferResult:
    adapter: Adapter
    curve: list
    config: TransferConfig


def train_transfer(config: TransferConfig, gcp: GCP, odi: Optional[ODI], target_model, target_source,
                   source_model=None, task: Optional[TaskConfig] = None, progress=None,
                   force_zero_compensation=False) -> TransferResult:
    """A2C-train the compensator on ``target_model``; the GCP and ODI stay frozen.

    ``odi=None`` replaces identification with the true wave parameters
    (the target source must expose them).  ``force_zero_compensation``
    skips learning and commands the frozen action unchanged, which is
    useful to measure the mismatch of the unadapted policy.
    """
    task = task or gcp.layout.task
    source_model = source_model or FirstPrincipleModel(make_default_variation())
    ss = np.random.SeedSequence(config.seed)
    init_ss, worker_ss, act_ss = ss.spawn(3)
    adapter = Adapter.create(config, gcp, odi, np.random.default_rng(init_ss))
    rng = np.random.default_rng(act_ss)
    n = config.n_workers
    workers = Workers(target_model, target_source, task, n, worker_ss)
    hidden = odi.initial_hidden(n) if odi is not None else None
    prev_hat = np.zeros((n, 3))
    cum_task = np.zeros(n)
    cum_mis = np.zeros(n)
    a2c_cfg = config.a2c()
    state = A2CState()
    buf = RolloutBuffer(config.n_steps, n)
    curve = []
    lag = source_model.queue_length(task.dt)
    if lag:
        raise ConfigError("the parallel source model must have no command latency")

    def view_now():
        params = workers.param_arrays() if odi is None else None
        return adapter.source_view(workers.states, prev_hat, workers.t, hidden, params)

    n_updates = max(1, config.total_steps // (n * config.n_steps))
    for u in range(n_updates):
        buf.clear()
        for _ in range(config.n_steps):
            view = view_now()
            x = adapter.policy_input(view)
            pre, action, logp = adapter.policy.sample(x, rng)
            if force_zero_compensation:
                action = view["u_hat"] if config.algorithm == "tmc_feature" else np.zeros_like(action)
            values = adapter.value.predict(view["obs"])
            cmd = adapter.compose(view, action)
            x_t = workers.states.copy()
            out = workers.step(cmd)
            par_u = view["u_hat"] if config.parallel_action == "source" else cmd
            x_hat = parallel_source_step(source_model, x_t, par_u, view["d_hat"], task.dt)
            e = state_difference(out.next_states, x_hat)
            mis = np.linalg.norm(e, axis=-1)
            r = mismatch_reward(out.rewards, e, config.mismatch_weight) if config.uses_mismatch else out.rewards
            cum_task += out.rewards
            cum_mis += mis
            hidden = view["hidden"]
            prev_hat = view["u_hat"]
            boot = np.zeros(n)
            if np.any(out.truncated):
                boot = adapter.value.predict(view_now()["obs"])
            r = finish_episode_rewards(r * config.reward_scale, out, workers, config.gamma, boot)
            buf.add(x, pre, logp, r, values, out.done)
            if np.any(out.done):
                for i in np.nonzero(out.done)[0]:
                    curve.append({"episode": len(curve), "cum_task_reward": float(cum_task[i]),
                                  "cum_mismatch": float(cum_mis[i])})
                idx = np.nonzero(out.done)[0]
                workers.reset(idx)
                cum_task[idx] = 0.0
                cum_mis[idx] = 0.0
                prev_hat = prev_hat.copy()
                prev_hat[idx] = 0.0
                if hidden is not None:
                    hidden = hidden.copy()
                    hidden[idx] = 0.0
        buf.last_values = adapter.value.predict(view_now()["obs"])
        if not force_zero_compensation:
            _update(adapter, buf, a2c_cfg, state, config.algorithm)
        if progress is not None:
            progress(u, n_updates, curve[-1] if curve else None)
    return TransferResult(adapter, curve, config)


class _ValueOnObs:
    """Value function reading the compensator observation out of fused inputs."""

    def __init__(self, value, offset):
        self.value = value
        self.offset = offset
        self.params = value.params

    def loss_and_grads(self, x, returns):
        return self.value.loss_and_grads(x[..., self.offset:], returns)


def _update(adapter: Adapter, buf, config: A2CConfig, state, algorithm):
    if algorithm == "tmc_feature":
        value = _ValueOnObs(adapter.value, adapter.policy.gcp_features)
    else:
        value = adapter.value
    return a2c_update(adapter.policy, value, buf, config, state)


# -- persistence ------------------------------------------------------------------

def write_curve(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({"episode": row["episode"], "cum_task_reward": repr(float(row["cum_task_reward"])),
                        "cum_mismatch": repr(float(row["cum_mismatch"]))})


def save_adapter(result: TransferResult, path, sources: dict):
    """Checkpoint the trainable parts; the sidecar names the frozen source checkpoints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ad = result.adapter
    params = merge_prefixed({"policy": ad.policy.params, "value": ad.value.params})
    digest = save_checkpoint(params, path)
    meta = {"config": asdict(result.config), "obs_dim": ad.value.spec.input_dim, "sha256": digest,
            "frozen_sources": sources}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def load_adapter(path, gcp: GCP, odi: Optional[ODI]) -> Adapter:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg_dict = dict(meta["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    config = TransferConfig(**cfg_dict)
    adapter = Adapter.create(config, gcp, odi, np.random.default_rng(0))
    params = load_checkpoint(path)
    for name, arr in split_prefixed(params, "policy").items():
        adapter.policy.params[name] = arr
    for name, arr in split_prefixed(params, "value").items():
        adapter.value.params[name] = arr
    return adapter
