"""Online disturbance identification (ODI) and its data-aggregation loop.

A GRU reads ``(x_t, u_{t-1})`` each step and regresses the wave parameters
of the disturbance acting on the robot.  Per axis and component the head
emits four raw values:

* amplitude ``A = bound * softplus(a)``;
* angular frequency ``w = lo + (hi - lo) * sigmoid(b)`` inside the sampling
  range of that component;
* the current instantaneous phase ``theta_t = w t + phi`` as an unnormalized
  vector ``(c, s)``.

The phase parameter is recovered as ``phi = wrap(atan2(s, c) - w t)``, which
is what the disturbance-prediction step needs to synthesize the window
``d_{t:t+n}`` for the policy.  Components are sorted by frequency before
the loss is taken, removing the permutation ambiguity between components
that share a sampling range.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import disturbance as dist
from .a2c import GCP, GCPController
from .dynamics import DEFAULT_BOUNDS
from .env import (TaskConfig, WaveSource, make_evaluation_set, relative_state, run_episodes,
                  sample_initial_state, stack_params)
from .errors import ConfigError, DimensionError, TrainingError
from .metrics import batch_converged_region, quantiles
from .neural import (OptimizerConfig, OptimizerState, RecurrentCellSpec, check_params, init_recurrent,
                     load_checkpoint, optimize_step, recurrent_sequence, recurrent_sequence_backward,
                     recurrent_step, save_checkpoint, sigmoid, softplus)

log = logging.getLogger(__name__)

RAW_PER_COMPONENT = 4
ITER_FIELDS = ["iter", "median_cr", "p25_cr", "p75_cr", "odi_val_loss"]


@dataclass(frozen=True)
class OdiLayout:
    k: int = 5
    bounds: tuple = DEFAULT_BOUNDS
    amplitude_scale: float = 1.0
    task: TaskConfig = field(default_factory=TaskConfig)
    phase_weight: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    input_dim = 9

    @property
    def output_dim(self):
        return 3 * self.k * RAW_PER_COMPONENT

    def omega_range(self):
        rngs = dist.component_ranges(self.k, self.amplitude_scale)
        return np.array([r.omega[0] for r in rngs]), np.array([r.omega[1] for r in rngs])

    def inputs(self, states, prev_actions):
        states, prev_actions = np.asarray(states), np.asarray(prev_actions)
        if states.shape[-1] != 6 or prev_actions.shape[-1] != 3:
            raise DimensionError(f"ODI expects states (..., 6) and actions (..., 3), got "
                                 f"{states.shape} and {prev_actions.shape}")
        s = relative_state(states, self.task.target) / self.task.state_scale
        return np.concatenate([s, np.asarray(prev_actions) / np.asarray(self.bounds)], axis=-1)


@dataclass(frozen=True)
class Decoded:
    """Per-step head outputs mapped to valid ranges, each ``(..., 3, k)``."""

    amplitude: np.ndarray
    omega: np.ndarray
    cos: np.ndarray
    sin: np.ndarray

    def phase(self, t_seconds):
        t = np.asarray(t_seconds, dtype=float)[..., None, None]
        return dist.wrap_phase(np.arctan2(self.sin, self.cos) - self.omega * t)


def decode(raw, layout: OdiLayout) -> Decoded:
    raw = np.asarray(raw, dtype=float)
    r = raw.reshape(raw.shape[:-1] + (3, layout.k, RAW_PER_COMPONENT))
    lo, hi = layout.omega_range()
    b = np.asarray(layout.bounds)[:, None]
    return Decoded(b * softplus(r[..., 0]), lo + (hi - lo) * sigmoid(r[..., 1]), r[..., 2], r[..., 3])


class ODI:
    def __init__(self, layout: OdiLayout, spec: RecurrentCellSpec, params):
        if spec.input_dim != layout.input_dim or spec.output_dim != layout.output_dim:
            raise DimensionError(f"recurrent cell {spec} does not match layout k={layout.k}")
        check_params(params, spec.shapes())
        self.layout = layout
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, layout: OdiLayout, hidden, rng):
        spec = RecurrentCellSpec(layout.input_dim, hidden, layout.output_dim)
        return cls(layout, spec, init_recurrent(spec, rng, output_scale=0.1))

    def initial_hidden(self, batch):
        return np.zeros((batch, self.spec.hidden_dim))


def odi_predict(odi: ODI, states, prev_actions, hidden, t_step):
    """One identification step: ``((amplitude, omega, phase), new_hidden)``.

    ``t_step`` is the step index of ``states`` within the episode; the
    returned arrays have shape ``(B, 3, k)`` and always form valid wave
    parameters.
    """
    x = odi.layout.inputs(states, prev_actions)
    if x.shape[-1] != odi.spec.input_dim:
        raise DimensionError(f"ODI input has {x.shape[-1]} features, expected {odi.spec.input_dim}")
    raw, h, _ = recurrent_step(odi.params, odi.spec, x, hidden)
    d = decode(raw, odi.layout)
    return (d.amplitude, d.omega, d.phase(np.asarray(t_step) * odi.layout.task.dt)), h


# -- loss ---------------------------------------------------------------------

def sort_by_omega(amplitude, omega, phase):
    order = np.argsort(omega, axis=-1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, axis=-1)  # noqa: E731
    return take(amplitude), take(omega), take(phase)


@dataclass(frozen=True)
class Labels:
    """Frequency-sorted true parameters for a batch, each ``(B, 3, k)``."""

    amplitude: np.ndarray
    omega: np.ndarray
    phase: np.ndarray

    @classmethod
    def from_params(cls, amplitude, omega, phase):
        return cls(*sort_by_omega(np.asarray(amplitude), np.asarray(omega), np.asarray(phase)))


def decoded_loss(dec: Decoded, labels: Labels, t_seconds, layout: OdiLayout, mask=None):
    """Masked mean over steps of the per-step identification error.

    Per step the error sums, over axes and (frequency-sorted) components,
    ``((A - A*)/bound)^2 + ((w - w*)/range)^2
    + phase_weight * (A*/bound) * |(c, s) - (cos th*, sin th*)|^2``
    where ``th* = w* t + phi*`` is the true instantaneous phase.

    Returns ``(loss, per_step, grads)`` with ``grads`` the derivatives with
    respect to the four decoded fields (in decoded component order).
    """
    lo, hi = layout.omega_range()
    width = np.broadcast_to(hi - lo, dec.omega.shape)
    order = np.argsort(dec.omega, axis=-1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, axis=-1)  # noqa: E731
    A, w, c, s, wd = take(dec.amplitude), take(dec.omega), take(dec.cos), take(dec.sin), take(width)
    b = np.asarray(layout.bounds)[:, None]
    t = np.asarray(t_seconds, dtype=float)[..., None, None]
    theta = labels.omega * t + labels.phase
    ea = (A - labels.amplitude) / b
    ew = (w - labels.omega) / wd
    ec = c - np.cos(theta)
    es = s - np.sin(theta)
    pw = layout.phase_weight * labels.amplitude / b
    per_step = np.sum(ea * ea + ew * ew + pw * (ec * ec + es * es), axis=(-2, -1))
    mask = np.ones(per_step.shape) if mask is None else np.asarray(mask, dtype=float)
    n = max(float(mask.sum()), 1.0)
    loss = float(np.sum(per_step * mask) / n)
    m = mask[..., None, None] / n
    g_sorted = (2 * ea / b * m, 2 * ew / wd * m, 2 * pw * ec * m, 2 * pw * es * m)
    grads = []
    for g in g_sorted:
        out = np.empty_like(g)
        np.put_along_axis(out, order, g, axis=-1)
        grads.append(out)
    return loss, per_step, tuple(grads)


def raw_loss(raw, labels: Labels, t_seconds, layout: OdiLayout, mask=None):
    """Loss of raw head outputs ``(..., 12k)`` and its gradient w.r.t. them."""
    raw = np.asarray(raw, dtype=float)
    r = raw.reshape(raw.shape[:-1] + (3, layout.k, RAW_PER_COMPONENT))
    dec = decode(raw, layout)
    loss, _, (gA, gw, gc, gs) = decoded_loss(dec, labels, t_seconds, layout, mask)
    lo, hi = layout.omega_range()
    b = np.asarray(layout.bounds)[:, None]
    sw = sigmoid(r[..., 1])
    g = np.stack([gA * b * sigmoid(r[..., 0]), gw * (hi - lo) * sw * (1 - sw), gc, gs], axis=-1)
    return loss, g.reshape(raw.shape)


# -- dataset ------------------------------------------------------------------

@dataclass(frozen=True)
class OdiRecord:
    states: np.ndarray  # (L+1, 6)
    actions: np.ndarray  # (L, 3)
    disturbances: np.ndarray  # (L, 3) applied forces
    params: dist.DisturbanceParams
    matched: bool

    def __len__(self):
        return len(self.actions)


@dataclass
class OdiDataset:
    records: List[OdiRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def extend(self, shard):
        self.records.extend(shard.records if isinstance(shard, OdiDataset) else shard)

    def split(self, val_fraction, rng):
        """Random episode-level split ``(train, val)``; at least one training record."""
        idx = rng.permutation(len(self.records))
        n_val = int(round(val_fraction * len(idx)))
        n_val = min(n_val, len(idx) - 1)
        val = OdiDataset([self.records[i] for i in sorted(idx[:n_val])])
        train = OdiDataset([self.records[i] for i in sorted(idx[n_val:])])
        return train, val


def batch_arrays(records, layout: OdiLayout):
    """Time-major inputs ``(T, B, 9)``, mask ``(T, B)`` and sorted labels."""
    T = max(len(r) for r in records)
    B = len(records)
    xs = np.zeros((T, B, layout.input_dim))
    mask = np.zeros((T, B))
    for j, r in enumerate(records):
        L = len(r)
        prev = np.vstack([np.zeros((1, 3)), r.actions[:L - 1]])
        xs[:L, j] = layout.inputs(r.states[:L], prev)
        mask[:L, j] = 1.0
    labels = Labels.from_params(*stack_params([r.params for r in records]))
    return xs, mask, labels


@dataclass(frozen=True)
class OdiTrainConfig:
    hidden: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 32
    tbptt: int = 50
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.1
    clip_norm: float = 1.0
    phase_weight: float = 1.0
    seed: int = 0


def evaluate_loss(odi: ODI, dataset: OdiDataset, batch_size=256):
    if len(dataset) == 0:
        return float("nan")
    total, count = 0.0, 0.0
    dt = odi.layout.task.dt
    for start in range(0, len(dataset), batch_size):
        recs = dataset.records[start:start + batch_size]
        xs, mask, labels = batch_arrays(recs, odi.layout)
        ys, _, _ = recurrent_sequence(odi.params, odi.spec, xs, odi.initial_hidden(len(recs)))
        t = np.arange(len(xs))[:, None] * dt
        loss, _ = raw_loss(ys, labels, t, odi.layout, mask)
        total += loss * mask.sum()
        count += mask.sum()
    return total / count


def train_odi_supervised(dataset: OdiDataset, config: OdiTrainConfig = OdiTrainConfig(), odi: Optional[ODI] = None,
                         layout: Optional[OdiLayout] = None, rng=None):
    """Fit the ODI with truncated BPTT; warm-starts from ``odi`` when given.

    Returns ``(odi, curve)``; curve rows hold ``epoch, train_loss, val_loss``.
    The returned parameters are the best on the validation split.
    """
    if len(dataset) == 0:
        raise TrainingError("ODI dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if odi is None:
        if layout is None:
            raise ConfigError("need an ODI or a layout to train from scratch")
        odi = ODI.create(layout, config.hidden, rng)
    else:
        odi = ODI(odi.layout, odi.spec, odi.params.copy())
    train, val = dataset.split(config.val_fraction, rng) if len(dataset) > 1 else (dataset, OdiDataset())
    opt = OptimizerConfig("adam", config.learning_rate, clip_norm=config.clip_norm)
    state = OptimizerState()
    dt = odi.layout.task.dt
    best = odi.params.copy()
    best_score = evaluate_loss(odi, val) if len(val) else math.inf
    stale = 0
    curve = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            recs = [train.records[i] for i in order[start:start + config.batch_size]]
            xs, mask, labels = batch_arrays(recs, odi.layout)
            h = odi.initial_hidden(len(recs))
            for c0 in range(0, len(xs), config.tbptt):
                c1 = min(c0 + config.tbptt, len(xs))
                m = mask[c0:c1]
                if m.sum() == 0:
                    break
                ys, h_next, cache = recurrent_sequence(odi.params, odi.spec, xs[c0:c1], h)
                t = np.arange(c0, c1)[:, None] * dt
                loss, g = raw_loss(ys, labels, t, odi.layout, m)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite ODI loss at epoch {epoch}")
                grads, _, _ = recurrent_sequence_backward(odi.params, odi.spec, cache, g)
                optimize_step(odi.params, grads, state, opt)
                losses.append(loss)
                weights.append(m.sum())
                h = h_next
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(odi, val) if len(val) else train_loss
        curve.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_score:
            best, best_score, stale = odi.params.copy(), val_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return ODI(odi.layout, odi.spec, best), curve


# -- closed loop ----------------------------------------------------------------

def window_from_params(layout, t, amplitude, omega, phase):
    """Predicted disturbances for steps ``t .. t+n-1``, ``(B, n, 3)``."""
    steps = (np.asarray(t)[..., None] + np.arange(layout.window)) * layout.task.dt
    return dist.wave_sum(amplitude, omega, phase, steps)


class GcpOdiController:
    """Closed loop: the ODI estimates parameters, the synthesizer builds the window, the GCP acts.

    ``oracle=True`` swaps the ODI for the true parameters, which must give
    exactly the actions of the GCP fed true information.
    """

    def __init__(self, gcp: GCP, odi: Optional[ODI], oracle=False):
        lay = gcp.layout
        if lay.variant == "state-only":
            raise ConfigError("a state-only policy takes no disturbance estimate")
        if not oracle:
            if odi is None:
                raise ConfigError("controller needs an ODI unless oracle=True")
            if odi.layout.k != lay.k:
                raise ConfigError(f"ODI identifies k={odi.layout.k} components, GCP expects k={lay.k}")
            if not np.isclose(odi.layout.task.dt, lay.task.dt):
                raise ConfigError("ODI and GCP were built for different time steps")
        self.gcp = gcp
        self.odi = odi
        self.oracle = oracle
        self.hidden = None
        self._true = None
        self.last_estimate = None

    def start(self, disturbances, params):
        n = len(disturbances)
        if self.oracle:
            if params is None:
                raise ConfigError("oracle controller needs true wave parameters")
            self._true = params
        else:
            self.hidden = self.odi.initial_hidden(n)

    def estimate(self, states, prev_actions, t):
        if self.oracle:
            return self._true
        est, self.hidden = odi_predict(self.odi, states, prev_actions, self.hidden, t)
        return est

    def act(self, states, prev_actions, t):
        est = self.estimate(states, prev_actions, t)
        self.last_estimate = est
        lay = self.gcp.layout
        window = window_from_params(lay, t, *est) if lay.uses_window else None
        return self.gcp.act(states, np.full(len(states), t), window, est)

    def act_with_features(self, states, prev_actions, t):
        est = self.estimate(states, prev_actions, t)
        self.last_estimate = est
        lay = self.gcp.layout
        window = window_from_params(lay, t, *est) if lay.uses_window else None
        return self.gcp.act_with_features(states, np.full(len(states), t), window, est)


def controller_gcp_odi(gcp: GCP, odi: ODI) -> GcpOdiController:
    return GcpOdiController(gcp, odi)


def run_iteration(gcp: GCP, odi: Optional[ODI], model, n_params, n_episodes_per_param, rng,
                  task: Optional[TaskConfig] = None, amplitude_scale=None) -> OdiDataset:
    """Collect ``K x N`` labelled episodes.

    Without an ODI the GCP sees the true disturbance window (matched
    records); with one it sees the ODI's estimate while the model is still
    driven by the true parameters (mismatched records).
    """
    lay = gcp.layout
    task = task or lay.task
    scale = lay.amplitude_scale if amplitude_scale is None else amplitude_scale
    T = task.episode_length
    params, x0, dists = [], [], []
    for _ in range(n_params):
        p = dist.sample_params(rng, lay.bounds, lay.k, scale)
        samples = dist.synthesize(p, 0, T + lay.window, task.dt).samples
        for _ in range(n_episodes_per_param):
            params.append(p)
            x0.append(sample_initial_state(rng, task))
            dists.append(samples)
    stacked = stack_params(params)
    ctrl = GCPController(gcp) if odi is None else GcpOdiController(gcp, odi)
    batch = run_episodes(model, task, np.array(x0), np.array(dists), ctrl, rng, stacked)
    matched = odi is None
    records = []
    for j, p in enumerate(params):
        L = int(batch.lengths[j])
        records.append(OdiRecord(batch.states[:L + 1, j].copy(), batch.actions[:L, j].copy(),
                                 batch.disturbances[:L, j].copy(), p, matched))
    return OdiDataset(records)


@dataclass(frozen=True)
class GcpOdiConfig:
    iterations: int = 4
    n_params: int = 64
    episodes_per_param: int = 4
    eval_episodes: int = 20
    eval_seed: int = 10_000
    train: OdiTrainConfig = field(default_factory=OdiTrainConfig)
    seed: int = 0


@dataclass
class GcpOdiResult:
    odi: ODI
    dataset: OdiDataset
    rows: list
    odi_curves: list


def evaluate_gcp_odi(gcp: GCP, odi: Optional[ODI], model, task: TaskConfig, n_episodes, seed, oracle=False):
    """Converged regions of the closed loop on a fixed evaluation set."""
    lay = gcp.layout
    ev = make_evaluation_set(seed, n_episodes, task, WaveSource(lay.bounds, lay.k, lay.amplitude_scale),
                             lookahead=lay.window)
    ctrl = GcpOdiController(gcp, odi, oracle=oracle)
    noise = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_episodes + 1)[-1])
    batch = run_episodes(model, task, ev.x0, ev.disturbances, ctrl, noise, ev.params)
    return batch_converged_region(batch.distances, batch.lengths)


def train_gcp_odi(gcp: GCP, model, config: GcpOdiConfig = GcpOdiConfig(), out_dir=None, progress=None):
    """Alternate data collection and ODI retraining (data aggregation).

    Iteration 1 drives the GCP with true windows; every later iteration
    uses the current ODI.  After each retraining the closed loop is
    evaluated on a fixed episode set.
    """
    lay = gcp.layout
    task = lay.task
    ss = np.random.SeedSequence(config.seed)
    data_ss, train_ss = ss.spawn(2)
    data_rng = np.random.default_rng(data_ss)
    train_rng = np.random.default_rng(train_ss)
    layout = OdiLayout(lay.k, lay.bounds, lay.amplitude_scale, task, config.train.phase_weight)
    dataset = OdiDataset()
    odi = None
    rows, curves = [], []
    for it in range(1, config.iterations + 1):
        shard = run_iteration(gcp, odi, model, config.n_params, config.episodes_per_param, data_rng, task)
        if out_dir is not None:
            write_shard(shard, Path(out_dir) / "shards" / f"iter{it}")
        dataset.extend(shard)
        odi, curve = train_odi_supervised(dataset, config.train, odi, layout, train_rng)
        curves.append(curve)
        cr = evaluate_gcp_odi(gcp, odi, model, task, config.eval_episodes, config.eval_seed)
        q = quantiles(cr)
        rows.append({"iter": it, "median_cr": q["median"], "p25_cr": q["p25"], "p75_cr": q["p75"],
                     "odi_val_loss": curve[-1]["val_loss"] if curve else float("nan")})
        log.info("ODI iteration %d: median CR %.4f, val loss %.4f", it, q["median"], rows[-1]["odi_val_loss"])
        if progress is not None:
            progress(it, rows[-1])
    result = GcpOdiResult(odi, dataset, rows, curves)
    if out_dir is not None:
        save_odi(odi, Path(out_dir) / "odi.wvc")
        write_rows(rows, Path(out_dir) / "odi_iterations.csv", ITER_FIELDS)
    return result


# -- persistence ----------------------------------------------------------------

def write_rows(rows, path, fields):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in fields})


TRAJ_FIELDS = ["episode", "t", "x", "y", "yaw", "vx", "vy", "yawrate", "fx", "fy", "tau", "dx", "dy", "dtau"]
PARAM_FIELDS = ["episode", "axis", "component", "amplitude", "omega", "phase", "matched"]


def write_shard(shard: OdiDataset, directory):
    """Two CSVs: per-step trajectories and the generating parameters."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "trajectories.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_FIELDS)
        for e, r in enumerate(shard.records):
            for t in range(len(r)):
                w.writerow([e, t, *map(repr, map(float, r.states[t])), *map(repr, map(float, r.actions[t])),
                            *map(repr, map(float, r.disturbances[t]))])
            # the state after the last action closes the trajectory
            w.writerow([e, len(r), *map(repr, map(float, r.states[len(r)])), "", "", "", "", "", ""])
    with (d / "params.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARAM_FIELDS)
        for e, r in enumerate(shard.records):
            for axis in range(3):
                for c in range(r.params.k):
                    w.writerow([e, axis, c, repr(float(r.params.amplitude[axis, c])),
                                repr(float(r.params.omega[axis, c])), repr(float(r.params.phase[axis, c])),
                                int(r.matched)])


def read_shard(directory) -> OdiDataset:
    d = Path(directory)
    rows = {}
    with (d / "trajectories.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["episode"]), []).append(row)
    params = {}
    with (d / "params.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            params.setdefault(int(row["episode"]), []).append(row)
    records = []
    for e in sorted(rows):
        steps = rows[e]
        states = np.array([[float(s[f]) for f in TRAJ_FIELDS[2:8]] for s in steps])
        acts = np.array([[float(s[f]) for f in ("fx", "fy", "tau")] for s in steps[:-1]]).reshape(-1, 3)
        dists = np.array([[float(s[f]) for f in ("dx", "dy", "dtau")] for s in steps[:-1]]).reshape(-1, 3)
        prow = params[e]
        k = max(int(p["component"]) for p in prow) + 1
        arr = {n: np.zeros((3, k)) for n in ("amplitude", "omega", "phase")}
        for p in prow:
            for n in arr:
                arr[n][int(p["axis"]), int(p["component"])] = float(p[n])
        records.append(OdiRecord(states, acts, dists, dist.DisturbanceParams(**arr), bool(int(prow[0]["matched"]))))
    return OdiDataset(records)


def save_odi(odi: ODI, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(odi.params, path)
    lay = asdict(odi.layout)
    lay["task"] = asdict(odi.layout.task)
    meta = {"layout": lay, "hidden": odi.spec.hidden_dim, "sha256": digest}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def load_odi(path) -> ODI:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    lay = dict(meta["layout"])
    task = TaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in lay.pop("task").items()})
    layout = OdiLayout(lay["k"], tuple(lay["bounds"]), lay["amplitude_scale"], task, lay["phase_weight"])
    spec = RecurrentCellSpec(layout.input_dim, meta["hidden"], layout.output_dim)
    return ODI(layout, spec, load_checkpoint(path, spec.shapes()))

