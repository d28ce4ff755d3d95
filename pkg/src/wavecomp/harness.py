"""Experiment plumbing: config files, run directories, evaluation and reports.

Config files are INI-style (``[section]`` headers, ``key = value`` lines).
The token ``${out}`` inside a value expands to the ``--out`` directory, so
a pipeline config can point later stages at earlier stages' outputs and
still be replayed into a fresh directory.

Every run lives in ``<out>/<run-name>/`` with ``manifest.json``,
``config.cfg`` (the raw config text), ``checkpoints/``, ``csv/`` and
``figures/``.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dynamics import FirstPrincipleModel, ModelVariation, variation_from_section
from .env import (NullSource, RecordedTraceSource, TargetTraceSource, TaskConfig, WaveSource,
                  make_evaluation_set, run_episodes)
from .errors import ConfigError, ReportError
from .metrics import DEFAULT_WINDOW, converged_region, quantiles
from .transfer import state_difference
from . import disturbance as dist

log = logging.getLogger(__name__)

OUT_TOKEN = "${out}"


# -- config files ---------------------------------------------------------------

class RunConfig:
    """Parsed config file that remembers which keys were consumed.

    Values are converted on access, using the type of the default they
    replace.  :meth:`check_unused` flags leftover keys (typos) with their
    file and line before any computation starts.
    """

    def __init__(self, text="", path="<config>", out=""):
        self.path = str(path)
        self.text = text
        self.out = str(out)
        self._parser = configparser.ConfigParser(interpolation=None, strict=True)
        self._parser.optionxform = str
        try:
            self._parser.read_string(text, source=self.path)
        except configparser.ParsingError as exc:
            lineno, line = exc.errors[0]
            raise ConfigError(f"{self.path}:{lineno}: cannot parse {line.strip()!r}") from exc
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(f"{self.path}:{exc.lineno}: expected a [section] header") from exc
        except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
            raise ConfigError(f"{self.path}:{exc.lineno}: {exc.message.splitlines()[0]}") from exc
        self._used = set()

    @classmethod
    def from_file(cls, path, out=""):
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
        return cls(text, path, out)

    def line_of(self, section, key=None):
        current = None
        for i, line in enumerate(self.text.splitlines(), start=1):
            s = line.strip()
            m = re.fullmatch(r"\[([^\]]+)\]", s)
            if m:
                current = m.group(1).strip()
                if key is None and current == section:
                    return i
                continue
            if current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return i
        return None

    def where(self, section, key=None):
        line = self.line_of(section, key)
        return f"{self.path}:{line}" if line else self.path

    def has(self, section, key=None):
        if key is None:
            return self._parser.has_section(section)
        return self._parser.has_option(section, key)

    def raw(self, section, key, default=None):
        if not self.has(section, key):
            return default
        self._used.add((section, key))
        return self._parser.get(section, key).replace(OUT_TOKEN, self.out)

    def section(self, name):
        """All keys of a section as strings (marked as used)."""
        if not self._parser.has_section(name):
            return {}
        return {k: self.raw(name, k) for k in self._parser.options(name)}

    def value(self, section, key, default):
        text = self.raw(section, key)
        if text is None:
            return default
        try:
            return convert(text, default)
        except ValueError as exc:
            raise ConfigError(f"{self.where(section, key)}: [{section}] {key}: {exc}") from exc

    def path_value(self, section, key, required=False, must_exist=True):
        text = self.raw(section, key)
        if text is None or text.strip() == "":
            if required:
                raise ConfigError(f"{self.path}: [{section}] {key} is required")
            return None
        p = Path(text.strip())
        if must_exist and not p.exists():
            raise ConfigError(f"{self.where(section, key)}: [{section}] {key}: no such file {p}")
        return p

    def dataclass(self, section, cls, exclude=(), **overrides):
        """Instantiate ``cls`` from its defaults updated by ``[section]`` keys."""
        base = cls()
        updates = {}
        for f in dataclasses.fields(cls):
            if f.name in exclude or f.name in overrides:
                continue
            if self.has(section, f.name):
                updates[f.name] = self.value(section, f.name, getattr(base, f.name))
        try:
            return dataclasses.replace(base, **updates, **overrides)
        except (ConfigError, ValueError, TypeError) as exc:
            raise ConfigError(f"{self.where(section)}: [{section}] {exc}") from exc

    def check_unused(self, sections=None):
        """Raise on the first unconsumed key in ``sections`` (default: all)."""
        for section in self._parser.sections():
            if sections is not None and section not in sections:
                continue
            for key in self._parser.options(section):
                if (section, key) not in self._used:
                    raise ConfigError(f"{self.where(section, key)}: unknown key {key!r} in [{section}]")

    def snapshot(self):
        return {s: dict(self._parser.items(s)) for s in self._parser.sections()}


def convert(text, default):
    """Parse ``text`` into the type of ``default``."""
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if default is None:
        if text.lower() in ("none", ""):
            return None
        return float(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if isinstance(default, str):
        return text
    raise ValueError(f"unsupported option type {type(default).__name__}")


# -- building blocks from config --------------------------------------------------

def task_from_config(cfg: RunConfig) -> TaskConfig:
    return cfg.dataclass("task", TaskConfig)


def variation_from_config(cfg: RunConfig, section="model", default_kind="default") -> ModelVariation:
    raw = {k: v for k, v in cfg.section(section).items() if k not in ("source", "checkpoint")}
    raw.setdefault("kind", default_kind)
    try:
        return variation_from_section(raw)
    except ConfigError as exc:
        raise ConfigError(f"{cfg.where(section)}: {exc}") from exc


def model_from_config(cfg: RunConfig, section="model", default_kind="default"):
    """First-principle model, or the learned one when ``source = empirical``."""
    source = (cfg.raw(section, "source") or "first-principle").strip()
    if source == "first-principle":
        return FirstPrincipleModel(variation_from_config(cfg, section, default_kind))
    if source == "empirical":
        from .sysid import load_empirical, wrap_empirical

        ckpt = cfg.path_value(section, "checkpoint", required=True)
        variation = variation_from_config(cfg, section, "empirical_ground_truth")
        return wrap_empirical(load_empirical(ckpt), variation)
    raise ConfigError(f"{cfg.where(section, 'source')}: [{section}] source must be first-principle or empirical")


DISTURBANCE_SOURCES = ("wave", "none", "target-trace", "recorded")


def disturbance_from_config(cfg: RunConfig, bounds, default_source="wave", default_k=5):
    """Disturbance source described by ``[disturbance]``."""
    kind = (cfg.raw("disturbance", "source") or default_source).strip()
    k = cfg.value("disturbance", "k", default_k)
    scale = cfg.value("disturbance", "amplitude_scale", 1.0)
    if kind == "wave":
        shared = cfg.value("disturbance", "shared_axes", False)
        return WaveSource(tuple(bounds), k, scale, shared)
    if kind == "none":
        return NullSource(k)
    if kind == "target-trace":
        tc = dist.TargetTraceConfig()
        updates = {}
        for f in dataclasses.fields(dist.TargetTraceConfig):
            key = f"trace_{f.name}"
            if cfg.has("disturbance", key):
                updates[f.name] = cfg.value("disturbance", key, getattr(tc, f.name))
        return TargetTraceSource(tuple(bounds), dataclasses.replace(tc, **updates))
    if kind == "recorded":
        text = cfg.raw("disturbance", "traces")
        if not text:
            raise ConfigError(f"{cfg.where('disturbance')}: [disturbance] traces is required for recorded sources")
        paths = [Path(p.strip()) for p in text.split(",") if p.strip()]
        return RecordedTraceSource(tuple(dist.read_trace(p) for p in paths))
    raise ConfigError(f"{cfg.where('disturbance', 'source')}: [disturbance] source must be one of "
                      f"{', '.join(DISTURBANCE_SOURCES)}")


# -- run directories ----------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """``<out>/<name>/`` with the standard sub-directories."""

    def __init__(self, out, name):
        if not re.fullmatch(r"[A-Za-z0-9._-]+", name):
            raise ConfigError(f"run name {name!r} may only contain letters, digits, '.', '_' and '-'")
        self.root = Path(out) / name
        self.checkpoints = self.root / "checkpoints"
        self.csv = self.root / "csv"
        self.figures = self.root / "figures"

    def create(self):
        for d in (self.checkpoints, self.csv, self.figures):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def write_manifest(self, command, seed, cfg: RunConfig, inputs=None, argv=None):
        """Manifest with config snapshot, seed and hashes of every artifact."""
        (self.root / "config.cfg").write_text(cfg.text)
        files = lambda d: {p.relative_to(self.root).as_posix(): sha256_file(p)  # noqa: E731
                           for p in sorted(d.rglob("*")) if p.is_file()}
        manifest = {
            "command": command,
            "seed": seed,
            "version": __version__,
            "config_text": cfg.text,
            "config": cfg.snapshot(),
            "inputs": {str(k): sha256_file(v) for k, v in sorted((inputs or {}).items()) if v is not None},
            "checkpoints": files(self.checkpoints),
            "csv": files(self.csv),
            "figures": files(self.figures),
        }
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def read_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read manifest ({exc.strerror or exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: manifest is not valid JSON") from exc
    for key in ("command", "seed", "config_text"):
        if key not in data:
            raise ConfigError(f"{p}: manifest lacks {key!r}")
    return data


# -- evaluation -----------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeMetrics:
    distances: np.ndarray
    converged_region: float
    final_distance: float
    cumulative_reward: float
    cumulative_mismatch: Optional[float]
    length: int
    diverged: bool
    complete: bool


@dataclass
class Evaluation:
    episodes: list
    batch: object

    @property
    def converged_regions(self):
        return np.array([e.converged_region for e in self.episodes])

    def summary(self):
        return quantiles(self.converged_regions)


def mismatch_from_history(batch, history, source_model, dt):
    """Per-episode cumulative ``|x_{t+1} - x_hat_{t+1}|`` from recorded ``(u_hat, d_hat)``."""
    total = np.zeros(batch.states.shape[1])
    for t, (u_hat, d_hat) in enumerate(history):
        x_hat = source_model.step(batch.states[t], u_hat, d_hat, dt).next_state
        e = np.linalg.norm(state_difference(batch.states[t + 1], x_hat), axis=-1)
        total += np.where(t < batch.lengths, e, 0.0)
    return total


def evaluate(controller, model, task: TaskConfig, source, n_episodes, seed, lookahead=0,
             window=DEFAULT_WINDOW, source_model=None) -> Evaluation:
    """Run ``n_episodes`` fixed-seed episodes and score each one.

    Diverged episodes are kept and flagged.  When the controller records a
    ``history`` and ``source_model`` is given, the cumulative transition
    mismatch is reported too.
    """
    ev = make_evaluation_set(seed, n_episodes, task, source, lookahead)
    noise = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_episodes + 1)[-1])
    batch = run_episodes(model, task, ev.x0, ev.disturbances, controller, noise, ev.params)
    mism = None
    if source_model is not None and getattr(controller, "history", None):
        mism = mismatch_from_history(batch, controller.history, source_model, task.dt)
    d = batch.distances
    out = []
    for i in range(n_episodes):
        L = int(batch.lengths[i])
        cr, complete = converged_region(d[:L, i], task.episode_length, min(window, task.episode_length),
                                        with_flag=True)
        out.append(EpisodeMetrics(d[:L, i].copy(), cr, float(d[L - 1, i]), float(batch.rewards[:, i].sum()),
                                  None if mism is None else float(mism[i]), L, bool(batch.diverged[i]),
                                  complete))
    return Evaluation(out, batch)


EPISODE_FIELDS = ["episode", "converged_region", "final_distance", "cumulative_reward", "cumulative_mismatch",
                  "length", "diverged"]
SUMMARY_FIELDS = ["n", "p25_cr", "median_cr", "p75_cr", "n_diverged"]
DISTANCE_FIELDS = ["episode", "t", "distance"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, fields, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def write_evaluation(evaluation: Evaluation, csv_dir):
    """``episodes.csv`` (one row per episode), ``summary.csv`` and ``distances.csv``."""
    csv_dir = Path(csv_dir)
    rows = [{"episode": i, "converged_region": e.converged_region, "final_distance": e.final_distance,
             "cumulative_reward": e.cumulative_reward, "cumulative_mismatch": e.cumulative_mismatch,
             "length": e.length, "diverged": e.diverged} for i, e in enumerate(evaluation.episodes)]
    write_csv(csv_dir / "episodes.csv", EPISODE_FIELDS, rows)
    q = evaluation.summary()
    write_csv(csv_dir / "summary.csv", SUMMARY_FIELDS, [{
        "n": len(rows), "p25_cr": q["p25"], "median_cr": q["median"], "p75_cr": q["p75"],
        "n_diverged": sum(e.diverged for e in evaluation.episodes)}])
    write_csv(csv_dir / "distances.csv", DISTANCE_FIELDS,
              ({"episode": i, "t": t, "distance": float(v)}
               for i, e in enumerate(evaluation.episodes) for t, v in enumerate(e.distances)))


# -- reports --------------------------------------------------------------------------

REPORT_SOURCES = {
    "episodes.csv": ("converged_region",),
    "distances.csv": ("episode", "t", "distance"),
    "gcp_curve.csv": ("steps", "mean_return"),
    "transfer_curve.csv": ("episode", "cum_task_reward", "cum_mismatch"),
    "odi_iterations.csv": ("iter", "median_cr"),
}


def read_columns(path, columns):
    """Float columns of a CSV; raises :class:`ReportError` for missing or empty files."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"{path}: missing CSV")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise ReportError(f"{path}: missing column(s) {', '.join(missing)}")
        data = {c: [] for c in columns}
        for row in reader:
            for c in columns:
                text = row[c]
                data[c].append(float(text) if text not in ("", None) else math.nan)
    if not data[columns[0]]:
        raise ReportError(f"{path}: no data rows")
    out = {c: np.array(v) for c, v in data.items()}
    for c, v in out.items():
        if not np.isfinite(v).any():
            raise ReportError(f"{path}: column {c} has no finite values")
    return out


def _finite_limits(*arrays):
    vals = np.concatenate([np.ravel(a) for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise ReportError("no finite values to plot")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        pad = 0.5 if lo == 0 else abs(lo) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def emit_report(runs, out_dir, labels=None):
    """Render SVG figures for one or more run directories.

    Every known CSV present in a run's ``csv/`` directory contributes a
    series; all inputs are read and validated before any figure is written,
    so a bad input leaves no partial output.  Returns ``{figure name:
    {"xlim", "ylim", "series"}}``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in runs]
    if not runs:
        raise ReportError("no run directories given")
    labels = list(labels) if labels else [r.name for r in runs]
    if len(labels) != len(runs):
        raise ReportError(f"{len(labels)} labels for {len(runs)} runs")

    loaded = {}
    for run, label in zip(runs, labels):
        found = {}
        for name, cols in REPORT_SOURCES.items():
            p = run / "csv" / name
            if p.exists():
                found[name] = read_columns(p, cols)
        if not found:
            raise ReportError(f"{run / 'csv' / 'episodes.csv'}: missing CSV (no plottable data in {run})")
        loaded[label] = found

    figures = {}

    def series(name):
        return [(label, data[name]) for label, data in loaded.items() if name in data]

    plans = []
    box = series("episodes.csv")
    if box:
        plans.append(("distance_distribution", box))
    trace = series("distances.csv")
    if trace:
        plans.append(("distance_overlay", trace))
    for name, key in (("gcp_curve.csv", "gcp_learning_curve"), ("odi_iterations.csv", "odi_iterations")):
        s = series(name)
        if s:
            plans.append((key, s))
    tc = series("transfer_curve.csv")
    if tc:
        plans.append(("transfer_reward", tc))
        plans.append(("transfer_mismatch", tc))

    rc = {"svg.hashsalt": "wavecomp", "svg.fonttype": "none", "figure.max_open_warning": 0}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(rc):
        rendered = [(key, _draw(plt, key, s)) for key, s in plans]
        for key, (fig, info) in rendered:
            fig.savefig(out_dir / f"{key}.svg", format="svg", metadata={"Date": None})
            plt.close(fig)
            figures[key] = info
    return figures


def _median_trace(d):
    ep, t, dist_ = d["episode"].astype(int), d["t"].astype(int), d["distance"]
    T = t.max() + 1
    grid = np.full((ep.max() + 1, T), np.nan)
    grid[ep, t] = dist_
    ts = np.arange(T)
    med = np.array([np.median(col[np.isfinite(col)]) if np.isfinite(col).any() else np.nan for col in grid.T])
    return ts, med


def _draw(plt, key, series):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [label for label, _ in series]
    if key == "distance_distribution":
        values = [d["converged_region"][np.isfinite(d["converged_region"])] for _, d in series]
        ax.boxplot(values)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel("converged region (m)")
        xlim, ylim = (0.5, len(names) + 0.5), _finite_limits(*values)
    else:
        xs, ys = [], []
        for label, d in series:
            if key == "distance_overlay":
                x, y = _median_trace(d)
                ax.set_xlabel("step")
                ax.set_ylabel("median distance to target (m)")
            elif key == "gcp_learning_curve":
                x, y = d["steps"], d["mean_return"]
                ax.set_xlabel("environment steps")
                ax.set_ylabel("mean episode return")
            elif key == "odi_iterations":
                x, y = d["iter"], d["median_cr"]
                ax.set_xlabel("iteration")
                ax.set_ylabel("median converged region (m)")
            elif key == "transfer_reward":
                x, y = d["episode"], d["cum_task_reward"]
                ax.set_xlabel("episode")
                ax.set_ylabel("cumulative task reward")
            else:
                x, y = d["episode"], d["cum_mismatch"]
                ax.set_xlabel("episode")
                ax.set_ylabel("cumulative mismatch")
            ax.plot(x, y, label=label)
            xs.append(x)
            ys.append(y)
        ax.legend()
        xlim, ylim = _finite_limits(*xs), _finite_limits(*ys)
    ax.set_xlim(*xlim)
    ax.set_ylim(*ylim)
    ax.set_title(key.replace("_", " "))
    fig.tight_layout()
    return fig, {"xlim": tuple(xlim), "ylim": tuple(ylim), "series": names}

