"""Command-line entry point: ``wavecomp <command> [--config F] [--seed N] [--out DIR]``.

Each command resolves its whole configuration (including input files)
before computing anything, writes into ``<out>/<run-name>/`` and finishes
with a manifest that ``--manifest`` can replay.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, WavecompError
from .harness import (RunConfig, RunDir, disturbance_from_config, emit_report, evaluate, model_from_config,
                      read_manifest, sha256_file, task_from_config, variation_from_config, write_csv,
                      write_evaluation)

log = logging.getLogger("wavecomp")

COMMANDS = ("train-gcp", "train-odi", "train-dynamics", "transfer", "evaluate", "rollout", "report")

# sections each command reads; any other known section is ignored so one
# file can describe a whole pipeline
SECTIONS = {
    "train-gcp": ("run", "task", "model", "disturbance", "gcp"),
    "train-odi": ("run", "model", "odi", "inputs"),
    "train-dynamics": ("run", "model", "dynamics", "inputs"),
    "transfer": ("run", "model", "source_model", "disturbance", "transfer", "inputs"),
    "evaluate": ("run", "task", "model", "source_model", "disturbance", "evaluate", "inputs"),
    "rollout": ("run", "task", "model", "disturbance", "rollout", "inputs"),
    "report": ("run", "report"),
}
KNOWN_SECTIONS = {s for v in SECTIONS.values() for s in v}
# sections shared between pipeline stages are checked against every key any
# command understands; the others must be consumed by the running command
SHARED_KEYS = {
    "inputs": {"gcp", "odi", "adapter", "log"},
    "disturbance": {"source", "k", "amplitude_scale", "shared_axes", "traces"},
}
CONTROLLERS = ("gcp", "gcp-odi", "gcp-oracle", "adapted", "unadapted", "zero")


def u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {v} outside [0, 2^64)")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=u64, default=None, help="master seed (default 0)")
    common.add_argument("--out", default="out", help="output root (default: out)")
    common.add_argument("--manifest", help="replay the command, config and seed recorded in a manifest")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="wavecomp", description="Disturbance-rejection control learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "train-gcp": "train a control policy with A2C",
        "train-odi": "train the disturbance identifier by data aggregation",
        "train-dynamics": "fit a learned dynamics model to random-control data",
        "transfer": "adapt a frozen policy to a target model",
        "evaluate": "score a controller on fixed-seed episodes",
        "rollout": "write trajectory CSVs (trajectory-log schema)",
        "report": "render SVG figures from run directories",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "report":
            p.add_argument("--runs", nargs="+", help="run directories to plot")
            p.add_argument("--labels", nargs="+", help="series labels, one per run")
    return parser


# -- plans ------------------------------------------------------------------------------

@dataclass
class Plan:
    name: str
    execute: Callable[[RunDir], str]
    inputs: dict = field(default_factory=dict)


def _seed_ss(seed):
    return np.random.SeedSequence(seed)


def _load_gcp(cfg, required=True):
    from .a2c import load_gcp

    path = cfg.path_value("inputs", "gcp", required=required)
    return (load_gcp(path)[0], path) if path is not None else (None, None)


def _load_odi(cfg):
    from .odi import load_odi

    path = cfg.path_value("inputs", "odi")
    return (load_odi(path), path) if path is not None else (None, None)


def plan_train_gcp(cfg: RunConfig, seed):
    from .a2c import A2CConfig, save_gcp, train_gcp

    task = task_from_config(cfg)
    model = model_from_config(cfg)
    source = disturbance_from_config(cfg, model.control_bounds, default_k=5)
    k = getattr(source, "k", 5)
    scale = getattr(source, "amplitude_scale", 1.0)
    disturbed = (cfg.raw("disturbance", "source") or "wave").strip() != "none"
    config = cfg.dataclass("gcp", A2CConfig, exclude=("seed", "k", "amplitude_scale", "disturbance"),
                           seed=seed, k=k, amplitude_scale=scale, disturbance=disturbed)

    def run(rd: RunDir):
        res = train_gcp(config, task, model, source)
        save_gcp(res, rd.checkpoints, curve_dir=rd.csv)
        tail = [r["mean_return"] for r in res.curve[-10:] if np.isfinite(r["mean_return"])]
        return f"trained {config.variant} policy; final mean return {np.mean(tail) if tail else float('nan'):.4g}"

    return Plan("train-gcp", run)


def plan_train_odi(cfg: RunConfig, seed):
    from .odi import (ITER_FIELDS, GcpOdiConfig, OdiDataset, OdiTrainConfig, save_odi, train_gcp_odi, write_rows,
                      write_shard)

    gcp, gcp_path = _load_gcp(cfg)
    if not gcp.layout.uses_window and not gcp.layout.uses_params:
        raise ConfigError(f"{gcp_path}: a state-only policy cannot use disturbance identification")
    model = model_from_config(cfg)
    ss = _seed_ss(seed)
    train_seed, loop_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    train = cfg.dataclass("odi", OdiTrainConfig, exclude=("seed",), seed=train_seed)
    config = cfg.dataclass("odi", GcpOdiConfig, exclude=("seed", "train"), seed=loop_seed, train=train)

    def run(rd: RunDir):
        res = train_gcp_odi(gcp, model, config)
        per_iter = config.n_params * config.episodes_per_param
        for it in range(config.iterations):
            write_shard(OdiDataset(res.dataset.records[it * per_iter:(it + 1) * per_iter]),
                        rd.root / "shards" / f"iter{it + 1}")
        save_odi(res.odi, rd.checkpoints / "odi.wvc")
        write_rows(res.rows, rd.csv / "odi_iterations.csv", ITER_FIELDS)
        write_csv(rd.csv / "odi_training.csv", ["iter", "epoch", "train_loss", "val_loss"],
                  [{"iter": i + 1, **row} for i, curve in enumerate(res.odi_curves) for row in curve])
        return f"ODI after {config.iterations} iterations: median CR {res.rows[-1]['median_cr']:.4g} m"

    return Plan("train-odi", run, {"gcp": gcp_path})


def plan_train_dynamics(cfg: RunConfig, seed):
    from . import sysid

    variation = variation_from_config(cfg, "model", default_kind="empirical_ground_truth")
    log_path = cfg.path_value("inputs", "log")
    steps = cfg.value("dynamics", "steps", 20_000)
    box = cfg.value("dynamics", "box", 3.0)
    margin = cfg.value("dynamics", "margin", 0.75)
    hold = (cfg.value("dynamics", "hold_min", 5), cfg.value("dynamics", "hold_max", 20))
    fraction = cfg.value("dynamics", "train_fraction", 0.9)
    collect_ss, train_ss = _seed_ss(seed).spawn(2)
    config = cfg.dataclass("dynamics", sysid.DynamicsTrainConfig, exclude=("seed",),
                           seed=int(train_ss.generate_state(1)[0]))
    if steps < 2:
        raise ConfigError(f"{cfg.where('dynamics', 'steps')}: [dynamics] steps must be >= 2")

    def run(rd: RunDir):
        if log_path is not None:
            traj = sysid.read_log(log_path)
        else:
            traj = sysid.collect_random_trajectories(variation, steps, np.random.default_rng(collect_ss), box,
                                                     margin, hold_steps=hold)
        sysid.write_log(traj, rd.csv / "sysid_log.csv")
        ds = sysid.build_dataset(traj, fraction)
        model, curve = sysid.train_dynamics(ds, config)
        sysid.save_empirical(model, rd.checkpoints / "dynamics.wvc")
        write_csv(rd.csv / "dynamics_curve.csv", ["epoch", "train_mse", "val_mse"], curve)
        val, zoh = sysid.validation_mse(model, ds), sysid.zero_order_hold_mse(ds)
        write_csv(rd.csv / "dynamics_metrics.csv", ["train_pairs", "val_pairs", "val_mse", "zoh_mse"],
                  [{"train_pairs": len(ds.train_idx), "val_pairs": len(ds.val_idx), "val_mse": val,
                    "zoh_mse": zoh}])
        return f"dynamics model: validation MSE {val:.4g} vs zero-order hold {zoh:.4g}"

    return Plan("train-dynamics", run, {"log": log_path})


def _source_model(cfg):
    from .dynamics import FirstPrincipleModel

    return FirstPrincipleModel(variation_from_config(cfg, "source_model"))


def plan_transfer(cfg: RunConfig, seed):
    from .transfer import TransferConfig, save_adapter, train_transfer, write_curve

    gcp, gcp_path = _load_gcp(cfg)
    odi, odi_path = _load_odi(cfg)
    target = model_from_config(cfg)
    source_model = _source_model(cfg)
    source = disturbance_from_config(cfg, gcp.layout.bounds, default_source="target-trace", default_k=gcp.layout.k)
    if odi is None and not hasattr(source, "k"):
        raise ConfigError(f"{cfg.path}: without [inputs] odi the disturbance source must expose wave parameters")
    config = cfg.dataclass("transfer", TransferConfig, exclude=("seed",), seed=seed)
    dyn = cfg.raw("model", "checkpoint")

    def run(rd: RunDir):
        res = train_transfer(config, gcp, odi, target, source, source_model, gcp.layout.task)
        frozen = {"gcp": sha256_file(gcp_path)}
        if odi_path is not None:
            frozen["odi"] = sha256_file(odi_path)
        save_adapter(res, rd.checkpoints / "adapter.wvc", frozen)
        write_curve(res.curve, rd.csv / "transfer_curve.csv")
        n = max(1, len(res.curve) // 10)
        last = np.mean([r["cum_mismatch"] for r in res.curve[-n:]]) if res.curve else float("nan")
        return f"{config.algorithm}: {len(res.curve)} episodes, final mean cumulative mismatch {last:.4g}"

    return Plan("transfer", run, {"gcp": gcp_path, "odi": odi_path,
                                  "dynamics": Path(dyn) if dyn else None})


class _ZeroController:
    def start(self, disturbances, params):
        pass

    def act(self, states, prev_actions, t):
        return np.zeros((len(states), 3))


def _controller(cfg: RunConfig, section):
    """``(controller, lookahead, k, inputs, source_model)`` for ``[section] controller``."""
    kind = (cfg.raw(section, "controller") or "gcp").strip()
    if kind not in CONTROLLERS:
        raise ConfigError(f"{cfg.where(section, 'controller')}: [{section}] controller must be one of "
                          f"{', '.join(CONTROLLERS)}")
    if kind == "zero":
        return _ZeroController(), 0, cfg.value("disturbance", "k", 5), {}, None
    from .odi import GcpOdiController

    gcp, gcp_path = _load_gcp(cfg)
    inputs = {"gcp": gcp_path}
    lookahead = gcp.layout.window if gcp.layout.uses_window else 0
    if kind == "gcp":
        from .a2c import GCPController

        return GCPController(gcp), lookahead, gcp.layout.k, inputs, None
    if kind == "gcp-oracle":
        return GcpOdiController(gcp, None, oracle=True), lookahead, gcp.layout.k, inputs, None
    odi, odi_path = _load_odi(cfg)
    inputs["odi"] = odi_path
    if kind == "gcp-odi":
        if odi is None:
            raise ConfigError(f"{cfg.path}: controller gcp-odi needs [inputs] odi")
        return GcpOdiController(gcp, odi), lookahead, gcp.layout.k, inputs, None
    from .transfer import Adapter, TransferConfig, TransferController, load_adapter

    adapter_path = cfg.path_value("inputs", "adapter", required=(kind == "adapted"))
    inputs["adapter"] = adapter_path
    if adapter_path is not None:
        adapter = load_adapter(adapter_path, gcp, odi)
    else:
        adapter = Adapter.create(TransferConfig("cac"), gcp, odi, np.random.default_rng(0))
    return TransferController(adapter, unadapted=(kind == "unadapted")), lookahead, gcp.layout.k, inputs, \
        _source_model(cfg)


def _task_for(ctrl, cfg):
    """Task the controller was trained on; ``[task]`` for controllers without one."""
    if hasattr(ctrl, "gcp"):
        return ctrl.gcp.layout.task
    if hasattr(ctrl, "adapter"):
        return ctrl.adapter.gcp.layout.task
    return task_from_config(cfg)


def plan_evaluate(cfg: RunConfig, seed):
    ctrl, lookahead, k, inputs, source_model = _controller(cfg, "evaluate")
    model = model_from_config(cfg)
    source = disturbance_from_config(cfg, model.control_bounds, default_k=k)
    episodes = cfg.value("evaluate", "episodes", 20)
    window = cfg.value("evaluate", "window", 100)
    task = _task_for(ctrl, cfg)
    if episodes < 1:
        raise ConfigError(f"{cfg.where('evaluate', 'episodes')}: [evaluate] episodes must be >= 1")
    if not 1 <= window <= task.episode_length:
        raise ConfigError(f"{cfg.where('evaluate', 'window')}: [evaluate] window must lie in "
                          f"[1, {task.episode_length}]")

    def run(rd: RunDir):
        ev = evaluate(ctrl, model, task, source, episodes, seed, lookahead, window, source_model)
        write_evaluation(ev, rd.csv)
        q = ev.summary()
        return f"median converged region {q['median']:.4g} m (p25 {q['p25']:.4g}, p75 {q['p75']:.4g})"

    return Plan("evaluate", run, inputs)


def plan_rollout(cfg: RunConfig, seed):
    from . import sysid
    from .dynamics import FirstPrincipleModel

    kind = (cfg.raw("rollout", "controller") or "random").strip()
    episodes = cfg.value("rollout", "episodes", 1)
    if kind == "random":
        model = model_from_config(cfg)
        if not isinstance(model, FirstPrincipleModel):
            raise ConfigError(f"{cfg.where('rollout', 'controller')}: random rollouts need a first-principle model")
        steps = cfg.value("rollout", "steps", 2000)
        box = cfg.value("rollout", "box", 3.0)
        margin = cfg.value("rollout", "margin", 0.75)
        hold = (cfg.value("rollout", "hold_min", 5), cfg.value("rollout", "hold_max", 20))

        def run(rd: RunDir):
            children = _seed_ss(seed).spawn(episodes)
            for i, child in enumerate(children):
                traj = sysid.collect_random_trajectories(model.variation, steps, np.random.default_rng(child), box,
                                                         margin, hold_steps=hold)
                sysid.write_log(traj, rd.csv / f"rollout_{i}.csv")
            return f"wrote {episodes} random-control trajectories of {steps} steps"

        return Plan("rollout", run)

    for key in ("box", "margin", "hold_min", "hold_max"):
        if cfg.has("rollout", key):
            raise ConfigError(f"{cfg.where('rollout', key)}: [rollout] {key} only applies to random rollouts")
    ctrl, lookahead, k, inputs, _ = _controller(cfg, "rollout")
    model = model_from_config(cfg)
    source = disturbance_from_config(cfg, model.control_bounds, default_k=k)
    task = _task_for(ctrl, cfg)
    task = dataclasses.replace(task, episode_length=cfg.value("rollout", "steps", task.episode_length))

    def run(rd: RunDir):
        ev = evaluate(ctrl, model, task, source, episodes, seed, lookahead)
        b = ev.batch
        for i in range(episodes):
            L = int(b.lengths[i])
            acts = np.vstack([b.actions[:L, i], np.zeros((1, 3))])
            traj = sysid.TrajectoryLog(np.arange(L + 1) * task.dt, b.states[:L + 1, i], acts)
            sysid.write_log(traj, rd.csv / f"rollout_{i}.csv")
        return f"wrote {episodes} {kind} rollouts"

    return Plan("rollout", run, inputs)


def plan_report(cfg: RunConfig, seed, runs=None, labels=None):
    if not runs:
        text = cfg.raw("report", "runs")
        runs = [p.strip() for p in text.split(",") if p.strip()] if text else []
    if not labels:
        text = cfg.raw("report", "labels")
        labels = [p.strip() for p in text.split(",") if p.strip()] if text else None
    if not runs:
        raise ConfigError(f"{cfg.path}: report needs --runs or [report] runs")
    for r in runs:
        if not Path(r).is_dir():
            raise ConfigError(f"{r}: no such run directory")

    def run(rd: RunDir):
        figs = emit_report(runs, rd.figures, labels)
        return f"wrote {len(figs)} figure(s): {', '.join(sorted(figs))}"

    return Plan("report", run)


PLANNERS = {
    "train-gcp": plan_train_gcp,
    "train-odi": plan_train_odi,
    "train-dynamics": plan_train_dynamics,
    "transfer": plan_transfer,
    "evaluate": plan_evaluate,
    "rollout": plan_rollout,
    "report": plan_report,
}


def run_command(args):
    seed = args.seed
    if args.manifest:
        man = read_manifest(args.manifest)
        if man["command"] != args.command:
            raise ConfigError(f"{args.manifest}: manifest records '{man['command']}', not '{args.command}'")
        if args.config:
            raise ConfigError("--config and --manifest are mutually exclusive")
        if seed is not None and seed != man["seed"]:
            raise ConfigError(f"--seed {seed} contradicts the manifest seed {man['seed']}")
        seed = man["seed"]
        cfg = RunConfig(man["config_text"], f"{args.manifest}[config]", args.out)
    elif args.config:
        cfg = RunConfig.from_file(args.config, args.out)
    else:
        cfg = RunConfig("", "<defaults>", args.out)
    seed = 0 if seed is None else seed
    name = (cfg.raw("run", "name") or args.command).strip()
    rd = RunDir(args.out, name)
    if args.command == "report":
        plan = plan_report(cfg, seed, args.runs, args.labels)
    else:
        plan = PLANNERS[args.command](cfg, seed)
    for section in cfg.snapshot():
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"{cfg.where(section)}: unknown section [{section}]")
    for section, allowed in SHARED_KEYS.items():
        for key in cfg.snapshot().get(section, {}):
            if key not in allowed and not (section == "disturbance" and key.startswith("trace_")):
                raise ConfigError(f"{cfg.where(section, key)}: unknown key {key!r} in [{section}]")
    cfg.check_unused([s for s in SECTIONS[args.command] if s not in SHARED_KEYS])
    rd.create()
    summary = plan.execute(rd)
    rd.write_manifest(args.command, seed, cfg, plan.inputs)
    return rd, summary


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rd, summary = run_command(args)
    except (WavecompError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"wavecomp: error: {msg}", file=sys.stderr)
        return 1
    print(f"{rd.root}: {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
