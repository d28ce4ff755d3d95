import csv
import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavecomp.cli import main
from wavecomp.dynamics import DEFAULT_BOUNDS, StepResult
from wavecomp.env import NullSource, TaskConfig, WaveSource
from wavecomp.errors import ConfigError, ReportError
from wavecomp.harness import RunConfig, convert, emit_report, evaluate, write_evaluation
from wavecomp.metrics import converged_region
from wavecomp.sysid import LOG_FIELDS

TINY_GCP = """\
[gcp]
total_steps = 1024
hidden = 8, 8
window = 5
[disturbance]
k = 2
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- converged region ---------------------------------------------------------------

def test_converged_region_examples():
    assert converged_region(np.ones(200)) == 0.0
    tail = np.where(np.arange(100) % 2 == 0, 0.3, 0.5)
    d = np.concatenate([np.linspace(3, 1, 100), tail])
    assert converged_region(d) == pytest.approx(0.2, abs=1e-15)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10), min_size=200, max_size=200), st.integers(1, 200))
def test_converged_region_matches_scan(d, window):
    lo = hi = d[-window]
    for v in d[-window:]:
        lo, hi = min(lo, v), max(hi, v)
    assert converged_region(d, 200, window) == hi - lo


def test_short_episode_is_flagged():
    value, complete = converged_region([1.0, 2.0, 4.0], 200, 100, with_flag=True)
    assert value == 3.0 and not complete
    with pytest.raises(ValueError):
        converged_region(np.ones(200), 200, 201)


# -- evaluation ---------------------------------------------------------------------

class Teleport:
    """Test double that puts the robot on the target after every step."""

    control_bounds = np.array(DEFAULT_BOUNDS)

    def queue_length(self, dt=0.05):
        return 0

    def step(self, state, commanded, disturbance, dt=0.05, queue=None, rng=None):
        s = np.asarray(state, dtype=float)
        return StepResult(np.zeros_like(s), np.asarray(commanded, dtype=float),
                          np.asarray(disturbance, dtype=float), None)


class Zero:
    def start(self, disturbances, params):
        pass

    def act(self, states, prev_actions, t):
        return np.zeros((len(states), 3))


def test_teleport_gives_zero_converged_region():
    ev = evaluate(Zero(), Teleport(), TaskConfig(), WaveSource(k=2), 8, seed=5)
    assert np.all(ev.converged_regions == 0.0)
    assert not any(e.diverged for e in ev.episodes)


def test_evaluation_csvs_are_deterministic(tmp_path):
    from wavecomp.dynamics import FirstPrincipleModel

    for name in ("a", "b"):
        ev = evaluate(Zero(), FirstPrincipleModel(), TaskConfig(), WaveSource(k=2), 6, seed=11)
        write_evaluation(ev, tmp_path / name)
    for f in ("episodes.csv", "summary.csv", "distances.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    summary = read_rows(tmp_path / "a" / "summary.csv")[0]
    assert float(summary["p25_cr"]) <= float(summary["median_cr"]) <= float(summary["p75_cr"])


class Runaway:
    control_bounds = np.array(DEFAULT_BOUNDS)

    def queue_length(self, dt=0.05):
        return 0

    def step(self, state, commanded, disturbance, dt=0.05, queue=None, rng=None):
        s = np.array(state, dtype=float)
        s[..., 0] += 1.0
        return StepResult(s, np.asarray(commanded, dtype=float), np.asarray(disturbance, dtype=float), None)


def test_diverged_episodes_are_kept_and_flagged(tmp_path):
    ev = evaluate(Zero(), Runaway(), TaskConfig(), NullSource(2), 4, seed=0)
    assert len(ev.episodes) == 4
    assert all(e.diverged and e.length < 200 for e in ev.episodes)
    write_evaluation(ev, tmp_path)
    rows = read_rows(tmp_path / "episodes.csv")
    assert [r["diverged"] for r in rows] == ["1"] * 4


# -- config files -------------------------------------------------------------------

def test_config_values_and_out_token():
    cfg = RunConfig("[a]\nx = 3\ny = 0.5, 1\nz = yes\np = ${out}/ckpt\n", "c.cfg", out="/tmp/o")
    assert cfg.value("a", "x", 1) == 3
    assert cfg.value("a", "y", (1.0,)) == (0.5, 1.0)
    assert cfg.value("a", "z", False) is True
    assert cfg.raw("a", "p") == "/tmp/o/ckpt"
    assert convert("none", None) is None and convert("0.9", None) == 0.9


def test_config_errors_name_file_and_line():
    with pytest.raises(ConfigError, match=r"bad\.cfg:3"):
        RunConfig("[a]\nx = 1\nthis line has no equals\n", "bad.cfg")
    cfg = RunConfig("[a]\nx = 1\n\n[b]\ntypo = 2\n", "t.cfg")
    cfg.value("a", "x", 0)
    cfg.check_unused(["a"])
    with pytest.raises(ConfigError, match=r"t\.cfg:5: unknown key 'typo'"):
        cfg.check_unused()
    with pytest.raises(ConfigError, match=r"t\.cfg:2"):
        RunConfig("[a]\nx = one\n", "t.cfg").value("a", "x", 0)


# -- CLI ----------------------------------------------------------------------------

def test_missing_config_names_path(tmp_path, capsys):
    assert main(["evaluate", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert "missing.cfg" in err and len(err.splitlines()) == 1


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train-gcp", "--bogus"]) == 2
    assert main(["no-such-command"]) == 2


def test_parse_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text("[gcp]\ntotal_steps = 100\n???\n")
    assert main(["train-gcp", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert re.search(r"broken\.cfg:3", capsys.readouterr().err)


def test_unknown_key_fails_before_any_output(tmp_path, capsys):
    cfg = tmp_path / "typo.cfg"
    cfg.write_text(TINY_GCP + "totl_steps = 5\n")
    assert main(["train-gcp", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "typo.cfg:7" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_seed_is_usage_error():
    assert main(["train-gcp", "--seed", "-1"]) == 2
    assert main(["train-gcp", "--seed", str(2 ** 64)]) == 2


def test_train_gcp_is_byte_reproducible(tmp_path):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(TINY_GCP)
    for out in ("o1", "o2"):
        assert main(["train-gcp", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / out)]) == 0
    a, b = tmp_path / "o1" / "train-gcp", tmp_path / "o2" / "train-gcp"
    for rel in ("checkpoints/gcp.wvc", "checkpoints/gcp.json", "csv/gcp_curve.csv", "manifest.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_rollout_uses_trajectory_log_schema(tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("[rollout]\nsteps = 30\nepisodes = 2\n")
    assert main(["rollout", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for i in range(2):
        with open(tmp_path / "rollout" / "csv" / f"rollout_{i}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == LOG_FIELDS
        assert len(rows) == 1 + 31  # header, then 30 transitions need 31 states


def test_manifest_replay_reproduces_pipeline(tmp_path):
    """train-gcp -> train-odi -> transfer -> evaluate, then replay from manifests."""
    cfg = tmp_path / "pipe.cfg"
    cfg.write_text(TINY_GCP + """\
[inputs]
gcp = ${out}/train-gcp/checkpoints/gcp.wvc
odi = ${out}/train-odi/checkpoints/odi.wvc
adapter = ${out}/transfer/checkpoints/adapter.wvc
[odi]
iterations = 2
n_params = 2
episodes_per_param = 1
eval_episodes = 2
hidden = 6
max_epochs = 1
[transfer]
total_steps = 4800
n_workers = 4
hidden = 6, 6
comp_features = 6
[evaluate]
controller = adapted
episodes = 3
""")
    first, second = tmp_path / "first", tmp_path / "second"
    commands = ("train-gcp", "train-odi", "transfer", "evaluate")
    for c in commands:
        assert main([c, "--config", str(cfg), "--seed", "3", "--out", str(first)]) == 0, c
    for c in commands:
        assert main([c, "--manifest", str(first / c / "manifest.json"), "--out", str(second)]) == 0, c
    for c in commands:
        for f in sorted((first / c / "csv").glob("*.csv")):
            assert f.read_bytes() == (second / c / "csv" / f.name).read_bytes(), f
    rows = read_rows(first / "evaluate" / "csv" / "episodes.csv")
    assert all(r["cumulative_mismatch"] != "" for r in rows)


def test_manifest_command_must_match(tmp_path, capsys):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("[rollout]\nsteps = 5\n")
    assert main(["rollout", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert main(["evaluate", "--manifest", str(tmp_path / "rollout"), "--out", str(tmp_path)]) == 1
    assert "rollout" in capsys.readouterr().err


# -- reports ------------------------------------------------------------------------

def make_run(root, name, crs, steps=None):
    csv_dir = Path(root) / name / "csv"
    csv_dir.mkdir(parents=True)
    with open(csv_dir / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "converged_region"])
        w.writerows(enumerate(crs))
    if steps is not None:
        with open(csv_dir / "gcp_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["steps", "mean_return"])
            w.writerows(steps)
    return Path(root) / name


def test_empty_metrics_leave_no_svg(tmp_path):
    good = make_run(tmp_path, "good", [0.1, 0.2])
    empty = make_run(tmp_path, "empty", [])
    with pytest.raises(ReportError, match="episodes.csv"):
        emit_report([good, empty], tmp_path / "fig")
    assert not list((tmp_path).rglob("*.svg"))


def test_missing_csv_named(tmp_path):
    (tmp_path / "bare").mkdir()
    with pytest.raises(ReportError, match=r"bare/csv/episodes\.csv"):
        emit_report([tmp_path / "bare"], tmp_path / "fig")


def test_two_run_overlay_and_exact_limits(tmp_path):
    a = make_run(tmp_path, "a", [0.5, 0.25, 0.75], steps=[(100, -50.0), (200, -20.0), (300, -5.0)])
    b = make_run(tmp_path, "b", [0.125, 1.5], steps=[(100, -80.0), (250, -10.0)])
    figs = emit_report([a, b], tmp_path / "fig", labels=["state-only", "time-window"])
    curve = figs["gcp_learning_curve"]
    assert curve["series"] == ["state-only", "time-window"]
    assert curve["xlim"] == (100.0, 300.0)
    assert curve["ylim"] == (-80.0, -5.0)
    assert figs["distance_distribution"]["ylim"] == (0.125, 1.5)
    svg = (tmp_path / "fig" / "gcp_learning_curve.svg").read_text()
    assert "state-only" in svg and "time-window" in svg
    assert "<image" not in svg


def test_report_svgs_are_reproducible(tmp_path):
    a = make_run(tmp_path, "a", [0.5, 0.25], steps=[(1, 2.0), (2, 3.0)])
    emit_report([a], tmp_path / "f1")
    emit_report([a], tmp_path / "f2")
    for f in (tmp_path / "f1").glob("*.svg"):
        assert f.read_bytes() == (tmp_path / "f2" / f.name).read_bytes()
