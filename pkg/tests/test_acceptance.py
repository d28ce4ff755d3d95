"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The training-based criteria share module-scoped fixtures, so a full run
trains every policy once.  Budgets are desk scale (k = 2 wave components,
200-step episodes, five seeds for the statistical claims).
"""
import math
import time

import numpy as np
import pytest

from wavecomp import disturbance as dist
from wavecomp import neural as nn
from wavecomp import sysid
from wavecomp import transfer as tr
from wavecomp.a2c import GCP, A2CConfig, GCPController, GCPLayout, train_gcp
from wavecomp.cli import main
from wavecomp.dynamics import (DEFAULT_BOUNDS, FirstPrincipleModel, make_default_variation, make_variated, saturate,
                               step_first_principle)
from wavecomp.env import NullSource, TargetTraceSource, TaskConfig, WaveSource
from wavecomp.harness import evaluate
from wavecomp.odi import ODI, GcpOdiConfig, GcpOdiController, OdiLayout, OdiTrainConfig, evaluate_gcp_odi, train_gcp_odi

SEEDS = (1, 2, 3, 4, 5)
BOUNDS = np.array(DEFAULT_BOUNDS)
TASK = TaskConfig()
MODEL = FirstPrincipleModel()
EVAL_EPISODES = 20

GCP_DESK = dict(k=2, total_steps=3_000_000, hidden=(64, 64), n_steps=16, reward_scale=0.1, entropy_coef=0.0,
                policy_lr=3e-4, value_lr=1e-3)
WINDOW = 5


def majority(flags, need=4):
    return sum(bool(f) for f in flags) >= need


# -- 1: gradients ---------------------------------------------------------------------

def _mlp_error(shape, seed):
    spec = nn.FeedforwardSpec(shape[0], shape[1:-1], shape[-1])
    p = nn.init_feedforward(spec, np.random.default_rng(seed), gain=1.5)
    rng = np.random.default_rng(seed + 100)
    x, w = rng.normal(size=(4, shape[0])), rng.normal(size=(4, shape[-1]))
    _, cache = nn.forward(p, spec, x)
    grads, _ = nn.backward(p, spec, cache, w)
    num = nn.numerical_gradient(lambda: float(np.sum(w * nn.forward(p, spec, x)[0])), p)
    return nn.max_relative_error(grads, num)


def _gru_error(dims, seed):
    spec = nn.RecurrentCellSpec(*dims)
    p = nn.init_recurrent(spec, np.random.default_rng(seed), output_scale=1.0)
    rng = np.random.default_rng(seed + 7)
    xs = rng.normal(size=(4, 2, spec.input_dim))
    h0 = rng.normal(scale=0.3, size=(2, spec.hidden_dim))
    w = rng.normal(size=(4, 2, spec.output_dim))
    _, _, cache = nn.recurrent_sequence(p, spec, xs, h0)
    grads, _, _ = nn.recurrent_sequence_backward(p, spec, cache, w)
    num = nn.numerical_gradient(lambda: float(np.sum(w * nn.recurrent_sequence(p, spec, xs, h0)[0])), p)
    return nn.max_relative_error(grads, num)


def _fusion_error(seed):
    rng = np.random.default_rng(seed)
    gcp = GCP.create(GCPLayout("time-window", window=3, k=2), (16, 12), rng)
    pol = tr.FusionPolicy.create(gcp, gcp.layout.input_dim + 3, (8,), 5, rng, -1.0)
    for name in pol.params.keys():
        pol.params[name] = pol.params[name] + rng.normal(scale=0.3, size=pol.params[name].shape)
    x = rng.normal(size=(6, 12 + gcp.layout.input_dim + 3))
    pre, adv = rng.normal(size=(6, 3)), rng.normal(size=6)
    _, _, grads = pol.loss_and_grads(x, pre, adv, 0.01, 0.001)
    num = nn.numerical_gradient(lambda: pol.loss_and_grads(x, pre, adv, 0.01, 0.001)[0], pol.params)
    return nn.max_relative_error(grads, num)


def test_criterion_01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    errors = {
        "feedforward": max(_mlp_error(shape, s) for shape in [(6, 16, 16, 3), (21, 16, 16, 1), (9, 12, 12, 6)]
                           for s in range(10)),
        "recurrent": max(_gru_error((9, 8, 24), s) for s in range(10)),
        "fusion head": max(_fusion_error(s) for s in range(10)),
    }
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f} s"
    verdict(1, "analytic vs finite-difference gradients", worst < 1e-4 and elapsed < 60, detail)


# -- 2: waveform oracle ---------------------------------------------------------------

def test_criterion_02_waveform_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10_000):
        k = int(rng.integers(1, 6))
        p = dist.sample_params(rng, BOUNDS, k)
        t0 = int(rng.integers(0, 2000))
        got = dist.synthesize(p, t0, 1, 0.05).samples[0]
        t = t0 * 0.05
        want = [sum(p.amplitude[a, j] * math.sin(p.omega[a, j] * t + p.phase[a, j]) for j in range(k))
                for a in range(3)]
        worst = max(worst, float(np.max(np.abs(got - want))))
    verdict(2, "synthesize vs per-step sinusoid sums", worst <= 1e-12, f"max abs error {worst:.2e} over 10000 draws")


# -- 3: dynamics oracle ---------------------------------------------------------------

def test_criterion_03_dynamics_oracle(verdict):
    rest, zero = np.zeros(6), np.zeros(3)
    default = make_default_variation()
    checks = {}
    checks["fixed point"] = np.array_equal(step_first_principle(rest, zero, zero, default).next_state, rest)
    drift = step_first_principle(np.array([0, 0, 0, 1.0, 0, 0]), zero, zero, default).next_state
    checks["drift"] = drift[0] == 0.05 and drift[3] == 1.0
    accel = step_first_principle(rest, [112.0, 0, 0], zero, default).next_state
    checks["F/m"] = accel[3] == 112.0 / 60.0 * 0.05 and accel[0] == accel[3] * 0.05
    model = FirstPrincipleModel(make_variated("ctrl_latency"))
    state, queue, applied = rest, None, []
    for t in range(6):
        res = model.step(state, [50.0, -20.0, 10.0] if t == 1 else zero, zero, 0.05, queue)
        state, queue = res.next_state, res.queue
        applied.append(bool(np.any(res.applied_control)))
    checks["latency shift"] = applied == [False, False, False, True, False, False]
    rng = np.random.default_rng(3)
    u = rng.uniform(-1e4, 1e4, size=(1000, 3))
    once = saturate(u, BOUNDS)
    checks["saturation"] = np.array_equal(saturate(once, BOUNDS), once) and np.all(np.abs(once) <= BOUNDS)
    failed = [k for k, ok in checks.items() if not ok]
    verdict(3, "dynamics examples hold exactly", not failed, "all five hold" if not failed else f"failed: {failed}")


# -- 4: undisturbed regulation --------------------------------------------------------

def test_criterion_04_undisturbed_regulation(verdict):
    t0 = time.perf_counter()
    # the whole 10 min allowance: the final-iterate offset still drifts between updates at 3M
    cfg = A2CConfig(variant="state-only", disturbance=False, seed=4, **{**GCP_DESK, "total_steps": 6_000_000})
    gcp = train_gcp(cfg, TASK, MODEL).gcp
    minutes = (time.perf_counter() - t0) / 60
    ev = evaluate(GCPController(gcp), MODEL, TASK, NullSource(2), EVAL_EPISODES, seed=40_004)
    med = float(np.median([e.final_distance for e in ev.episodes]))
    verdict(4, "state-only A2C regulates without disturbance", med < 0.1 and minutes <= 10,
            f"median final distance {med:.4f} m after {minutes:.1f} min")


# -- 5 and 6: disturbance information and its online estimate --------------------------

ODI_DESK = GcpOdiConfig(iterations=5, n_params=64, episodes_per_param=4, eval_episodes=EVAL_EPISODES,
                        train=OdiTrainConfig(hidden=64, max_epochs=20))


def _median_cr(controller, seed, lookahead=0):
    ev = evaluate(controller, MODEL, TASK, WaveSource(k=2), EVAL_EPISODES, seed=50_000 + seed, lookahead=lookahead)
    return float(np.median(ev.converged_regions))


@pytest.fixture(scope="module")
def desk_gcps():
    """Per seed: (state-only baseline, time-window GCP), trained with identical budgets."""
    out = {}
    for seed in SEEDS:
        so = train_gcp(A2CConfig(variant="state-only", seed=seed, **GCP_DESK), TASK).gcp
        tw = train_gcp(A2CConfig(variant="time-window", window=WINDOW, seed=seed, **GCP_DESK), TASK).gcp
        out[seed] = (so, tw)
    return out


@pytest.fixture(scope="module")
def desk_odis(desk_gcps):
    return {seed: train_gcp_odi(desk_gcps[seed][1], MODEL, ODI_DESK) for seed in SEEDS}


def test_criterion_05_true_information_helps(verdict, desk_gcps):
    ratios = []
    for seed in SEEDS:
        so, tw = desk_gcps[seed]
        ratios.append(_median_cr(GCPController(tw), seed, WINDOW) / _median_cr(GCPController(so), seed))
    verdict(5, "GCP with true disturbance halves the state-only converged region", majority(r <= 0.5 for r in ratios),
            "ratio per seed " + ", ".join(f"{r:.3f}" for r in ratios) + " (need <= 0.5 in 4/5)")


def test_criterion_06_odi_iterations(verdict, desk_gcps, desk_odis):
    flags, parts = [], []
    for seed in SEEDS:
        gcp = desk_gcps[seed][1]
        crs = [row["median_cr"] for row in desk_odis[seed].rows]
        true_mu = float(np.median(evaluate_gcp_odi(gcp, None, MODEL, TASK, ODI_DESK.eval_episodes,
                                                   ODI_DESK.eval_seed, oracle=True)))
        later = crs[2:]
        flags.append(all(c < crs[0] for c in later) and crs[-1] <= 2 * true_mu)
        parts.append(f"seed {seed}: iter1 {crs[0]:.3f}, iter>=3 max {max(later):.3f}, final {crs[-1]:.3f}, "
                     f"true {true_mu:.3f}")
    verdict(6, "ODI iterations improve and approach true information", majority(flags), "; ".join(parts))


# -- 7: mismatch reward ---------------------------------------------------------------

def test_criterion_07_mismatch_reward(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        task_r, w = rng.normal(scale=5), rng.uniform(0, 3)
        e = rng.normal(size=6)
        hand = task_r - w * math.sqrt(sum(v * v for v in e))
        worst = max(worst, abs(tr.mismatch_reward(task_r, e, w) - hand))
    gcp = GCP.create(GCPLayout("time-window", window=3, k=2), (16, 12), np.random.default_rng(0))
    cfg = tr.TransferConfig("tmc_control", n_workers=4, n_steps=8, total_steps=4 * 8 * 100, hidden=(8,))
    res = tr.train_transfer(cfg, gcp, None, MODEL, WaveSource(k=2), MODEL, force_zero_compensation=True)
    zero = all(row["cum_mismatch"] == 0.0 for row in res.curve)
    verdict(7, "mismatch reward arithmetic and identity setting", worst <= 1e-12 and zero and len(res.curve) > 0,
            f"max error {worst:.1e} on 1000 records; {len(res.curve)} identity episodes, all mismatch exactly 0: "
            f"{zero}")


# -- 8: jumpstart ---------------------------------------------------------------------

def test_criterion_08_identity_jumpstart(verdict):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        gcp = GCP.create(GCPLayout("time-window", window=WINDOW, k=2), (64, 64), rng)
        odi = ODI.create(OdiLayout(k=2), 16, rng)
        ad = tr.Adapter.create(tr.TransferConfig("tmc_feature"), gcp, odi, rng)
        view = ad.source_view(rng.normal(size=(32, 6)), rng.normal(scale=30, size=(32, 3)),
                              rng.integers(0, 200, size=32), odi.initial_hidden(32))
        worst = max(worst, float(np.max(np.abs(ad.deterministic(view) - view["u_hat"]))))
    verdict(8, "TMC-feature equals the frozen policy at step zero", worst <= 1e-10,
            f"max |difference| {worst:.1e} N over 5 initializations")


# -- 11: empirical dynamics pipeline ----------------------------------------------------

GROUND_TRUTH = make_variated("empirical_ground_truth")
SYSID_STEPS = 20_000
SYSID_TRAIN = sysid.DynamicsTrainConfig(hidden=(128, 128), max_epochs=40, seed=11)


@pytest.fixture(scope="module")
def empirical():
    log_ = sysid.collect_random_trajectories(GROUND_TRUTH, SYSID_STEPS, np.random.default_rng(11))
    ds = sysid.build_dataset(log_)
    model, _ = sysid.train_dynamics(ds, SYSID_TRAIN)
    return log_, ds, model


def test_criterion_11_empirical_model(verdict, empirical):
    log_, ds, model = empirical
    val, zoh = sysid.validation_mse(model, ds), sysid.zero_order_hold_mse(ds)
    back = ds.input_stats.denormalize(ds.input_stats.normalize(ds.inputs))
    round_trip = float(np.max(np.abs(back - ds.inputs)))
    # leakage check: redo the pairing and the split from the raw log
    x, y = sysid.transition_pairs(log_)
    n_train = int(round(0.9 * len(x)))
    disjoint = not {r.tobytes() for r in x[:n_train]} & {r.tobytes() for r in x[n_train:]}
    stats_ok = (np.array_equal(ds.input_stats.mean, x[:n_train].mean(0))
                and np.array_equal(ds.label_stats.std, y[:n_train].std(0))
                and np.array_equal(ds.val_idx, np.arange(n_train, len(x))))
    ok = val < zoh and round_trip <= 1e-12 and disjoint and stats_ok
    verdict(11, "empirical model fit, normalization and split", ok,
            f"validation MSE {val:.4g} vs zero-order hold {zoh:.4g}; round trip {round_trip:.1e}; "
            f"split disjoint {disjoint}, train-only statistics {stats_ok}")


# -- 9 and 10: transfer to the empirical target -----------------------------------------

TRANSFER_DESK = dict(total_steps=1_500_000)
TRANSFER_ALGORITHMS = ("tmc_feature", "tmc_control", "cac")


def _target_cr(controller, target, seed):
    ev = evaluate(controller, target, TASK, TargetTraceSource(), EVAL_EPISODES, seed=60_000 + seed, lookahead=WINDOW)
    return float(np.median(ev.converged_regions))


@pytest.fixture(scope="module")
def desk_transfers(desk_gcps, desk_odis, empirical):
    target = sysid.wrap_empirical(empirical[2], GROUND_TRUTH)
    out = {}
    for seed in SEEDS:
        gcp, odi = desk_gcps[seed][1], desk_odis[seed].odi
        runs = {alg: tr.train_transfer(tr.TransferConfig(alg, seed=seed, **TRANSFER_DESK), gcp, odi, target,
                                       TargetTraceSource())
                for alg in TRANSFER_ALGORITHMS}
        out[seed] = (target, gcp, odi, runs)
    return out


def test_criterion_09_adapted_beats_unadapted(verdict, desk_transfers):
    flags, parts = [], []
    for seed in SEEDS:
        target, gcp, odi, runs = desk_transfers[seed]
        base = _target_cr(GcpOdiController(gcp, odi), target, seed)
        tmc = _target_cr(tr.TransferController(runs["tmc_feature"].adapter), target, seed)
        cac = _target_cr(tr.TransferController(runs["cac"].adapter), target, seed)
        flags.append(tmc <= 0.7 * base and tmc < cac)
        parts.append(f"seed {seed}: unadapted {base:.3f}, TMC-feature {tmc:.3f}, CAC {cac:.3f}")
    verdict(9, "TMC-feature improves on the unadapted policy and on CAC", majority(flags), "; ".join(parts))


def test_criterion_10_mismatch_decreases(verdict, desk_transfers):
    ok, parts = True, []
    for seed in SEEDS:
        runs = desk_transfers[seed][3]
        for alg in ("tmc_feature", "tmc_control"):
            mis = np.array([row["cum_mismatch"] for row in runs[alg].curve])
            n = max(1, len(mis) // 10)
            first, last = mis[:n].mean(), mis[-n:].mean()
            ok &= bool(last < first)
            parts.append(f"{alg} seed {seed}: {first:.2f} -> {last:.2f}")
    verdict(10, "TMC cumulative mismatch falls during transfer", ok, "; ".join(parts))


# -- 12: reproducibility ------------------------------------------------------------------

PIPELINE = """\
[gcp]
total_steps = 4096
hidden = 8, 8
window = 5
[disturbance]
k = 2
[inputs]
gcp = ${out}/train-gcp/checkpoints/gcp.wvc
odi = ${out}/train-odi/checkpoints/odi.wvc
adapter = ${out}/transfer/checkpoints/adapter.wvc
[model]
source = empirical
checkpoint = ${out}/train-dynamics/checkpoints/dynamics.wvc
[dynamics]
steps = 1500
hidden = 16, 16
max_epochs = 3
[odi]
iterations = 2
n_params = 3
episodes_per_param = 1
eval_episodes = 3
hidden = 8
max_epochs = 2
[transfer]
total_steps = 6400
n_workers = 4
hidden = 8, 8
comp_features = 8
[evaluate]
controller = adapted
episodes = 4
"""


def test_criterion_12_manifest_replay(verdict, tmp_path):
    cfg = tmp_path / "pipeline.cfg"
    cfg.write_text(PIPELINE)
    # train-dynamics and train-odi read [model]; give them the first-principle one
    plain = tmp_path / "plain.cfg"
    plain.write_text(PIPELINE.replace("source = empirical\ncheckpoint = ${out}/train-dynamics/checkpoints/dynamics.wvc\n",
                                      ""))
    stages = [("train-gcp", plain), ("train-dynamics", plain), ("train-odi", plain), ("transfer", cfg),
              ("evaluate", cfg)]
    first, second = tmp_path / "first", tmp_path / "second"
    codes = [main([c, "--config", str(f), "--seed", "12", "--out", str(first)]) for c, f in stages]
    codes += [main([c, "--manifest", str(first / c / "manifest.json"), "--out", str(second)]) for c, _ in stages]
    compared, differing = 0, []
    for c, _ in stages:
        for f in sorted((first / c / "csv").glob("*.csv")):
            compared += 1
            if f.read_bytes() != (second / c / "csv" / f.name).read_bytes():
                differing.append(f"{c}/{f.name}")
    ok = all(code == 0 for code in codes) and compared >= 8 and not differing
    verdict(12, "manifest replay gives byte-identical CSVs", ok,
            f"exit codes {codes}; {compared} CSVs compared, differing: {differing or 'none'}")
