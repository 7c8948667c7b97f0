"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line, which is
also collected into the terminal summary."""
import contextlib
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

import conftest
from graphode import autodiff as ad
from graphode.autodiff import Tensor, gradcheck
from graphode.config import ModelConfig, RunConfig, TrainConfig
from graphode.forecaster import forecast_loss
from graphode.graphs import binarize_adjacency, correlation_adjacency, global_jaccard
from graphode.metrics import compute_auroc, compute_f1_acc_recall
from graphode.model import Model
from graphode.neural_ode import (FieldOptions, VectorFieldParams, bind_field, decay_coefficient, gate, rk4_step,
                                 solve_trajectory, vector_field)
from graphode.data import corpus_specs
from graphode.pipeline import featurize_all, make_splits, run_experiment, with_train
from graphode.signals import generate_synthetic_record
from graphode.training import benchmark_inference
from oracles import brute_adjacency, brute_top_tau_edges, exhaustive_best_f1, pairwise_auroc
from test_autodiff import CASES
from toy import TINY_MODEL, toy_dataset, toy_train_config

SEEDS = (0, 1, 2)
EXPERIMENT = RunConfig(model=ModelConfig(gru_hidden=32, gru_layers=1, psi_channels=8, decoder_hidden=64),
                       train=TrainConfig(max_epochs=10))
ABLATIONS = {"full": {}, "no_gate": {"gate_enabled": False}, "no_stochastic": {"stochastic_enabled": False},
             "random_gate": {"random_gate": True}}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'} {detail}"
    conftest.CRITERIA_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1-5: oracle suites

def test_criterion_1_solver_correctness():
    t0 = time.perf_counter()
    single = float(rk4_step(lambda z: z, np.array(1.0), 0.0, 1.0))
    hand = 1 + (1 + 2 * 1.5 + 2 * 1.75 + 2.75) / 6
    hs, errors = [0.1, 0.05, 0.025], []
    for h in hs:
        z = np.array(1.0)
        for _ in range(round(1 / h)):
            z = rk4_step(lambda v: v, z, 0.0, h)
        errors.append(abs(float(z) - math.e))
    slope = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = single == hand and abs(single - 65 / 24) <= math.ulp(65 / 24) and abs(slope - 4.0) <= 0.2 and elapsed < 1
    report(1, ok, f"order={slope:.4f} single_step={single!r} (65/24={65 / 24!r}) time={elapsed:.3f}s")


GRAD_MODEL = ModelConfig(gru_hidden=3, gru_layers=1, latent_graph_dim=2, latent_stochastic_dim=2, psi_channels=2,
                         decay_hidden=2, residual_hidden=2, decoder_hidden=3)


@contextlib.contextmanager
def kink_margin(found: list):
    """Record the smallest distance to a relu or max kink seen while active."""
    relu, max_reduce = ad.relu, ad.max_reduce

    def relu_probe(x):
        found.append(float(np.min(np.abs(x.data))))
        return relu(x)

    def max_probe(x, axis):
        top2 = -np.sort(-x.data, axis=axis).take([0, 1], axis=axis)
        gap = np.abs(top2.take(0, axis=axis) - top2.take(1, axis=axis))
        live = top2.take(0, axis=axis) != 0.0  # ties of relu-clamped zeros carry no gradient
        found.append(float(np.min(gap[live], initial=np.inf)))
        return max_reduce(x, axis)

    ad.relu, ad.max_reduce = relu_probe, max_probe
    try:
        yield found
    finally:
        ad.relu, ad.max_reduce = relu, max_reduce


def _full_model_loss(seed):
    rng = np.random.default_rng(seed)
    data = toy_dataset(lambda i, lab, shape: rng.standard_normal(shape), 1, rng, t=6, d=2, obs_len=3, horizon=2)
    cfg = toy_train_config(obs_len=3, horizon=2, substeps_per_unit=2, sigma_noise=0.0, seed=seed)
    model = Model(2, 2, GRAD_MODEL, cfg)
    for t in model.trunk_parameters().values():
        if not t.data.any():
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape)  # exercise every bias term
    batch = data.batch(range(len(data)))

    def fn():
        out = model.forward(batch, 2, train=True, rng=np.random.default_rng(0))
        return forecast_loss(out.predicted, batch.future)

    return model.trunk_parameters(), fn


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    worst_prim, worst_full, n_seeds = 0.0, 0.0, 20
    for case in CASES:
        for seed in range(n_seeds):
            params, fn = case(np.random.default_rng(seed))
            worst_prim = max(worst_prim, max(gradcheck(fn, params, tolerance=1e-5).errors.values()))
    # central differences are only an oracle where the loss is differentiable:
    # draws with a relu input or max-pool pair within 1e-3 of a kink are replaced
    accepted, skipped, seed = 0, 0, 0
    while accepted < n_seeds:
        params, fn = _full_model_loss(seed)
        seed += 1
        with kink_margin([]) as margins:
            fn()
        if min(margins) < 1e-3:
            skipped += 1
            continue
        # the floor sits at central-difference roundoff (eps * |loss| / h ~ 1e-10): a beta feeding a later
        # train-mode batch norm has an exactly zero gradient and a numeric one made of roundoff alone
        check = gradcheck(fn, params, tolerance=1e-4, floor=1e-6)
        worst_full = max(worst_full, max(check.errors.values()))
        accepted += 1
    elapsed = time.perf_counter() - t0
    ok = worst_prim <= 1e-5 and worst_full <= 1e-4 and elapsed < 30
    report(2, ok, f"primitives={len(CASES)}x{n_seeds} max_rel={worst_prim:.2e} full_loss(K=2,substeps=2)x{accepted} "
                  f"max_rel={worst_full:.2e} kink_draws_replaced={skipped} time={elapsed:.1f}s")


def test_criterion_3_structural_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    gate_ok = decay_ok = origin_ok = True
    for _ in range(1000):
        dim, c = int(rng.integers(3, 9)), int(rng.integers(1, 3))
        p = VectorFieldParams.init(dim, c, rng, decay_hidden=4)
        for t in p.named().values():
            t.data[...] = rng.normal(0.0, 1.0, t.shape)
        z = Tensor(rng.standard_normal((2, dim)) * 3)
        g = gate(z, p).data
        gate_ok &= bool(np.all((g > 0) & (g < 1)))
        decay_ok &= bool(np.all(decay_coefficient(Tensor(z.data[:, :c].copy()), p).data > 0))
        p.b1.data[:] = 0.0
        p.b2.data[:] = 0.0
        origin = np.zeros((1, dim))
        traj = solve_trajectory(bind_field(p, Tensor(origin[:, :c])), Tensor(origin), 2, 2)
        origin_ok &= all(np.array_equal(s.data, origin) for s in traj.states)
    zp = VectorFieldParams.zeros(8, 2)
    z = rng.standard_normal((16, 8))
    f = vector_field(Tensor(z), Tensor(z[:, :2]), zp, FieldOptions(freeze_stochastic_block=False)).data
    zero_err = float(np.max(np.abs(f - (1.5 - math.log(2)) * z)))
    elapsed = time.perf_counter() - t0
    ok = gate_ok and decay_ok and origin_ok and zero_err <= 1e-9 and elapsed < 10
    report(3, ok, f"gate_open_interval={gate_ok} decay_positive={decay_ok} origin_bit_exact={origin_ok} "
                  f"zero_init_err={zero_err:.1e} draws=1000 time={elapsed:.2f}s")


def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    auroc_err = f1_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 120))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        auroc_err = max(auroc_err, abs(compute_auroc(s, y) - pairwise_auroc(s.tolist(), y.tolist())))
        f1_err = max(f1_err, abs(compute_f1_acc_recall(s, y)[0] - exhaustive_best_f1(s.tolist(), y.tolist())))
    truth = {(0, 1), (1, 2)}
    gji_cases = [(truth, {(0, 1), (0, 2)}, 1 / 3), (truth, truth, 1.0), (truth, set(), 0.0),
                 ({(0, 1), (0, 2), (1, 2), (2, 3)}, {(0, 2), (2, 3)}, 0.5)]
    gji_ok = all(global_jaccard(t, p) == v for t, p, v in gji_cases)
    elapsed = time.perf_counter() - t0
    ok = auroc_err <= 1e-12 and f1_err <= 1e-12 and gji_ok and elapsed < 5
    report(4, ok, f"auroc_max_err={auroc_err:.1e} f1_max_err={f1_err:.1e} (200 instances each) "
                  f"gji_hand_cases={gji_ok} time={elapsed:.2f}s")


def test_criterion_5_graph_construction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    max_err, n_cases = 0.0, 0
    for _ in range(60):
        n = int(rng.integers(4, 9))
        x = rng.standard_normal((n, int(rng.integers(3, 12))))
        for tau in range(1, n):
            g = correlation_adjacency(x, tau)
            max_err = max(max_err, float(np.max(np.abs(g.adjacency - brute_adjacency(x.tolist(), tau)))))
            n_cases += 1
    sweep = {}
    for tau in (2, 3, 7, 9, 11, 13):
        worst = 0
        for _ in range(10):
            g = correlation_adjacency(rng.standard_normal((19, 129)), tau)
            worst = max(worst, g.max_row_nnz_presym)
            assert binarize_adjacency(g.adjacency, tau) == brute_top_tau_edges(g.adjacency.tolist(), tau)
        sweep[tau] = worst
    elapsed = time.perf_counter() - t0
    ok = max_err <= 1e-12 and all(v <= tau for tau, v in sweep.items()) and elapsed < 5
    report(5, ok, f"oracle_cases={n_cases} max_err={max_err:.1e} presym_max_row_nnz={sweep} time={elapsed:.2f}s")


# ---------------------------------------------------------------- 6-8: synthetic experiment

@pytest.fixture(scope="session")
def corpus():
    named = [(f"rec{i:03d}", generate_synthetic_record(s)) for i, s in enumerate(corpus_specs(EXPERIMENT.corpus))]
    return named, make_splits(featurize_all(named, EXPERIMENT), EXPERIMENT)


@pytest.fixture(scope="session")
def experiments(corpus):
    """Lazily computed runs keyed by (variant, seed)."""
    _, splits = corpus
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            cfg = with_train(EXPERIMENT, seed=seed, **ABLATIONS[variant])
            res = run_experiment(cfg, splits)
            cache[variant, seed] = res
            print(f"[{variant} seed={seed}] auroc={res.test.auroc:.4f} f1={res.test.f1:.4f} gji={res.test.gji:.4f} "
                  f"persistence={res.persistence_gji:.4f} baseline={res.baseline_auroc:.4f}")
        return cache[variant, seed]

    return get


def band_power_oracle(named, low=20.0, high=32.0) -> float:
    """Per-epoch AUROC of raw 20-32 Hz power, straight from the samples."""
    scores, labels = [], []
    for _, rec in named:
        fs = rec.sample_rate
        length, step = int(12 * fs), int(fs)
        freqs = np.fft.rfftfreq(length, 1 / fs)
        band = (freqs >= low) & (freqs <= high)
        for start in range(0, rec.samples.shape[1] - length + 1, step):
            seg = rec.samples[:, start:start + length]
            spec = np.abs(np.fft.rfft(seg - seg.mean(axis=1, keepdims=True), axis=1)) ** 2
            scores.append(spec[:, band].sum() / spec.sum())
            labels.append(int(rec.label_track[start:start + length].mean() > 0.5))
    return float(roc_auc_score(labels, scores))


def test_criterion_6_end_to_end(corpus, experiments):
    named, _ = corpus
    oracle = band_power_oracle(named)
    runs = [experiments("full", s) for s in SEEDS]
    auroc = float(np.mean([r.test.auroc for r in runs]))
    f1 = float(np.mean([r.test.f1 for r in runs]))
    baseline = float(np.mean([r.baseline_auroc for r in runs]))
    margin = auroc - baseline
    ok = oracle >= 0.95 and auroc >= 0.90 and f1 >= 0.75 and margin >= 0.03
    report(6, ok, f"oracle_auroc={oracle:.4f} (>=0.95) auroc={auroc:.4f} (>=0.90) f1={f1:.4f} (>=0.75) "
                  f"band_power_lr={baseline:.4f} margin={margin:+.4f} (>=0.03)")


def test_criterion_7_ablation_directions(experiments):
    means = {v: float(np.mean([experiments(v, s).test.auroc for s in SEEDS])) for v in ABLATIONS}
    ok = all(means[v] <= means["full"] for v in ("no_gate", "no_stochastic", "random_gate"))
    report(7, ok, " ".join(f"{k}={v:.4f}" for k, v in means.items()) + " (ablations <= full)")


def test_criterion_8_gji_vs_persistence(experiments):
    runs = [experiments("full", s) for s in SEEDS]
    model = float(np.mean([r.test.gji for r in runs]))
    persistence = float(np.mean([r.persistence_gji for r in runs]))
    report(8, model - persistence >= 0.02,
           f"model_gji={model:.4f} persistence_gji={persistence:.4f} gain={model - persistence:+.4f} (>=0.02)")


# ---------------------------------------------------------------- 9-10: accounting and determinism

def test_criterion_9_nfe_accounting():
    rng = np.random.default_rng(9)
    data = toy_dataset(lambda i, lab, shape: rng.standard_normal(shape), 1, rng, t=10, obs_len=4, horizon=3)
    rows, ok = [], True
    for horizon, sub in ((1, 4), (1, 8), (3, 2), (3, 4)):
        cfg = toy_train_config(substeps_per_unit=sub, horizon=horizon)
        wall, nfe = benchmark_inference(Model(2, 3, TINY_MODEL, cfg), data.batch([0]), horizon, repeats=5)
        ok &= nfe == 4 * horizon * sub and 0 < wall < math.inf
        rows.append((horizon, sub, nfe, wall))
    ok &= rows[1][2] == 2 * rows[0][2] and rows[3][2] == 2 * rows[2][2]
    detail = " ".join(f"K={k},sub={s}:nfe={n},median_wall={w * 1e3:.2f}ms" for k, s, n, w in rows)
    report(9, ok, detail + " (median of 5 timed runs)")


SMALL = {"corpus": {"n_records": 8},
         "model": {"gru_hidden": 8, "gru_layers": 1, "psi_channels": 4, "decoder_hidden": 16,
                   "latent_graph_dim": 12, "latent_stochastic_dim": 4, "decay_hidden": 8},
         "train": {"max_epochs": 3, "batch_size": 32, "eval_batch_size": 32}}


def _pipeline(root, threads):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    run = root / f"run_t{threads}"
    for cmd in (["synth", "--config", cfg], ["featurize"], ["train"], ["finetune"], ["eval"]):
        args = [sys.executable, "-m", "graphode", *map(str, cmd), "--out", str(run), "--threads", str(threads)]
        proc = subprocess.run(args, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    return run


def test_criterion_10_determinism(tmp_path):
    runs = [_pipeline(tmp_path / "a", 1), _pipeline(tmp_path / "b", 1), _pipeline(tmp_path / "c", 4)]
    same = {}
    for name in ("metrics.json", "history.jsonl"):
        ref = (runs[0] / name).read_bytes()
        same[name] = all((r / name).read_bytes() == ref for r in runs[1:])
    n_hist = len((runs[0] / "history.jsonl").read_text().splitlines())
    report(10, all(same.values()),
           f"threads1_vs_threads1_vs_threads4 byte_identical={same} history_records={n_hist}")
