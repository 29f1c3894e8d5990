"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import logging
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from apc.checks import guard_trials, input_gradient_trial, score_gradient_trial
from apc.cli import main
from apc.correct import CorrectionConfig
from apc.data import reverse_dataset
from apc.evaluate import ndcg_batch, run_experiment
from apc.manifest import comparable
from apc.synth import (
    MarkovWorld,
    NoisyOracleScorer,
    bigram_frequencies,
    clustered_world,
    gen_markov_dataset,
    reversed_transition,
)
from apc.train import TrainConfig, train_model

import ml100k
from conftest import record

pytestmark = pytest.mark.slow

K, USERS, T = 100, 2000, 20
ETAS = [0.5, 1.0, 2.0, 3.0]
ALPHAS = [0.01, 0.03, 0.1, 0.3]
N_PRIMES = [10, 20, 50, 100, 200]
SIGMAS = np.round(np.arange(0.05, 1.001, 0.025), 3)
TEST_SEEDS = range(1, 21)
SHAPE_SEEDS = range(101, 106)


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    score_err = [score_gradient_trial(rng) for _ in range(150)]
    input_err = [input_gradient_trial(rng) for _ in range(150)]
    dt = time.perf_counter() - t0
    worst = max(max(score_err), max(input_err))
    ok = worst <= 1e-5 and dt < 60
    record(1, "gradient oracle agreement", ok,
           f"150+150 trials, max rel err score {max(score_err):.2e} / input {max(input_err):.2e} "
           f"(tol 1e-5), {dt:.1f}s")
    assert ok


def test_criterion_2_guard_invariants():
    t0 = time.perf_counter()
    report = guard_trials(3000, seed=7)
    dt = time.perf_counter() - t0
    ok = not report.failures and report.trials >= 1000 and report.rejected > 0 and dt < 120
    record(2, "guard and containment invariants", ok,
           f"{report.trials} corrections, {report.rejected} rejected, "
           f"{len(report.failures)} violation(s), {dt:.1f}s")
    assert ok, report.failures[:3]


# -- synthetic world shared by criteria 3 and 4 ---------------------------------------


@pytest.fixture(scope="module")
def world_setup():
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    world = clustered_world(K, clusters=4, seed=0)
    ds = gen_markov_dataset(world, USERS, T, seed=1)
    cfg = TrainConfig(lr=2e-3, dropout=0.2, epochs=200, patience=5, dim=32, exclude_history=False, seed=0)
    f_A = train_model(reverse_dataset(ds), cfg, "attention-mini", role="abductive")
    logging.getLogger("apc.correct").setLevel(logging.ERROR)

    valid, test = ds.valid_inputs(), ds.test_inputs()
    noiseless = _ori_ndcg(NoisyOracleScorer(world, 0.0), valid)
    ori_by_sigma = {s: _ori_ndcg(NoisyOracleScorer(world, float(s), 0), valid) for s in SIGMAS}
    sigma = float(min(SIGMAS, key=lambda s: abs(ori_by_sigma[s] - 0.5 * noiseless)))
    base = CorrectionConfig(negatives="full", batch_size=500)

    grid = {}
    f_R0 = NoisyOracleScorer(world, sigma, 0)
    for eta in ETAS:
        for alpha in ALPHAS:
            cfg_c = CorrectionConfig(**{**base.to_dict(), "eta": eta, "alpha": alpha})
            ori, cor = run_experiment(f_R0, f_A, valid, cfg_c, exclude_interacted=False)
            grid[(eta, alpha)] = cor.ri_ndcg
    eta, alpha = max(grid, key=grid.get)
    chosen = CorrectionConfig(**{**base.to_dict(), "eta": eta, "alpha": alpha})
    return {"world": world, "ds": ds, "f_A": f_A, "valid": valid, "test": test, "sigma": sigma,
            "noiseless": noiseless, "ori_at_sigma": ori_by_sigma[sigma], "grid": grid,
            "cfg": chosen, "setup_s": time.perf_counter() - t0}


def _ori_ndcg(f_R, split):
    scores = f_R.score_all(split.items)
    return float(ndcg_batch(scores, split.test, None, 10).mean())


def test_criterion_3_synthetic_recovery(world_setup):
    s = world_setup
    t0 = time.perf_counter()
    deltas, ris = [], []
    for seed in TEST_SEEDS:
        ori, cor = run_experiment(NoisyOracleScorer(s["world"], s["sigma"], seed), s["f_A"], s["test"],
                                  s["cfg"], exclude_interacted=False)
        deltas.append(cor.ndcg - ori.ndcg)
        ris.append(cor.ri_ndcg)
    dt = s["setup_s"] + time.perf_counter() - t0
    wins = sum(d > 0 for d in deltas)
    p = binomtest(wins, len(deltas), 0.5, alternative="greater").pvalue
    ok = wins / len(deltas) >= 0.7 and np.mean(deltas) > 0 and dt < 15 * 60
    record(3, "synthetic end-to-end recovery", ok,
           f"f_A val NDCG@10 {s['f_A'].fit_log['best_ndcg']:.3f} (epoch {s['f_A'].fit_log['best_epoch']}); "
           f"sigma {s['sigma']} gives ori {s['ori_at_sigma']:.3f} vs noiseless {s['noiseless']:.3f}; "
           f"swept eta={s['cfg'].eta}, alpha={s['cfg'].alpha} on validation; "
           f"{wins}/20 seeds improve, mean dNDCG {np.mean(deltas):+.4f} (mean RI {np.mean(ris):+.2f}%), "
           f"sign-test p={p:.2g}, {dt:.0f}s")
    assert ok


def _shape(curve):
    peak = int(np.argmax(curve))
    d = np.diff(curve)
    inversions = int((d[:peak] < 0).sum() + (d[peak:] > 0).sum())
    return peak, inversions


def test_criterion_4_shortlist_size_shape(world_setup):
    s = world_setup
    t0 = time.perf_counter()
    rows = []
    for seed in SHAPE_SEEDS:
        f_R = NoisyOracleScorer(s["world"], s["sigma"], seed)
        row = []
        for n_prime in N_PRIMES:
            cfg = CorrectionConfig(**{**s["cfg"].to_dict(), "n_prime": n_prime})
            _, cor = run_experiment(f_R, s["f_A"], s["valid"], cfg, exclude_interacted=False)
            row.append(cor.ri_ndcg)
        rows.append(row)
    curve = np.mean(rows, axis=0)
    dt = time.perf_counter() - t0
    peak, inversions = _shape(curve)
    ok = 0 < peak < len(curve) - 1 and curve[-1] < curve.max() and inversions <= 1 and dt < 20 * 60
    pretty = ", ".join(f"{n}: {v:+.2f}" for n, v in zip(N_PRIMES, curve))
    record(4, "RI vs shortlist size rises then falls", ok,
           f"mean RI% over {len(rows)} noise seeds (validation) [{pretty}], peak at N'={N_PRIMES[peak]}, "
           f"{inversions} inversion(s); N'=200 exceeds K={K} and uses all {K} items; {dt:.0f}s")
    assert ok


def test_criterion_5_real_data_smoke(tmp_path):
    t0 = time.perf_counter()
    src = ml100k.locate()
    label = "ML-100k"
    if src is None:
        src, label = ml100k.synthetic_fallback(tmp_path / "fallback.inter"), "synthetic MovieLens-shaped log"
    data, models, out = tmp_path / "data", tmp_path / "models", tmp_path / "eval"
    assert main(["prepare", "--input", str(src), "--format", "tsv", "--k-core", "5", "--max-len", "50",
                 "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(models), "--backbone", "attention-mini"]) == 0
    assert main(["evaluate", "--data", str(data), "--models", str(models), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    ori, cor = rep["ori"]["ndcg"], rep["corrected"]["ndcg"]
    stats = json.loads((data / "manifest.json").read_text())["stats"]
    dt = time.perf_counter() - t0
    ok = cor >= ori - 0.002 and dt < 30 * 60
    record(5, "desk-scale real data smoke test", ok,
           f"{label}: {stats['users']} users, {stats['items']} items; NDCG@10 ori {ori:.4f} -> "
           f"corrected {cor:.4f} (bound ori-0.002); {sum(r['corrected']['rejected'] for r in rep['per_user'])} "
           f"of {rep['ori']['users']} corrections rejected; {dt:.0f}s")
    assert ok


def test_criterion_6_reversal_math():
    t0 = time.perf_counter()
    world = MarkovWorld(np.array([[0.9, 0.1], [0.5, 0.5]]))
    exact = reversed_transition(world)
    worst = []
    for seed in range(5):
        # 1000 users x 101 training items = 100,000 transitions per seed
        rev = reverse_dataset(gen_markov_dataset(world, 1000, 103, seed=seed))
        assert int(((rev.items[:, :-1] > 0) & (rev.items[:, 1:] > 0)).sum()) == 100_000
        emp = bigram_frequencies(rev.items - 1, world.K)
        worst.append(float((0.5 * np.abs(emp - exact).sum(axis=1)).max()))
    dt = time.perf_counter() - t0
    ok = max(worst) <= 1e-2 and dt < 60
    record(6, "Markov reversal math", ok,
           f"max per-row TV over 5 seeds x 1e5 transitions: {max(worst):.4f} (tol 1e-2), {dt:.1f}s")
    assert ok


def test_criterion_7_determinism(tmp_path):
    data, models = tmp_path / "data", tmp_path / "models"
    assert main(["synth", "--K", "40", "--users", "300", "--T", "12", "--seed", "5", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(models), "--epochs", "3", "--dim", "16"]) == 0
    outs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        # separate processes, default in-batch negatives
        cmd = [sys.executable, "-m", "apc.cli", "evaluate", "--data", str(data), "--models", str(models),
               "--out", str(out), "--n-prime", "20", "--alpha", "0.3", "--eta", "2"]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    m1, m2 = (comparable(json.loads((o / "manifest.json").read_text())) for o in outs)
    a, b = ((o / "report.csv").read_bytes() for o in outs)
    ok = m1 == m2 and a == b
    record(7, "determinism of evaluate", ok,
           f"manifests equal (minus timestamp): {m1 == m2}; report.csv byte-identical: {a == b} "
           f"({len(a)} bytes)")
    assert ok
