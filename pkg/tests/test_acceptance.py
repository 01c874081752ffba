"""Acceptance suite: one group of tests per criterion, summarized at the end of the run.

Each test carries ``@pytest.mark.criterion(number, title)``; the hook in conftest.py prints
one PASS/FAIL line per criterion after the session.
"""
import csv
import json
import math
import time

import numpy as np
import pytest

from gradcheck import check_gradients, weights_like
from ltc_oracle import random_params, solver_errors
from stat_oracles import oracle_anova, oracle_jb, oracle_levene, oracle_pearson
from rgcnode.cells import CfcLayer, LtcCell, WiredCfcCell, cfc_step
from rgcnode.cli import main
from rgcnode.config import TrainConfig, load_config
from rgcnode.data import SynthConfig, gather, generate_synthetic, window_starts
from rgcnode.evaluate import (MULTISCALE_HEADER, TABLE1_HEADER, TABLE6_HEADER, evaluate_model, multiscale_rows,
                              noise_eval, noise_monotone, report_from_predictions, summarize_runs)
from rgcnode.layers import Conv2d, Dense, Encoder, LayerNorm, LstmCell, conv2d, max_pool2d
from rgcnode.stats import anova_oneway, ci95, jarque_bera, levene, pearson, relative_diff, t_ppf
from rgcnode.tensor import Tensor
from rgcnode.train import loss_mae, loss_mse, loss_poisson, train
from rgcnode.wiring import WiringSpec, build_ncp

criterion = pytest.mark.criterion

TINY = ["--set", "N=5", "--set", "batch_size=32", "--set", "latent=4", "--set", "encoder_channels=[2,2,2,2]",
        "--set", "hidden=6", "--set", "unfold_steps=2", "--set", "max_epochs=1"]

# desk-scale end-to-end setting
E2E_DATA = SynthConfig(T=20_000, n=4, lag_range=(8, 12), sparsity_target=0.8, seed=1)
E2E_COMMON = dict(batch_size=256, max_epochs=6, patience=10, encoder_channels=[8, 16, 24, 32], seed=0)
E2E_LR = {"convnet": dict(encoder_lr=1e-4, predictor_lr=1e-4)}
E2E_KINDS = ("convnet", "lstm", "ltc", "cfc")
E2E_BUDGET_S = 30 * 60
# relative-error denominator floor
GRAD_FLOOR = 1e-6


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


def probe_count(tensors, probes=20):
    return sum(min(probes, t.data.size) for t in tensors)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "tiny.rgcd"
    assert main(["synth", "--t", "400", "--n", "2", "--seed", "3", "--output", str(path)]) == 0
    return path


# -- 1 --------------------------------------------------------------------------
def _grad_cases():
    rng = np.random.default_rng(11)
    cases = {}

    d = Dense(4, 3, activation="tanh", rng=rng)
    x = leaf(rng.standard_normal((5, 4)))
    r = weights_like((5, 3), rng)
    cases["dense"] = (lambda: (d(x) * r).sum(), [x, d.weight, d.bias])

    for method, k, stride, pad in (("shift", 3, 1, 1), ("fft", 7, 1, 0), ("direct", 3, 2, 1)):
        xc = leaf(rng.standard_normal((1, 2, 9, 9)))
        w, b = leaf(rng.standard_normal((3, 2, k, k))), leaf(rng.standard_normal(3))
        rc = weights_like(conv2d(xc, w, b, stride, pad, method).shape, rng)
        cases[f"conv2d[{method}]"] = (
            lambda xc=xc, w=w, b=b, rc=rc, s=stride, p=pad, m=method: (conv2d(xc, w, b, s, p, m) * rc).sum(),
            [xc, w, b])

    conv = Conv2d(2, 3, 3, padding=1, rng=rng)
    xc2 = leaf(rng.standard_normal((2, 2, 6, 6)))
    rc2 = weights_like((2, 3, 6, 6), rng)
    cases["conv2d layer"] = (lambda: (conv(xc2) * rc2).sum(), [xc2] + conv.parameters())

    ln = LayerNorm(3)
    ln.gamma.data = rng.uniform(0.5, 2, 3)
    ln.beta.data = rng.standard_normal(3)
    xn = leaf(rng.standard_normal((2, 3, 4, 4)))
    rn = weights_like((2, 3, 4, 4), rng)
    cases["layer norm"] = (lambda: (ln(xn) * rn).sum(), [xn, ln.gamma, ln.beta])

    xp = leaf(rng.standard_normal((2, 3, 6, 6)))
    rp = weights_like((2, 3, 3, 3), rng)
    cases["max pool"] = (lambda: (max_pool2d(xp, 2) * rp).sum(), [xp])

    enc = Encoder(3, 4, channels=(2, 3, 2, 2), image_size=16, rng=rng)
    xe = Tensor(rng.standard_normal((2, 3, 16, 16)))
    re = weights_like((2, 4), rng)
    cases["encoder"] = (lambda: (enc(xe) * re).sum(),
                        [enc.blocks[0].conv.kernels, enc.blocks[1].norm.gamma, enc.blocks[3].conv.bias,
                         enc.head.weight])

    cell = LstmCell(4, 3, rng)
    xl, hl, cl = (Tensor(rng.standard_normal((2, n))) for n in (4, 3, 3))
    rl = weights_like((2, 3), rng)
    cases["lstm cell"] = (lambda: (cell(xl, hl, cl)[0] * rl).sum() + (cell(xl, hl, cl)[1] * rl).sum(),
                          cell.parameters())

    wiring = build_ncp(WiringSpec.for_hidden(4, 10, 3), 0)
    ltc = LtcCell(wiring, rng, unfold_steps=3)
    xs, us = Tensor(rng.uniform(-1, 1, (2, wiring.units))), Tensor(rng.standard_normal((2, 4)))
    ro = weights_like((2, 3), rng)
    cases["ltc cell"] = (lambda: (ltc.readout(ltc.step(xs, us)) * ro).sum(), ltc.parameters())

    cfc = WiredCfcCell(wiring, rng)
    cases["cfc cell"] = (lambda: (cfc.readout(cfc.step(xs, us)) * ro).sum(), cfc.parameters())
    return cases


@criterion(1, "gradient correctness for every layer and both continuous-time cells")
def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, tensors) in _grad_cases().items():
        assert probe_count(tensors) >= 20, name
        worst[name] = check_gradients(fn, tensors, probes=20, seed=0, h=1e-5, floor=GRAD_FLOOR)
    elapsed = time.perf_counter() - t0
    for name, err in worst.items():
        print(f"  {name:14s} max rel err {err:.2e}")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 120, elapsed


# -- 2 --------------------------------------------------------------------------
@criterion(2, "fused LTC step converges to RK4; dt=0.01 error below 1e-3")
def test_criterion_02_solver_consistency():
    wiring, p = random_params(0)
    cell = LtcCell.from_arrays(wiring, **p)
    rng = np.random.default_rng(100)
    x0, u = rng.uniform(-0.5, 0.5, (4, wiring.units)), rng.uniform(-1, 1, (4, 4))
    errs = solver_errors(cell, p, x0, u, dts=(0.1, 0.05, 0.025))
    print(f"  max-abs error at dt 0.1/0.05/0.025: {errs}")
    assert errs[0] > errs[1] > errs[2]
    (fine,) = solver_errors(cell, p, x0, u, dts=(0.01,), horizon=1.0)
    print(f"  dt=0.01 over 100 steps: {fine:.2e}")
    assert fine < 1e-3


# -- 3 --------------------------------------------------------------------------
@criterion(3, "CfC gate convexity and t=0 midpoint on 10^4 probes")
def test_criterion_03_cfc_structure():
    rng = np.random.default_rng(3)
    layer = CfcLayer(6, 5, rng)
    for p in layer.parameters():
        p.data = rng.standard_normal(p.shape) * 2
    rows = 10_000 // layer.units
    x, u = Tensor(rng.standard_normal((rows, 5)) * 3), Tensor(rng.standard_normal((rows, 6)) * 3)
    out, g, h = cfc_step(layer, x, u, float(rng.uniform(0, 5)), return_heads=True)
    assert out.data.size >= 10_000
    lo, hi = np.minimum(g.data, h.data), np.maximum(g.data, h.data)
    assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)
    mid, g0, h0 = cfc_step(layer, x, u, 0.0, return_heads=True)
    assert np.max(np.abs(mid.data - 0.5 * (g0.data + h0.data))) <= 1e-12


# -- 4 --------------------------------------------------------------------------
@pytest.fixture(scope="module")
def e2e():
    rec = generate_synthetic(E2E_DATA)
    t0 = time.perf_counter()
    runs = {}
    for kind in E2E_KINDS:
        cfg = TrainConfig(model=kind, **E2E_COMMON, **E2E_LR.get(kind, {}))
        result = train(cfg, rec, log=lambda msg, k=kind: print(f"  {k}: {msg}", flush=True))
        sel = result.selected
        model = sel.build()
        report = evaluate_model(model, rec, sel.normalizer, name=cfg.run_name, train_seconds=result.seconds)
        runs[kind] = {"result": result, "report": report, "model": model, "normalizer": sel.normalizer,
                      "config": cfg}
    return {"rec": rec, "runs": runs, "seconds": time.perf_counter() - t0}


@criterion(4, "end-to-end learning of all four models on the seeded synthetic set")
def test_criterion_04_all_models_learn(e2e):
    for kind, run in e2e["runs"].items():
        r = run["result"]
        print(f"  {kind:8s} test rho {run['report'].rho:.4f}  best epoch {r.best_epoch}  "
              f"val rho by epoch {[round(v, 3) for v in r.history]}")
    print(f"  total {e2e['seconds']:.0f} s")
    for kind, run in e2e["runs"].items():
        assert run["config"].max_epochs <= 10 and run["config"].batch_size == 256
        assert run["report"].rho >= 0.35, (kind, run["report"].rho)


@criterion(4, "end-to-end learning of all four models on the seeded synthetic set")
def test_criterion_04_continuous_time_models_converge_first(e2e):
    best = {kind: run["result"].best_epoch for kind, run in e2e["runs"].items()}
    assert best["ltc"] < best["lstm"], best
    assert best["cfc"] < best["lstm"], best


@criterion(4, "end-to-end learning of all four models on the seeded synthetic set")
def test_criterion_04_runtime(e2e):
    assert e2e["seconds"] < E2E_BUDGET_S, e2e["seconds"]


# -- 5 --------------------------------------------------------------------------
@criterion(5, "multi-scale configs consume 40 frames, train, and report the multi-scale schema")
def test_criterion_05_multiscale(tiny_data):
    from rgcnode.data import load_recording
    rec = load_recording(tiny_data)
    tiny = dict(batch_size=32, latent=4, encoder_channels=[2, 2, 2, 2], hidden=6, unfold_steps=2, max_epochs=1)
    runs, plans = {}, {}
    for preset in ("cfc_1x40", "cfc_2x20", "cfc_4x10", "cfc_8x5"):
        cfg = load_config(preset, tiny)
        assert cfg.W == 0 and cfg.plan.total_frames == 40
        x, _ = gather(rec, cfg.plan, window_starts(rec, cfg.plan, "train")[:3])
        assert x.shape[1] == 40
        result = train(cfg, rec)
        sel = result.selected
        runs[cfg.run_name] = [evaluate_model(sel.build(), rec, sel.normalizer, name=cfg.run_name,
                                             train_seconds=result.seconds)]
        plans[cfg.run_name] = cfg.plan
    rows = multiscale_rows(runs, plans, "tiny")
    assert len(rows) == 4
    for row in rows:
        assert list(row) == MULTISCALE_HEADER
        assert row["frames"] == 40 and row["M"] * row["N"] == 40
    order = sorted(rows, key=lambda r: -r["rho"])
    print("  rho by config: " + ", ".join(f"{r['M']}x{r['N']} {r['rho']:.3f}" for r in rows))
    print(f"  1x40 ranked first: {order[0]['M'] == 1}")


# -- 6 --------------------------------------------------------------------------
@criterion(6, "noise harness: rho does not improve with sigma; relative differences signed")
def test_criterion_06_noise(e2e):
    run = e2e["runs"]["cfc"]
    reports, row = noise_eval(run["model"], e2e["rec"], run["normalizer"], name=run["config"].run_name,
                              sigmas=(0.0, 25.0, 50.0), seed=0)
    rhos = [r.rho for r in reports]
    print(f"  rho at sigma 0/25/50: {[round(v, 4) for v in rhos]}  row {row}")
    assert noise_monotone(rhos, tolerance=0.01)
    for sigma, rho in zip((25, 50), rhos[1:]):
        diff = row[f"rel_diff_{sigma}"]
        assert diff == pytest.approx(relative_diff(rhos[0], rho), abs=1e-12)
        assert diff == pytest.approx(100.0 * (rho - rhos[0]) / rhos[0], rel=1e-12)
        assert (diff < 0) == (rho < rhos[0])


# -- 7 --------------------------------------------------------------------------
STAT_GROUPS = [[0.56, 0.57, 0.57, 0.57, 0.58], [0.60, 0.61, 0.59, 0.62, 0.60], [0.55, 0.52, 0.56, 0.54, 0.53]]


@criterion(7, "statistics match textbook oracles; three distinct groups give p < 0.01")
def test_criterion_07_statistics():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(60)
    y = 0.4 * x + rng.standard_normal(60)
    assert pearson(x, y) == pytest.approx(oracle_pearson(list(x), list(y)), abs=1e-6)

    vals = STAT_GROUPS[0]
    lo, hi = ci95(vals)
    m = sum(vals) / 5
    s = math.sqrt(sum((v - m) ** 2 for v in vals) / 4)
    assert t_ppf(0.975, 4) == pytest.approx(2.7764451051977987, abs=1e-6)
    assert hi - m == pytest.approx(2.7764451051977987 * s / math.sqrt(5), abs=1e-6)
    assert m - lo == pytest.approx(hi - m, abs=1e-12)

    f, p = oracle_anova(STAT_GROUPS)
    res = anova_oneway(*STAT_GROUPS)
    assert res.statistic == pytest.approx(f, abs=1e-6) and res.p == pytest.approx(p, abs=1e-4)
    w, p = oracle_levene(STAT_GROUPS)
    res = levene(*STAT_GROUPS)
    assert res.statistic == pytest.approx(w, abs=1e-6) and res.p == pytest.approx(p, abs=1e-4)
    sample = list(rng.exponential(size=40))
    jb, p = oracle_jb(sample)
    res = jarque_bera(sample)
    assert res.statistic == pytest.approx(jb, abs=1e-6) and res.p == pytest.approx(p, abs=1e-4)


@criterion(7, "statistics match textbook oracles; three distinct groups give p < 0.01")
def test_criterion_07_table_pipeline():
    rng = np.random.default_rng(7)
    target = rng.standard_normal((300, 2))
    runs = {}
    for name, noise in (("A", 0.3), ("B", 1.0), ("C", 3.0)):
        runs[name] = [report_from_predictions(target + noise * rng.standard_normal(target.shape), target,
                                              model=name, dataset="synthetic", run_id=str(i), params=10)
                      for i in range(5)]
    summary = summarize_runs(runs)
    print(f"  group rho means {[round(r['rho'], 3) for r in summary.rows]}  ANOVA p {summary.anova_p:.3e}")
    assert summary.anova_p < 0.01
    assert all(set(TABLE1_HEADER) <= set(r) for r in summary.rows)


# -- 8 --------------------------------------------------------------------------
@criterion(8, "identical config and seed give bit-identical checkpoints and recordings")
def test_criterion_08_reproducibility(tmp_path):
    a, b = tmp_path / "a.rgcd", tmp_path / "b.rgcd"
    for path in (a, b):
        assert main(["synth", "--t", "300", "--n", "2", "--seed", "5", "--output", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    for d in ("r1", "r2"):
        assert main(["train", "--data", str(a), "--config", "ltc", "--seed", "4",
                     "--out-dir", str(tmp_path / d), *TINY]) == 0
    for name in ("best.ckpt", "last.ckpt"):
        first = (tmp_path / "r1" / "LTC_MSE-5" / name).read_bytes()
        assert first == (tmp_path / "r2" / "LTC_MSE-5" / name).read_bytes()


# -- 9 --------------------------------------------------------------------------
@criterion(9, "bench reports per-sample latency for all four models")
def test_criterion_09_bench(tiny_data, tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--data", str(tiny_data), "--models", ",".join(E2E_KINDS), "--max-samples", "8",
                 "--repetitions", "2", "--batch-size", "8", "--out-dir", str(out), *TINY]) == 0
    rows = list(csv.DictReader(open(out / "timing_table.csv")))
    assert list(rows[0]) == TABLE6_HEADER
    assert {r["model"] for r in rows} == {"ConvNet_MSE-5", "LSTM_MSE-5", "LTC_MSE-5", "CfC_MSE-5"}
    assert all(float(r["testing_time_s"]) > 0 and float(r["training_time_s"]) > 0 for r in rows)
    single = {r["model"]: float(r["testing_time_s"]) for r in rows if r["batch_size"] == "1"}
    for name in ("LTC_MSE-5", "CfC_MSE-5"):
        print(f"  {name} faster than ConvNet at batch 1: {single[name] < single['ConvNet_MSE-5']}")


# -- 10 -------------------------------------------------------------------------
@criterion(10, "Poisson loss examples; MAE training reported under the MAE-N name")
def test_criterion_10_losses(tiny_data, tmp_path):
    assert loss_poisson(Tensor([[1.0]]), Tensor([[1.0]])).item() == 1.0
    assert loss_poisson(Tensor([[2.0]]), Tensor([[0.0]])).item() == 2.0
    same = np.random.default_rng(0).random((3, 2))
    assert loss_mse(Tensor(same), Tensor(same)).item() == 0.0
    assert loss_mae(Tensor(same), Tensor(same)).item() == 0.0

    out = tmp_path / "mae"
    assert main(["train", "--data", str(tiny_data), "--config", "ltc_mae-20", "--out-dir", str(out), *TINY,
                 "--set", "N=20"]) == 0
    report = json.loads((out / "LTC_MAE-20" / "report.json").read_text())
    assert report["model"] == "LTC_MAE-20"
    assert math.isfinite(report["mae"])
