"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from eat import tensor as tn
from eat.attention import attend, build_sparse_mask, dense_attention_reference, init_attention
from eat.bench import CSV_HEADER, FrontierRow, TimingProtocol, best_tau, calibrate_exit_head, evaluate, run_ablation
from eat.cli import main as cli_main
from eat.costmodel import SCHEDULED_RETENTION, AdaptiveProfile, CostParams, scaling_exponents
from eat.data import CLS_ID, TaskSpec, synthesize
from eat.encoder import (
    EATModel,
    ModelConfig,
    TrainConfig,
    classification_loss,
    default_schedule,
    distillation_loss,
    train,
)
from eat.exits import ExitPolicy, compute_ece, fit_temperature, softmax_np
from eat.pruning import anneal_ratio
from eat.tensor import Matrix

from test_encoder import full_gradient_check

TAUS = (0.80, 0.85, 0.90, 0.95)
# lighter than the CLI default (1000 measured x 3 seeds) to keep the suite short
ACCEPT_PROTOCOL = TimingProtocol(warmup_examples=50, measured_examples=200, seeds=(0, 1, 2))


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Default toy model trained on the default synthetic task, plus a calibrated threshold sweep."""
    t0 = time.perf_counter()
    spec = TaskSpec()
    train_set, dev = synthesize(spec)
    model = EATModel(ModelConfig(), seed=0)
    result = train(train_set, model, TrainConfig())
    train_s = time.perf_counter() - t0
    _, base = calibrate_exit_head(model, dev, ExitPolicy(1.0))
    evals = {tau: evaluate(model, dev, replace(base, tau=tau)) for tau in TAUS}
    elapsed = time.perf_counter() - t0
    ckpt = tmp_path_factory.mktemp("toy") / "model.ckpt"
    model.save(ckpt, TrainConfig())
    return {"model": model, "train": train_set, "dev": dev, "result": result, "evals": evals, "policy": base, "train_s": train_s, "elapsed": elapsed, "ckpt": ckpt}


def test_c01_retention_schedule(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = EATModel(ModelConfig(), seed=0)
    ids = [CLS_ID, *rng.integers(1, 1000, size=100).tolist()]
    _, trace = model.forward(ids, mode="train")
    pct = [round(100 * (c - 1) / 100) for c in trace.token_counts]
    dt = time.perf_counter() - t0
    ok = trace.token_counts == [101, 101, 71, 71, 50, 50] and pct == [100, 100, 70, 70, 49, 49] and dt < 1.0
    report(1, ok, f"token counts {trace.token_counts}, retention % {pct}, {dt:.2f}s")


def test_c02_sparse_dense_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(1, 33))
        k = int(rng.choice([2, 4, 8]))
        heads = int(rng.choice([1, 2, 4]))
        params = init_attention(rng, 16, heads, std=0.3)
        h = rng.normal(size=(t, 16))
        mask = build_sparse_mask(t, k)
        got = attend(Matrix(h), params, mask).data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(got - dense_attention_reference(h, params, mask.allowed)))))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-5 and dt < 30, f"200 cases, max abs diff {worst:.2e} (tol 1e-5), {dt:.1f}s")


def test_c03_gradient_check(report):
    t0 = time.perf_counter()
    errs = full_gradient_check(seed=0)
    worst = max(errs, key=errs.get)
    dt = time.perf_counter() - t0
    ok = errs[worst] < 1e-3 and dt < 120
    report(3, ok, f"{len(errs)} parameter tensors, worst relative error {errs[worst]:.2e} ({worst}), {dt:.1f}s")


def test_c04_cost_scaling(report):
    t0 = time.perf_counter()
    params = CostParams(alpha=1.0, alpha_prime=1.0, beta=0.0, k=32.0, L=6)
    profile = AdaptiveProfile(SCHEDULED_RETENTION, (1.0,) * 6)
    dense, eat = scaling_exponents(params, profile, [64, 128, 256, 512, 1024])
    dt = time.perf_counter() - t0
    ok = abs(dense - 2.0) <= 0.05 and abs(eat - 1.0) <= 0.05 and dt < 1.0
    report(4, ok, f"slopes dense {dense:.4f}, adaptive {eat:.4f}")


def test_c05_ece_and_temperature(report):
    t0 = time.perf_counter()
    ece = compute_ece([0.9, 0.9, 0.6, 0.6], [True, False, True, False]).ece
    rng = np.random.default_rng(5)
    base = rng.normal(size=(4000, 3)) * 1.5
    labels = np.array([rng.choice(3, p=p) for p in softmax_np(base)])
    t_star = fit_temperature(2.0 * base, labels)
    rows = rng.normal(size=(10_000, 5)) * 4
    temps = np.exp(rng.uniform(np.log(0.25), np.log(8.0), size=10_000))
    same = bool(np.all(softmax_np(rows / temps[:, None]).argmax(1) == rows.argmax(1)))
    dt = time.perf_counter() - t0
    ok = ece == 0.25 and abs(t_star - 2.0) <= 0.2 and same and dt < 30
    report(5, ok, f"ECE {ece!r}, fitted T* {t_star:.3f} (target 2 +-10%), argmax preserved on 10000 rows: {same}, {dt:.1f}s")


def test_c06_exit_monotonicity(report, toy):
    depth = [toy["evals"][t].avg_depth for t in TAUS]
    early = [toy["evals"][t].early_exit_rate for t in TAUS]
    mono = all(b >= a for a, b in zip(depth, depth[1:])) and all(b <= a for a, b in zip(early, early[1:]))
    ok = mono and toy["elapsed"] < 120
    report(6, ok, f"avg depth {[round(d, 3) for d in depth]}, early-exit {[round(e, 3) for e in early]}, train+sweep {toy['elapsed']:.1f}s")


def test_c07_easy_exit_more_than_hard(report, toy):
    rows = [FrontierRow("EAT", t, ev.accuracy, 0.0, 0.0, ev.avg_depth, ev.retention_pct, ev.flops_norm) for t, ev in toy["evals"].items()]
    tau = best_tau(rows)
    rates = toy["evals"][tau].exit_rate_by_difficulty
    gap = 100 * (rates["easy"] - rates["hard"])
    report(7, gap >= 15, f"best tau {tau:.2f}: easy exit {100 * rates['easy']:.1f}%, hard exit {100 * rates['hard']:.1f}%, gap {gap:.1f}pp")


def test_c08_two_stage_schedule(report, toy):
    log = toy["result"].log
    cfg = ModelConfig()
    spe = math.ceil(len(toy["train"]) / TrainConfig().batch_size)
    sched = default_schedule(cfg, spe, TrainConfig().epochs)
    epoch1 = all(e["p_2"] == 0.0 and e["p_4"] == 0.0 for e in log if e["epoch"] == 1)
    later = [e for e in log if e["epoch"] > 1]
    exact = max(abs(e[f"p_{l}"] - anneal_ratio(e["step"], sched, l)) for e in later for l in (2, 4))
    vals = [e["p_2"] for e in later]
    diffs = np.diff(vals)
    linear = bool(np.all(diffs >= 0)) and float(np.ptp(diffs)) < 1e-9
    ok = epoch1 and exact < 1e-9 and linear and abs(vals[-1] - 0.3) < 1e-9
    report(8, ok, f"epoch-1 zero: {epoch1}, max deviation from closed form {exact:.1e}, linear ramp: {linear}, final p {vals[-1]:.4f}")


def test_c09_loss_constants(report):
    rng = np.random.default_rng(9)
    with tn.precision(np.float64):
        z4, zL = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
        a = tn.cross_entropy(tn.constant(z4), [1]).item()
        b = tn.cross_entropy(tn.constant(zL), [1]).item()
        got = classification_loss({4: tn.constant(z4), 6: tn.constant(zL)}, 1, ModelConfig()).item()
        t, s = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        one = distillation_loss(t, tn.constant(s), 1.0, 0.5).item()
        two = distillation_loss(2 * t, tn.constant(2 * s), 2.0, 0.5).item()
    ok = abs(got - (0.3 * a + b)) <= 1e-7 and abs(two / one - 4.0) <= 1e-6
    report(9, ok, f"cls loss {got:.9f} vs 0.3a+b {0.3 * a + b:.9f}; T^2 ratio {two / one:.9f}")


def _sweep(tmp, cfg_path, ckpt, name):
    out = tmp / name
    code = cli_main(["sweep", "--config", str(cfg_path), "--checkpoint", str(ckpt), "--out", str(out), "--taus", ",".join(f"{t:.2f}" for t in TAUS)])
    with open(out / "summary.csv", encoding="utf-8", newline="") as fh:
        return code, list(csv.reader(fh))


def test_c10_reporting_fidelity(report, toy, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"protocol": {"warmup_examples": 50, "measured_examples": 200, "seeds": [0, 1, 2]}}))
    assert cli_main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "trained")]) == 0
    ckpt = tmp_path / "trained" / "model.ckpt"
    retrain_same = ckpt.read_bytes() == toy["ckpt"].read_bytes()
    code_a, a = _sweep(tmp_path, cfg_path, ckpt, "a")
    code_b, b = _sweep(tmp_path, cfg_path, ckpt, "b")
    header_ok = a[0] == CSV_HEADER == b[0] == "model,tau,accuracy,latency_ms,throughput,avg_depth,retention_pct,flops_norm".split(",")
    timing = {3, 4}
    exact = all([x for i, x in enumerate(ra) if i not in timing] == [x for i, x in enumerate(rb) if i not in timing] for ra, rb in zip(a[1:], b[1:]))
    drift = max(abs(float(ra[i]) - float(rb[i])) / max(float(ra[i]), float(rb[i])) for ra, rb in zip(a[1:], b[1:]) for i in timing)
    ok = code_a == code_b == 0 and header_ok and retrain_same and exact and len(a) == len(b) == len(TAUS) + 2 and drift <= 0.2
    report(10, ok, f"header exact: {header_ok}, retrain bit-identical: {retrain_same}, non-timing columns identical: {exact}, max timing drift {100 * drift:.1f}%")


def test_c11_ablation(report, toy):
    t0 = time.perf_counter()
    rows = run_ablation(toy["train"], toy["dev"], ["full", "no-pruning", "no-exit", "sparse-only"], ModelConfig(), TrainConfig(), ACCEPT_PROTOCOL, tau=0.9)
    by = {r.row.model: r.row for r in rows}
    dt = time.perf_counter() - t0
    ok = by["no-exit"].avg_depth == 6.0 and by["no-pruning"].retention_pct == 100.0 and by["full"].flops_norm < by["sparse-only"].flops_norm and dt < 900
    report(
        11,
        ok,
        f"no-exit depth {by['no-exit'].avg_depth}, no-pruning retention {by['no-pruning'].retention_pct}%, "
        f"flops full {by['full'].flops_norm:.4f} < sparse-only {by['sparse-only'].flops_norm:.4f}, {dt:.0f}s",
    )
