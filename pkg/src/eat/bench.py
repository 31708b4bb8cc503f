"""Evaluation harness: threshold sweeps, wall-clock timing, summary CSVs,
frontier plots and ablations."""

from __future__ import annotations

import csv
import gc
import json
import logging
import statistics
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from eat import tensor as tn
from eat.costmodel import measured_flops
from eat.data import Example
from eat.encoder import EATModel, ForwardTrace, ModelConfig, TrainConfig, predict_adaptive, train
from eat.exits import ExitPolicy, calibrate_if_needed, compute_ece, softmax_np

log = logging.getLogger(__name__)

CSV_HEADER = ["model", "tau", "accuracy", "latency_ms", "throughput", "avg_depth", "retention_pct", "flops_norm"]
DEFAULT_TAUS = (0.80, 0.85, 0.90, 0.95)
ABLATION_VARIANTS = ("full", "no-pruning", "no-sparse", "no-exit", "pruning-only", "sparse-only", "exit-only")


@dataclass(frozen=True)
class TimingProtocol:
    warmup_examples: int = 50
    measured_examples: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2)
    batch_latency: int = 1
    batch_throughput: int = 32

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if min(self.warmup_examples + 1, self.measured_examples, len(self.seeds), self.batch_throughput) < 1:
            raise ValueError("timing protocol counts must be positive")
        if self.batch_latency != 1:
            raise ValueError("latency is measured one example at a time")


@dataclass
class FrontierRow:
    model: str
    tau: float | None
    accuracy: float
    latency_ms: float
    throughput: float
    avg_depth: float
    retention_pct: float
    flops_norm: float

    def csv_fields(self) -> list[str]:
        return [
            self.model,
            "" if self.tau is None else f"{self.tau:.2f}",
            f"{self.accuracy:.2f}",
            f"{self.latency_ms:.2f}",
            f"{self.throughput:.2f}",
            f"{self.avg_depth:.2f}",
            f"{self.retention_pct:.2f}",
            f"{self.flops_norm:.4f}",
        ]

    def rounded(self) -> "FrontierRow":
        """The row as it reads back from CSV."""
        f = self.csv_fields()
        return FrontierRow(f[0], None if f[1] == "" else float(f[1]), *map(float, f[2:]))


@dataclass
class EvalResult:
    accuracy: float
    avg_depth: float
    retention_pct: float
    flops_norm: float
    early_exit_rate: float
    exit_rate_by_difficulty: dict[str, float]
    accuracy_by_difficulty: dict[str, float]
    traces: list[ForwardTrace] = field(repr=False, default_factory=list)
    correct: list[bool] = field(repr=False, default_factory=list)


def evaluate(model: EATModel, examples: Sequence[Example], policy: ExitPolicy | None) -> EvalResult:
    """Accuracy and adaptive-compute statistics over ``examples`` (no timing)."""
    if not examples:
        raise ValueError("empty evaluation set")
    L = model.config.layers
    traces, correct = [], []
    for ex in examples:
        label, trace = predict_adaptive(ex.ids, model, policy)
        traces.append(trace)
        correct.append(label == ex.label)
    flops = [measured_flops(t, model.config).normalized for t in traces]
    by_diff: dict[str, list[int]] = {}
    for i, ex in enumerate(examples):
        by_diff.setdefault(ex.difficulty, []).append(i)
    return EvalResult(
        accuracy=100.0 * float(np.mean(correct)),
        avg_depth=float(np.mean([t.exit_layer for t in traces])),
        retention_pct=100.0 * float(np.mean([t.final_retention for t in traces])),
        flops_norm=float(np.mean(flops)),
        early_exit_rate=float(np.mean([t.exit_layer < L for t in traces])),
        exit_rate_by_difficulty={d: float(np.mean([traces[i].exit_layer < L for i in idx])) for d, idx in sorted(by_diff.items())},
        accuracy_by_difficulty={d: float(np.mean([correct[i] for i in idx])) for d, idx in sorted(by_diff.items())},
        traces=traces,
        correct=correct,
    )


@dataclass
class TimingResult:
    latency_ms: float
    latency_std_ms: float
    throughput: float
    per_seed_latency_ms: list[float]
    per_seed_throughput: list[float]
    measured_calls: list[int]
    sampled_with_replacement: bool


def time_inference(
    model: EATModel | None,
    examples: Sequence[Example],
    protocol: TimingProtocol,
    policy: ExitPolicy | None = None,
    predict: Callable[[Sequence[int]], object] | None = None,
) -> TimingResult:
    """Wall-clock latency (one example per call) and batch-loop throughput.

    Per seed: draw warmup + measured examples, run the warmup untimed,
    time each measured call on a monotonic clock, then time the measured
    examples again in batches of ``batch_throughput``. Reported latency is
    the mean over seeds of the per-seed mean; the spread is the standard
    deviation of those per-seed means.
    """
    if predict is None:
        if model is None:
            raise ValueError("need a model or a predict callable")
        predict = lambda ids: predict_adaptive(ids, model, policy)
    need = protocol.warmup_examples + protocol.measured_examples
    replace_ = len(examples) < need
    # as timeit does: keep collector pauses out of the measured calls
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        lat, thr, calls = _timed_seeds(examples, protocol, predict, replace_)
    finally:
        if gc_was_enabled:
            gc.enable()
    std = statistics.stdev(lat) if len(lat) > 1 else 0.0
    return TimingResult(float(np.mean(lat)), std, float(np.mean(thr)), lat, thr, calls, replace_)


def _timed_seeds(examples, protocol: TimingProtocol, predict, replace_: bool) -> tuple[list[float], list[float], list[int]]:
    need = protocol.warmup_examples + protocol.measured_examples
    lat, thr, calls = [], [], []
    for seed in protocol.seeds:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(examples), size=need, replace=replace_)
        warm, measured = idx[: protocol.warmup_examples], idx[protocol.warmup_examples :]
        for i in warm:
            predict(examples[i].ids)
        total = 0.0
        n = 0
        for i in measured:
            ids = examples[i].ids
            t0 = time.perf_counter()
            predict(ids)
            total += time.perf_counter() - t0
            n += 1
        calls.append(n)
        lat.append(1000.0 * total / n)
        bs = protocol.batch_throughput
        n_batches = max(1, len(measured) // bs)
        batches = [measured[b * bs : (b + 1) * bs] for b in range(n_batches)]
        done = 0
        t0 = time.perf_counter()
        for batch in batches:
            for i in batch:
                predict(examples[i].ids)
            done += len(batch)
        thr.append(done / (time.perf_counter() - t0))
    return lat, thr, calls


def component_timings(model: EATModel, examples: Sequence[Example], policy: ExitPolicy | None) -> dict[str, float]:
    """Mean milliseconds per example spent in each forward component (embed, attention, ffn, exit_heads, pruning)."""
    totals: dict[str, float] = {}
    with tn.no_grad():
        for ex in examples:
            model.forward(ex.ids, mode="infer", policy=policy, profile=totals)
    return {k: 1000.0 * v / len(examples) for k, v in sorted(totals.items())}


def calibrate_exit_head(model: EATModel, examples: Sequence[Example], policy: ExitPolicy):
    """ECE of the early-exit head on ``examples``; temperature-scale it when ECE exceeds 2%."""
    layer = model.config.exit_layer
    logits = np.array([model.predict_logits(ex.ids)[layer] for ex in examples])
    labels = np.array([ex.label for ex in examples])
    probs = softmax_np(logits)
    report = compute_ece(probs.max(axis=1), probs.argmax(axis=1) == labels)
    calibrated = calibrate_if_needed(report, policy, logits, labels)
    return report, calibrated


def run_sweep(
    model: EATModel,
    dev: Sequence[Example],
    taus: Sequence[float] = DEFAULT_TAUS,
    protocol: TimingProtocol = TimingProtocol(),
    name: str = "EAT",
    mode: str = "threshold",
    calibrate: bool = True,
    details: dict | None = None,
) -> list[FrontierRow]:
    """One row per threshold plus a never-exit row for the same model."""
    if not dev:
        raise ValueError("empty dev set")
    base = ExitPolicy(1.0, mode)
    report = None
    if calibrate:
        report, base = calibrate_exit_head(model, dev, base)
    rows = []
    per_row = {}
    for tau in [*taus, None]:
        policy = None if tau is None else replace(base, tau=float(tau))
        ev = evaluate(model, dev, policy)
        tm = time_inference(model, dev, protocol, policy)
        label = name if tau is None else name
        row = FrontierRow(
            f"{label}-full-depth" if tau is None else label,
            None if tau is None else float(tau),
            ev.accuracy,
            tm.latency_ms,
            tm.throughput,
            ev.avg_depth,
            ev.retention_pct,
            ev.flops_norm,
        )
        rows.append(row)
        per_row[row.model if tau is None else f"{name}@{tau:.2f}"] = {"eval": ev, "timing": tm, "components_ms": component_timings(model, dev, policy)}
        log.info("%s tau=%s acc=%.2f depth=%.2f lat=%.2fms", row.model, tau, ev.accuracy, ev.avg_depth, tm.latency_ms)
    if details is not None:
        details["calibration"] = report
        details["policy"] = base
        details["rows"] = per_row
    return rows


def best_tau(rows: Sequence[FrontierRow]) -> float:
    """Threshold with the highest accuracy; ties go to the shallower average depth."""
    cands = [r for r in rows if r.tau is not None]
    if not cands:
        raise ValueError("no thresholded rows")
    return min(cands, key=lambda r: (-round(r.accuracy, 6), r.avg_depth, r.tau)).tau


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def emit_summary_csv(rows: Sequence[FrontierRow], path: str | Path, extra_columns: Sequence[str] = (), extra: Sequence[Sequence[str]] = ()) -> Path:
    if not rows:
        raise ValueError("nothing to write")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*CSV_HEADER, *extra_columns])
        for i, row in enumerate(rows):
            w.writerow([*row.csv_fields(), *(extra[i] if extra_columns else ())])
    return path


def read_summary_csv(path: str | Path) -> list[FrontierRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[: len(CSV_HEADER)] != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for rec in reader:
            out.append(FrontierRow(rec[0], None if rec[1] == "" else float(rec[1]), *map(float, rec[2:8])))
        return out


_PALETTE = ["#e6550d", "#000000", "#3182bd", "#31a354", "#756bb1", "#636363", "#d6616b"]
SVG_NS = "http://www.w3.org/2000/svg"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-9:
        pad = max(abs(lo) * 0.05, 0.5)
    else:
        pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def emit_frontier_plot(rows: Sequence[FrontierRow], path: str | Path, title: str = "Accuracy-latency frontier") -> Path:
    """Scatter of latency (x) against accuracy (y) as a standalone SVG file."""
    if len(rows) < 2:
        raise ValueError("a frontier needs at least two rows")
    W, H, ml, mr, mt, mb = 640, 440, 70, 160, 40, 60
    xs = [r.latency_ms for r in rows]
    ys = [r.accuracy for r in rows]
    x0, x1 = _nice_range(min(xs), max(xs))
    y0, y1 = _nice_range(min(ys), max(ys))
    px = lambda x: ml + (x - x0) / (x1 - x0) * (W - ml - mr)
    py = lambda y: H - mb - (y - y0) / (y1 - y0) * (H - mt - mb)

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(
        f"{{{SVG_NS}}}svg",
        {
            "width": str(W),
            "height": str(H),
            "viewBox": f"0 0 {W} {H}",
            "version": "1.1",
            "data-x-min": repr(x0),
            "data-x-max": repr(x1),
            "data-y-min": repr(y0),
            "data-y-max": repr(y1),
        },
    )
    sub = lambda parent, tag, attrs, text=None: _sub(parent, tag, attrs, text)
    sub(svg, "rect", {"x": "0", "y": "0", "width": str(W), "height": str(H), "fill": "white"})
    sub(svg, "text", {"x": str(W / 2 - mr / 2), "y": "24", "text-anchor": "middle", "font-size": "15", "font-family": "sans-serif"}, title)
    axes = sub(svg, "g", {"class": "axes", "stroke": "black", "fill": "none"})
    sub(axes, "line", {"x1": str(ml), "y1": str(H - mb), "x2": str(W - mr), "y2": str(H - mb)})
    sub(axes, "line", {"x1": str(ml), "y1": str(mt), "x2": str(ml), "y2": str(H - mb)})
    ticks = sub(svg, "g", {"class": "ticks", "font-size": "11", "font-family": "sans-serif"})
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        sub(ticks, "line", {"x1": f"{px(xv):.2f}", "y1": str(H - mb), "x2": f"{px(xv):.2f}", "y2": str(H - mb + 5), "stroke": "black"})
        sub(ticks, "text", {"x": f"{px(xv):.2f}", "y": str(H - mb + 18), "text-anchor": "middle"}, f"{xv:.2f}")
        sub(ticks, "line", {"x1": str(ml - 5), "y1": f"{py(yv):.2f}", "x2": str(ml), "y2": f"{py(yv):.2f}", "stroke": "black"})
        sub(ticks, "text", {"x": str(ml - 8), "y": f"{py(yv) + 4:.2f}", "text-anchor": "end"}, f"{yv:.1f}")
    sub(svg, "text", {"x": str((ml + W - mr) / 2), "y": str(H - 15), "text-anchor": "middle", "font-size": "13", "font-family": "sans-serif"}, "Latency (ms, batch 1)")
    sub(svg, "text", {"x": "18", "y": str((mt + H - mb) / 2), "text-anchor": "middle", "font-size": "13", "font-family": "sans-serif", "transform": f"rotate(-90 18 {(mt + H - mb) / 2})"}, "Accuracy (%)")

    names = list(dict.fromkeys(r.model for r in rows))
    colors = {n: _PALETTE[i % len(_PALETTE)] for i, n in enumerate(names)}
    for n in names:
        series = [r for r in rows if r.model == n]
        g = sub(svg, "g", {"class": "series", "data-model": n})
        pts = sorted(series, key=lambda r: r.latency_ms)
        if len(pts) > 1:
            sub(g, "polyline", {"points": " ".join(f"{px(r.latency_ms):.2f},{py(r.accuracy):.2f}" for r in pts), "fill": "none", "stroke": colors[n], "stroke-opacity": "0.5"})
        for r in series:
            c = sub(g, "circle", {"class": "point", "cx": f"{px(r.latency_ms):.2f}", "cy": f"{py(r.accuracy):.2f}", "r": "5", "fill": colors[n], "data-latency": repr(r.latency_ms), "data-accuracy": repr(r.accuracy), "data-tau": "" if r.tau is None else f"{r.tau:.2f}"})
            sub(c, "title", {}, f"{r.model} tau={r.tau} acc={r.accuracy:.2f} lat={r.latency_ms:.2f}ms")
            if r.tau is not None:
                sub(g, "text", {"x": f"{px(r.latency_ms) + 7:.2f}", "y": f"{py(r.accuracy) - 7:.2f}", "font-size": "10", "font-family": "sans-serif"}, f"τ={r.tau:.2f}")
    legend = sub(svg, "g", {"class": "legend", "font-size": "12", "font-family": "sans-serif"})
    for i, n in enumerate(names):
        y = mt + 10 + 20 * i
        sub(legend, "rect", {"x": str(W - mr + 15), "y": str(y - 9), "width": "10", "height": "10", "fill": colors[n]})
        sub(legend, "text", {"x": str(W - mr + 30), "y": str(y)}, n)
    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path


def _sub(parent, tag, attrs, text=None):
    el = ET.SubElement(parent, f"{{{SVG_NS}}}{tag}", attrs)
    if text is not None:
        el.text = text
    return el


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def variant_setup(name: str, config: ModelConfig) -> tuple[ModelConfig, bool]:
    """Model config and whether early exits are used, for one ablation variant."""
    if name not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {ABLATION_VARIANTS}")
    prune = name in ("full", "no-sparse", "no-exit", "pruning-only")
    sparse = name in ("full", "no-pruning", "no-exit", "sparse-only")
    exits = name in ("full", "no-pruning", "no-sparse", "exit-only")
    cfg = replace(config, prune_layers=config.prune_layers if prune else (), k=config.k if sparse else None)
    return cfg, exits


@dataclass
class AblationRow:
    row: FrontierRow
    acc_delta: float


def run_ablation(
    train_set: Sequence[Example],
    dev: Sequence[Example],
    variants: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
    protocol: TimingProtocol = TimingProtocol(),
    tau: float = 0.90,
) -> list[AblationRow]:
    """Train and evaluate each variant with the same seed and data.

    Accuracy deltas are relative to ``full`` (trained even when not
    requested, so every delta has a reference).
    """
    names = list(dict.fromkeys(variants))
    todo = names if "full" in names else ["full", *names]
    rows: dict[str, FrontierRow] = {}
    for name in todo:
        cfg, exits = variant_setup(name, model_config)
        model = EATModel(cfg, seed=train_config.seed)
        train(train_set, model, train_config)
        policy = None
        if exits:
            _, policy = calibrate_exit_head(model, dev, ExitPolicy(tau))
        ev = evaluate(model, dev, policy)
        tm = time_inference(model, dev, protocol, policy)
        rows[name] = FrontierRow(name, tau if exits else None, ev.accuracy, tm.latency_ms, tm.throughput, ev.avg_depth, ev.retention_pct, ev.flops_norm)
        log.info("variant %s acc=%.2f flops=%.4f depth=%.2f", name, ev.accuracy, ev.flops_norm, ev.avg_depth)
    ref = rows["full"].accuracy
    return [AblationRow(rows[n], rows[n].accuracy - ref) for n in names]


def emit_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> Path:
    return emit_summary_csv([r.row for r in rows], path, ["acc_delta"], [[f"{r.acc_delta:.2f}"] for r in rows])


def write_traces(path: str | Path, sections: dict[str, EvalResult]) -> None:
    """Per-example traces behind each CSV row, one JSON object per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, ev in sections.items():
            for t, ok in zip(ev.traces, ev.correct):
                fh.write(json.dumps({"row": key, "correct": bool(ok), **t.to_dict()}) + "\n")
