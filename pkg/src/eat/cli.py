"""Command-line entry point: ``eat <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from eat import bench, costmodel
from eat.data import TaskSpec, read_jsonl, synthesize, write_jsonl
from eat.encoder import EATModel, ModelConfig, TrainConfig, train, train_teacher
from eat.exits import ExitPolicy

log = logging.getLogger("eat")


def _pick(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | None, seed: int | None) -> dict:
    raw = json.loads(Path(path).read_text()) if path else {}
    task = _pick(TaskSpec, raw.get("task", {}))
    model = _pick(ModelConfig, raw.get("model", {}))
    tr = _pick(TrainConfig, raw.get("train", {}))
    proto = _pick(bench.TimingProtocol, raw.get("protocol", {}))
    if seed is not None:
        task, tr = replace(task, seed=seed), replace(tr, seed=seed)
    if model.vocab_size != task.vocab_size:
        model = replace(model, vocab_size=task.vocab_size)
    if model.num_classes != task.num_classes:
        model = replace(model, num_classes=task.num_classes)
    return {"task": task, "model": model, "train": tr, "protocol": proto}


def _data(args, cfg):
    if getattr(args, "data", None):
        d = Path(args.data)
        return read_jsonl(d / "train.jsonl"), read_jsonl(d / "dev.jsonl")
    return synthesize(cfg["task"])


def _taus(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_gen_data(args, cfg, out: Path) -> dict:
    tr, dev = synthesize(cfg["task"])
    write_jsonl(tr, out / "train.jsonl")
    write_jsonl(dev, out / "dev.jsonl")
    (out / "task.json").write_text(json.dumps(asdict(cfg["task"]), indent=2) + "\n")
    return {"train": len(tr), "dev": len(dev)}


def _train_model(cfg, tr, out: Path, name: str = "model") -> EATModel:
    mc, tc = cfg["model"], cfg["train"]
    teacher = None
    if mc.mu > 0:
        log.info("training dense teacher for distillation")
        teacher = train_teacher(tr, mc, tc)
        teacher.save(out / "teacher.ckpt", tc)
    model = EATModel(mc, seed=tc.seed)
    res = train(tr, model, tc, teacher=teacher, log_path=out / f"{name}_train_log.jsonl")
    model.save(out / f"{name}.ckpt", tc, {"epochs": res.epochs})
    return model


def cmd_train(args, cfg, out: Path) -> dict:
    tr, _ = _data(args, cfg)
    _train_model(cfg, tr, out)
    return {"checkpoint": str(out / "model.ckpt")}


def cmd_eval(args, cfg, out: Path) -> dict:
    _, dev = _data(args, cfg)
    model = EATModel.load(args.checkpoint)
    report, policy = bench.calibrate_exit_head(model, dev, ExitPolicy(args.tau, args.mode))
    ev = bench.evaluate(model, dev, policy)
    result = {
        "accuracy": ev.accuracy,
        "avg_depth": ev.avg_depth,
        "retention_pct": ev.retention_pct,
        "flops_norm": ev.flops_norm,
        "early_exit_rate": ev.early_exit_rate,
        "exit_rate_by_difficulty": ev.exit_rate_by_difficulty,
        "accuracy_by_difficulty": ev.accuracy_by_difficulty,
        "calibration": asdict(report),
        "tau": args.tau,
        "temperature": policy.calibration_temperature,
    }
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def _sweep_and_report(model, dev, cfg, out: Path, taus, name="EAT", mode="threshold", extra_rows=()):
    details: dict = {}
    rows = bench.run_sweep(model, dev, taus, cfg["protocol"], name=name, mode=mode, details=details)
    rows = [*rows, *extra_rows]
    bench.emit_summary_csv(rows, out / "summary.csv")
    bench.emit_frontier_plot(rows, out / "frontier.svg")
    bench.write_traces(out / "traces.jsonl", {k: v["eval"] for k, v in details["rows"].items()})
    with open(out / "run_log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        cal = details["calibration"]
        fh.write(json.dumps({"event": "calibration", **asdict(cal), "temperature": details["policy"].calibration_temperature}) + "\n")
        for key, v in details["rows"].items():
            ev, tm = v["eval"], v["timing"]
            fh.write(json.dumps({"event": "row", "row": key, "exit_rate_by_difficulty": ev.exit_rate_by_difficulty, "accuracy_by_difficulty": ev.accuracy_by_difficulty, **asdict(tm), "components_ms": v["components_ms"]}) + "\n")
    return rows, details


def cmd_sweep(args, cfg, out: Path) -> dict:
    _, dev = _data(args, cfg)
    model = EATModel.load(args.checkpoint)
    rows, _ = _sweep_and_report(model, dev, cfg, out, _taus(args.taus), mode=args.mode)
    return {"rows": len(rows), "csv": str(out / "summary.csv"), "best_tau": bench.best_tau(rows)}


def cmd_bench(args, cfg, out: Path) -> dict:
    """Train the adaptive model and a dense same-depth baseline, then sweep both."""
    tr, dev = _data(args, cfg)
    model = _train_model(cfg, tr, out)
    base_cfg = dict(cfg, model=replace(cfg["model"], k=None, prune_layers=()))
    baseline = _train_model(base_cfg, tr, out, name="dense")
    ev = bench.evaluate(baseline, dev, None)
    tm = bench.time_inference(baseline, dev, cfg["protocol"])
    dense_row = bench.FrontierRow("dense-baseline", None, ev.accuracy, tm.latency_ms, tm.throughput, ev.avg_depth, ev.retention_pct, ev.flops_norm)
    rows, _ = _sweep_and_report(model, dev, cfg, out, _taus(args.taus), extra_rows=[dense_row])
    return {"rows": len(rows), "csv": str(out / "summary.csv"), "best_tau": bench.best_tau(rows)}


def cmd_ablate(args, cfg, out: Path) -> dict:
    tr, dev = _data(args, cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = bench.run_ablation(tr, dev, variants, cfg["model"], cfg["train"], cfg["protocol"], args.tau)
    bench.emit_ablation_csv(rows, out / "ablation.csv")
    bench.emit_frontier_plot([r.row for r in rows], out / "ablation.svg", "Ablation: accuracy vs latency")
    return {"variants": variants, "csv": str(out / "ablation.csv")}


def cmd_cost(args, cfg, out: Path) -> dict:
    mc = cfg["model"]
    params = costmodel.CostParams.from_config(mc, k=args.k)
    if mc.layers == len(costmodel.SCHEDULED_RETENTION):
        retention = costmodel.SCHEDULED_RETENTION
    else:
        retention = (1.0,) * mc.layers
    survival = tuple(1.0 if l <= mc.exit_layer else args.survival for l in range(1, mc.layers + 1))
    profile = costmodel.AdaptiveProfile(tuple(retention), survival)
    Ts = [int(x) for x in args.lengths.split(",")]
    rows = costmodel.cost_sweep(Ts, params, profile)
    costmodel.write_cost_csv(rows, out / "cost.csv")
    dense_slope, eat_slope = costmodel.scaling_exponents(replace(params, beta=0.0), profile, Ts)
    return {
        "csv": str(out / "cost.csv"),
        "crossover_T": costmodel.crossover_length(params, profile),
        "slope_dense_beta0": dense_slope,
        "slope_eat_beta0": eat_slope,
    }


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with model/train/task/protocol sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory with train.jsonl/dev.jsonl (default: synthesize from config)")
    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True)
    taus = ",".join(f"{t:.2f}" for t in bench.DEFAULT_TAUS)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train", parents=[common, data], help="train the adaptive encoder")
    e = sub.add_parser("eval", parents=[common, data, ckpt], help="evaluate one threshold")
    e.add_argument("--tau", type=float, default=0.9)
    e.add_argument("--mode", choices=["threshold", "patience"], default="threshold")
    s = sub.add_parser("sweep", parents=[common, data, ckpt], help="threshold sweep, CSV and plot")
    s.add_argument("--taus", default=taus)
    s.add_argument("--mode", choices=["threshold", "patience"], default="threshold")
    b = sub.add_parser("bench", parents=[common, data], help="train, sweep and compare with a dense baseline")
    b.add_argument("--taus", default=taus)
    a = sub.add_parser("ablate", parents=[common, data], help="component ablation")
    a.add_argument("--variants", default=",".join(bench.ABLATION_VARIANTS))
    a.add_argument("--tau", type=float, default=0.9)
    c = sub.add_parser("cost", parents=[common], help="analytic cost sweep")
    c.add_argument("--lengths", default="64,128,256,512,1024")
    c.add_argument("--k", type=float, default=32.0)
    c.add_argument("--survival", type=float, default=1.0, help="Pr(reaching layers past the exit layer)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - one diagnostic line, nonzero exit
        print(f"eat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
