"""Analytic expected-compute model and measured operation counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# retention entering each layer under the default 30%/30% schedule
SCHEDULED_RETENTION = (1.0, 1.0, 0.7, 0.7, 0.49, 0.49)


@dataclass(frozen=True)
class CostParams:
    alpha: float
    alpha_prime: float
    beta: float
    k: float
    L: int

    def __post_init__(self):
        if min(self.alpha, self.alpha_prime, self.k) <= 0 or self.beta < 0 or self.L < 1:
            raise ValueError("cost coefficients must be positive")

    @classmethod
    def from_config(cls, config, k: float | None = None) -> "CostParams":
        """Coefficients in multiply-accumulates: score + mix per attention pair, two FFN matmuls per token."""
        per_pair = 2.0 * config.heads * (config.d // config.heads)
        window = k if k is not None else (config.k if config.k is not None else config.max_seq_len)
        return cls(per_pair, per_pair, 2.0 * config.d * config.d_ff, float(window), config.layers)


@dataclass(frozen=True)
class AdaptiveProfile:
    retention: tuple[float, ...]
    survival: tuple[float, ...]

    def __post_init__(self):
        r = np.asarray(self.retention, dtype=float)
        s = np.asarray(self.survival, dtype=float)
        if r.shape != s.shape or r.ndim != 1 or r.size == 0:
            raise ValueError("retention and survival need one entry per layer")
        if np.any(r <= 0) or np.any(r > 1) or np.any(np.diff(r) > 1e-12):
            raise ValueError("retention must be nonincreasing within (0, 1]")
        if np.any(s < 0) or np.any(s > 1) or np.any(np.diff(s) > 1e-12) or s[0] != 1.0:
            raise ValueError("survival must start at 1 and be nonincreasing within [0, 1]")

    @property
    def r_bar(self) -> float:
        return float(np.mean(self.retention))

    @property
    def p_bar(self) -> float:
        return float(np.mean(self.survival))

    @classmethod
    def uniform(cls, L: int) -> "AdaptiveProfile":
        return cls((1.0,) * L, (1.0,) * L)


def dense_expected_cost(T: float, params: CostParams) -> float:
    if T < 1:
        raise ValueError("sequence length must be at least 1")
    return params.L * (params.alpha * T * T + params.beta * T)


def eat_expected_cost(T: float, profile: AdaptiveProfile, params: CostParams) -> float:
    if len(profile.retention) != params.L:
        raise ValueError(f"profile covers {len(profile.retention)} layers, model has {params.L}")
    total = 0.0
    for r, s in zip(profile.retention, profile.survival):
        t = r * T
        total += s * (params.alpha_prime * t * params.k + params.beta * t)
    return total


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


def scaling_exponents(params: CostParams, profile: AdaptiveProfile, T_values: Sequence[float]) -> tuple[float, float]:
    """Fitted log-log exponents of dense and adaptive cost over ``T_values``."""
    ts = sorted(set(float(t) for t in T_values))
    if len(ts) < 4 or ts[-1] / ts[0] < 8:
        raise ValueError("need at least 4 distinct lengths spanning 8x")
    dense = [dense_expected_cost(t, params) for t in ts]
    eat = [eat_expected_cost(t, profile, params) for t in ts]
    return loglog_slope(ts, dense), loglog_slope(ts, eat)


@dataclass(frozen=True)
class FlopCount:
    attention_pairs: int
    ffn_token_ops: int
    normalized: float
    attention_ratio: float
    ffn_ratio: float


def measured_flops(trace, config) -> FlopCount:
    """Operation counts actually charged by one forward trace.

    Attention is charged per allowed pair, the FFN per token; both are
    normalized against the dense model of the same depth and input length.
    """
    params = CostParams.from_config(config)
    t1 = trace.token_counts[0]
    pairs = int(sum(trace.allowed_pairs))
    tokens = int(sum(trace.token_counts))
    ffn_ops = tokens * config.d * config.d_ff
    dense_pairs = config.layers * t1 * t1
    dense_tokens = config.layers * t1
    total = params.alpha * pairs + params.beta * tokens
    dense_total = params.alpha * dense_pairs + params.beta * dense_tokens
    return FlopCount(pairs, ffn_ops, total / dense_total, pairs / dense_pairs, tokens / dense_tokens)


def profile_from_traces(traces: Sequence, L: int) -> AdaptiveProfile:
    """Empirical survival Pr(exit >= layer) and mean retention per layer.

    Retention at a layer averages over the traces that reached it; a
    running minimum keeps the profile nonincreasing.
    """
    if not traces:
        raise ValueError("no traces")
    exits = np.array([t.exit_layer for t in traces])
    survival = [float(np.mean(exits >= ell)) for ell in range(1, L + 1)]
    retention = []
    last = 1.0
    for ell in range(1, L + 1):
        vals = [t.token_counts[ell - 1] / t.token_counts[0] for t in traces if len(t.token_counts) >= ell]
        last = min(last, float(np.mean(vals))) if vals else last
        retention.append(last)
    return AdaptiveProfile(tuple(retention), tuple(survival))


def cost_sweep(T_values: Sequence[int], params: CostParams, profile: AdaptiveProfile) -> list[dict]:
    rows = []
    for T in T_values:
        dense = dense_expected_cost(T, params)
        eat = eat_expected_cost(T, profile, params)
        rows.append({"T": int(T), "dense_cost": dense, "eat_cost": eat, "ratio": eat / dense})
    return rows


def crossover_length(params: CostParams, profile: AdaptiveProfile) -> int:
    """Smallest integer T at which the adaptive cost drops below the dense cost."""
    # adaptive cost is c*T; dense is L*(alpha*T^2 + beta*T)
    c = eat_expected_cost(1.0, profile, params)
    T = max(1, int(np.floor((c - params.L * params.beta) / (params.L * params.alpha))))
    while T > 1 and eat_expected_cost(T - 1, profile, params) < dense_expected_cost(T - 1, params):
        T -= 1
    while not eat_expected_cost(T, profile, params) < dense_expected_cost(T, params):
        T += 1
    return T


def write_cost_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "dense_cost", "eat_cost", "ratio"])
        for r in rows:
            w.writerow([r["T"], f"{r['dense_cost']:.2f}", f"{r['eat_cost']:.2f}", f"{r['ratio']:.6f}"])
