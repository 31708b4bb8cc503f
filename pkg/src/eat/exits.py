"""Early-exit heads, exit gating, and confidence calibration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Literal

import numpy as np

from eat.tensor import Matrix, add, matmul, parameter

GateMode = Literal["threshold", "patience"]

ECE_BINS = 15
ECE_TRIGGER = 0.02
TEMPERATURE_BOUNDS = (0.25, 8.0)
TEMPERATURE_GRID = 512


@dataclass(frozen=True)
class ExitPolicy:
    tau: float
    mode: GateMode = "threshold"
    calibration_temperature: float = 1.0

    def __post_init__(self):
        # tau == 0 is accepted as the "always exit" setting
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.mode not in ("threshold", "patience"):
            raise ValueError(f"unknown exit mode {self.mode!r}")
        if not self.calibration_temperature > 0:
            raise ValueError("calibration_temperature must be positive")


@dataclass
class ExitHead:
    layer_index: int
    weight: Matrix
    bias: Matrix

    @classmethod
    def init(cls, rng: np.random.Generator, layer_index: int, d: int, num_classes: int, std: float = 0.02):
        return cls(
            layer_index,
            parameter(rng.normal(0.0, std, size=(d, num_classes))),
            parameter(np.zeros((1, num_classes))),
        )

    def __call__(self, h_cls: Matrix) -> Matrix:
        if h_cls.cols != self.weight.rows:
            raise ValueError(f"head expects width {self.weight.rows}, got {h_cls.cols}")
        return add(matmul(h_cls, self.weight), self.bias)


def _validate_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must be a nonnegative vector summing to 1")
    return p


def exit_decision(probs, policy: ExitPolicy) -> bool:
    return bool(_validate_probs(probs).max() >= policy.tau)


def patience_decision(argmax_prev: int, argmax_cur: int, probs_cur, policy: ExitPolicy) -> bool:
    """Exit only when consecutive heads agree *and* the confidence gate fires."""
    return argmax_prev == argmax_cur and exit_decision(probs_cur, policy)


@dataclass
class CalibrationReport:
    ece: float
    bin_count: int
    bin_sizes: list[int]
    bin_accuracy: list[float]
    bin_confidence: list[float]
    fitted_temperature: float | None = None

    @property
    def n(self) -> int:
        return sum(self.bin_sizes)

    def recompute_ece(self) -> float:
        n = self.n
        return sum(s / n * abs(a - c) for s, a, c in zip(self.bin_sizes, self.bin_accuracy, self.bin_confidence) if s)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        return cls(**json.loads(text))


def compute_ece(confidences, correct, bins: int = ECE_BINS) -> CalibrationReport:
    """Expected calibration error over equal-width bins [lo, hi); the last bin includes 1.0."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty sample is undefined")
    if conf.shape != ok.shape:
        raise ValueError("confidences and correctness flags must have equal length")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    sizes, accs, confs = [], [], []
    ece = 0.0
    n = conf.size
    for b in range(bins):
        sel = idx == b
        size = int(sel.sum())
        sizes.append(size)
        if size == 0:
            accs.append(0.0)
            confs.append(0.0)
            continue
        a, c = float(ok[sel].mean()), float(conf[sel].mean())
        accs.append(a)
        confs.append(c)
        ece += size / n * abs(a - c)
    return CalibrationReport(ece, bins, sizes, accs, confs)


def nll_at_temperature(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits, labels) -> float:
    """Temperature minimizing NLL of ``softmax(logits / T)``.

    Log-uniform grid over [0.25, 8] followed by a golden-section pass
    around the best grid point. Never returns a T worse than T = 1.
    """
    logits = np.asarray(logits.data if isinstance(logits, Matrix) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError("one label per logits row required")
    if logits.shape[1] < 2 or logits.shape[0] == 0:
        return 1.0
    nll = lambda t: nll_at_temperature(logits, labels, t)
    grid = np.exp(np.linspace(math.log(TEMPERATURE_BOUNDS[0]), math.log(TEMPERATURE_BOUNDS[1]), TEMPERATURE_GRID))
    values = [nll(t) for t in grid]
    i = int(np.argmin(values))
    lo = math.log(grid[max(i - 1, 0)])
    hi = math.log(grid[min(i + 1, len(grid) - 1)])
    # golden-section over log T
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = nll(math.exp(c)), nll(math.exp(d))
    for _ in range(40):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = nll(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = nll(math.exp(d))
    best = math.exp((a + b) / 2)
    if nll(best) > values[i]:
        best = float(grid[i])
    return best if nll(best) <= nll(1.0) else 1.0


def calibrate_if_needed(report: CalibrationReport, policy: ExitPolicy, logits=None, labels=None) -> ExitPolicy:
    """Attach a fitted temperature when ECE exceeds 2%.

    The temperature comes from ``report.fitted_temperature`` when set,
    otherwise it is fitted on ``logits``/``labels``.
    """
    if report.ece <= ECE_TRIGGER:
        return policy
    temp = report.fitted_temperature
    if temp is None:
        if logits is None or labels is None:
            raise ValueError("ECE above threshold: need logits and labels to fit a temperature")
        temp = fit_temperature(logits, labels)
        report.fitted_temperature = temp
    return replace(policy, calibration_temperature=float(temp))


def softmax_np(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
