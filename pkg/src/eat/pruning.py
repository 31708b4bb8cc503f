"""Progressive token pruning by L2-norm importance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from eat.tensor import Matrix, gather_rows

CLS_INDEX = 0


@dataclass(frozen=True)
class PruneSchedule:
    prune_layers: tuple[int, ...] = (2, 4)
    target_ratio: float = 0.3
    anneal_start_step: int = 0
    anneal_end_step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_ratio < 1.0:
            raise ValueError(f"target_ratio must be in [0, 1), got {self.target_ratio}")
        if self.anneal_start_step > self.anneal_end_step:
            raise ValueError("anneal_start_step must not exceed anneal_end_step")
        if any(b <= a for a, b in zip(self.prune_layers, self.prune_layers[1:])):
            raise ValueError("prune_layers must be strictly increasing")


@dataclass
class LayerState:
    h: Matrix
    kept_original_indices: list[int] = field(default_factory=list)
    layer_index: int = 0

    def __post_init__(self):
        if not self.kept_original_indices:
            self.kept_original_indices = list(range(self.h.rows))
        if len(self.kept_original_indices) != self.h.rows:
            raise ValueError("one original index per hidden row required")

    @property
    def t(self) -> int:
        return self.h.rows


def importance_scores(h: Matrix | np.ndarray) -> np.ndarray:
    data = h.data if isinstance(h, Matrix) else np.asarray(h)
    return np.sqrt((data.astype(np.float64) ** 2).sum(axis=1))


def kept_count(t: int, p: float) -> int:
    """Non-CLS tokens kept out of ``t`` total: ceil((1 - p) * (t - 1))."""
    # guard against 0.7 * 100 == 70.00000000000001 style round-up
    return min(t - 1, max(0, math.ceil((1.0 - p) * (t - 1) - 1e-9)))


def select_kept(scores, p: float, cls_index: int = CLS_INDEX) -> list[int]:
    """Positions surviving pruning at ratio ``p``, ascending.

    CLS is always kept; among the rest the highest scores win, ties going
    to the lower position.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1], got {p}")
    scores = np.asarray(scores, dtype=np.float64)
    t = len(scores)
    n_keep = kept_count(t, p)
    others = np.array([i for i in range(t) if i != cls_index], dtype=np.int64)
    # stable sort on -score keeps lower index first among equal scores
    order = others[np.argsort(-scores[others], kind="stable")]
    return sorted([cls_index, *order[:n_keep].tolist()])


def anneal_ratio(step: int, schedule: PruneSchedule, layer: int) -> float:
    if layer not in schedule.prune_layers:
        return 0.0
    start, end = schedule.anneal_start_step, schedule.anneal_end_step
    if step < start:
        return 0.0
    if step >= end:
        return schedule.target_ratio
    return schedule.target_ratio * (step - start) / (end - start)


def apply_pruning(state: LayerState, kept) -> LayerState:
    kept = list(kept)
    if CLS_INDEX not in kept:
        raise ValueError("kept positions must include CLS")
    if any(b <= a for a, b in zip(kept, kept[1:])):
        raise ValueError("kept positions must be strictly increasing")
    if kept == list(range(state.t)):
        return state
    orig = [state.kept_original_indices[i] for i in kept]
    return LayerState(gather_rows(state.h, kept), orig, state.layer_index)
