"""Deterministic synthetic classification task.

Easy examples carry one class keyword near the front. Hard examples carry
two marker tokens, more than one attention window apart, whose classes
only determine the label jointly: ``label = (a + b) mod num_classes``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

CLS_TOKEN = "[CLS]"
CLS_ID = 0

Difficulty = Literal["easy", "hard"]


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 2
    vocab_size: int = 1000
    min_len: int = 16
    max_len: int = 48
    easy_fraction: float = 0.5
    n_train: int = 1600
    n_dev: int = 400
    keywords_per_class: int = 4
    front_window: int = 3
    min_gap: int = 9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ValueError("easy_fraction must be in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.easy_fraction < 1.0 and self.min_len <= self.min_gap:
            raise ValueError("min_len must exceed min_gap to place hard markers")
        if self.front_window > self.min_len:
            raise ValueError("front_window must fit inside min_len")
        reserved = 1 + self.num_classes * (self.keywords_per_class + 2)
        if self.vocab_size <= reserved:
            raise ValueError(f"vocab_size must exceed {reserved} reserved tokens")


@dataclass(frozen=True)
class Example:
    ids: tuple[int, ...]
    label: int
    difficulty: Difficulty

    @property
    def length(self) -> int:
        return len(self.ids)

    def to_json(self) -> str:
        return json.dumps({"ids": list(self.ids), "label": self.label, "difficulty": self.difficulty})

    @classmethod
    def from_json(cls, line: str) -> "Example":
        d = json.loads(line)
        return cls(tuple(d["ids"]), int(d["label"]), d["difficulty"])


class Vocab:
    """Token strings <-> ids. Id 0 is reserved for CLS."""

    def __init__(self, tokens: list[str]):
        if not tokens or tokens[0] != CLS_TOKEN:
            raise ValueError("vocabulary must start with the CLS token")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def for_task(cls, spec: TaskSpec) -> "Vocab":
        toks = [CLS_TOKEN]
        toks += [f"kw{c}_{j}" for c in range(spec.num_classes) for j in range(spec.keywords_per_class)]
        toks += [f"ha{c}" for c in range(spec.num_classes)]
        toks += [f"hb{c}" for c in range(spec.num_classes)]
        toks += [f"w{i}" for i in range(spec.vocab_size - len(toks))]
        return cls(toks)

    def keyword_ids(self, label: int) -> list[int]:
        return [i for t, i in self.index.items() if t.startswith(f"kw{label}_")]

    def filler_ids(self) -> np.ndarray:
        return np.array([i for t, i in self.index.items() if t.startswith("w")], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def tokenize(text_tokens: Iterable[str], vocab: Vocab) -> list[int]:
    ids = [CLS_ID]
    for tok in text_tokens:
        if tok == CLS_TOKEN:
            raise ValueError("CLS may only appear at position 0")
        try:
            ids.append(vocab.index[tok])
        except KeyError:
            raise KeyError(f"out-of-vocabulary token {tok!r}") from None
    return ids


def _balanced_labels(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _make_example(rng, spec: TaskSpec, vocab: Vocab, fillers: np.ndarray, label: int, easy: bool) -> Example:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    body = rng.choice(fillers, size=n)
    if easy:
        kw = vocab.keyword_ids(label)
        body[int(rng.integers(0, spec.front_window))] = kw[int(rng.integers(0, len(kw)))]
    else:
        a = int(rng.integers(0, spec.num_classes))
        b = (label - a) % spec.num_classes
        i = int(rng.integers(0, n - spec.min_gap))
        j = int(rng.integers(i + spec.min_gap, n))
        ta, tb = vocab.index[f"ha{a}"], vocab.index[f"hb{b}"]
        if rng.random() < 0.5:
            ta, tb = tb, ta
        body[i], body[j] = ta, tb
    return Example((CLS_ID, *body.tolist()), int(label), "easy" if easy else "hard")


def synthesize(spec: TaskSpec) -> tuple[list[Example], list[Example]]:
    """Train and dev splits, identical for identical specs; dev never repeats a train sequence."""
    rng = np.random.default_rng(spec.seed)
    vocab = Vocab.for_task(spec)
    fillers = vocab.filler_ids()
    seen: set[tuple[int, ...]] = set()
    splits = []
    for n in (spec.n_train, spec.n_dev):
        labels = _balanced_labels(rng, n, spec.num_classes)
        n_easy = int(round(spec.easy_fraction * n))
        easy_flags = rng.permutation(np.arange(n) < n_easy)
        out = []
        for label, easy in zip(labels, easy_flags):
            ex = _make_example(rng, spec, vocab, fillers, label, bool(easy))
            while ex.ids in seen:
                ex = _make_example(rng, spec, vocab, fillers, label, bool(easy))
            seen.add(ex.ids)
            out.append(ex)
        splits.append(out)
    return splits[0], splits[1]


def write_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[Example]:
    with open(path, encoding="utf-8") as fh:
        return [Example.from_json(line) for line in fh if line.strip()]


def task_spec_dict(spec: TaskSpec) -> dict:
    return asdict(spec)
