"""The adaptive encoder: windowed attention layers, token pruning between
layers, and confidence-gated exit heads, plus its training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from eat import tensor as tn
from eat.attention import AttentionParams, attend, build_sparse_mask, count_allowed_pairs, init_attention
from eat.data import CLS_ID, Example
from eat.exits import ExitHead, ExitPolicy, exit_decision, patience_decision, softmax_np
from eat.pruning import LayerState, PruneSchedule, anneal_ratio, apply_pruning, importance_scores, select_kept
from eat.tensor import Matrix

log = logging.getLogger(__name__)

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    d: int = 64
    d_ff: int = 128
    heads: int = 4
    k: int | None = 8  # None = dense attention
    vocab_size: int = 1000
    num_classes: int = 2
    max_seq_len: int = 128
    exit_layer: int = 4
    patience_layer: int | None = None  # 3 adds the auxiliary head used by patience gating
    lambda_exit: float = 0.3
    lambda_final: float = 1.0
    lambda_patience: float = 0.1
    mu: float = 0.0
    distill_temperature: float = 2.0
    prune_layers: tuple[int, ...] = (2, 4)
    prune_ratio: float = 0.3
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "prune_layers", tuple(self.prune_layers))
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.exit_layer <= self.layers:
            raise ValueError("exit_layer must lie in [1, layers]")
        if self.patience_layer is not None and not 1 <= self.patience_layer < self.exit_layer:
            raise ValueError("patience_layer must precede exit_layer")
        if min(self.lambda_exit, self.lambda_final, self.lambda_patience, self.mu) < 0:
            raise ValueError("loss weights must be nonnegative")
        if any(not 1 <= l < self.layers for l in self.prune_layers):
            raise ValueError("prune layers must lie in [1, layers)")
        if self.k is not None and (self.k < 0 or self.k % 2):
            raise ValueError("window k must be a nonnegative even number")

    @property
    def exit_layers(self) -> tuple[int, ...]:
        ls = {self.exit_layer, self.layers}
        if self.patience_layer is not None:
            ls.add(self.patience_layer)
        return tuple(sorted(ls))

    def loss_weights(self) -> dict[int, float]:
        w = {self.exit_layer: self.lambda_exit}
        if self.patience_layer is not None:
            w[self.patience_layer] = self.lambda_patience
        w[self.layers] = self.lambda_final
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune_layers"] = list(self.prune_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ForwardTrace:
    exit_layer: int
    token_counts: list[int]  # tokens entering each executed layer
    allowed_pairs: list[int]  # attention pairs charged at each executed layer
    exit_probs: dict[int, np.ndarray]
    kept_indices: list[int]
    exit_reason: str = "final"

    @property
    def input_length(self) -> int:
        return self.token_counts[0]

    @property
    def final_retention(self) -> float:
        return self.token_counts[-1] / self.token_counts[0]

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.exit_probs[self.exit_layer]))

    @property
    def confidence(self) -> float:
        return float(np.max(self.exit_probs[self.exit_layer]))

    def to_dict(self) -> dict:
        return {
            "exit_layer": self.exit_layer,
            "token_counts": list(self.token_counts),
            "allowed_pairs": list(self.allowed_pairs),
            "final_retention": self.final_retention,
            "exit_reason": self.exit_reason,
            "exit_probs": {str(k): v.tolist() for k, v in self.exit_probs.items()},
        }


@dataclass
class EncoderLayer:
    attn: AttentionParams
    ln1_g: Matrix
    ln1_b: Matrix
    w1: Matrix
    b1: Matrix
    w2: Matrix
    b2: Matrix
    ln2_g: Matrix
    ln2_b: Matrix

    def attention(self, h: Matrix, mask, eps: float) -> Matrix:
        return tn.layer_norm(tn.add(h, attend(h, self.attn, mask)), self.ln1_g, self.ln1_b, eps)

    def ffn(self, h: Matrix, eps: float) -> Matrix:
        f = tn.add(tn.matmul(tn.gelu(tn.add(tn.matmul(h, self.w1), self.b1)), self.w2), self.b2)
        return tn.layer_norm(tn.add(h, f), self.ln2_g, self.ln2_b, eps)

    def named(self, prefix: str) -> dict[str, Matrix]:
        out = {f"{prefix}.attn.{n}": m for n, m in self.attn.matrices().items()}
        for n in ("ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
            out[f"{prefix}.{n}"] = getattr(self, n)
        return out


class _Timer:
    def __init__(self, profile: dict | None):
        self.profile = profile
        self.t = time.perf_counter() if profile is not None else 0.0

    def lap(self, key: str) -> None:
        if self.profile is None:
            return
        now = time.perf_counter()
        self.profile[key] = self.profile.get(key, 0.0) + now - self.t
        self.t = now


class EATModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std
        self.tok_emb = tn.parameter(rng.normal(0.0, std, size=(c.vocab_size, c.d)))
        self.pos_emb = tn.parameter(rng.normal(0.0, std, size=(c.max_seq_len, c.d)))
        self.emb_ln_g = tn.parameter(np.ones((1, c.d)))
        self.emb_ln_b = tn.parameter(np.zeros((1, c.d)))
        self.layers = [
            EncoderLayer(
                init_attention(rng, c.d, c.heads, std),
                tn.parameter(np.ones((1, c.d))),
                tn.parameter(np.zeros((1, c.d))),
                tn.parameter(rng.normal(0.0, std, size=(c.d, c.d_ff))),
                tn.parameter(np.zeros((1, c.d_ff))),
                tn.parameter(rng.normal(0.0, std, size=(c.d_ff, c.d))),
                tn.parameter(np.zeros((1, c.d))),
                tn.parameter(np.ones((1, c.d))),
                tn.parameter(np.zeros((1, c.d))),
            )
            for _ in range(c.layers)
        ]
        self.heads = {l: ExitHead.init(rng, l, c.d, c.num_classes, std) for l in c.exit_layers}

    def named_parameters(self) -> dict[str, Matrix]:
        out = {
            "tok_emb": self.tok_emb,
            "pos_emb": self.pos_emb,
            "emb_ln_g": self.emb_ln_g,
            "emb_ln_b": self.emb_ln_b,
        }
        for i, layer in enumerate(self.layers, start=1):
            out.update(layer.named(f"layer{i}"))
        for l, head in self.heads.items():
            out[f"head{l}.weight"] = head.weight
            out[f"head{l}.bias"] = head.bias
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def _check_input(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("empty input")
        if ids.size > self.config.max_seq_len:
            raise ValueError(f"input length {ids.size} exceeds max_seq_len {self.config.max_seq_len}")
        if ids[0] != CLS_ID:
            raise ValueError("input must start with the CLS id")
        if np.any(ids[1:] == CLS_ID):
            raise ValueError("CLS id may only appear at position 0")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("unknown token id")
        return ids

    def embed(self, ids: np.ndarray) -> Matrix:
        c = self.config
        h = tn.add(tn.gather_rows(self.tok_emb, ids), tn.gather_rows(self.pos_emb, np.arange(ids.size)))
        return tn.layer_norm(h, self.emb_ln_g, self.emb_ln_b, c.ln_eps)

    def forward(
        self,
        ids: Sequence[int],
        mode: Mode = "infer",
        policy: ExitPolicy | None = None,
        prune_ratios: dict[int, float] | None = None,
        profile: dict | None = None,
    ) -> tuple[dict[int, Matrix], ForwardTrace]:
        """Run the encoder on one CLS-prefixed sequence.

        Returns exit-head logits keyed by layer and the trace of what ran.
        ``train`` evaluates every head and never stops early; ``infer``
        evaluates the early heads only when a ``policy`` is given and halts
        at the exit layer once the gate fires. ``prune_ratios`` defaults to
        the configured target ratio at each prune layer.
        """
        c = self.config
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        ids = self._check_input(ids)
        if prune_ratios is None:
            prune_ratios = {l: c.prune_ratio for l in c.prune_layers}
        if policy is not None and policy.mode == "patience" and c.patience_layer is None:
            raise ValueError("patience gating needs a model built with patience_layer")
        timer = _Timer(profile)
        state = LayerState(self.embed(ids))
        timer.lap("embed")

        evaluate = set(c.exit_layers) if (mode == "train" or policy is not None) else {c.layers}
        if mode == "infer" and policy is not None and policy.mode == "threshold":
            evaluate.discard(c.patience_layer)

        logits: dict[int, Matrix] = {}
        probs: dict[int, np.ndarray] = {}
        counts: list[int] = []
        pairs: list[int] = []
        exit_layer, reason = c.layers, "final"
        for ell, layer in enumerate(self.layers, start=1):
            t = state.t
            counts.append(t)
            mask = build_sparse_mask(t, c.k)
            pairs.append(count_allowed_pairs(mask))
            h = layer.attention(state.h, mask, c.ln_eps)
            timer.lap("attention")
            h = layer.ffn(h, c.ln_eps)
            timer.lap("ffn")
            state = LayerState(h, state.kept_original_indices, ell)

            if ell in evaluate:
                z = self.heads[ell](tn.gather_rows(h, [0]))
                logits[ell] = z
                temp = policy.calibration_temperature if (policy is not None and ell == c.exit_layer) else 1.0
                probs[ell] = softmax_np(z.data[0], temp)
                timer.lap("exit_heads")
                if mode == "infer" and policy is not None and ell == c.exit_layer and ell < c.layers:
                    if policy.mode == "patience":
                        prev = int(np.argmax(probs[c.patience_layer]))
                        fire = patience_decision(prev, int(np.argmax(probs[ell])), probs[ell], policy)
                    else:
                        fire = exit_decision(probs[ell], policy)
                    timer.lap("exit_heads")
                    if fire:
                        exit_layer, reason = ell, policy.mode
                        break

            p = prune_ratios.get(ell, 0.0)
            if p > 0 and ell < c.layers:
                kept = select_kept(importance_scores(state.h), p)
                state = apply_pruning(state, kept)
                timer.lap("pruning")

        trace = ForwardTrace(exit_layer, counts, pairs, probs, list(state.kept_original_indices), reason)
        return logits, trace

    def predict_logits(self, ids: Sequence[int]) -> dict[int, np.ndarray]:
        """Every head's logits with no early stop (used for calibration and teachers)."""
        with tn.no_grad():
            logits, _ = self.forward(ids, mode="train")
        return {l: z.data[0].astype(np.float64) for l, z in logits.items()}

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: m.data for n, m in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for n, m in params.items():
            arr = np.asarray(state[n])
            if arr.shape != m.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {m.shape}")
            m.data = arr.astype(tn.default_dtype())

    def save(self, path: str | Path, train_config: TrainConfig | None = None, extra: dict | None = None) -> None:
        path = Path(path)
        meta = {"model_config": self.config.to_dict()}
        tn.save_checkpoint(path, self.state_dict(), meta)
        sidecar = {"model_config": self.config.to_dict(), "train_config": asdict(train_config) if train_config else None}
        if extra:
            sidecar.update(extra)
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EATModel":
        tensors, meta = tn.load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]))
        model.load_state_dict(tensors)
        return model


def predict_adaptive(ids: Sequence[int], model: EATModel, policy: ExitPolicy | None) -> tuple[int, ForwardTrace]:
    with tn.no_grad():
        _, trace = model.forward(ids, mode="infer", policy=policy)
    return trace.prediction, trace


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def classification_loss(logits: dict[int, Matrix], label: int, config: ModelConfig) -> Matrix:
    """Lambda-weighted cross-entropy summed over the exit heads present in ``logits``."""
    weights = config.loss_weights()
    total = None
    for ell, z in sorted(logits.items()):
        w = weights.get(ell, 0.0)
        if w == 0.0:
            continue
        term = tn.scale(tn.cross_entropy(z, [label]), w)
        total = term if total is None else tn.add(total, term)
    if total is None:
        return tn.constant(np.zeros((1, 1)))
    return total


def distillation_loss(teacher_logits, student_logits: Matrix, temperature: float, mu: float) -> Matrix:
    """``mu * T^2 * KL(softmax(teacher / T) || softmax(student / T))``, averaged over rows."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    teacher = np.atleast_2d(np.asarray(teacher_logits.data if isinstance(teacher_logits, Matrix) else teacher_logits, dtype=np.float64))
    if teacher.shape != student_logits.shape:
        raise tn.DimensionError(f"teacher {teacher.shape} vs student {student_logits.shape}")
    if mu == 0:
        return tn.constant(np.zeros((1, 1)))
    dtype = student_logits.data.dtype
    pt = softmax_np(teacher, temperature)
    log_pt = np.log(np.clip(pt, 1e-300, None))
    log_ps = tn.log_softmax_rows(tn.scale(student_logits, 1.0 / temperature))
    rows = student_logits.rows
    # KL = sum pt*log pt - sum pt*log ps ; the first term is constant
    const = float((pt * log_pt).sum()) / rows
    cross = tn.sum_all(tn.mul(log_ps, tn.constant((pt / rows).astype(dtype))))
    kl = tn.add(tn.scale(cross, -1.0), tn.constant(np.full((1, 1), const, dtype=dtype)))
    return tn.scale(kl, mu * temperature**2)


def total_loss(cls_loss: Matrix, distill: Matrix) -> Matrix:
    return tn.add(cls_loss, distill)


def example_loss(model: EATModel, ex_ids, label: int, prune_ratios=None, teacher_logits=None) -> tuple[Matrix, ForwardTrace, dict[int, Matrix]]:
    c = model.config
    logits, trace = model.forward(ex_ids, mode="train", prune_ratios=prune_ratios)
    loss = classification_loss(logits, label, c)
    if teacher_logits is not None and c.mu > 0:
        loss = total_loss(loss, distillation_loss(teacher_logits, logits[c.layers], c.distill_temperature, c.mu))
    return loss, trace, logits


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay. Biases, norms and embeddings are not decayed."""

    def __init__(self, params: dict[str, Matrix], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0
        self.decay = {n: n.rsplit(".", 1)[-1].startswith("w") for n in params}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            upd = (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + c.adam_eps)
            if self.decay[n]:
                p.data = p.data - lr * c.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then constant."""
    warm = max(1, int(round(cfg.warmup_fraction * total_steps)))
    return cfg.lr * min(1.0, (step + 1) / warm)


def default_schedule(config: ModelConfig, steps_per_epoch: int, epochs: int) -> PruneSchedule:
    """Pruning off for epoch 1, then a linear ramp to the target across the remaining epochs."""
    start = steps_per_epoch
    end = max(start, epochs * steps_per_epoch - 1)
    return PruneSchedule(config.prune_layers, config.prune_ratio, start, end)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: EATModel
    log: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def _clip(params: dict[str, Matrix], max_norm: float) -> float:
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return norm


def teacher_logits_for(teacher: EATModel, examples: Sequence[Example]) -> list[np.ndarray]:
    L = teacher.config.layers
    return [teacher.predict_logits(ex.ids)[L].reshape(1, -1) for ex in examples]


def train(
    dataset: Sequence[Example],
    model: EATModel,
    train_config: TrainConfig,
    schedule: PruneSchedule | None = None,
    teacher: EATModel | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Two-stage fine-tuning: epoch 1 without pruning, then annealed pruning.

    Examples in a batch run one at a time; their gradients are averaged
    before each optimizer step.
    """
    if not dataset:
        raise ValueError("empty training set")
    cfg = train_config
    c = model.config
    n = len(dataset)
    spe = math.ceil(n / cfg.batch_size)
    total = spe * cfg.epochs
    if schedule is None:
        schedule = default_schedule(c, spe, cfg.epochs)
    params = model.named_parameters()
    opt = AdamW(params, cfg)
    targets = teacher_logits_for(teacher, dataset) if (teacher is not None and c.mu > 0) else None
    result = TrainResult(model)
    fh = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng(cfg.seed * 1000 + epoch).permutation(n)
            ep_loss, ep_correct, ep_seen = 0.0, 0, 0
            for b in range(spe):
                batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                ratios = {l: anneal_ratio(step, schedule, l) for l in c.prune_layers}
                if epoch == 1:
                    ratios = {l: 0.0 for l in c.prune_layers}
                model.zero_grad()
                batch_loss = 0.0
                for i in batch:
                    ex = dataset[i]
                    tgt = targets[i] if targets is not None else None
                    loss, trace, _ = example_loss(model, ex.ids, ex.label, ratios, tgt)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingDiverged(f"non-finite loss {value} at step {step} (epoch {epoch}, example {int(i)})")
                    tn.backward(tn.scale(loss, 1.0 / len(batch)))
                    batch_loss += value
                    ep_correct += int(trace.prediction == ex.label)
                ep_loss += batch_loss
                ep_seen += len(batch)
                gnorm = _clip(params, cfg.grad_clip)
                lr = lr_at(step, total, cfg)
                opt.step(lr)
                entry = {"step": step, "epoch": epoch, "loss": batch_loss / len(batch), "lr": lr, "grad_norm": gnorm}
                entry.update({f"p_{l}": ratios[l] for l in c.prune_layers})
                result.log.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                step += 1
            stats = {"epoch": epoch, "loss": ep_loss / ep_seen, "train_accuracy": ep_correct / ep_seen}
            result.epochs.append(stats)
            log.info("epoch %d loss %.4f acc %.3f", epoch, stats["loss"], stats["train_accuracy"])
    finally:
        if fh:
            fh.close()
    model.zero_grad()
    return result


def teacher_config(config: ModelConfig) -> ModelConfig:
    """Dense attention, no pruning, no early heads; same family otherwise."""
    return replace(config, k=None, prune_layers=(), exit_layer=config.layers, patience_layer=None, mu=0.0)


def train_teacher(dataset: Sequence[Example], config: ModelConfig, train_config: TrainConfig) -> EATModel:
    teacher = EATModel(teacher_config(config), seed=train_config.seed + 7919)
    train(dataset, teacher, train_config)
    return teacher


def accuracy(model: EATModel, examples: Sequence[Example], policy: ExitPolicy | None = None) -> float:
    hits = sum(predict_adaptive(ex.ids, model, policy)[0] == ex.label for ex in examples)
    return hits / len(examples)
