"""AdamW training loop with warmup/decay, clipping and layer-wise learning rates."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import serialization
from .data import ReformulatedExample
from .encoder import EncoderConfig
from .errors import CheckpointError, ComputationError, ContractError
from .qa_model import QAModel
from .regularizers import (
    STUDENT,
    TEACHER,
    LossWeights,
    PerturbationConfig,
    TeacherLabel,
    TeacherLabelSet,
    teacher_label,
    total_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 48
    epochs: int = 2
    max_steps: int = 0  # 0: derive from epochs
    warmup_fraction: float = 0.06
    clip_norm: float = 1.0
    layerwise_decay: float = 0.9
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    beta1: float = 5.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 1.0
    epsilon: float = 1.0
    xi_noise: float = 1e-3
    seed: int = 0
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    max_seq_len: int = 512
    max_answer_len: int = 30

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in [0, 1)")
        for name in ("learning_rate", "batch_size", "epochs", "clip_norm", "layerwise_decay"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.layerwise_decay > 1:
            raise ContractError("layerwise_decay must be in (0, 1]")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta1, self.beta2, self.beta3, self.beta4)

    @property
    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(self.epsilon, self.xi_noise)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers, num_heads=self.num_heads, hidden_dim=self.hidden_dim,
            vocab_size=vocab_size, max_seq_len=self.max_seq_len,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise ContractError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
            values[key] = int(raw) if types[key] in (int, "int") else float(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ---------------------------------------------------------------- schedule
def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return int(config.warmup_fraction * total_steps)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to the peak over the warmup steps, then linear decay
    to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    peak = config.learning_rate
    warm = warmup_steps(total_steps, config)
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    return peak * (total_steps - step) / (total_steps - warm)


def layer_lr(base_lr: float, layer_index: int, num_layers: int, decay: float) -> float:
    """``layer_index`` counts from the bottom: 0 embeddings, 1..L encoder
    layers, L + 1 the heads, which get ``base_lr``."""
    if not 0 < decay <= 1:
        raise ContractError("decay must be in (0, 1]")
    return base_lr * decay ** (num_layers + 1 - layer_index)


_LAYER_RE = re.compile(r"^encoder\.layers\.(\d+)\.")


def param_layer(name: str, num_layers: int) -> int:
    if name.startswith("embeddings."):
        return 0
    m = _LAYER_RE.match(name)
    if m:
        return int(m.group(1)) + 1
    return num_layers + 1


def _decays(name: str) -> bool:
    return not (name.endswith("bias") or name.endswith("gain"))


# --------------------------------------------------------------- optimizer
class AdamW:
    """Adam with decoupled weight decay and a per-parameter lr multiplier."""

    def __init__(
        self,
        params: Mapping[str, "np.ndarray"],
        lr_scale: Optional[Mapping[str, float]] = None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        decay_mask: Optional[Mapping[str, bool]] = None,
    ):
        self.params = params
        self.lr_scale = dict(lr_scale or {name: 1.0 for name in params})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = dict(decay_mask or {name: True for name in params})
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            rate = lr * self.lr_scale[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decay_mask[name]:
                p.data = p.data - rate * self.weight_decay * p.data
            p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Mapping, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def global_grad_norm(params: Mapping) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))


def build_optimizer(model: QAModel, config: TrainConfig) -> AdamW:
    n = model.config.num_layers
    scale = {
        name: layer_lr(1.0, param_layer(name, n), n, config.layerwise_decay) for name in model.params
    }
    return AdamW(
        model.params, scale, (config.adam_beta1, config.adam_beta2), config.adam_eps,
        config.weight_decay, {name: _decays(name) for name in model.params},
    )


# -------------------------------------------------------------------- step
def vat_seed(config: TrainConfig, step: int) -> int:
    return (config.seed * 1_000_003 + step) * 4096


def train_step(
    batch: Sequence[ReformulatedExample],
    model: QAModel,
    optimizer: AdamW,
    config: TrainConfig,
    step: int,
    total_steps: int,
    mode: str = TEACHER,
    teacher_labels: Optional[Mapping[str, TeacherLabel]] = None,
) -> dict[str, float]:
    """One update: losses, backward, global clip, AdamW with per-layer lr."""
    model.zero_grad()
    breakdown, _ = total_loss(
        batch, model, config.weights, mode, config.perturbation, teacher_labels, vat_seed(config, step)
    )
    values = breakdown.as_dict()
    for name, value in values.items():
        if not math.isfinite(value):
            raise ComputationError(f"non-finite {name} loss ({value}) at step {step}")
    breakdown.total.backward()
    norm = clip_grad_norm(model.params, config.clip_norm)
    lr = lr_at(step, total_steps, config)
    optimizer.step(lr)
    values.update({"step": step, "lr": lr, "grad_norm": norm})
    return values


class Trainer:
    """Deterministic mini-batch loop; batch order and VAT noise derive from the
    seed and the step index only, so a resumed run replays the same steps."""

    def __init__(
        self,
        model: QAModel,
        config: TrainConfig,
        mode: str = TEACHER,
        teacher_labels: Optional[Mapping[str, TeacherLabel]] = None,
        vocab_hash: str = "",
    ):
        if mode == STUDENT and teacher_labels is None:
            raise ContractError("student training needs teacher labels")
        self.model = model
        self.config = config
        self.mode = mode
        self.teacher_labels = teacher_labels
        self.vocab_hash = vocab_hash
        self.optimizer = build_optimizer(model, config)
        self.step = 0

    def total_steps(self, n_examples: int) -> int:
        if self.config.max_steps:
            return self.config.max_steps
        return self.config.epochs * math.ceil(n_examples / self.config.batch_size)

    def batch_for_step(self, examples: Sequence[ReformulatedExample], step: int) -> list[ReformulatedExample]:
        bs = min(self.config.batch_size, len(examples))
        per_epoch = math.ceil(len(examples) / bs)
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(examples))
        return [examples[i] for i in order[k * bs : (k + 1) * bs]]

    def train(
        self,
        examples: Sequence[ReformulatedExample],
        until: Optional[int] = None,
        callback: Optional[Callable[[dict], None]] = None,
    ) -> list[dict]:
        examples = [ex for ex in examples if ex.usable]
        if not examples:
            raise ContractError("no usable training examples")
        total = self.total_steps(len(examples))
        stop = total if until is None else min(until, total)
        log = []
        while self.step < stop:
            rec = train_step(
                self.batch_for_step(examples, self.step), self.model, self.optimizer, self.config,
                self.step, total, self.mode, self.teacher_labels,
            )
            self.step += 1
            log.append(rec)
            if callback is not None:
                callback(rec)
        return log

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.config, self.vocab_hash, self.step, self.mode)

    @classmethod
    def resume(
        cls, path, teacher_labels=None, vocab_hash: Optional[str] = None
    ) -> "Trainer":
        ckpt = load_checkpoint(path, vocab_hash)
        trainer = cls(ckpt.model, ckpt.config, ckpt.mode, teacher_labels, ckpt.vocab_hash)
        trainer.optimizer.m = ckpt.adam_m
        trainer.optimizer.v = ckpt.adam_v
        trainer.optimizer.step_count = ckpt.optimizer_steps
        trainer.step = ckpt.step
        return trainer


LOG_COLUMNS = ("step", "lr", "total", "base", "rationale", "at", "vat", "kd", "grad_norm")


def write_log(path, log: Sequence[dict]) -> None:
    lines = ["\t".join(LOG_COLUMNS)]
    for rec in log:
        lines.append("\t".join(repr(rec[c]) if c != "step" else str(rec[c]) for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    model: QAModel
    config: TrainConfig
    vocab_hash: str
    step: int
    mode: str
    optimizer_steps: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]


def save_checkpoint(
    path, model: QAModel, optimizer: AdamW, config: TrainConfig, vocab_hash: str, step: int, mode: str = TEACHER
) -> None:
    arrays = {}
    for name, p in model.params.items():
        arrays["param/" + name] = p.data
    for name in model.params:
        arrays["adam_m/" + name] = optimizer.m[name]
        arrays["adam_v/" + name] = optimizer.v[name]
    meta = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "vocab_hash": vocab_hash,
        "step": step,
        "optimizer_steps": optimizer.step_count,
        "mode": mode,
    }
    serialization.save(path, arrays, meta)


def load_checkpoint(path, vocab_hash: Optional[str] = None) -> Checkpoint:
    arrays, meta = serialization.load(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a training checkpoint")
    if vocab_hash is not None and meta["vocab_hash"] != vocab_hash:
        raise ContractError(f"{path} was trained with vocabulary {meta['vocab_hash']}, expected {vocab_hash}")
    model = QAModel.initialize(EncoderConfig(**meta["model_config"]))
    model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    return Checkpoint(
        model=model,
        config=TrainConfig(**meta["train_config"]),
        vocab_hash=meta["vocab_hash"],
        step=meta["step"],
        mode=meta["mode"],
        optimizer_steps=meta["optimizer_steps"],
        adam_m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        adam_v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
    )


# ------------------------------------------------------------ teacher labels
def teacher_distributions(model: QAModel, examples: Sequence[ReformulatedExample]) -> dict[str, tuple]:
    out = {}
    for ex in examples:
        o = model.forward(ex)
        out[ex.example_id] = (o.p_start.data, o.p_end.data)
    return out


def generate_teacher_labels(
    checkpoints: Sequence, examples: Sequence[ReformulatedExample], vocab_hash: Optional[str] = None
) -> TeacherLabelSet:
    """Average clean-pass distributions of several teacher checkpoints."""
    if not checkpoints:
        raise ContractError("need at least one teacher checkpoint")
    per_teacher = []
    for path in checkpoints:
        ckpt = load_checkpoint(path, vocab_hash)
        per_teacher.append(teacher_distributions(ckpt.model, examples))
    labels = TeacherLabelSet()
    for ex in examples:
        labels[ex.example_id] = teacher_label([t[ex.example_id] for t in per_teacher])
    return labels
