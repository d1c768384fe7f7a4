"""Span/class extraction heads, rationale tagging and the supervised losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import serialization
from . import tensor as T
from .data import CLASS_SLOT, NO, UNKNOWN, YES, GoldLabel, ReformulatedExample
from .encoder import INIT_STD, Encoder, EncoderConfig, init_encoder_params
from .errors import CheckpointError, ContractError
from .tensor import PROB_FLOOR, Tensor

MASKED_LOGIT = -1e30
CLASS_ORDER = (YES, NO, UNKNOWN)
CLASS_SCORE_FACTOR = 2.0


@dataclass
class QAModelOutput:
    start_logits: Tensor  # T
    end_logits: Tensor  # T
    class_logits: Tensor  # 3: yes, no, unknown
    rationale_probs: Tensor  # T
    p_start: Tensor  # T + 3
    p_end: Tensor  # T + 3


# -------------------------------------------------------------- head maths
def rationale_probs(hidden: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """sigmoid(w2 . relu(W1 h_t)) for every row of ``hidden``."""
    return T.sigmoid(T.relu(hidden @ w1) @ w2)


def rationale_attention_pool(
    hidden: Tensor, p_r: Tensor, mask: Optional[np.ndarray], w1: Tensor, w2: Tensor
) -> Tensor:
    """Attention over rationale-weighted states; the pooled sum weights the
    *unscaled* hidden rows."""
    n = hidden.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if p_r.shape != (n,) or len(mask) != n:
        raise ContractError(f"shape mismatch: hidden {hidden.shape}, p_r {p_r.shape}, mask {len(mask)}")
    if not mask.any():
        raise ContractError("rationale attention needs at least one unmasked token")
    weighted = hidden * T.reshape(p_r, (n, 1))
    scores = T.relu(weighted @ w1) @ w2
    attn = T.softmax(T.masked_fill(scores, ~mask, -np.inf), axis=0)
    return T.reshape(T.reshape(attn, (1, n)) @ hidden, (hidden.shape[1],))


def class_logits(pooled: Tensor, rationale_repr: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Yes/no/unknown logits from the concatenation (rationale_repr, pooled)."""
    if pooled.shape != rationale_repr.shape:
        raise ContractError(f"pooled {pooled.shape} and rationale {rationale_repr.shape} differ")
    both = T.concat([rationale_repr, pooled], axis=0)
    return T.reshape(T.reshape(both, (1, -1)) @ weight, (3,)) + bias


def joint_distributions(
    l_s: Tensor, l_e: Tensor, cls_logits: Tensor, context_mask: np.ndarray
) -> tuple[Tensor, Tensor]:
    off_context = ~np.asarray(context_mask, dtype=bool)
    p_start = T.softmax(T.concat([T.masked_fill(l_s, off_context, MASKED_LOGIT), cls_logits]), axis=0)
    p_end = T.softmax(T.concat([T.masked_fill(l_e, off_context, MASKED_LOGIT), cls_logits]), axis=0)
    return p_start, p_end


# ------------------------------------------------------------------ losses
def base_loss(batch: Sequence[tuple[Tensor, Tensor, GoldLabel]]) -> Tensor:
    """-(1/2N) sum_i (log p_start[y_s] + log p_end[y_e])."""
    if not batch:
        raise ContractError("empty batch")
    total = None
    for p_start, p_end, gold in batch:
        term = T.cross_entropy(p_start, gold.start) + T.cross_entropy(p_end, gold.end)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / (2 * len(batch)))


def rationale_example_loss(p_r: Tensor, labels: np.ndarray, context_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over context tokens of one example."""
    idx = np.flatnonzero(np.asarray(context_mask, dtype=bool))
    if len(idx) == 0:
        return Tensor(0.0)
    p = T.take(p_r, idx)
    y = np.asarray(labels, dtype=np.float64)[idx]
    ll = T.mul(y, T.log(p, floor=PROB_FLOOR)) + T.mul(1.0 - y, T.log(1.0 - p, floor=PROB_FLOOR))
    return T.scale(T.mean(ll), -1.0)


def rationale_loss(batch: Sequence[tuple[Tensor, np.ndarray, np.ndarray]]) -> Tensor:
    if not batch:
        raise ContractError("empty batch")
    total = None
    for p_r, labels, mask in batch:
        term = rationale_example_loss(p_r, labels, mask)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(batch))


def supervised_loss(
    outputs: Sequence[QAModelOutput], examples: Sequence[ReformulatedExample], beta1: float = 5.0
) -> Tensor:
    base = base_loss([(o.p_start, o.p_end, ex.gold) for o, ex in zip(outputs, examples)])
    if beta1 == 0:
        return base
    rt = rationale_loss([(o.rationale_probs, ex.gold.rationale, ex.context_mask) for o, ex in zip(outputs, examples)])
    return base + T.scale(rt, beta1)


# ---------------------------------------------------------------- decoding
def best_answer(
    start_logits: np.ndarray,
    end_logits: np.ndarray,
    cls_logits: np.ndarray,
    context_mask: np.ndarray,
    max_answer_len: int = 30,
) -> tuple[str, Optional[tuple[int, int]]]:
    """Pick the top candidate among context spans (score l_s[i] + l_e[j]) and
    the three classes (score 2 * l_c). Returns ("span", (i, j)) or (class, None).
    Ties prefer spans, then smaller (i, j), then yes < no < unknown. Without
    context tokens the answer is "unknown"."""
    if max_answer_len < 1:
        raise ContractError("max_answer_len must be at least 1")
    idx = np.flatnonzero(np.asarray(context_mask, dtype=bool))
    if len(idx) == 0:
        return UNKNOWN, None
    s = np.asarray(start_logits)[idx]
    e = np.asarray(end_logits)[idx]
    scores = s[:, None] + e[None, :]
    gap = idx[None, :] - idx[:, None]
    scores = np.where((gap >= 0) & (gap < max_answer_len), scores, -np.inf)
    # argmax returns the first maximum in row-major order: smallest (i, j)
    a, b = divmod(int(np.argmax(scores)), len(idx))
    span_best, span = scores[a, b], (int(idx[a]), int(idx[b]))
    class_scores = CLASS_SCORE_FACTOR * np.asarray(cls_logits, dtype=np.float64)
    c = int(np.argmax(class_scores))
    if span_best >= class_scores[c]:
        return "span", span
    return CLASS_ORDER[c], None


def decode_logits(
    start_logits, end_logits, cls_logits, example: ReformulatedExample, max_answer_len: int = 30
) -> str:
    kind, span = best_answer(start_logits, end_logits, cls_logits, example.context_mask, max_answer_len)
    if kind == "span":
        return example.span_text(*span)
    return kind


def decode(output: QAModelOutput, example: ReformulatedExample, max_answer_len: int = 30) -> str:
    return decode_logits(
        output.start_logits.data, output.end_logits.data, output.class_logits.data, example, max_answer_len
    )


# ------------------------------------------------------------------- model
def init_head_params(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return {
        "heads.span.weight": w(d, 2),
        "heads.span.bias": zeros(2),
        "heads.rationale.w1": w(d, d),
        "heads.rationale.w2": w(d),
        "heads.attn_pool.w1": w(d, d),
        "heads.attn_pool.w2": w(d),
        "heads.cls.weight": w(2 * d, 3),
        "heads.cls.bias": zeros(3),
    }


class QAModel:
    """Encoder plus the extraction heads. Parameters live in one ordered dict."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.encoder = Encoder(config, params)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "QAModel":
        rng = np.random.default_rng(seed)
        params = init_encoder_params(config, rng)
        params.update(init_head_params(config.hidden_dim, rng))
        return cls(config, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def embed(self, example: ReformulatedExample) -> Tensor:
        return self.encoder.embed(example.token_ids)

    def forward_embeddings(self, embeddings: Tensor, example: ReformulatedExample) -> QAModelOutput:
        P = self.params
        enc = self.encoder.encode(embeddings, example.attention_mask)
        hidden = enc.hidden
        n = hidden.shape[0]
        span = hidden @ P["heads.span.weight"] + P["heads.span.bias"]
        l_s = T.reshape(span[:, 0:1], (n,))
        l_e = T.reshape(span[:, 1:2], (n,))
        p_r = rationale_probs(hidden, P["heads.rationale.w1"], P["heads.rationale.w2"])
        pooled_r = rationale_attention_pool(
            hidden, p_r, example.attention_mask, P["heads.attn_pool.w1"], P["heads.attn_pool.w2"]
        )
        cls = class_logits(enc.pooled, pooled_r, P["heads.cls.weight"], P["heads.cls.bias"])
        p_start, p_end = joint_distributions(l_s, l_e, cls, example.context_mask)
        return QAModelOutput(l_s, l_e, cls, p_r, p_start, p_end)

    def forward(self, example: ReformulatedExample) -> QAModelOutput:
        return self.forward_embeddings(self.embed(example), example)

    def predict(self, example: ReformulatedExample, max_answer_len: int = 30) -> str:
        return decode(self.forward(example), example, max_answer_len)

    # ------------------------------------------------------------ storage
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise CheckpointError("parameter names in the checkpoint do not match the model")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = arrays[name].copy()

    def save(self, path) -> None:
        serialization.save(path, self.state_arrays(), {"kind": "qa_model", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "QAModel":
        arrays, meta = serialization.load(path)
        if "config" not in meta:
            raise CheckpointError(f"{path} has no model config")
        model = cls.initialize(EncoderConfig(**meta["config"]))
        model.load_arrays({k: v for k, v in arrays.items() if k in model.params})
        return model


__all__ = [
    "CLASS_SLOT",
    "QAModel",
    "QAModelOutput",
    "base_loss",
    "best_answer",
    "class_logits",
    "decode",
    "decode_logits",
    "joint_distributions",
    "rationale_attention_pool",
    "rationale_loss",
    "rationale_probs",
    "supervised_loss",
]
