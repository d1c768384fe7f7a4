"""Toy pre-LN transformer encoder used in place of a pretrained model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import serialization
from . import tensor as T
from .errors import CheckpointError, ContractError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    vocab_size: int = 2048
    max_seq_len: int = 512
    ffn_dim: Optional[int] = None
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ContractError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 1:
            raise ContractError("max_seq_len must be at least 1")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    hidden: Tensor  # T x d
    pooled: Tensor  # d
    attentions: list[np.ndarray] = field(default_factory=list)  # per layer, heads x T x T


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    d, f = config.hidden_dim, config.ffn_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = {
        "embeddings.token": w(config.vocab_size, d),
        "embeddings.position": w(config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        p = f"encoder.layers.{i}."
        params.update(
            {
                p + "ln1.gain": ones(d),
                p + "ln1.bias": zeros(d),
                p + "attn.wq": w(d, d),
                p + "attn.bq": zeros(d),
                p + "attn.wk": w(d, d),
                p + "attn.bk": zeros(d),
                p + "attn.wv": w(d, d),
                p + "attn.bv": zeros(d),
                p + "attn.wo": w(d, d),
                p + "attn.bo": zeros(d),
                p + "ln2.gain": ones(d),
                p + "ln2.bias": zeros(d),
                p + "ffn.w1": w(d, f),
                p + "ffn.b1": zeros(f),
                p + "ffn.w2": w(f, d),
                p + "ffn.b2": zeros(d),
            }
        )
    params.update(
        {
            "encoder.final_ln.gain": ones(d),
            "encoder.final_ln.bias": zeros(d),
            "pooler.weight": w(d, d),
            "pooler.bias": zeros(d),
        }
    )
    return params


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    inv = T.power(var + eps, -0.5)
    return centered * inv * gain + bias


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        return cls(config, init_encoder_params(config, np.random.default_rng(seed)))

    def embed(self, token_ids: Sequence[int], positions: Optional[Sequence[int]] = None) -> Tensor:
        """Token plus position embeddings, T x d.

        The result has ``retain_grad`` set, so after ``backward`` its ``.grad``
        holds the loss gradient per embedding vector. A perturbed copy can be fed
        to :meth:`encode` in its place while gradients still reach the tables.
        """
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        n = len(ids)
        if n > self.config.max_seq_len:
            raise ContractError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        if n and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = int(ids[(ids < 0) | (ids >= self.config.vocab_size)][0])
            raise IndexError(f"token id {bad} outside vocabulary of size {self.config.vocab_size}")
        pos = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
        if len(pos) != n:
            raise ContractError("positions and token_ids differ in length")
        tok = T.take(self.params["embeddings.token"], ids)
        pe = T.take(self.params["embeddings.position"], pos)
        return (tok + pe).retain_grad()

    def encode(self, embeddings: Tensor, attention_mask: Optional[Sequence[bool]] = None) -> EncoderOutput:
        cfg = self.config
        n = embeddings.shape[0]
        mask = np.ones(n, dtype=bool) if attention_mask is None else np.asarray(attention_mask, dtype=bool)
        if len(mask) != n:
            raise ContractError(f"attention mask length {len(mask)} != sequence length {n}")
        if n == 0 or not mask.any():
            raise ContractError("encode needs at least one unmasked position")
        key_blocked = ~mask[None, None, :]
        h, dh = cfg.num_heads, cfg.head_dim
        x = embeddings
        attentions = []
        for i in range(cfg.num_layers):
            p = f"encoder.layers.{i}."
            P = self.params
            y = layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], cfg.layer_norm_eps)

            def heads(t):
                return T.transpose(T.reshape(t, (n, h, dh)), (1, 0, 2))

            q = heads(y @ P[p + "attn.wq"] + P[p + "attn.bq"])
            k = heads(y @ P[p + "attn.wk"] + P[p + "attn.bk"])
            v = heads(y @ P[p + "attn.wv"] + P[p + "attn.bv"])
            scores = T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(dh))
            scores = T.masked_fill(scores, key_blocked, -np.inf)
            attn = T.softmax(scores, axis=-1)
            attentions.append(attn.data)
            ctx = T.reshape(T.transpose(attn @ v, (1, 0, 2)), (n, cfg.hidden_dim))
            x = x + ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
            y = layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], cfg.layer_norm_eps)
            x = x + T.relu(y @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        hidden = layer_norm(
            x, self.params["encoder.final_ln.gain"], self.params["encoder.final_ln.bias"], cfg.layer_norm_eps
        )
        cls_row = T.reshape(hidden[0:1], (1, cfg.hidden_dim))
        pooled = T.tanh(cls_row @ self.params["pooler.weight"] + self.params["pooler.bias"])
        return EncoderOutput(hidden=hidden, pooled=T.reshape(pooled, (cfg.hidden_dim,)), attentions=attentions)

    def save(self, path) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        serialization.save(path, arrays, {"kind": "encoder", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "Encoder":
        arrays, meta = serialization.load(path)
        if meta.get("kind") != "encoder":
            raise CheckpointError(f"{path} does not hold an encoder")
        config = EncoderConfig(**meta["config"])
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
