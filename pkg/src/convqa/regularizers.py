"""Adversarial (AT), virtual adversarial (VAT) and distillation (KD) losses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ReformulatedExample
from .errors import ContractError, CorpusParseError
from .qa_model import QAModel, QAModelOutput, base_loss, rationale_loss, supervised_loss
from .tensor import PROB_FLOOR, Tensor

TEACHER, STUDENT = "teacher", "student"


@dataclass
class PerturbationConfig:
    epsilon: float = 1.0
    xi_noise: float = 1e-3

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError("epsilon must be non-negative")
        if self.xi_noise <= 0:
            raise ContractError("xi_noise must be positive")


@dataclass
class LossWeights:
    beta1: float = 5.0  # rationale tagging
    beta2: float = 1.0  # adversarial
    beta3: float = 1.0  # virtual adversarial
    beta4: float = 1.0  # distillation

    def __post_init__(self):
        if min(self.beta1, self.beta2, self.beta3, self.beta4) < 0:
            raise ContractError("loss weights must be non-negative")


# ------------------------------------------------------------ perturbation
def normalize_rows(g: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale each row to L2 norm ``epsilon``; all-zero rows stay zero."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    # divide by the row max first so tiny gradients do not underflow when squared
    peak = np.abs(g).max(axis=-1, keepdims=True)
    unit = g / np.where(peak > 0, peak, 1.0)
    norms = np.linalg.norm(unit, axis=-1, keepdims=True)
    return np.where(peak > 0, epsilon * unit / np.where(norms > 0, norms, 1.0), 0.0)


def at_perturb(embedding_grads: np.ndarray, epsilon: float) -> np.ndarray:
    """Loss-ascending per-token step of length ``epsilon`` along the gradient."""
    return normalize_rows(embedding_grads, epsilon).reshape(np.shape(embedding_grads))


def vat_direction(
    forward: Callable[[Tensor], Sequence[Tensor]],
    embeddings: np.ndarray,
    clean: Sequence[np.ndarray],
    xi: float,
    epsilon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One power step: gradient of KL(clean || p(v + xi d)) at the noisy point,
    normalized per row and scaled by ``epsilon``.

    ``forward`` maps an embedding tensor to the list of output distributions
    the KL is summed over.
    """
    noise = rng.standard_normal(embeddings.shape)
    noisy = Tensor(embeddings + xi * noise, requires_grad=True)
    dists = forward(noisy)
    kl = None
    for p, q in zip(clean, dists):
        term = T.kl_divergence(p, q)
        kl = term if kl is None else kl + term
    (g,) = T.grad(kl, [noisy])
    return at_perturb(g, epsilon)


def vat_perturb(
    example: ReformulatedExample,
    model: QAModel,
    xi: float,
    epsilon: float,
    seed: int,
    clean: Optional[QAModelOutput] = None,
) -> np.ndarray:
    """VAT perturbation for one example, deterministic given ``seed``."""
    if clean is None:
        clean = model.forward(example)
    embeddings = model.embed(example).data

    def forward(v):
        out = model.forward_embeddings(v, example)
        return [out.p_start, out.p_end]

    return vat_direction(
        forward, embeddings, [clean.p_start.data, clean.p_end.data], xi, epsilon, np.random.default_rng(seed)
    )


def embedding_gradients(
    embeddings: Sequence[Tensor], loss: Tensor
) -> list[np.ndarray]:
    """d(loss)/d(embeddings) without touching parameter gradient buffers."""
    return T.grad(loss, list(embeddings))


# ----------------------------------------------------------------- losses
def at_loss(
    examples: Sequence[ReformulatedExample],
    model: QAModel,
    embeddings: Sequence[Tensor],
    perturbations: Sequence[np.ndarray],
    beta1: float = 5.0,
) -> tuple[Tensor, list[QAModelOutput]]:
    """Supervised loss re-evaluated at V + r with r held constant."""
    outs = [
        model.forward_embeddings(v + Tensor(r), ex)
        for ex, v, r in zip(examples, embeddings, perturbations)
    ]
    return supervised_loss(outs, examples, beta1), outs


def vat_kl(target: tuple[np.ndarray, np.ndarray], perturbed: QAModelOutput) -> Tensor:
    return T.kl_divergence(target[0], perturbed.p_start) + T.kl_divergence(target[1], perturbed.p_end)


def clean_targets(outputs: Sequence[QAModelOutput]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Detached clean start/end distributions, the fixed side of the VAT KL."""
    return [(o.p_start.data.copy(), o.p_end.data.copy()) for o in outputs]


def vat_loss(
    examples: Sequence[ReformulatedExample],
    model: QAModel,
    embeddings: Sequence[Tensor],
    perturbations: Sequence[np.ndarray],
    targets: Sequence[tuple[np.ndarray, np.ndarray]],
) -> Tensor:
    """Mean over examples of KL(p(V) || p(V*)) over start and end; no labels used.
    ``targets`` are the clean distributions, treated as constants."""
    total = None
    for ex, v, r, tgt in zip(examples, embeddings, perturbations, targets):
        term = vat_kl(tgt, model.forward_embeddings(v + Tensor(r), ex))
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(examples))


# ------------------------------------------------------ knowledge distillation
@dataclass
class TeacherLabel:
    p_start: np.ndarray
    p_end: np.ndarray

    @property
    def length(self) -> int:
        return len(self.p_start)


def teacher_label(teacher_outputs: Sequence[tuple[np.ndarray, np.ndarray]]) -> TeacherLabel:
    """Average the teachers' start and end distributions."""
    if not teacher_outputs:
        raise ContractError("need at least one teacher")
    lengths = {(len(s), len(e)) for s, e in teacher_outputs}
    if len(lengths) != 1:
        raise ContractError(f"teacher distributions differ in length: {sorted(lengths)}")
    starts = np.stack([np.asarray(s, dtype=np.float64) for s, _ in teacher_outputs])
    ends = np.stack([np.asarray(e, dtype=np.float64) for _, e in teacher_outputs])
    return TeacherLabel(starts.mean(axis=0), ends.mean(axis=0))


def kd_example_loss(student: QAModelOutput, label: TeacherLabel) -> Tensor:
    if student.p_start.shape != label.p_start.shape:
        raise ContractError(
            f"student length {student.p_start.shape[0]} != teacher length {label.length}"
        )
    n = label.length
    ce_s = T.tsum(T.mul(label.p_start, T.log(student.p_start, floor=PROB_FLOOR)))
    ce_e = T.tsum(T.mul(label.p_end, T.log(student.p_end, floor=PROB_FLOOR)))
    return T.scale(ce_s + ce_e, -1.0 / (2 * n))


def kd_loss(students: Sequence[QAModelOutput], labels: Sequence[TeacherLabel]) -> Tensor:
    """Soft cross-entropy against teacher labels, averaged over joint positions,
    over start/end and over examples."""
    total = None
    for s, lab in zip(students, labels):
        term = kd_example_loss(s, lab)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(students))


class TeacherLabelSet(dict):
    """example_id -> TeacherLabel, with a line-delimited JSON cache format."""

    def save(self, path, vocab_hash: str = "") -> None:
        lines = [json.dumps({"format": 1, "vocab_hash": vocab_hash})]
        for key in sorted(self):
            lab = self[key]
            lines.append(
                json.dumps(
                    {"id": key, "T": lab.length, "p_start": lab.p_start.tolist(), "p_end": lab.p_end.tolist()},
                    separators=(",", ":"),
                )
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, vocab_hash: Optional[str] = None) -> "TeacherLabelSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise CorpusParseError(f"{path} is empty")
        header = json.loads(lines[0])
        if vocab_hash is not None and header.get("vocab_hash") != vocab_hash:
            raise ContractError(
                f"teacher labels built for vocabulary {header.get('vocab_hash')}, expected {vocab_hash}"
            )
        out = cls()
        for line in lines[1:]:
            rec = json.loads(line)
            lab = TeacherLabel(np.array(rec["p_start"]), np.array(rec["p_end"]))
            if lab.length != rec["T"] or len(lab.p_end) != rec["T"]:
                raise CorpusParseError(f"{path}: record {rec['id']} length mismatch")
            out[rec["id"]] = lab
        return out


# ----------------------------------------------------------------- total
@dataclass
class LossBreakdown:
    total: Tensor
    base: float
    rationale: float
    at: float
    vat: float
    kd: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "base": self.base,
            "rationale": self.rationale,
            "at": self.at,
            "vat": self.vat,
            "kd": self.kd,
        }


@dataclass
class Perturbations:
    """Per-example AT and VAT offsets for one batch (``None`` when unused)."""

    at: Optional[list[np.ndarray]] = None
    vat: Optional[list[np.ndarray]] = None
    vat_targets: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


def total_loss(
    examples: Sequence[ReformulatedExample],
    model: QAModel,
    weights: LossWeights,
    mode: str = TEACHER,
    perturbation: Optional[PerturbationConfig] = None,
    teacher_labels: Optional[Mapping[str, TeacherLabel]] = None,
    seed: int = 0,
    fixed: Optional[Perturbations] = None,
) -> tuple[LossBreakdown, Perturbations]:
    """L_base + b1 L_rt + b2 L_at + b3 L_vat (+ b4 L_kd in student mode).

    Order: clean pass, embedding gradients of the clean supervised loss (AT
    direction), VAT direction, then the perturbed passes. ``seed`` drives the
    VAT noise; example ``i`` uses ``seed + i``. Passing ``fixed`` reuses
    previously computed offsets instead, which is how gradient checks hold
    the perturbation constant. The offsets used are returned alongside.
    """
    if mode not in (TEACHER, STUDENT):
        raise ContractError(f"mode must be teacher or student, got {mode!r}")
    if not examples:
        raise ContractError("empty batch")
    pert = perturbation or PerturbationConfig()
    labels = None
    if mode == STUDENT:
        if teacher_labels is None:
            raise ContractError("student mode needs teacher labels")
        missing = [ex.example_id for ex in examples if ex.example_id not in teacher_labels]
        if missing:
            raise ContractError(f"no teacher labels for examples {missing}")
        labels = [teacher_labels[ex.example_id] for ex in examples]

    embeddings = [model.embed(ex) for ex in examples]
    clean = [model.forward_embeddings(v, ex) for ex, v in zip(examples, embeddings)]
    base = base_loss([(o.p_start, o.p_end, ex.gold) for o, ex in zip(clean, examples)])
    rt = rationale_loss([(o.rationale_probs, ex.gold.rationale, ex.context_mask) for o, ex in zip(clean, examples)])
    total = base + T.scale(rt, weights.beta1)
    used = Perturbations()
    at_value = vat_value = kd_value = 0.0

    if weights.beta2 > 0:
        if fixed is not None and fixed.at is not None:
            used.at = fixed.at
        else:
            grads = embedding_gradients(embeddings, total)
            used.at = [at_perturb(g, pert.epsilon) for g in grads]
        l_at, _ = at_loss(examples, model, embeddings, used.at, weights.beta1)
        at_value = l_at.item()
        total = total + T.scale(l_at, weights.beta2)
    if weights.beta3 > 0:
        if fixed is not None and fixed.vat is not None:
            used.vat, used.vat_targets = fixed.vat, fixed.vat_targets
        else:
            used.vat_targets = clean_targets(clean)
            used.vat = []
            for i, (ex, v, tgt) in enumerate(zip(examples, embeddings, used.vat_targets)):

                def forward(e, ex=ex):
                    out = model.forward_embeddings(e, ex)
                    return [out.p_start, out.p_end]

                used.vat.append(
                    vat_direction(
                        forward, v.data, tgt, pert.xi_noise, pert.epsilon, np.random.default_rng(seed + i)
                    )
                )
        l_vat = vat_loss(examples, model, embeddings, used.vat, used.vat_targets)
        vat_value = l_vat.item()
        total = total + T.scale(l_vat, weights.beta3)
    if labels is not None and weights.beta4 > 0:
        l_kd = kd_loss(clean, labels)
        kd_value = l_kd.item()
        total = total + T.scale(l_kd, weights.beta4)
    return LossBreakdown(total, base.item(), rt.item(), at_value, vat_value, kd_value), used
