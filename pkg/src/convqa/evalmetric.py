"""CoQA word-overlap F1, the extractive upper bound, and option post-processing."""

from __future__ import annotations

import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError

CLASS_ANSWERS = ("yes", "no", "unknown")

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_text(s: str) -> list[str]:
    """Lowercase, drop punctuation and articles, split on whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return s.split()


def _f1_tokens(pred: Sequence[str], ref: Sequence[str]) -> float:
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    same = sum((Counter(pred) & Counter(ref)).values())
    if same == 0:
        return 0.0
    precision = same / len(pred)
    recall = same / len(ref)
    return 2 * precision * recall / (precision + recall)


def f1_word_overlap(pred: str, ref: str) -> float:
    return _f1_tokens(normalize_text(pred), normalize_text(ref))


def _leave_one_out(scores: Sequence[float]) -> float:
    n = len(scores)
    if n == 1:
        return scores[0]
    total = 0.0
    for j in range(n):
        total += max(s for i, s in enumerate(scores) if i != j)
    return total / n


def coqa_f1(pred: str, refs: Sequence[str]) -> float:
    """Leave-one-out multi-reference F1: for each held-out reference take the
    best F1 against the others, then average. One reference is plain F1."""
    if not refs:
        raise ContractError("coqa_f1 needs at least one reference")
    p = normalize_text(pred)
    return _leave_one_out([_f1_tokens(p, normalize_text(r)) for r in refs])


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    prediction: str
    references: tuple[str, ...]
    source: str = "unknown"

    def __post_init__(self):
        if not self.references:
            raise ContractError(f"record {self.example_id} has no references")


def corpus_f1(records: Iterable[EvalRecord]) -> dict:
    """Unweighted mean of per-question scores, overall and per source."""
    seen: set[str] = set()
    by_source: dict[str, list[float]] = defaultdict(list)
    scores: list[float] = []
    for rec in records:
        if rec.example_id in seen:
            raise ContractError(f"duplicate example id {rec.example_id!r}")
        seen.add(rec.example_id)
        s = coqa_f1(rec.prediction, rec.references)
        scores.append(s)
        by_source[rec.source].append(s)
    return {
        "overall": float(np.mean(scores)) if scores else 0.0,
        "count": len(scores),
        "by_source": {k: {"f1": float(np.mean(v)), "count": len(v)} for k, v in sorted(by_source.items())},
    }


def upper_bound(story: str, refs: Sequence[str], max_span_words: int = 30) -> float:
    """Best coqa_f1 reachable by any contiguous span of normalized story words
    (up to ``max_span_words`` long), by a span that normalizes to nothing, or
    by one of the yes/no/unknown answers."""
    if max_span_words < 1:
        raise ContractError("max_span_words must be at least 1")
    if not refs:
        raise ContractError("upper_bound needs at least one reference")
    ref_tokens = [normalize_text(r) for r in refs]
    ref_counts = [Counter(r) for r in ref_tokens]
    best = max(_leave_one_out([_f1_tokens([c], r) for r in ref_tokens]) for c in CLASS_ANSWERS)
    if any(not normalize_text(tok) for tok in story.split()):
        # a span of only articles/punctuation normalizes to nothing, which
        # matches a reference that also normalizes to nothing
        best = max(best, _leave_one_out([_f1_tokens([], r) for r in ref_tokens]))
    words = normalize_text(story)
    n = len(words)
    for i in range(n):
        overlap = [0] * len(refs)
        window: Counter = Counter()
        for j in range(i, min(n, i + max_span_words)):
            w = words[j]
            window[w] += 1
            length = j - i + 1
            scores = []
            for k, rc in enumerate(ref_counts):
                if window[w] <= rc.get(w, 0):
                    overlap[k] += 1
                same = overlap[k]
                if same == 0:
                    scores.append(0.0)
                else:
                    precision = same / length
                    recall = same / len(ref_tokens[k])
                    scores.append(2 * precision * recall / (precision + recall))
            best = max(best, _leave_one_out(scores))
            if best == 1.0:
                return best
    return best


# ------------------------------------------------------------ post-process
_AUX = {
    "is", "are", "was", "were", "do", "does", "did", "can", "could", "will", "would",
    "should", "shall", "has", "have", "had", "may", "might", "must", "am", "be",
}
_LEAD_STRIP = _AUX | {"a", "an", "the", "to"}
_TRAILING = " \t?!.,;:\"'"


def _strip_option(words: list[str]) -> list[str]:
    while words and words[0].lower() in _LEAD_STRIP:
        words = words[1:]
    return words


def extract_options(question: str) -> list[str]:
    """Options of an "X or Y" question.

    The text after the last " or " gives the final option; its word count sets
    how many words are taken for the option right before " or ". Comma-separated
    items in between (``red, blue, or green``) are kept whole.
    """
    q = question.strip().rstrip(_TRAILING)
    m = re.search(r"^(.*\S)\s*,?\s+or\s+(\S.*)$", q, flags=re.IGNORECASE)
    if not m:
        return []
    head, tail = m.group(1), m.group(2)
    last = _strip_option(tail.strip(_TRAILING).split())
    if not last:
        return []
    width = len(last)
    pieces = [p.strip(_TRAILING) for p in head.split(",")]
    pieces = [p for p in pieces if p]
    if not pieces:
        return []
    middle = [" ".join(_strip_option(p.split())) for p in pieces[1:]]
    first = _strip_option(pieces[0].split()[-width:])
    options = [" ".join(first)] + middle + [" ".join(last)]
    return [o for o in options if o]


class WordVectorStore:
    """Case-folded token -> vector lookup with a fixed dimension."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {np.asarray(v).shape for v in vectors.values()}
        if len(dims) > 1:
            raise ContractError(f"word vectors have mixed shapes: {sorted(dims)}")
        self.vectors = {k.lower(): np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.dim = dims.pop()[0] if dims else 0

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.vectors

    def get(self, token: str) -> Optional[np.ndarray]:
        return self.vectors.get(token.lower())

    @classmethod
    def from_text_file(cls, path) -> "WordVectorStore":
        vectors = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(vectors)

    @classmethod
    def from_embedding_table(cls, vocab: Sequence[str], table: np.ndarray) -> "WordVectorStore":
        return cls({tok: table[i] for i, tok in enumerate(vocab) if not tok.startswith("[")})


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def _contains(haystack: list[str], needle: list[str]) -> bool:
    k = len(needle)
    return k > 0 and any(haystack[i : i + k] == needle for i in range(len(haystack) - k + 1))


def post_process(question: str, answer: str, store: WordVectorStore) -> str:
    """Swap an extracted answer for the most similar option of a choice question."""
    options = extract_options(question)
    if not options:
        return answer
    ans_tokens = normalize_text(answer)
    if not ans_tokens or " ".join(ans_tokens) in CLASS_ANSWERS:
        return answer
    if any(_contains(ans_tokens, normalize_text(o)) for o in options):
        return answer
    answer_vecs = [store.get(a) for a in ans_tokens]
    answer_vecs = [v for v in answer_vecs if v is not None]
    best_option, best_sim = None, -np.inf
    for option in options:
        for tok in normalize_text(option):
            ov = store.get(tok)
            if ov is None:
                continue
            for av in answer_vecs:
                sim = cosine(ov, av)
                if sim > best_sim:
                    best_option, best_sim = option, sim
    return answer if best_option is None else best_option
