"""CoQA ingestion, history-augmented questions, tokenization and example assembly."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, CorpusParseError, IntegrityError
from .evalmetric import f1_word_overlap, normalize_text

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, Q, A = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[Q]", "[A]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, Q, A)

SPAN, YES, NO, UNKNOWN = "span", "yes", "no", "unknown"
ANSWER_TYPES = (SPAN, YES, NO, UNKNOWN)
# offset of each class slot past the T token positions of the joint axis
CLASS_SLOT = {YES: 0, NO: 1, UNKNOWN: 2}

EXAMPLE_FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


# ------------------------------------------------------------------ corpus
@dataclass
class Turn:
    turn_id: int
    question: str
    answer: str
    span_start: int
    span_end: int
    span_text: str
    additional_answers: list[str] = field(default_factory=list)

    @property
    def references(self) -> list[str]:
        return [self.answer] + list(self.additional_answers)


@dataclass
class CoqaDocument:
    id: str
    source: str
    story: str
    turns: list[Turn]


def _doc_error(cls, doc_id, msg):
    return cls(f"document {doc_id}: {msg}")


def _parse_document(raw: dict, index: int) -> CoqaDocument:
    doc_id = raw.get("id", f"#{index}")
    try:
        story = raw["story"]
        questions = raw["questions"]
        answers = raw["answers"]
    except KeyError as exc:
        raise _doc_error(CorpusParseError, doc_id, f"missing field {exc}") from None
    if len(questions) != len(answers):
        raise _doc_error(IntegrityError, doc_id, f"{len(questions)} questions but {len(answers)} answers")
    extra: dict[int, list[str]] = {}
    for key in sorted(raw.get("additional_answers", {}) or {}):
        for ans in raw["additional_answers"][key]:
            extra.setdefault(int(ans["turn_id"]), []).append(ans["input_text"])
    turns = []
    for k, (q, a) in enumerate(zip(questions, answers), start=1):
        if int(q["turn_id"]) != k or int(a["turn_id"]) != k:
            raise _doc_error(IntegrityError, doc_id, f"turn ids are not consecutive at turn {k}")
        start, end = int(a.get("span_start", -1)), int(a.get("span_end", -1))
        span_text = a.get("span_text", "")
        if start >= 0:
            if not 0 <= start <= end <= len(story):
                raise _doc_error(IntegrityError, doc_id, f"turn {k} span [{start},{end}) outside story")
            if story[start:end] != span_text:
                raise _doc_error(
                    IntegrityError, doc_id,
                    f"turn {k} span_text {span_text!r} != story slice {story[start:end]!r}",
                )
        else:
            start = end = -1
        turns.append(
            Turn(
                turn_id=k, question=q["input_text"], answer=a["input_text"],
                span_start=start, span_end=end, span_text=span_text,
                additional_answers=extra.get(k, []),
            )
        )
    return CoqaDocument(id=str(doc_id), source=raw.get("source", "unknown"), story=story, turns=turns)


def parse_corpus(obj: dict) -> list[CoqaDocument]:
    if not isinstance(obj, dict) or "data" not in obj:
        raise CorpusParseError('top-level object must contain a "data" array')
    return [_parse_document(raw, i) for i, raw in enumerate(obj["data"])]


def load_corpus(path) -> list[CoqaDocument]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_corpus(obj)


# --------------------------------------------------------------- tokenizer
@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


class Tokenizer:
    """Lowercasing word/punctuation tokenizer with a closed vocabulary.

    Any object with ``tokenize``, ``token_to_id``, ``vocab`` and ``hash`` can
    stand in for it (e.g. a BPE model exposing character offsets).
    """

    def __init__(self, vocab: Sequence[str], lowercase: bool = True):
        vocab = list(vocab)
        missing = [s for s in SPECIAL_TOKENS if s not in vocab]
        if missing:
            raise ContractError(f"vocabulary lacks special tokens {missing}")
        if len(set(vocab)) != len(vocab):
            raise ContractError("vocabulary has duplicate entries")
        self.vocab = vocab
        self.lowercase = lowercase
        self._ids = {tok: i for i, tok in enumerate(vocab)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: Optional[int] = None, lowercase: bool = True) -> "Tokenizer":
        counts: Counter = Counter()
        for text in texts:
            counts.update(t.text for t in _split(text, lowercase))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked if w not in SPECIAL_TOKENS]
        if max_size is not None:
            words = words[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls(list(SPECIAL_TOKENS) + words, lowercase)

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.vocab), encoding="utf-8")

    @property
    def hash(self) -> str:
        h = hashlib.sha256("\n".join(self.vocab).encode("utf-8"))
        h.update(b"|lower" if self.lowercase else b"|cased")
        return h.hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.vocab)

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def tokenize(self, text: str) -> list[Token]:
        return _split(text, self.lowercase)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id(t.text) for t in self.tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    @property
    def special_ids(self) -> dict[str, int]:
        return {s: self._ids[s] for s in SPECIAL_TOKENS}


def _split(text: str, lowercase: bool) -> list[Token]:
    out = []
    for m in _TOKEN_RE.finditer(text):
        tok = m.group(0)
        out.append(Token(tok.lower() if lowercase else tok, m.start(), m.end()))
    return out


def tokenize(text: str) -> list[Token]:
    return _split(text, True)


# ---------------------------------------------------------- reformulation
def reformulate(
    doc: CoqaDocument,
    k: int,
    tokenizer: Tokenizer,
    max_question_tokens: int = 128,
    history_field: str = "answer",
) -> list[int]:
    """Token ids of ``[Q] Q1 [A] A1 ... [Q] Qk`` keeping only the most recent
    ``max_question_tokens`` tokens when the history is too long."""
    if not 1 <= k <= len(doc.turns):
        raise ContractError(f"turn {k} outside 1..{len(doc.turns)}")
    q_id, a_id = tokenizer.token_to_id(Q), tokenizer.token_to_id(A)
    ids: list[int] = []
    for turn in doc.turns[: k - 1]:
        ids.append(q_id)
        ids.extend(tokenizer.encode(turn.question))
        ids.append(a_id)
        ids.extend(tokenizer.encode(getattr(turn, history_field)))
    ids.append(q_id)
    ids.extend(tokenizer.encode(doc.turns[k - 1].question))
    if len(ids) > max_question_tokens:
        ids = ids[len(ids) - max_question_tokens :]
    return ids


# ---------------------------------------------------------------- examples
@dataclass
class GoldLabel:
    answer_type: str
    start: int  # index on the joint T+3 axis
    end: int
    rationale: np.ndarray  # 0/1 per sequence position

    def __post_init__(self):
        if self.answer_type not in ANSWER_TYPES:
            raise ContractError(f"unknown answer type {self.answer_type!r}")
        self.rationale = np.asarray(self.rationale, dtype=np.float64)
        if self.answer_type == UNKNOWN and self.rationale.any():
            raise ContractError("unknown answers must carry all-zero rationale labels")
        if self.answer_type == SPAN and self.start > self.end:
            raise ContractError(f"span start {self.start} after end {self.end}")


@dataclass
class ReformulatedExample:
    doc_id: str
    turn_id: int
    token_ids: list[int]
    context_start: int
    context_end: int  # exclusive
    offsets: list[tuple[int, int]]  # story char range per position, (-1, -1) off context
    story: str
    question: str
    references: list[str]
    source: str
    gold: GoldLabel
    usable: bool = True

    @property
    def example_id(self) -> str:
        return f"{self.doc_id}|{self.turn_id}"

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def context_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[self.context_start : self.context_end] = True
        return m

    @property
    def attention_mask(self) -> np.ndarray:
        return np.ones(self.length, dtype=bool)

    def span_text(self, i: int, j: int) -> str:
        return self.story[self.offsets[i][0] : self.offsets[j][1]]

    def to_record(self) -> dict:
        return {
            "id": self.doc_id,
            "turn_id": self.turn_id,
            "token_ids": list(self.token_ids),
            "context": [self.context_start, self.context_end],
            "offsets": [list(o) for o in self.offsets],
            "story": self.story,
            "question": self.question,
            "references": list(self.references),
            "source": self.source,
            "answer_type": self.gold.answer_type,
            "start": self.gold.start,
            "end": self.gold.end,
            "rationale": [int(x) for x in self.gold.rationale],
            "usable": self.usable,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ReformulatedExample":
        gold = GoldLabel(rec["answer_type"], rec["start"], rec["end"], np.array(rec["rationale"]))
        return cls(
            doc_id=rec["id"], turn_id=rec["turn_id"], token_ids=rec["token_ids"],
            context_start=rec["context"][0], context_end=rec["context"][1],
            offsets=[tuple(o) for o in rec["offsets"]], story=rec["story"],
            question=rec["question"], references=rec["references"], source=rec["source"],
            gold=gold, usable=rec["usable"],
        )


def answer_type_of(turn: Turn) -> str:
    norm = " ".join(normalize_text(turn.answer))
    if turn.span_start < 0 or norm == "unknown":
        return UNKNOWN
    if norm == "yes":
        return YES
    if norm == "no":
        return NO
    return SPAN


def select_gold_span(story: str, offsets: Sequence[tuple[int, int]], answer: str) -> tuple[int, int]:
    """Sub-span of the rationale tokens (given by their story char ranges) with
    the best word-overlap F1 against ``answer``; ties go to the shorter, then
    earlier span. With no overlap at all the whole rationale is returned.
    Indices are relative to ``offsets``."""
    n = len(offsets)
    if n == 0:
        raise ContractError("cannot select a gold span from an empty rationale")
    best, best_f1 = (0, n - 1), 0.0
    for length in range(1, n + 1):
        for i in range(0, n - length + 1):
            text = story[offsets[i][0] : offsets[i + length - 1][1]]
            f1 = f1_word_overlap(text, answer)
            if f1 > best_f1:
                best, best_f1 = (i, i + length - 1), f1
    return best


def build_example(
    doc: CoqaDocument,
    k: int,
    tokenizer: Tokenizer,
    max_seq_len: int = 512,
    max_question_tokens: int = 128,
    history_field: str = "answer",
) -> ReformulatedExample:
    """Assemble ``[CLS] Q* [SEP] C [SEP]`` with rationale and gold labels.

    Context that does not fit is cut from its tail. A span answer whose
    rationale lands entirely in the cut part is returned with ``usable=False``.
    """
    turn = doc.turns[k - 1]
    question_ids = reformulate(doc, k, tokenizer, max_question_tokens, history_field)
    room = max_seq_len - len(question_ids) - 3
    if room < 0:
        raise ContractError(
            f"max_seq_len {max_seq_len} cannot fit a {len(question_ids)}-token question"
        )
    context = tokenizer.tokenize(doc.story)[:room]
    cls_id, sep_id = tokenizer.token_to_id(CLS), tokenizer.token_to_id(SEP)
    ids = [cls_id] + question_ids + [sep_id]
    context_start = len(ids)
    ids += [tokenizer.token_to_id(t.text) for t in context] + [sep_id]
    context_end = context_start + len(context)
    offsets = [(-1, -1)] * context_start + [(t.start, t.end) for t in context] + [(-1, -1)]

    n = len(ids)
    rationale = np.zeros(n)
    atype = answer_type_of(turn)
    if atype != UNKNOWN:
        for pos, t in enumerate(context, start=context_start):
            if t.start < turn.span_end and t.end > turn.span_start:
                rationale[pos] = 1.0
    usable = True
    if atype == SPAN:
        positions = np.flatnonzero(rationale)
        if len(positions) == 0:
            usable = False
            start = end = context_start
        else:
            i, j = select_gold_span(doc.story, [offsets[p] for p in positions], turn.answer)
            start, end = int(positions[i]), int(positions[j])
    else:
        start = end = n + CLASS_SLOT[atype]
    return ReformulatedExample(
        doc_id=doc.id, turn_id=turn.turn_id, token_ids=ids,
        context_start=context_start, context_end=context_end, offsets=offsets,
        story=doc.story, question=turn.question, references=turn.references,
        source=doc.source, gold=GoldLabel(atype, start, end, rationale), usable=usable,
    )


@dataclass
class PreprocessStats:
    documents: int = 0
    examples: int = 0
    skipped: int = 0
    answer_types: Counter = field(default_factory=Counter)
    non_extractive: int = 0
    non_extractive_yes_no: int = 0

    @property
    def yes_no_share_of_non_extractive(self) -> float:
        return self.non_extractive_yes_no / self.non_extractive if self.non_extractive else 0.0

    def to_dict(self) -> dict:
        return {
            "documents": self.documents,
            "examples": self.examples,
            "skipped_unusable": self.skipped,
            "answer_types": {k: self.answer_types.get(k, 0) for k in ANSWER_TYPES},
            "non_extractive_answers": self.non_extractive,
            "non_extractive_share": self.non_extractive / self.examples if self.examples else 0.0,
            "yes_no_share_of_non_extractive": self.yes_no_share_of_non_extractive,
        }


def is_extractive(answer: str, story: str) -> bool:
    """True when the normalized answer occurs as contiguous normalized story words."""
    a = normalize_text(answer)
    s = normalize_text(story)
    k = len(a)
    return k > 0 and any(s[i : i + k] == a for i in range(len(s) - k + 1))


def build_examples(
    docs: Sequence[CoqaDocument],
    tokenizer: Tokenizer,
    max_seq_len: int = 512,
    max_question_tokens: int = 128,
    history_field: str = "answer",
) -> tuple[list[ReformulatedExample], PreprocessStats]:
    stats = PreprocessStats(documents=len(docs))
    out = []
    for doc in sorted(docs, key=lambda d: d.id):
        for turn in doc.turns:
            ex = build_example(doc, turn.turn_id, tokenizer, max_seq_len, max_question_tokens, history_field)
            stats.examples += 1
            stats.answer_types[ex.gold.answer_type] += 1
            if not ex.usable:
                stats.skipped += 1
            # unknowns are excluded from the free-form tally
            if ex.gold.answer_type != UNKNOWN and not is_extractive(turn.answer, doc.story):
                stats.non_extractive += 1
                if ex.gold.answer_type in (YES, NO):
                    stats.non_extractive_yes_no += 1
            out.append(ex)
    if stats.skipped:
        logger.info("%d of %d examples lost their rationale to truncation", stats.skipped, stats.examples)
    return out, stats


def write_examples(path, examples: Sequence[ReformulatedExample], vocab_hash: str) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": EXAMPLE_FORMAT_VERSION, "vocab_hash": vocab_hash}) + "\n")
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), separators=(",", ":")) + "\n")


def read_examples(path, vocab_hash: Optional[str] = None) -> list[ReformulatedExample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusParseError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != EXAMPLE_FORMAT_VERSION:
        raise CorpusParseError(f"{path}: unsupported example format {header.get('format')}")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise ContractError(
            f"{path} was built with vocabulary {header['vocab_hash']}, expected {vocab_hash}"
        )
    return [ReformulatedExample.from_record(json.loads(line)) for line in lines[1:]]


def read_examples_header(path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        return json.loads(fh.readline())
