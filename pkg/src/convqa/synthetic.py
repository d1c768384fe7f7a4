"""Small synthetic conversations in the official CoQA JSON layout.

Each turn is one of four kinds: "what comes after W ?" (two-word span
answer), "is W mentioned ?" (yes or no) and "what about W ?" (unknown).
There is also a generator for fake per-model logit tables, used to exercise
ensemble search.
"""

from __future__ import annotations

import argparse
import json
from typing import Optional, Sequence

import numpy as np

TEMPLATE_WORDS = ("what", "comes", "after", "is", "mentioned", "about", "yes", "no", "unknown")
KIND_WEIGHTS = {"span": 0.5, "yes": 0.2, "no": 0.15, "unknown": 0.15}


def word_list(n: int) -> list[str]:
    return [f"w{i:03d}" for i in range(n)]


def make_corpus(
    num_docs: int = 20,
    turns: int = 3,
    vocab_size: int = 200,
    story_words: int = 24,
    seed: int = 0,
    extra_references: int = 0,
) -> dict:
    """``vocab_size`` counts content words plus template words plus the
    "." and "?" marks; the tokenizer adds its own special tokens on top."""
    rng = np.random.default_rng(seed)
    n_content = vocab_size - len(TEMPLATE_WORDS) - 2
    if n_content < story_words + 4:
        raise ValueError("vocab_size too small for the requested story length")
    words = word_list(n_content)
    kinds = list(KIND_WEIGHTS)
    probs = np.array([KIND_WEIGHTS[k] for k in kinds])
    data = []
    for d in range(num_docs):
        picks = rng.choice(n_content, size=story_words, replace=False)
        story_tokens = [words[i] for i in picks]
        pieces, starts = [], []
        pos = 0
        for i, w in enumerate(story_tokens):
            starts.append(pos)
            pieces.append(w)
            pos += len(w)
            if i % 8 == 7 and i != len(story_tokens) - 1:
                pieces.append(" .")
                pos += 2
            if i != len(story_tokens) - 1:
                pieces.append(" ")
                pos += 1
        story = "".join(pieces) + " ."
        absent = [words[i] for i in range(n_content) if i not in set(picks.tolist())]
        questions, answers = [], []
        extra = {str(k): [] for k in range(extra_references)}
        for t in range(1, turns + 1):
            kind = kinds[rng.choice(len(kinds), p=probs)]
            if kind == "span":
                p = int(rng.integers(0, story_words - 2))
                q = f"what comes after {story_tokens[p]} ?"
                s, e = starts[p], starts[p + 2] + len(story_tokens[p + 2])
                answer = f"{story_tokens[p + 1]} {story_tokens[p + 2]}"
            elif kind == "yes":
                p = int(rng.integers(0, story_words))
                q = f"is {story_tokens[p]} mentioned ?"
                s, e = starts[p], starts[p] + len(story_tokens[p])
                answer = "yes"
            elif kind == "no":
                w = absent[int(rng.integers(0, len(absent)))]
                q = f"is {w} mentioned ?"
                s, e = starts[0], starts[0] + len(story_tokens[0])
                answer = "no"
            else:
                w = absent[int(rng.integers(0, len(absent)))]
                q = f"what about {w} ?"
                s = e = -1
                answer = "unknown"
            questions.append({"input_text": q, "turn_id": t})
            answers.append(
                {
                    "input_text": answer,
                    "span_start": s,
                    "span_end": e,
                    "span_text": story[s:e] if s >= 0 else "unknown",
                    "turn_id": t,
                }
            )
            for k in range(extra_references):
                extra[str(k)].append({"input_text": answer, "turn_id": t})
        doc = {"id": f"syn{d:04d}", "source": "synthetic", "story": story,
               "questions": questions, "answers": answers}
        if extra_references:
            doc["additional_answers"] = extra
        data.append(doc)
    return {"version": "synthetic", "data": data}


def make_logit_pool(
    examples: Sequence,
    num_models: int = 12,
    seed: int = 0,
    noise: float = 1.0,
    skill_range: tuple[float, float] = (0.3, 1.5),
) -> tuple[list[str], list[dict]]:
    """Fake per-model logits for ``examples``: independent Gaussian noise plus
    a model-specific bump on the gold start, end or class slot. Averaging
    models cancels noise, so subsets differ in quality in a non-trivial way.

    Returns ``(names, tables)`` in the shape :class:`CandidatePool` expects.
    """
    from .data import CLASS_SLOT, SPAN
    from .ensemble import LogitBundle

    rng = np.random.default_rng(seed)
    skills = rng.uniform(*skill_range, size=num_models)
    names, tables = [], []
    for m in range(num_models):
        table = {}
        for ex in examples:
            n = ex.length
            start, end = rng.normal(0.0, noise, n), rng.normal(0.0, noise, n)
            classes = rng.normal(0.0, noise, 3)
            gold = ex.gold
            if gold.answer_type == SPAN:
                start[gold.start] += skills[m]
                end[gold.end] += skills[m]
            else:
                classes[CLASS_SLOT[gold.answer_type]] += skills[m]
            table[ex.example_id] = LogitBundle(start, end, classes)
        names.append(f"synthetic{m:02d}")
        tables.append(table)
    return names, tables


def main(argv: Optional[list[str]] = None) -> None:
    ap = argparse.ArgumentParser(description="Write a synthetic CoQA-format corpus.")
    ap.add_argument("--out", required=True)
    ap.add_argument("--docs", type=int, default=20)
    ap.add_argument("--turns", type=int, default=3)
    ap.add_argument("--vocab", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    corpus = make_corpus(args.docs, args.turns, args.vocab, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(corpus, fh, indent=1)


if __name__ == "__main__":
    main()
