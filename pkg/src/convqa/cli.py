"""Command-line entry point: ``convqa <command> [flags]``.

Exit codes: 0 on success, 1 on runtime or integrity errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from .ensemble import CandidatePool, GAConfig, LogitBundle, ga_search, read_logit_pool, write_logit_pool, write_trace
from .errors import ContractError, ConvQAError
from .evalmetric import EvalRecord, WordVectorStore, corpus_f1, post_process, upper_bound
from .qa_model import decode_logits
from .regularizers import STUDENT, TEACHER, TeacherLabelSet
from .trainer import TrainConfig, Trainer, generate_teacher_labels, load_checkpoint, write_log

logger = logging.getLogger("convqa")

EXAMPLES_FILE = "examples.jsonl"
VOCAB_FILE = "vocab.txt"
STATS_FILE = "stats.json"
CHECKPOINT_FILE = "checkpoint.bin"
TRAIN_LOG_FILE = "train_log.tsv"
PREDICTIONS_FILE = "predictions.jsonl"
LOGITS_FILE = "logits.jsonl"


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj, out: Optional[str], name: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text + "\n", encoding="utf-8")
    print(text)


def _examples_paths(arg: str) -> tuple[Path, Path]:
    """``--examples`` names a preprocess output directory or its example file."""
    p = Path(arg)
    if p.is_dir():
        return p / EXAMPLES_FILE, p / VOCAB_FILE
    return p, p.parent / VOCAB_FILE


def _load_examples(arg: str) -> tuple[list[D.ReformulatedExample], D.Tokenizer]:
    ex_path, vocab_path = _examples_paths(arg)
    tokenizer = D.Tokenizer.load(vocab_path)
    return D.read_examples(ex_path, tokenizer.hash), tokenizer


def _train_config(args) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "max_steps": getattr(args, "max_steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
    }
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------- commands
def cmd_preprocess(args) -> int:
    docs = D.load_corpus(args.coqa)
    vocab_path = Path(args.vocab) if args.vocab else None
    if vocab_path is not None and vocab_path.exists():
        tokenizer = D.Tokenizer.load(vocab_path)
    else:
        texts = [d.story for d in docs] + [t.question for d in docs for t in d.turns]
        texts += [t.answer for d in docs for t in d.turns]
        tokenizer = D.Tokenizer.build(texts, max_size=args.vocab_size)
        if vocab_path is not None:
            tokenizer.save(vocab_path)
    cfg = _train_config(args)
    examples, stats = D.build_examples(
        docs, tokenizer, args.max_seq_len or cfg.max_seq_len, args.max_question_tokens
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer.save(out / VOCAB_FILE)
    D.write_examples(out / EXAMPLES_FILE, examples, tokenizer.hash)
    report = stats.to_dict()
    report["vocab_hash"] = tokenizer.hash
    report["vocab_size"] = len(tokenizer)
    _dump_json(out / STATS_FILE, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    examples, tokenizer = _load_examples(args.examples)
    cfg = _train_config(args)
    labels = None
    if args.mode == STUDENT:
        if not args.teacher_labels:
            raise ContractError("--mode student requires --teacher-labels")
        labels = TeacherLabelSet.load(args.teacher_labels, tokenizer.hash)
    from .qa_model import QAModel

    model = QAModel.initialize(cfg.encoder_config(len(tokenizer)), seed=cfg.seed)
    trainer = Trainer(model, cfg, args.mode, labels, tokenizer.hash)

    def report(rec):
        logger.info("step %d total %.4f lr %.3g", rec["step"], rec["total"], rec["lr"])

    log = trainer.train(examples, callback=report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / CHECKPOINT_FILE)
    write_log(out / TRAIN_LOG_FILE, log)
    print(f"trained {trainer.step} steps; checkpoint at {out / CHECKPOINT_FILE}")
    return 0


def cmd_distill_labels(args) -> int:
    examples, tokenizer = _load_examples(args.examples)
    labels = generate_teacher_labels(args.checkpoints, examples, tokenizer.hash)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    labels.save(args.out, tokenizer.hash)
    print(f"wrote {len(labels)} teacher labels to {args.out}")
    return 0


def _vector_store(args, model, tokenizer) -> WordVectorStore:
    if args.vectors:
        return WordVectorStore.from_text_file(args.vectors)
    return WordVectorStore.from_embedding_table(tokenizer.vocab, model.params["embeddings.token"].data)


def cmd_predict(args) -> int:
    examples, tokenizer = _load_examples(args.examples)
    ckpt = load_checkpoint(args.checkpoint, tokenizer.hash)
    model = ckpt.model
    store = _vector_store(args, model, tokenizer) if args.post_process else None
    logits, predictions = {}, []
    for ex in examples:
        o = model.forward(ex)
        bundle = LogitBundle(o.start_logits.data, o.end_logits.data, o.class_logits.data)
        logits[ex.example_id] = bundle
        answer = decode_logits(bundle.start, bundle.end, bundle.classes, ex, ckpt.config.max_answer_len)
        changed = False
        if store is not None:
            processed = post_process(ex.question, answer, store)
            changed, answer = processed != answer, processed
        predictions.append({"id": ex.doc_id, "turn_id": ex.turn_id, "answer": answer, "post_processed": changed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"format": 1, "vocab_hash": tokenizer.hash, "post_process": bool(args.post_process),
              "train_config": ckpt.config.to_dict()}
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(p, sort_keys=True) for p in predictions]
    (out / PREDICTIONS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_logit_pool(out / LOGITS_FILE, args.name or Path(args.checkpoint).stem, logits, tokenizer.hash)
    print(f"wrote {len(predictions)} predictions to {out / PREDICTIONS_FILE}")
    return 0


def read_predictions(path) -> dict[str, dict]:
    """Line-delimited {id, turn_id, answer} records (a leading header line
    without an answer is skipped), or the official JSON list of the same."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    out = {}
    for rec in records:
        if "answer" not in rec:
            continue
        key = f"{rec['id']}|{rec['turn_id']}"
        if key in out:
            raise ContractError(f"duplicate prediction for {key}")
        out[key] = rec
    return out


def cmd_eval(args) -> int:
    preds = read_predictions(args.predictions)
    docs = D.load_corpus(args.coqa)
    records, known = [], set()
    for doc in docs:
        for turn in doc.turns:
            key = f"{doc.id}|{turn.turn_id}"
            known.add(key)
            answer = preds[key]["answer"] if key in preds else ""
            records.append(EvalRecord(key, answer, tuple(turn.references), doc.source))
    stray = sorted(set(preds) - known)
    if stray:
        raise ContractError(f"{len(stray)} predictions do not match any question, e.g. {stray[0]}")
    report = corpus_f1(records)
    report["missing_predictions"] = len(known - set(preds))
    report["post_processed"] = sum(1 for rec in preds.values() if rec.get("post_processed"))
    _emit(report, args.out, "eval.json")
    return 0


def cmd_ensemble_search(args) -> int:
    examples, tokenizer = _load_examples(args.examples)
    pool_files = sorted(Path(args.pools).glob("*.jsonl"))
    if not pool_files:
        raise ContractError(f"no logit pools (*.jsonl) in {args.pools}")
    names, tables = [], []
    for path in pool_files:
        name, table, header = read_logit_pool(path)
        if header.get("vocab_hash") != tokenizer.hash:
            raise ContractError(f"{path} was produced with a different vocabulary")
        names.append(name)
        tables.append(table)
    store = WordVectorStore.from_text_file(args.vectors) if args.vectors else None
    pool = CandidatePool(names, tables, examples, store=store)
    config = GAConfig(
        population_size=args.population, max_generations=args.generations,
        max_ensemble_size=args.max_size, seed=args.seed if args.seed is not None else 0,
    )
    result = ga_search(pool, config)
    report = {
        "members": [names[i] for i in result.best.members],
        "fitness": result.best.fitness,
        "generations": result.generations,
        "pool_size": len(names),
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_trace(Path(args.out) / "trace.tsv", result.trace)
    _emit(report, args.out, "ensemble.json")
    return 0


def cmd_upper_bound(args) -> int:
    docs = D.load_corpus(args.coqa)
    records = []
    for doc in docs:
        for turn in doc.turns:
            refs = [turn.answer] if args.refs == "1" else turn.references
            records.append((doc.source, upper_bound(doc.story, refs)))
    by_source: dict[str, list[float]] = {}
    for src, v in records:
        by_source.setdefault(src, []).append(v)
    report = {
        "refs": args.refs,
        "overall": sum(v for _, v in records) / len(records) if records else 0.0,
        "count": len(records),
        "by_source": {s: {"upper_bound": sum(v) / len(v), "count": len(v)} for s, v in sorted(by_source.items())},
    }
    _emit(report, args.out, "upper_bound.json")
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key=value training config file")
    shared.add_argument("--seed", type=int, help="random seed (overrides the config)")
    shared.add_argument("--out", help="output directory (or file, for distill-labels)")
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    ap = argparse.ArgumentParser(prog="convqa", description="Extractive conversational QA toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared], help="build examples from a CoQA JSON file")
    p.add_argument("--coqa", required=True, help="CoQA-format JSON file")
    p.add_argument("--vocab", help="vocabulary file; built from the corpus and written here if missing")
    p.add_argument("--vocab-size", type=int, help="cap on the built vocabulary size")
    p.add_argument("--max-seq-len", type=int, help="maximum input length in tokens")
    p.add_argument("--max-question-tokens", type=int, default=128, help="history + question budget")
    p.set_defaults(func=cmd_preprocess, needs_out=True)

    p = sub.add_parser("train", parents=[shared], help="train a teacher or student model")
    p.add_argument("--examples", required=True, help="preprocess output directory")
    p.add_argument("--mode", choices=(TEACHER, STUDENT), default=TEACHER)
    p.add_argument("--teacher-labels", help="teacher label cache (student mode)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("distill-labels", parents=[shared], help="average teacher distributions")
    p.add_argument("--checkpoints", nargs="+", required=True, help="teacher checkpoint files")
    p.add_argument("--examples", required=True, help="preprocess output directory")
    p.set_defaults(func=cmd_distill_labels, needs_out=True)

    p = sub.add_parser("predict", parents=[shared], help="decode answers and dump logits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--examples", required=True, help="preprocess output directory")
    p.add_argument("--post-process", action="store_true", help="map answers onto choice options")
    p.add_argument("--vectors", help="word vector text file for post-processing")
    p.add_argument("--name", help="model name recorded in the logit pool")
    p.set_defaults(func=cmd_predict, needs_out=True)

    p = sub.add_parser("eval", parents=[shared], help="score predictions against a CoQA file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--coqa", required=True)
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("ensemble-search", parents=[shared], help="GA search over logit pools")
    p.add_argument("--pools", required=True, help="directory of logit-pool files")
    p.add_argument("--examples", required=True, help="preprocess output directory")
    p.add_argument("--max-size", type=int, default=9, help="maximum ensemble size K")
    p.add_argument("--generations", type=int, default=200)
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--vectors", help="word vector text file; enables post-processing")
    p.set_defaults(func=cmd_ensemble_search, needs_out=False)

    p = sub.add_parser("upper-bound", parents=[shared], help="extractive F1 ceiling")
    p.add_argument("--coqa", required=True)
    p.add_argument("--refs", choices=("1", "all"), default="all",
                   help="score against the first reference only or all references")
    p.set_defaults(func=cmd_upper_bound, needs_out=False)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvQAError, OSError, ValueError, KeyError) as exc:
        print(f"convqa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
