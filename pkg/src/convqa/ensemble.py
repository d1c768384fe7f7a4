"""Logit-averaging ensembles and genetic-algorithm subset search."""

from __future__ import annotations

import itertools
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .data import ReformulatedExample
from .errors import BudgetError, ContractError, CorpusParseError
from .evalmetric import EvalRecord, WordVectorStore, corpus_f1, post_process
from .qa_model import decode_logits

BRUTE_FORCE_LIMIT = 10**6


@dataclass
class LogitBundle:
    start: np.ndarray  # T
    end: np.ndarray  # T
    classes: np.ndarray  # yes, no, unknown

    def to_record(self, example_id: str) -> dict:
        return {
            "id": example_id,
            "T": len(self.start),
            "start": self.start.tolist(),
            "end": self.end.tolist(),
            "yes": float(self.classes[0]),
            "no": float(self.classes[1]),
            "unknown": float(self.classes[2]),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LogitBundle":
        start, end = np.array(rec["start"], dtype=np.float64), np.array(rec["end"], dtype=np.float64)
        if len(start) != rec["T"] or len(end) != rec["T"]:
            raise CorpusParseError(f"logit record {rec['id']}: length does not match T={rec['T']}")
        return cls(start, end, np.array([rec["yes"], rec["no"], rec["unknown"]], dtype=np.float64))


def write_logit_pool(path, model_name: str, logits: dict[str, LogitBundle], vocab_hash: str = "") -> None:
    lines = [json.dumps({"format": 1, "model": model_name, "vocab_hash": vocab_hash})]
    for key in sorted(logits):
        lines.append(json.dumps(logits[key].to_record(key), separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_logit_pool(path) -> tuple[str, dict[str, LogitBundle], dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusParseError(f"{path} is empty")
    header = json.loads(lines[0])
    out = {}
    for line in lines[1:]:
        rec = json.loads(line)
        out[rec["id"]] = LogitBundle.from_record(rec)
    return header["model"], out, header


def mask_of(indices: Iterable[int]) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << int(i)
    return mask


def indices_of(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


class CandidatePool:
    """Per-model logits for a shared set of examples, plus a fitness memo."""

    def __init__(
        self,
        names: Sequence[str],
        logits: Sequence[dict[str, LogitBundle]],
        examples: Sequence[ReformulatedExample],
        store: Optional[WordVectorStore] = None,
        max_answer_len: int = 30,
    ):
        if len(names) != len(logits) or not names:
            raise ContractError("need one logit table per model name, and at least one model")
        ids = [ex.example_id for ex in examples]
        for name, table in zip(names, logits):
            if set(table) != set(ids):
                raise ContractError(f"model {name} does not cover the same examples as the pool")
            for ex in examples:
                if len(table[ex.example_id].start) != ex.length:
                    raise ContractError(f"model {name}: wrong length for {ex.example_id}")
        self.names = list(names)
        self.logits = list(logits)
        self.examples = list(examples)
        self.store = store
        self.max_answer_len = max_answer_len
        self._memo: dict[int, float] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    @property
    def num_models(self) -> int:
        return len(self.names)

    @classmethod
    def from_files(cls, paths: Sequence, examples: Sequence[ReformulatedExample], **kw) -> "CandidatePool":
        names, tables = [], []
        for p in paths:
            name, table, _ = read_logit_pool(p)
            names.append(name)
            tables.append(table)
        return cls(names, tables, examples, **kw)

    def predictions(self, mask: int) -> dict[str, str]:
        selection = indices_of(mask)
        out = {}
        for ex in self.examples:
            avg = average_logits(self, selection, ex.example_id)
            answer = decode_logits(avg.start, avg.end, avg.classes, ex, self.max_answer_len)
            if self.store is not None:
                answer = post_process(ex.question, answer, self.store)
            out[ex.example_id] = answer
        return out

    def evaluate(self, mask: int) -> float:
        """Fitness without the memo."""
        preds = self.predictions(mask)
        records = [
            EvalRecord(ex.example_id, preds[ex.example_id], tuple(ex.references), ex.source)
            for ex in self.examples
        ]
        return corpus_f1(records)["overall"]

    def fitness(self, mask: int) -> float:
        with self._lock:
            if mask in self._memo:
                return self._memo[mask]
        value = self.evaluate(mask)
        with self._lock:
            self._memo.setdefault(mask, value)
            self.evaluations += 1
        return value


def average_logits(pool: CandidatePool, selection: Sequence[int], example_id: str) -> LogitBundle:
    """Arithmetic mean of each logit group over the selected models."""
    selection = list(selection)
    if not selection:
        raise ContractError("cannot average an empty selection")
    bundles = [pool.logits[i][example_id] for i in selection]
    return LogitBundle(
        np.mean([b.start for b in bundles], axis=0),
        np.mean([b.end for b in bundles], axis=0),
        np.mean([b.classes for b in bundles], axis=0),
    )


def fitness(pool: CandidatePool, selection: Sequence[int]) -> float:
    return pool.fitness(mask_of(selection))


# ------------------------------------------------------------------ search
class Objective(Protocol):
    num_models: int

    def fitness(self, mask: int) -> float: ...


@dataclass
class GAConfig:
    population_size: int = 50
    max_generations: int = 200
    tournament_size: int = 3
    mutation_rate: Optional[float] = None  # default 1 / M
    elitism: int = 2
    max_ensemble_size: int = 9
    stagnation: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ContractError("population_size must be at least 2")
        if self.max_generations < 1:
            raise ContractError("max_generations must be at least 1")
        if self.max_ensemble_size < 1:
            raise ContractError("max_ensemble_size must be at least 1")


@dataclass
class Chromosome:
    mask: int
    fitness: float

    @property
    def members(self) -> list[int]:
        return indices_of(self.mask)


@dataclass
class GAResult:
    best: Chromosome
    trace: list[tuple[float, float]]  # per generation: (best, worst) of the population
    generations: int
    evaluated_masks: set = field(default_factory=set)


def _repair(bits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    on = np.flatnonzero(bits)
    if len(on) > k:
        drop = rng.choice(on, size=len(on) - k, replace=False)
        bits[drop] = False
    elif len(on) == 0:
        bits[rng.integers(len(bits))] = True
    return bits


def _to_mask(bits: np.ndarray) -> int:
    return mask_of(np.flatnonzero(bits))


def _to_bits(mask: int, m: int) -> np.ndarray:
    return np.array([bool(mask >> i & 1) for i in range(m)])


def ga_search(pool: Objective, config: GAConfig) -> GAResult:
    """Tournament selection, uniform crossover, per-bit mutation, repair into
    the size limit, and elitism. Stops after ``max_generations`` generations
    or ``stagnation`` generations without a new best."""
    m = pool.num_models
    if m < 1:
        raise ContractError("pool has no models")
    k = min(config.max_ensemble_size, m)
    rng = np.random.default_rng(config.seed)
    seen: set[int] = set()

    def score(mask: int) -> Chromosome:
        seen.add(mask)
        return Chromosome(mask, pool.fitness(mask))

    if m == 1:
        only = score(1)
        return GAResult(only, [(only.fitness, only.fitness)], 0, seen)

    rate = config.mutation_rate if config.mutation_rate is not None else 1.0 / m
    population = []
    for _ in range(config.population_size):
        size = int(rng.integers(1, k + 1))
        population.append(score(mask_of(rng.choice(m, size=size, replace=False))))

    def rank(pop):
        return sorted(pop, key=lambda c: (-c.fitness, c.mask))

    def tournament(pop):
        picks = rng.integers(len(pop), size=config.tournament_size)
        return min((pop[i] for i in picks), key=lambda c: (-c.fitness, c.mask))

    ranked = rank(population)
    best = ranked[0]
    trace = [(ranked[0].fitness, ranked[-1].fitness)]
    stale = 0
    generation = 0
    for generation in range(1, config.max_generations):
        children = [Chromosome(c.mask, c.fitness) for c in ranked[: config.elitism]]
        while len(children) < config.population_size:
            a, b = _to_bits(tournament(ranked).mask, m), _to_bits(tournament(ranked).mask, m)
            child = np.where(rng.random(m) < 0.5, a, b)
            child ^= rng.random(m) < rate
            children.append(score(_to_mask(_repair(child, k, rng))))
        ranked = rank(children)
        trace.append((ranked[0].fitness, ranked[-1].fitness))
        if ranked[0].fitness > best.fitness:
            best, stale = ranked[0], 0
        else:
            stale += 1
            if stale >= config.stagnation:
                break
    return GAResult(best, trace, generation, seen)


def count_subsets(m: int, k: int) -> int:
    return sum(math.comb(m, j) for j in range(1, min(k, m) + 1))


def brute_force_search(pool: Objective, max_size: int) -> Chromosome:
    """Exact optimum over all non-empty subsets of at most ``max_size`` models;
    ties go to the numerically smallest mask."""
    m = pool.num_models
    total = count_subsets(m, max_size)
    if total > BRUTE_FORCE_LIMIT:
        raise BudgetError(f"{total} subsets exceed the brute-force limit of {BRUTE_FORCE_LIMIT}")
    best: Optional[Chromosome] = None
    for size in range(1, min(max_size, m) + 1):
        for combo in itertools.combinations(range(m), size):
            mask = mask_of(combo)
            f = pool.fitness(mask)
            if best is None or f > best.fitness or (f == best.fitness and mask < best.mask):
                best = Chromosome(mask, f)
    return best


def write_trace(path, trace: Sequence[tuple[float, float]]) -> None:
    lines = ["generation\tbest\tworst"]
    lines += [f"{g}\t{b!r}\t{w!r}" for g, (b, w) in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
