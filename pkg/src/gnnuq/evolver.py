"""Aging-evolution architecture search with a persistent JSON-lines catalog.

The coordinator owns the population (a FIFO of catalog records) and the
catalog file. Evaluations run in-process for ``workers == 1`` and in a
process pool otherwise; parents are chosen when an evaluation is
dispatched, children join the population when it completes.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .archspace import (DEFAULT_SPACE, Genome, SearchSpace, genome_from_dict, genome_to_dict,
                        mutate, random_genome)
from .errors import GnnuqError, MalformedJson, VersionMismatch
from .rng import SplitMix64, derive_seed
from .trainer import DivergedLoss, TrainConfig, TrainData, train

logger = logging.getLogger(__name__)

# stream keys under derive_seed(cfg.seed, eval_id, key)
PROPOSE, INIT, SHUFFLE = 0, 1, 2


class InsufficientRecords(GnnuqError, ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    total_evals: int = 1000
    population_size: int = 100
    sample_size: int = 10
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if not 1 <= self.sample_size <= self.population_size <= self.total_evals:
            raise ValueError("need 1 <= sample_size <= population_size <= total_evals")


@dataclass(frozen=True)
class CatalogRecord:
    eval_id: int
    genome: Genome
    val_nll: float
    worker_id: int = 0
    parent_eval_id: int | None = None
    train_seconds: float = 0.0

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.val_nll)

    def to_json(self) -> str:
        # timing lives in a sidecar file so the catalog itself is reproducible
        d = {
            "eval_id": self.eval_id,
            "genome": genome_to_dict(self.genome),
            "val_nll": None if self.failed else self.val_nll,
            "failed": self.failed,
            "worker_id": self.worker_id,
            "parent_eval_id": self.parent_eval_id,
        }
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str, space: SearchSpace = DEFAULT_SPACE) -> "CatalogRecord":
        try:
            d = json.loads(text)
            genome = genome_from_dict(d["genome"], space)
            val = math.inf if d["failed"] or d["val_nll"] is None else float(d["val_nll"])
            return cls(int(d["eval_id"]), genome, val, int(d.get("worker_id", 0)),
                       d.get("parent_eval_id"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedJson(f"bad catalog line: {exc}") from exc


def timing_path(catalog_path) -> Path:
    p = Path(catalog_path)
    return p.with_name(p.name + ".timing.jsonl")


def load_catalog(path, space: SearchSpace = DEFAULT_SPACE) -> list[CatalogRecord]:
    """Read a catalog; a torn final line (interrupted write) is dropped."""
    path = Path(path)
    if not path.exists():
        return []
    text = path.read_text()
    lines = text.split("\n")
    records = []
    for k, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(CatalogRecord.from_json(line, space))
        except MalformedJson:
            if k == len(lines) - 1:
                logger.warning("%s: dropping incomplete final line", path)
                path.write_text("".join(l + "\n" for l in lines[:k] if l.strip()))
                break
            raise
        except VersionMismatch as exc:
            raise VersionMismatch(f"{path}: {exc}") from None
    seconds = {}
    tp = timing_path(path)
    if tp.exists():
        for line in tp.read_text().splitlines():
            try:
                d = json.loads(line)
                seconds[int(d["eval_id"])] = float(d["train_seconds"])
            except (json.JSONDecodeError, KeyError, ValueError):
                continue
    return [replace(r, train_seconds=seconds.get(r.eval_id, 0.0)) for r in records]


class _CatalogWriter:
    def __init__(self, path):
        self.path = None if path is None else Path(path)

    def append(self, rec: CatalogRecord) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        with open(timing_path(self.path), "a") as fh:
            fh.write(json.dumps({"eval_id": rec.eval_id, "train_seconds": rec.train_seconds}) + "\n")


# ---------------------------------------------------------------------------
# evaluators


class TrainingEvaluator:
    """Build the genome's model and train it; the score is the final validation NLL."""

    def __init__(self, space: SearchSpace, train_data: TrainData, val_data: TrainData,
                 n_max: int, e_max: int, cfg: TrainConfig):
        self.space, self.train_data, self.val_data = space, train_data, val_data
        self.n_max, self.e_max, self.cfg = n_max, e_max, cfg

    def __call__(self, genome: Genome, seed: int) -> float:
        from .mpnn import instantiate

        model = instantiate(self.space, genome, self.n_max, self.e_max,
                            init_seed=derive_seed(seed, INIT))
        cfg = replace(self.cfg, seed=derive_seed(seed, SHUFFLE), keep_best_on_val=False)
        try:
            _, hist = train(model, self.train_data, self.val_data, cfg)
        except (DivergedLoss, FloatingPointError, ValueError) as exc:
            logger.info("evaluation failed: %s", exc)
            return math.inf
        val = hist.val_nll[-1] if hist.val_nll else hist.initial_val_nll
        return val if math.isfinite(val) else math.inf


class SurrogateEvaluator:
    """Deterministic genome score for exercising the search without training.

    Additive per-gene costs drawn from a seeded table, so single-gene
    mutations make measurable progress.
    """

    def __init__(self, space: SearchSpace = DEFAULT_SPACE, seed: int = 0):
        rng = SplitMix64(seed)
        self.table = [rng.uniform_array(n) for n in space.sizes]

    def __call__(self, genome: Genome, seed: int = 0) -> float:
        return float(sum(t[v] for t, v in zip(self.table, genome.genes)))


# ---------------------------------------------------------------------------
# search

_worker_evaluator = None


def _init_worker(evaluator) -> None:
    global _worker_evaluator
    _worker_evaluator = evaluator


def _timed(evaluator, genome: Genome, seed: int) -> tuple[float, float]:
    t0 = time.perf_counter()
    try:
        val = float(evaluator(genome, seed))
    except Exception as exc:  # an evaluation failure must not end the search
        logger.warning("evaluation raised %s: %s", type(exc).__name__, exc)
        val = math.inf
    if not math.isfinite(val):
        val = math.inf
    return val, time.perf_counter() - t0


def _pool_task(genome: Genome, seed: int) -> tuple[float, float]:
    return _timed(_worker_evaluator, genome, seed)


@dataclass
class SearchState:
    """Population plus bookkeeping, rebuilt from a catalog when resuming."""

    population_size: int
    population: deque = field(default_factory=deque)
    records: list = field(default_factory=list)

    def insert(self, rec: CatalogRecord) -> None:
        self.records.append(rec)
        self.population.append(rec)
        if len(self.population) > self.population_size:
            self.population.popleft()


def _propose(space: SearchSpace, state: SearchState, cfg: SearchConfig, eval_id: int):
    rng = SplitMix64(derive_seed(cfg.seed, eval_id, PROPOSE))
    if eval_id < cfg.population_size:
        return random_genome(space, rng), None
    pop = list(state.population)
    picks = rng.sample_without_replacement(len(pop), cfg.sample_size)
    parent = min((pop[i] for i in picks), key=lambda r: (r.val_nll, r.eval_id))
    return mutate(space, parent.genome, rng), parent.eval_id


def run_search(space: SearchSpace, evaluator: Callable[[Genome, int], float], cfg: SearchConfig,
               catalog_path=None, on_record: Callable[[CatalogRecord, SearchState], None] | None = None
               ) -> list[CatalogRecord]:
    """Run (or resume) aging evolution until ``cfg.total_evals`` records exist.

    ``evaluator(genome, seed)`` returns a validation loss; lower is better.
    Existing catalog records are replayed in file order to rebuild the
    population. Returns all records in completion order.
    """
    state = SearchState(cfg.population_size)
    for rec in load_catalog(catalog_path, space) if catalog_path else []:
        state.insert(rec)
    writer = _CatalogWriter(catalog_path)
    done = {r.eval_id for r in state.records}
    todo = [i for i in range(cfg.total_evals) if i not in done]
    if state.records:
        logger.info("resuming: %d records, %d to go", len(state.records), len(todo))

    def complete(eval_id, genome, parent, worker, result):
        val, secs = result
        rec = CatalogRecord(eval_id, genome, val, worker, parent, secs)
        state.insert(rec)
        writer.append(rec)
        if on_record is not None:
            on_record(rec, state)

    def ready(eval_id: int) -> bool:
        # mutation starts once the initial population is complete
        return eval_id < cfg.population_size or len(state.population) >= cfg.population_size

    if cfg.workers == 1:
        for eval_id in todo:
            genome, parent = _propose(space, state, cfg, eval_id)
            complete(eval_id, genome, parent, 0,
                     _timed(evaluator, genome, derive_seed(cfg.seed, eval_id)))
        return state.records

    pending = {}
    free = list(range(cfg.workers))
    queue = deque(todo)
    with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_worker,
                             initargs=(evaluator,)) as pool:
        while queue or pending:
            while queue and free and ready(queue[0]):
                eval_id = queue.popleft()
                genome, parent = _propose(space, state, cfg, eval_id)
                worker = free.pop(0)
                fut = pool.submit(_pool_task, genome, derive_seed(cfg.seed, eval_id))
                pending[fut] = (eval_id, genome, parent, worker)
            finished, _ = wait(list(pending), return_when=FIRST_COMPLETED)
            for fut in sorted(finished, key=lambda f: pending[f][0]):
                eval_id, genome, parent, worker = pending.pop(fut)
                free.append(worker)
                free.sort()
                complete(eval_id, genome, parent, worker, fut.result())
    return state.records


def select_top_k(records: list[CatalogRecord], k: int) -> list[CatalogRecord]:
    """Lowest validation loss first, ties by eval_id, one record per genome."""
    seen, unique = set(), []
    for rec in sorted((r for r in records if not r.failed), key=lambda r: r.eval_id):
        if rec.genome.genes not in seen:
            seen.add(rec.genome.genes)
            unique.append(rec)
    if len(unique) < k:
        raise InsufficientRecords(f"need {k} distinct finite records, catalog has {len(unique)}")
    return sorted(unique, key=lambda r: (r.val_nll, r.eval_id))[:k]


def random_baseline(space: SearchSpace, k: int = 10, seed: int = 0) -> list[Genome]:
    """``k`` distinct uniformly random genomes."""
    rng = SplitMix64(seed)
    out, seen = [], set()
    if k > np.prod(space.sizes, dtype=float):
        raise ValueError("k exceeds the number of distinct genomes")
    while len(out) < k:
        g = random_genome(space, rng)
        if g.genes not in seen:
            seen.add(g.genes)
            out.append(g)
    return out
