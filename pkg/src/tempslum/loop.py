"""The iterative train / retrieve / pseudo-label / transfer loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .embedder import EmbedderModel, EmbeddingCache
from .geodata import LabeledTile, PoolState
from .model import Checkpoint
from .pseudo import AREA_THRESHOLD, PROB_THRESHOLD, pseudo_label, transfer_to_labeled, write_admission_log
from .scoring import score_pool, select_topk, write_candidates, write_scores
from .segmenter import SegmenterModel, TrainConfig, train_joint

log = logging.getLogger(__name__)

STARVATION_LIMIT = 3


@dataclass
class IterationRecord:
    iteration: int
    K: int
    n_selected_slum: int
    n_selected_nonslum: int
    n_overlap: int
    admitted_slum: int
    admitted_nonslum: int
    rejected: int
    cumulative_slum_added: int
    n_labeled: int
    n_unlabeled: int
    checkpoint_id: str
    wall_time: float = 0.0

    def comparable(self) -> dict:
        """Record contents minus the wall-clock field."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class StopCriterion:
    initial_pool_size: int
    target_ratio: float
    required_slums: int

    @classmethod
    def from_seed(cls, seed_slums: int, seed_total: int, initial_pool: int) -> "StopCriterion":
        return cls(initial_pool, seed_slums / seed_total, compute_stop_threshold(seed_slums, seed_total, initial_pool))


def compute_stop_threshold(seed_slums: int, seed_total: int, initial_pool: int) -> int:
    """Slum tiles to admit before the pool matches the seed set's slum ratio.

    Uses exact rational arithmetic so the ceiling is not disturbed by rounding.
    """
    if seed_total <= 0 or initial_pool <= 0:
        raise ValueError("seed_total and initial_pool must be positive")
    if seed_slums < 0:
        raise ValueError("seed_slums must be non-negative")
    return math.ceil(Fraction(seed_slums, seed_total) * initial_pool)


def should_stop(cumulative_slum_added: int, threshold: int) -> bool:
    return cumulative_slum_added >= threshold


@dataclass
class LoopResult:
    segmenter: SegmenterModel
    embedder: EmbedderModel
    checkpoint: Checkpoint
    seed_checkpoint: Checkpoint
    records: list[IterationRecord]
    pool: PoolState
    stop_reason: str
    criterion: StopCriterion
    checkpoints: list[str] = field(default_factory=list)

    def curve(self) -> list[tuple[int, int]]:
        """(iteration, cumulative admitted slum tiles), starting at iteration 0."""
        return [(0, 0)] + [(r.iteration, r.cumulative_slum_added) for r in self.records]


def _embed_all(embedder: EmbedderModel, tiles, cache: dict, disk: Optional[EmbeddingCache]) -> np.ndarray:
    todo = [t for t in tiles if t.tile_id not in cache]
    if todo:
        vecs = disk.get_or_compute(embedder, todo) if disk is not None else embedder.embed_batch(todo)
        for t, v in zip(todo, vecs):
            cache[t.tile_id] = v
    return np.asarray([cache[t.tile_id] for t in tiles]).reshape(len(tiles), -1)


def run(
    pool: PoolState,
    cfg: TrainConfig,
    K: int = 30,
    max_iterations: int = 50,
    val: Optional[Sequence[LabeledTile]] = None,
    area_thresh: float = AREA_THRESHOLD,
    prob_thresh: float = PROB_THRESHOLD,
    starvation_limit: int = STARVATION_LIMIT,
    artifacts: Optional[Path] = None,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> LoopResult:
    """Grow ``pool.labeled`` from the unlabeled pool until the stop rule fires.

    Each iteration embeds both pools with the current model, scores and
    selects K candidates per class, filters them by predicted slum area and
    moves the survivors into the labeled pool; the model is then fine-tuned
    from its previous weights if anything was admitted. ``pool`` is mutated.
    Halts on the slum-ratio threshold, ``max_iterations`` or after
    ``starvation_limit`` consecutive iterations without admissions.
    """
    n_slum = pool.count(1)
    if n_slum == 0 or pool.count(0) == 0:
        raise ValueError("seed labeled pool needs both slum and non-slum tiles")
    initial_pool = pool.initial_pool_size or len(pool.unlabeled)
    criterion = StopCriterion.from_seed(n_slum, len(pool.labeled), initial_pool)
    if artifacts is not None:
        artifacts = Path(artifacts)
        artifacts.mkdir(parents=True, exist_ok=True)
        (artifacts / "admissions.jsonl").write_text("")

    trained = train_joint(pool, cfg, val=val)
    seed_ckpt = trained.checkpoint
    ckpts = [seed_ckpt.checkpoint_id]
    log.info("seed model %s, stop threshold %d", seed_ckpt.checkpoint_id, criterion.required_slums)

    records: list[IterationRecord] = []
    cumulative = 0
    starving = 0
    emb_cache: dict[str, np.ndarray] = {}
    cache_ckpt = trained.checkpoint.checkpoint_id
    disk_cache = EmbeddingCache(artifacts / "embedding_cache") if artifacts is not None else None
    stop_reason = "max_iterations"

    for t in range(1, max_iterations + 1):
        if should_stop(cumulative, criterion.required_slums):
            stop_reason = "threshold"
            break
        if not pool.unlabeled:
            stop_reason = "stalled"
            break
        start = time.perf_counter()
        if trained.checkpoint.checkpoint_id != cache_ckpt:
            emb_cache.clear()
            cache_ckpt = trained.checkpoint.checkpoint_id

        unl = list(pool.unlabeled.values())
        lab = list(pool.labeled.values())
        unl_emb = _embed_all(trained.embedder, unl, emb_cache, disk_cache)
        lab_emb = _embed_all(trained.embedder, [lt.tile for lt in lab], emb_cache, None)
        scores = score_pool([x.tile_id for x in unl], unl_emb, lab_emb, [lt.label for lt in lab])
        cands = select_topk(scores, K)
        result = pseudo_label(cands, trained.segmenter, pool.unlabeled, area_thresh, prob_thresh)
        transfer_to_labeled(pool, result)

        n_adm_s, n_adm_n = len(result.admitted_slum), len(result.admitted_nonslum)
        cumulative += n_adm_s
        if artifacts is not None:
            write_scores(scores, artifacts / f"scores_iter{t:03d}.jsonl")
            write_candidates(cands, t, K, artifacts / f"candidates_iter{t:03d}.json")
            write_admission_log(result.log_rows(t), artifacts / "admissions.jsonl", mode="a")

        used_ckpt = trained.checkpoint.checkpoint_id
        if n_adm_s + n_adm_n > 0:
            starving = 0
            trained = train_joint(pool, cfg, init=trained.checkpoint, val=val, seed_offset=t)
            ckpts.append(trained.checkpoint.checkpoint_id)
        else:
            starving += 1

        rec = IterationRecord(
            iteration=t,
            K=K,
            n_selected_slum=len(cands.S_s),
            n_selected_nonslum=len(cands.S_ns),
            n_overlap=len(cands.removed_overlap),
            admitted_slum=n_adm_s,
            admitted_nonslum=n_adm_n,
            rejected=len(result.rejected),
            cumulative_slum_added=cumulative,
            n_labeled=len(pool.labeled),
            n_unlabeled=len(pool.unlabeled),
            checkpoint_id=used_ckpt,
            wall_time=time.perf_counter() - start,
        )
        records.append(rec)
        log.info(
            "iter %d: S_s=%d S_ns=%d overlap=%d admitted %d/%d cumulative %d/%d",
            t, rec.n_selected_slum, rec.n_selected_nonslum, rec.n_overlap,
            n_adm_s, n_adm_n, cumulative, criterion.required_slums,
        )
        if on_iteration is not None:
            on_iteration(rec)
        if should_stop(cumulative, criterion.required_slums):
            stop_reason = "threshold"
            break
        if starving >= starvation_limit:
            stop_reason = "stalled"
            break
    else:
        if max_iterations == 0 and should_stop(cumulative, criterion.required_slums):
            stop_reason = "threshold"

    return LoopResult(
        segmenter=trained.segmenter,
        embedder=trained.embedder,
        checkpoint=trained.checkpoint,
        seed_checkpoint=seed_ckpt,
        records=records,
        pool=pool,
        stop_reason=stop_reason,
        criterion=criterion,
        checkpoints=ckpts,
    )


def write_run_manifest(result: LoopResult, config: dict, seed_ids: Sequence[str], path: Path, created_at: Optional[str] = None) -> None:
    blob = {
        "config": config,
        "seed_ids": list(seed_ids),
        "stop_reason": result.stop_reason,
        "stop_threshold": result.criterion.required_slums,
        "initial_pool_size": result.criterion.initial_pool_size,
        "seed_checkpoint_id": result.seed_checkpoint.checkpoint_id,
        "final_checkpoint_id": result.checkpoint.checkpoint_id,
        "iterations": [r.comparable() for r in result.records],
        "wall_times": [r.wall_time for r in result.records],
        "timestamps": {"created_at": created_at},
    }
    Path(path).write_text(json.dumps(blob, indent=2, sort_keys=True))
