"""Cosine-similarity scoring of unlabeled tiles and exclusive top-K selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ScoringError(ValueError):
    pass


@dataclass
class ScoreRecord:
    tile_id: str
    mu_s: float
    mu_n: float


@dataclass
class CandidateSets:
    S_s: list[str] = field(default_factory=list)
    S_ns: list[str] = field(default_factory=list)
    removed_overlap: list[str] = field(default_factory=list)


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ScoringError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ScoringError("undefined similarity: zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ScoringError("undefined similarity: zero vector")
    return x / norms


def score_pool(
    pool_ids: Sequence[str],
    pool_embeddings: np.ndarray,
    labeled_embeddings: np.ndarray,
    labeled_labels: Sequence[int],
    block: int = 4096,
) -> list[ScoreRecord]:
    """Mean cosine similarity of each unlabeled tile to each labeled class."""
    labels = np.asarray(labeled_labels)
    lab = np.asarray(labeled_embeddings, dtype=np.float64)
    pool = np.asarray(pool_embeddings, dtype=np.float64)
    slum, non = labels == 1, labels == 0
    if not slum.any() or not non.any():
        raise ScoringError("labeled embeddings must include both slum and non-slum tiles")
    if len(pool_ids) != len(pool):
        raise ScoringError("pool ids and embeddings differ in length")
    if len(pool) == 0:
        return []

    lab_u = _unit_rows(lab)
    mu_s = np.empty(len(pool))
    mu_n = np.empty(len(pool))
    for i in range(0, len(pool), block):
        sims = np.clip(_unit_rows(pool[i : i + block]) @ lab_u.T, -1.0, 1.0)
        mu_s[i : i + block] = sims[:, slum].mean(axis=1)
        mu_n[i : i + block] = sims[:, non].mean(axis=1)
    return [ScoreRecord(t, float(s), float(n)) for t, s, n in zip(pool_ids, mu_s, mu_n)]


def select_topk(records: Sequence[ScoreRecord], K: int) -> CandidateSets:
    """Top-K per class by mean similarity; tiles picked for both classes are dropped.

    Ranks sort by descending score with ascending tile_id breaking ties. No
    back-filling after the overlap removal, so either list may hold fewer
    than K tiles.
    """
    if K < 1:
        raise ScoringError("K must be >= 1")
    top_s = [r.tile_id for r in sorted(records, key=lambda r: (-r.mu_s, r.tile_id))[:K]]
    top_n = [r.tile_id for r in sorted(records, key=lambda r: (-r.mu_n, r.tile_id))[:K]]
    both = set(top_s) & set(top_n)
    return CandidateSets(
        S_s=[t for t in top_s if t not in both],
        S_ns=[t for t in top_n if t not in both],
        removed_overlap=[t for t in top_s if t in both],
    )


def write_scores(records: Sequence[ScoreRecord], path: Path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def write_candidates(cands: CandidateSets, iteration: int, K: int, path: Path) -> None:
    blob = {"iteration": iteration, "K": K, **asdict(cands)}
    Path(path).write_text(json.dumps(blob, indent=2))
