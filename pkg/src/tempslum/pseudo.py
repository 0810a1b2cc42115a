"""Pixel-level admission of retrieved candidates and the pool transfer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .geodata import GeoDataError, GeoTile, LabeledTile, PoolState, SegMask
from .scoring import CandidateSets
from .segmenter import SegmenterModel, binarize

AREA_THRESHOLD = 0.05
PROB_THRESHOLD = 0.5


@dataclass
class AdmissionResult:
    admitted_slum: list[tuple[str, SegMask]] = field(default_factory=list)
    admitted_nonslum: list[tuple[str, SegMask]] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)
    area_fraction: dict[str, float] = field(default_factory=dict)

    def log_rows(self, iteration: int) -> list[dict]:
        rows = []
        for label, items in (("slum", self.admitted_slum), ("nonslum", self.admitted_nonslum)):
            for tid, _ in items:
                rows.append(
                    {"iteration": iteration, "tile_id": tid, "set": label,
                     "area_fraction": self.area_fraction[tid], "decision": "admitted", "reason": None}
                )
        for tid, reason in self.rejected:
            label = "slum" if reason.startswith("area below") else "nonslum"
            rows.append(
                {"iteration": iteration, "tile_id": tid, "set": label,
                 "area_fraction": self.area_fraction[tid], "decision": "rejected", "reason": reason}
            )
        return rows


def admit(area: float, is_slum_set: bool, area_thresh: float = AREA_THRESHOLD) -> bool:
    """Slum candidates need at least ``area_thresh`` predicted slum, non-slum at most."""
    return area >= area_thresh if is_slum_set else area <= area_thresh


Predictor = Union[SegmenterModel, Callable[[Sequence[GeoTile]], np.ndarray]]


def pseudo_label(
    candidates: CandidateSets,
    model: Predictor,
    tiles: Mapping[str, GeoTile],
    area_thresh: float = AREA_THRESHOLD,
    prob_thresh: float = PROB_THRESHOLD,
) -> AdmissionResult:
    """Segment every candidate and keep those whose predicted area fits their set.

    ``model`` is a SegmenterModel or any callable mapping a list of tiles to
    an (N, H, W) probability array.
    """
    predict = model.predict_batch if isinstance(model, SegmenterModel) else model
    result = AdmissionResult()
    for ids, is_slum in ((candidates.S_s, True), (candidates.S_ns, False)):
        if not ids:
            continue
        batch = [tiles[t] for t in ids]
        probs = np.asarray(predict(batch))
        if probs.shape != (len(batch),) + batch[0].shape:
            raise GeoDataError(f"prediction shape {probs.shape} does not match candidate tiles")
        for tid, prob in zip(ids, probs):
            mask = binarize(prob, prob_thresh, source="pseudo")
            area = mask.mean()
            result.area_fraction[tid] = area
            if admit(area, is_slum, area_thresh):
                (result.admitted_slum if is_slum else result.admitted_nonslum).append((tid, mask))
            elif is_slum:
                result.rejected.append((tid, f"area below {area_thresh:g}"))
            else:
                result.rejected.append((tid, f"area above {area_thresh:g}"))
    return result


def transfer_to_labeled(pool: PoolState, result: AdmissionResult) -> PoolState:
    """Move admitted tiles into the labeled pool, in place. Returns ``pool``."""
    moves = [(tid, m, 1) for tid, m in result.admitted_slum] + [(tid, m, 0) for tid, m in result.admitted_nonslum]
    seen: set[str] = set()
    for tid, _, _ in moves:
        if tid in pool.labeled:
            raise GeoDataError(f"tile {tid} is already labeled")
        if tid not in pool.unlabeled:
            raise GeoDataError(f"tile {tid} not found in unlabeled pool")
        if tid in seen:
            raise GeoDataError(f"tile {tid} admitted twice")
        seen.add(tid)
    for tid, mask, label in moves:
        tile = pool.unlabeled.pop(tid)
        pool.labeled[tid] = LabeledTile(tile=tile, mask=mask, label=label, mask_mean=mask.mean())
        pool.pseudo_ids.add(tid)
    return pool


def write_admission_log(rows: Sequence[dict], path: Path, mode: str = "w") -> None:
    with Path(path).open(mode) as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
