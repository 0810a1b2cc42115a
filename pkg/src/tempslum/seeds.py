"""Seed discovery from built-up change between two dates."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .geodata import GeoDataError, GeoTile, SegMask

# A built-up segmenter maps a tile to a per-pixel probability map.
BuiltupModel = Callable[[GeoTile], np.ndarray]


@dataclass
class TemporalPair:
    tile_t1: GeoTile
    tile_t2: GeoTile
    builtup_t1: SegMask
    builtup_t2: SegMask

    def __post_init__(self):
        if self.tile_t1.origin_px != self.tile_t2.origin_px:
            raise GeoDataError("temporal pair tiles are at different locations")
        if not np.allclose(self.tile_t1.geo_transform, self.tile_t2.geo_transform, rtol=0, atol=1e-9):
            raise GeoDataError("temporal pair tiles have different geo transforms")
        if self.tile_t1.timestamp is not None and self.tile_t1.timestamp == self.tile_t2.timestamp:
            raise GeoDataError("temporal pair tiles share a timestamp")


@dataclass
class SeedCandidate:
    tile_id: str
    temporal_iou: float
    area_t1: float
    area_t2: float
    nucleation_score: float
    direction: str


def segment_builtup(tile: GeoTile, builtup_model: BuiltupModel, threshold: float = 0.5) -> SegMask:
    prob = np.asarray(builtup_model(tile))
    if prob.shape != tile.shape:
        raise GeoDataError(f"built-up model output shape {prob.shape} != tile shape {tile.shape}")
    return SegMask((prob >= threshold).astype(np.uint8), "builtup_model")


def temporal_iou(m1: SegMask, m2: SegMask) -> float:
    """IoU of two binary masks; two empty masks count as unchanged (1.0)."""
    a, b = np.asarray(m1.values, bool), np.asarray(m2.values, bool)
    if a.shape != b.shape:
        raise GeoDataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def nucleation_score(mask: SegMask) -> float:
    """Fraction of settlement pixels in the largest 4-connected component."""
    values = np.asarray(mask.values, bool)
    total = np.count_nonzero(values)
    if total == 0:
        raise GeoDataError("no settlement pixels")
    labels, n = ndimage.label(values)  # default structure is 4-connected
    sizes = np.bincount(labels.ravel())[1:]
    return float(sizes.max()) / total


def score_pair(pair: TemporalPair) -> SeedCandidate:
    a1, a2 = pair.builtup_t1.mean(), pair.builtup_t2.mean()
    larger = pair.builtup_t2 if a2 > a1 else pair.builtup_t1
    nucl = nucleation_score(larger) if max(a1, a2) > 0 else 0.0
    return SeedCandidate(
        tile_id=pair.tile_t2.tile_id,
        temporal_iou=temporal_iou(pair.builtup_t1, pair.builtup_t2),
        area_t1=a1,
        area_t2=a2,
        nucleation_score=nucl,
        direction="appeared" if a2 > a1 else "disappeared",
    )


def select_seed_candidates(
    pairs: Iterable[TemporalPair],
    iou_max: float = 0.2,
    min_area: float = 0.05,
    min_nucleation: float = 0.5,
) -> list[SeedCandidate]:
    for name, v in (("iou_max", iou_max), ("min_area", min_area), ("min_nucleation", min_nucleation)):
        if not 0.0 <= v <= 1.0:
            raise GeoDataError(f"{name} must lie in [0, 1], got {v}")
    kept = []
    for pair in pairs:
        a1, a2 = pair.builtup_t1.mean(), pair.builtup_t2.mean()
        # cheap area gate before the IoU and component labelling
        if max(a1, a2) < min_area:
            continue
        cand = score_pair(pair)
        if cand.temporal_iou <= iou_max and cand.nucleation_score >= min_nucleation:
            kept.append(cand)
    kept.sort(key=lambda c: (c.temporal_iou, c.tile_id))
    return kept


def pair_tiles(tiles_t1: Sequence[GeoTile], tiles_t2: Sequence[GeoTile]) -> list[tuple[GeoTile, GeoTile]]:
    """Match two tilings of the same grid by pixel origin."""
    by_origin = {t.origin_px: t for t in tiles_t1}
    out = []
    for t2 in tiles_t2:
        t1 = by_origin.get(t2.origin_px)
        if t1 is not None:
            out.append((t1, t2))
    return out


def build_pairs(
    tiles_t1: Sequence[GeoTile],
    tiles_t2: Sequence[GeoTile],
    builtup_model: BuiltupModel,
    threshold: float = 0.5,
) -> Iterable[TemporalPair]:
    for t1, t2 in pair_tiles(tiles_t1, tiles_t2):
        yield TemporalPair(
            t1, t2, segment_builtup(t1, builtup_model, threshold), segment_builtup(t2, builtup_model, threshold)
        )


class MaskLookupSegmenter:
    """Built-up "model" that cuts tiles out of known full-raster masks.

    Keys are source ids; useful as a test oracle and for precomputed masks.
    """

    def __init__(self, masks: dict[str, np.ndarray]):
        self.masks = masks

    def __call__(self, tile: GeoTile) -> np.ndarray:
        r, c = tile.origin_px
        h, w = tile.shape
        return self.masks[tile.source_id][r : r + h, c : c + w].astype(np.float32)


def write_candidate_report(cands: Sequence[SeedCandidate], out_dir: Path, prefix: str = "seed_candidates") -> tuple[Path, Path]:
    """Write the JSON-lines report and a CSV worksheet for manual annotation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jl = out_dir / f"{prefix}.jsonl"
    with jl.open("w") as fh:
        for c in cands:
            fh.write(json.dumps(asdict(c), sort_keys=True) + "\n")
    sheet = out_dir / f"{prefix}_review.csv"
    with sheet.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "tile_id", "temporal_iou", "direction", "area_t1", "area_t2", "accept", "mask_path", "notes"])
        for i, c in enumerate(cands, 1):
            w.writerow([i, c.tile_id, f"{c.temporal_iou:.4f}", c.direction, f"{c.area_t1:.4f}", f"{c.area_t2:.4f}", "", "", ""])
    return jl, sheet


def load_candidate_report(path: Path) -> list[SeedCandidate]:
    with Path(path).open() as fh:
        return [SeedCandidate(**json.loads(line)) for line in fh if line.strip()]


def shortlist_ids(cands: Sequence[SeedCandidate], top: Optional[int] = None) -> list[str]:
    return [c.tile_id for c in (cands if top is None else cands[:top])]
