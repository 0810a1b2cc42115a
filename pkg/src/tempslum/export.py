"""GeoJSON export of detected settlements and iteration-curve reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geodata import GeoDataError, PoolState, apply_transform
from .pseudo import AREA_THRESHOLD
from .segmenter import SegmenterModel, binarize


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """Centroid of the 1-pixels in pixel-corner coordinates (row, col)."""
    rows, cols = np.nonzero(mask)
    return float(rows.mean()) + 0.5, float(cols.mean()) + 0.5


def export_locations(
    pool: PoolState,
    model: Optional[SegmenterModel] = None,
    area_thresh: float = AREA_THRESHOLD,
    uncertain_factor: float = 2.0,
) -> dict:
    """One point per slum-labeled tile, placed at its mask centroid.

    Masks come from the labeled pool unless ``model`` is given, in which case
    each tile is re-segmented. Tiles whose slum area is below
    ``uncertain_factor * area_thresh`` are marked "uncertain", the rest
    "candidate"; nothing here is ever "verified".
    """
    slum = [lt for lt in pool.labeled.values() if lt.label == 1]
    if model is not None and slum:
        probs = model.predict_batch([lt.tile for lt in slum])
        masks = [binarize(p).values for p in probs]
    else:
        masks = [lt.mask.values for lt in slum]

    features = []
    for lt, mask in zip(slum, masks):
        gt = lt.tile.geo_transform
        if gt is None or len(gt) != 6:
            raise GeoDataError(f"tile {lt.tile_id} has no geo transform")
        area = float(np.count_nonzero(mask)) / mask.size
        if area == 0:
            row, col = mask.shape[0] / 2, mask.shape[1] / 2
        else:
            row, col = mask_centroid(mask)
        lon, lat = apply_transform(gt, row, col)
        status = "uncertain" if area < uncertain_factor * area_thresh else "candidate"
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [lon, lat]},
                "properties": {
                    "tile_id": lt.tile_id,
                    "area_fraction": area,
                    "status": status,
                    "mask_source": lt.mask.source,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_geojson(fc: Mapping, path: Path) -> None:
    Path(path).write_text(json.dumps(fc, indent=2, sort_keys=True))


def write_curves(curves: Mapping[str, Sequence[tuple[int, int]]], path: Path) -> None:
    """Cumulative slum admissions per iteration, one series per run label."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "cumulative_slum_added"])
        for name in sorted(curves):
            for it, cum in curves[name]:
                w.writerow([name, it, cum])


def plot_curves(curves: Mapping[str, Sequence[tuple[int, int]]], threshold: Optional[int], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(curves):
        xs, ys = zip(*curves[name]) if curves[name] else ((), ())
        ax.plot(xs, ys, marker="o", label=name)
    if threshold is not None:
        ax.axhline(threshold, color="black", linestyle="--", label="stop threshold")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cumulative slum tiles admitted")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
