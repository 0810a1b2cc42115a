from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import GT, make_tile
from tempslum.export import export_locations, mask_centroid, plot_curves, write_curves, write_geojson
from tempslum.geodata import GeoDataError, GeoTile, LabeledTile, PoolState, SegMask


def _slum(tid, mask, gt=GT):
    t = GeoTile(tid, np.zeros(mask.shape + (3,), np.uint8), (0, 0), gt, "src")
    return LabeledTile.from_mask(t, SegMask(mask))


def test_centered_mask_maps_to_tile_centre():
    m = np.zeros((256, 256), np.uint8)
    m[98:158, 98:158] = 1
    fc = export_locations(PoolState.from_tiles([_slum("a", m)], []))
    (feat,) = fc["features"]
    lon, lat = feat["geometry"]["coordinates"]
    assert lon == pytest.approx(GT[0] + 128 * GT[1], abs=1e-12)
    assert lat == pytest.approx(GT[3] + 128 * GT[5], abs=1e-12)
    assert feat["properties"]["tile_id"] == "a"
    assert feat["properties"]["area_fraction"] == 60 * 60 / 65536
    assert feat["properties"]["status"] == "uncertain"  # 5.5% < 10%


def test_status_candidate_above_twice_threshold():
    m = np.zeros((20, 20), np.uint8)
    m[:, :2] = 1  # exactly 10%
    (feat,) = export_locations(PoolState.from_tiles([_slum("a", m)], []))["features"]
    assert feat["properties"]["status"] == "candidate"


def test_no_slum_tiles():
    non = LabeledTile.from_mask(make_tile("n", 8), SegMask(np.zeros((8, 8), np.uint8)))
    fc = export_locations(PoolState.from_tiles([non], []))
    assert fc == {"type": "FeatureCollection", "features": []}


def test_missing_geotransform():
    m = np.ones((8, 8), np.uint8)
    with pytest.raises(GeoDataError):
        export_locations(PoolState.from_tiles([_slum("a", m, gt=None)], []))


def test_centroid_pixel_centres():
    m = np.zeros((4, 4), np.uint8)
    m[0, 0] = 1
    assert mask_centroid(m) == (0.5, 0.5)


def test_writers(tmp_path):
    m = np.ones((8, 8), np.uint8)
    fc = export_locations(PoolState.from_tiles([_slum("a", m)], []))
    write_geojson(fc, tmp_path / "x.geojson")
    assert json.loads((tmp_path / "x.geojson").read_text())["type"] == "FeatureCollection"
    curves = {"K=10": [(0, 0), (1, 4), (2, 9)], "K=50": [(0, 0), (1, 12)]}
    write_curves(curves, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "run,iteration,cumulative_slum_added" and len(lines) == 6
    plot_curves(curves, 10, tmp_path / "c.png")
    assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"
