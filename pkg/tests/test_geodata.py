from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GT, make_raster, make_tile
from oracles import brute_force_tiles
from tempslum.geodata import (
    GeoDataError,
    LabeledTile,
    ManifestEntry,
    PoolState,
    RasterStore,
    SegMask,
    SplitSpec,
    apply_transform,
    augment_for_balance,
    build_splits,
    derive_image_label,
    dihedral,
    iter_labeled,
    load_mask_png,
    load_raster,
    make_tile_id,
    read_manifest,
    save_mask_png,
    save_raster,
    tile_raster,
    write_manifest,
)


def _origins(tiles):
    return [t.origin_px for t in tiles]


class TestTiling:
    def test_single_window(self):
        tiles = tile_raster(make_raster(256, 256))
        assert _origins(tiles) == [(0, 0)]
        assert tiles[0].pixels.shape == (256, 256, 3)

    def test_two_windows_exact_fit(self):
        tiles = tile_raster(make_raster(256, 456))
        assert _origins(tiles) == [(0, 0), (0, 200)]
        assert all(t.shape == (256, 256) for t in tiles)

    def test_edge_window_clamped(self):
        tiles = tile_raster(make_raster(256, 700))
        assert [c for _, c in _origins(tiles)] == [0, 200, 400, 444]

    def test_tile_pixels_and_georef(self):
        r = make_raster(300, 500, "scene")
        tiles = tile_raster(r)
        for t in tiles:
            i, j = t.origin_px
            np.testing.assert_array_equal(t.pixels, r.pixels[i : i + 256, j : j + 256])
            assert t.tile_id == make_tile_id("scene", i, j)
            x, y = apply_transform(r.geo_transform, i, j)
            assert t.geo_transform[0] == pytest.approx(x)
            assert t.geo_transform[3] == pytest.approx(y)

    def test_ids_unique_and_zero_padded(self):
        tiles = tile_raster(make_raster(700, 700, "s"))
        ids = [t.tile_id for t in tiles]
        assert len(set(ids)) == len(ids)
        assert ids[0] == "s_r00000_c00000"

    @pytest.mark.parametrize("h,w", [(255, 300), (300, 100)])
    def test_too_small(self, h, w):
        with pytest.raises(GeoDataError, match="raster too small"):
            tile_raster(make_raster(h, w))

    @pytest.mark.parametrize("overlap", [-1, 256, 300])
    def test_invalid_overlap(self, overlap):
        with pytest.raises(GeoDataError, match="invalid overlap"):
            tile_raster(make_raster(256, 256), overlap=overlap)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(64, 700), w=st.integers(64, 700), window=st.sampled_from([32, 64]), ov=st.integers(0, 31))
    def test_matches_oracle_any_window(self, h, w, window, ov):
        r = make_raster(h, w)
        assert _origins(tile_raster(r, window, ov)) == brute_force_tiles(h, w, window, ov)


class TestImageLabel:
    def test_all_zero(self):
        assert derive_image_label(SegMask(np.zeros((256, 256), np.uint8))) == (0, 0.0)

    def test_all_one(self):
        assert derive_image_label(SegMask(np.ones((256, 256), np.uint8))) == (1, 1.0)

    def test_just_above_five_percent(self):
        m = np.zeros(65536, np.uint8)
        m[:3277] = 1
        y, mu = derive_image_label(SegMask(m.reshape(256, 256)))
        count = sum(1 for v in m if v)
        assert y == 1
        assert mu == count / 65536
        assert mu == pytest.approx(0.050003, abs=1e-6)

    def test_just_below(self):
        m = np.zeros(65536, np.uint8)
        m[:3276] = 1
        assert derive_image_label(SegMask(m.reshape(256, 256)))[0] == 0

    def test_non_binary_rejected(self):
        with pytest.raises(GeoDataError, match="mask not binary"):
            SegMask(np.full((4, 4), 2, np.int64))
        bad = SegMask(np.zeros((4, 4), np.uint8))
        bad.values = np.full((4, 4), 3, np.uint8)
        with pytest.raises(GeoDataError, match="mask not binary"):
            derive_image_label(bad)

    def test_unknown_source(self):
        with pytest.raises(GeoDataError):
            SegMask(np.zeros((2, 2), np.uint8), "guess")


def _labeled(n_slum, n_non, size=8):
    out = []
    for i in range(n_slum):
        out.append(LabeledTile.from_mask(make_tile(f"s{i:04d}", size), SegMask(np.ones((size, size), np.uint8))))
    for i in range(n_non):
        out.append(LabeledTile.from_mask(make_tile(f"n{i:05d}", size), SegMask(np.zeros((size, size), np.uint8))))
    return out


class TestSplits:
    def test_default_counts(self):
        splits = build_splits(_labeled(32, 4831, size=2), SplitSpec())
        train = splits["train"]
        assert sum(lt.label for lt in train) == 20
        assert sum(1 - lt.label for lt in train) == 3938
        assert sum(lt.label for lt in splits["val"]) == 12
        assert len(splits["val"]) == 12 + 861
        ids = [lt.tile_id for part in splits.values() for lt in part]
        assert len(ids) == len(set(ids))

    def test_empty_spec(self):
        splits = build_splits(_labeled(3, 3), SplitSpec((0, 0), (0, 0), (0, 0)))
        assert splits == {"train": [], "val": [], "test": []}

    def test_insufficient(self):
        with pytest.raises(GeoDataError, match="insufficient tiles: slum short by 2"):
            build_splits(_labeled(10, 50), SplitSpec((12, 10), (0, 0), (0, 0)))

    def test_deterministic(self):
        data = _labeled(10, 30)
        spec = SplitSpec((3, 10), (2, 5), (1, 1), seed=7)
        a = build_splits(data, spec)
        b = build_splits(list(reversed(data)), spec)
        assert {k: [x.tile_id for x in v] for k, v in a.items()} == {k: [x.tile_id for x in v] for k, v in b.items()}


class TestAugmentation:
    def test_stream_length(self):
        data = _labeled(20, 3938, size=2)
        assert len(augment_for_balance(data, 8, 1)) == 160 + 3938

    def test_identity(self):
        data = _labeled(3, 4)
        stream = augment_for_balance(data, 1, 1)
        assert [lt.tile_id for lt in stream] == [lt.tile_id for lt in data]

    def test_mask_follows_pixels(self, rng):
        px = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        mask = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        lt = LabeledTile.from_mask(make_tile("a", 16, px), SegMask(mask))
        stream = augment_for_balance([lt], 8, 1)
        assert len({x.tile_id for x in stream}) == 8
        for k, copy in enumerate(stream):
            np.testing.assert_array_equal(copy.tile.pixels, dihedral(px, k))
            np.testing.assert_array_equal(copy.mask.values, dihedral(mask, k))
        flipped = stream[4]
        np.testing.assert_array_equal(flipped.mask.values, mask[:, ::-1])
        np.testing.assert_array_equal(flipped.tile.pixels, px[:, ::-1])

    def test_dihedral_group_distinct(self, rng):
        a = rng.random((5, 5))
        imgs = [dihedral(a, k).tobytes() for k in range(8)]
        assert len(set(imgs)) == 8

    @pytest.mark.parametrize("s,n", [(0, 1), (1, 2), (9, 1)])
    def test_bad_factors(self, s, n):
        with pytest.raises(GeoDataError):
            augment_for_balance(_labeled(1, 1), s, n)


class TestPool:
    def test_disjoint(self):
        lt = _labeled(1, 0)[0]
        with pytest.raises(GeoDataError):
            PoolState.from_tiles([lt], [lt.tile])

    def test_initial_stats(self):
        pool = PoolState.from_tiles(_labeled(2, 6), [make_tile(f"u{i}", 8) for i in range(5)])
        assert pool.count(1) == 2 and pool.count(0) == 6
        assert pool.initial_pool_size == 5
        assert pool.seed_slum_ratio == 0.25


class TestFiles:
    def test_raster_roundtrip(self, tmp_path):
        r = make_raster(40, 50, "scene", timestamp="2020-02-02")
        p = save_raster(r, tmp_path / "scene.png")
        back = load_raster(p)
        np.testing.assert_array_equal(back.pixels, r.pixels)
        assert back.geo_transform == GT
        assert back.timestamp == "2020-02-02"
        assert back.source_id == "scene"

    def test_missing_sidecar(self, tmp_path):
        p = save_raster(make_raster(4, 4), tmp_path / "x.png")
        p.with_suffix(".json").unlink()
        with pytest.raises(GeoDataError):
            load_raster(p)

    def test_mask_png_values(self, tmp_path, rng):
        m = (rng.random((10, 12)) > 0.5).astype(np.uint8)
        save_mask_png(m, tmp_path / "m.png")
        from PIL import Image

        raw = np.asarray(Image.open(tmp_path / "m.png"))
        assert set(np.unique(raw)) <= {0, 255}
        np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png").values, m)

    def test_manifest_roundtrip(self, tmp_path):
        r = make_raster(256, 456, "scene")
        tiles = tile_raster(r)
        entries = [ManifestEntry.for_tile(t, split="train", label=i % 2) for i, t in enumerate(tiles)]
        write_manifest(entries, tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 2
        keys = set(json.loads(lines[0]))
        assert keys == {"tile_id", "source_id", "origin_px", "geo_transform", "timestamp", "split", "label",
                        "mask_path", "mask_source"}
        assert read_manifest(tmp_path / "m.jsonl") == entries

    def test_store_and_iter_labeled(self, tmp_path, rng):
        r = make_raster(256, 456, "scene")
        save_raster(r, tmp_path / "rasters" / "scene.png")
        tiles = tile_raster(r)
        mask = np.zeros((256, 256), np.uint8)
        mask[:64, :64] = 1
        save_mask_png(mask, tmp_path / "masks" / "a.png")
        entries = [ManifestEntry.for_tile(tiles[0], mask_path="masks/a.png", mask_source="human"),
                   ManifestEntry.for_tile(tiles[1])]
        store = RasterStore(tmp_path / "rasters")
        got = list(iter_labeled(entries, store, tmp_path))
        assert len(got) == 1
        assert got[0].label == 1 and got[0].mask_mean == 0.0625
        np.testing.assert_array_equal(store.tile(entries[1]).pixels, r.pixels[:, 200:456])
        with pytest.raises(GeoDataError):
            RasterStore(tmp_path).get("nope")
