from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tempslum.geodata import GeoTile, LabeledTile, Raster, SegMask  # noqa: E402

GT = (74.3, 1e-5, 0.0, 31.6, 0.0, -1e-5)


def make_raster(h: int, w: int, source_id: str = "r", seed: int = 0, timestamp: str | None = None) -> Raster:
    rng = np.random.default_rng(seed)
    return Raster(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8), GT, source_id, timestamp)


def make_tile(tid: str, size: int = 64, pixels: np.ndarray | None = None, origin=(0, 0)) -> GeoTile:
    if pixels is None:
        pixels = np.zeros((size, size, 3), np.uint8)
    return GeoTile(tid, pixels, origin, GT, "src")


def blob_tile(tid: str, slum: bool, size: int = 64, seed: int = 0) -> LabeledTile:
    """Grey ground with, for slum tiles, a square of bright speckled dwellings."""
    rng = np.random.default_rng(seed)
    px = np.full((size, size, 3), 120, np.int16) + rng.integers(-8, 9, size=(size, size, 3))
    mask = np.zeros((size, size), np.uint8)
    if slum:
        r0, c0 = rng.integers(4, size // 2, size=2)
        s = size // 3
        block = rng.integers(0, 2, size=(s, s)).astype(bool)
        region = px[r0 : r0 + s, c0 : c0 + s]
        region[block] = (230, 60, 40)
        region[~block] = (40, 90, 200)
        mask[r0 : r0 + s, c0 : c0 + s] = 1
    return LabeledTile.from_mask(make_tile(tid, size, px.clip(0, 255).astype(np.uint8)), SegMask(mask))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
