"""Synthetic bi-temporal cities with planted make-shift settlements.

Textures only need to be separable, not realistic: temporary settlements are
irregular blobs of small, brightly coloured cells on bare ground; formal
built-up blocks are regular grids of larger roofs. All randomness comes from
one PCG64 stream seeded by ``SynthSpec.rng_seed``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geodata import (
    GeoTile,
    LabeledTile,
    PoolState,
    Raster,
    SegMask,
    derive_image_label,
    tile_raster,
)


# Slum-pixel weight for training on synthetic experiments. With a handful of
# seed tiles, unweighted BCE settles on predicting no slum pixels at all.
SYNTH_POS_WEIGHT = 3.0


class SynthError(ValueError):
    pass


TARP_COLOURS = (
    (40, 80, 190),
    (235, 235, 228),
    (220, 120, 40),
    (175, 45, 45),
    (60, 135, 80),
    (120, 60, 150),
    (30, 160, 180),
    (200, 200, 60),
    (150, 150, 140),
    (178, 165, 130),
    (95, 85, 70),
)
GROUND_TONES = ((128, 108, 82), (150, 134, 104), (110, 105, 98), (165, 148, 116))
ROOF_COLOURS = ((196, 196, 190), (168, 92, 70), (208, 188, 158), (140, 142, 155), (120, 110, 95))


@dataclass
class SynthSpec:
    rng_seed: int = 0
    width: int = 2056
    height: int = 2056
    n_slum_clusters: int = 5
    cluster_size: tuple[int, int] = (90, 140)
    # per-cluster dwelling size is drawn as a sub-range of cell_size
    cell_size: tuple[int, int] = (2, 9)
    cell_density: tuple[float, float] = (0.35, 0.85)
    palette_size: tuple[int, int] = (1, 3)
    n_builtup_blocks: int = 6
    block_size: tuple[int, int] = (150, 360)
    n_roads: int = 4
    # bare-ground patches shaped like settlements but without dwellings
    n_dirt_patches: int = 4
    # per cluster: "both", "t1" (removed by t2) or "t2" (appears at t2)
    schedule: Optional[tuple[str, ...]] = None
    min_gap: int = 24
    source_id: str = "synth"
    origin_lonlat: tuple[float, float] = (74.30, 31.60)
    pixel_deg: float = 1e-5
    timestamps: tuple[str, str] = ("2019-01-01", "2021-01-01")

    def presence(self) -> list[tuple[bool, bool]]:
        sched = self.schedule or ("both",) * self.n_slum_clusters
        if len(sched) != self.n_slum_clusters:
            raise SynthError("schedule length must equal n_slum_clusters")
        table = {"both": (True, True), "t1": (True, False), "t2": (False, True)}
        try:
            return [table[s] for s in sched]
        except KeyError as e:
            raise SynthError(f"unknown schedule entry {e.args[0]!r}") from None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class PlantedCluster:
    cluster_id: int
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 (exclusive)
    present_t1: bool
    present_t2: bool
    area_px: int


@dataclass
class SynthCity:
    raster_t1: Raster
    raster_t2: Raster
    slum_t1: np.ndarray
    slum_t2: np.ndarray
    builtup_t1: np.ndarray
    builtup_t2: np.ndarray
    planted: list[PlantedCluster] = field(default_factory=list)

    def ground_truth(self) -> dict[str, np.ndarray]:
        return {
            "slum_t1": self.slum_t1,
            "slum_t2": self.slum_t2,
            "builtup_t1": self.builtup_t1,
            "builtup_t2": self.builtup_t2,
        }

    def builtup_by_source(self) -> dict[str, np.ndarray]:
        return {self.raster_t1.source_id: self.builtup_t1, self.raster_t2.source_id: self.builtup_t2}


class _Placer:
    def __init__(self, h: int, w: int, gap: int, rng: np.random.Generator):
        self.h, self.w, self.gap, self.rng = h, w, gap, rng
        self.rects: list[tuple[int, int, int, int]] = []

    def place(self, rh: int, rw: int, tries: int = 2000) -> tuple[int, int, int, int]:
        if rh + 2 > self.h or rw + 2 > self.w:
            raise SynthError("cannot place clusters: region larger than raster")
        g = self.gap
        for _ in range(tries):
            r0 = int(self.rng.integers(1, self.h - rh))
            c0 = int(self.rng.integers(1, self.w - rw))
            r1, c1 = r0 + rh, c0 + rw
            if all(r1 + g <= a or b + g <= r0 or c1 + g <= c or d + g <= c0 for a, c, b, d in self.rects):
                self.rects.append((r0, c0, r1, c1))
                return r0, c0, r1, c1
        raise SynthError("cannot place clusters: raster too crowded")


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    gh, gw = h // 48 + 2, w // 48 + 2
    lum = rng.normal(0.0, 1.0, size=(gh, gw, 1)).astype(np.float32)
    chroma = rng.normal(0.0, 1.0, size=(gh, gw, 3)).astype(np.float32)
    base = np.array([168, 150, 118], np.float32)
    small = np.clip(base + 16 * lum + 4 * chroma, 0, 255).astype(np.uint8)
    img = np.asarray(Image.fromarray(small).resize((w, h), Image.BILINEAR)).copy()
    strip = 1024
    for r in range(0, h, strip):
        noise = rng.integers(-7, 8, size=(min(strip, h - r), w, 1), dtype=np.int16)
        block = img[r : r + strip].astype(np.int16) + noise
        img[r : r + strip] = np.clip(block, 0, 255).astype(np.uint8)
    for _ in range(spec.n_roads):
        width = int(rng.integers(6, 11))
        grey = int(rng.integers(95, 125))
        if rng.random() < 0.5:
            r = int(rng.integers(0, h - width))
            img[r : r + width] = grey
        else:
            c = int(rng.integers(0, w - width))
            img[:, c : c + width] = grey
    return img


def _draw_block(img: np.ndarray, rect, rng: np.random.Generator) -> None:
    r0, c0, r1, c1 = rect
    img[r0:r1, c0:c1] = int(rng.integers(85, 115))
    roof = np.array(ROOF_COLOURS[int(rng.integers(len(ROOF_COLOURS)))], np.int16)
    size = int(rng.integers(11, 19))
    street = int(rng.integers(4, 8))
    pitch = size + street
    for r in range(r0 + street, r1 - size, pitch):
        for c in range(c0 + street, c1 - size, pitch):
            colour = np.clip(roof + rng.integers(-12, 13, size=3), 0, 255).astype(np.uint8)
            img[r : r + size, c : c + size] = colour


def _blob(rh: int, rw: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:rh, 0:rw]
    mask = np.zeros((rh, rw), bool)
    for k in range(3):
        cy = rh / 2 + rng.uniform(-0.15, 0.15) * rh
        cx = rw / 2 + rng.uniform(-0.15, 0.15) * rw
        ay = rng.uniform(0.3, 0.5) * rh
        ax = rng.uniform(0.3, 0.5) * rw
        mask |= ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    return mask


@dataclass
class _ClusterStyle:
    palette: list
    ground: tuple[int, int, int]
    cell_lo: int
    cell_hi: int
    density: float


def _cluster_style(spec: SynthSpec, rng: np.random.Generator) -> _ClusterStyle:
    n_col = int(rng.integers(spec.palette_size[0], spec.palette_size[1] + 1))
    palette = [TARP_COLOURS[i] for i in rng.choice(len(TARP_COLOURS), size=n_col, replace=False)]
    ground = GROUND_TONES[int(rng.integers(len(GROUND_TONES)))]
    lo_min, hi_max = spec.cell_size
    lo = int(rng.integers(lo_min, max(lo_min, hi_max - 2) + 1))
    hi = min(hi_max, lo + int(rng.integers(1, 4)))
    return _ClusterStyle(palette, ground, lo, hi, float(rng.uniform(*spec.cell_density)))


def _draw_cluster(img: np.ndarray, rect, blob: np.ndarray, style: _ClusterStyle, rng: np.random.Generator) -> None:
    r0, c0, r1, c1 = rect
    view = img[r0:r1, c0:c1]
    ground = np.array(style.ground, np.int16) + rng.integers(-10, 11, size=3)
    view[blob] = np.clip(ground, 0, 255).astype(np.uint8)
    rh, rw = blob.shape
    lo, hi, palette = style.cell_lo, style.cell_hi, style.palette
    mean_area = ((lo + hi) / 2) ** 2
    n_cells = int(style.density * blob.sum() / mean_area) + 1
    for _ in range(n_cells):
        ch, cw = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        y, x = int(rng.integers(0, rh - ch)), int(rng.integers(0, rw - cw))
        colour = np.array(palette[int(rng.integers(len(palette)))], np.int16)
        colour = np.clip(colour + rng.integers(-15, 16, size=3), 0, 255).astype(np.uint8)
        cell = blob[y : y + ch, x : x + cw]
        patch = view[y : y + ch, x : x + cw]
        patch[cell] = colour
        # shadow along the lower edge
        shade = view[y + ch - 1, x : x + cw]
        shade[cell[-1]] = (colour * 0.55).astype(np.uint8)


def generate(spec: SynthSpec) -> SynthCity:
    """Render the two dates of a synthetic city with exact ground truth."""
    presence = spec.presence()
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
    h, w = spec.height, spec.width
    base = _background(spec, rng)
    placer = _Placer(h, w, spec.min_gap, rng)
    builtup = np.zeros((h, w), bool)
    for _ in range(spec.n_builtup_blocks):
        bh, bw = (int(v) for v in rng.integers(spec.block_size[0], spec.block_size[1] + 1, size=2))
        rect = placer.place(bh, bw)
        _draw_block(base, rect, rng)
        builtup[rect[0] : rect[2], rect[1] : rect[3]] = True

    for _ in range(spec.n_dirt_patches):
        rh, rw = (int(v) for v in rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1, size=2))
        r0, c0, r1, c1 = placer.place(rh, rw)
        tone = GROUND_TONES[int(rng.integers(len(GROUND_TONES)))]
        ground = np.array(tone, np.int16) + rng.integers(-10, 11, size=3)
        base[r0:r1, c0:c1][_blob(rh, rw, rng)] = np.clip(ground, 0, 255).astype(np.uint8)

    t1, t2 = base, base.copy()
    slum_t1 = np.zeros((h, w), bool)
    slum_t2 = np.zeros((h, w), bool)
    planted = []
    for cid, (p1, p2) in enumerate(presence):
        rh, rw = (int(v) for v in rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1, size=2))
        rect = placer.place(rh, rw)
        blob = _blob(rh, rw, rng)
        style = _cluster_style(spec, rng)
        cluster_seed = int(rng.integers(2**31))
        r0, c0, r1, c1 = rect
        for present, img, gt in ((p1, t1, slum_t1), (p2, t2, slum_t2)):
            if present:
                # same stream for both dates so a persistent cluster renders identically
                _draw_cluster(img, rect, blob, style, np.random.Generator(np.random.PCG64(cluster_seed)))
                gt[r0:r1, c0:c1] |= blob
        planted.append(PlantedCluster(cid, rect, p1, p2, int(blob.sum())))

    gt_transform = (spec.origin_lonlat[0], spec.pixel_deg, 0.0, spec.origin_lonlat[1], 0.0, -spec.pixel_deg)
    r_t1 = Raster(t1, gt_transform, f"{spec.source_id}_t1", spec.timestamps[0])
    r_t2 = Raster(t2, gt_transform, f"{spec.source_id}_t2", spec.timestamps[1])
    return SynthCity(r_t1, r_t2, slum_t1, slum_t2, builtup | slum_t1, builtup | slum_t2, planted)


def cluster_tiles(city: SynthCity, tiles: Sequence[GeoTile], use_t2: bool = True) -> dict[int, str]:
    """For each planted cluster, the tile holding most of its pixels."""
    gt = city.slum_t2 if use_t2 else city.slum_t1
    best: dict[int, tuple[int, str]] = {}
    for pc in city.planted:
        r0, c0, r1, c1 = pc.bbox
        for t in tiles:
            tr, tc = t.origin_px
            th, tw = t.shape
            if tr >= r1 or tr + th <= r0 or tc >= c1 or tc + tw <= c0:
                continue
            n = int(np.count_nonzero(gt[max(r0, tr) : min(r1, tr + th), max(c0, tc) : min(c1, tc + tw)]))
            if n > best.get(pc.cluster_id, (0, ""))[0]:
                best[pc.cluster_id] = (n, t.tile_id)
    return {k: v[1] for k, v in best.items()}


def tile_truth(tile: GeoTile, truth: np.ndarray) -> SegMask:
    r, c = tile.origin_px
    h, w = tile.shape
    return SegMask(truth[r : r + h, c : c + w].astype(np.uint8), "human")


@dataclass
class Experiment:
    """A seeded pool, validation tiles and a held-out test set."""

    pool: PoolState
    val: list[LabeledTile]
    test: list[LabeledTile]
    truth: dict[str, SegMask]  # ground truth for every pool tile
    seed_ids: list[str]


@dataclass
class ExperimentSpec:
    city: SynthSpec = field(default_factory=lambda: SynthSpec(width=10056, height=10056, n_slum_clusters=40, n_builtup_blocks=74))
    test_city: SynthSpec = field(
        default_factory=lambda: SynthSpec(
            rng_seed=1000, width=4456, height=4456, n_slum_clusters=26, n_builtup_blocks=16, source_id="synthtest"
        )
    )
    seed_slum: int = 4
    seed_nonslum: int = 200
    val_slum: int = 2
    val_nonslum: int = 40
    test_slum_fraction: float = 0.4
    rng_seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["city"] = self.city.to_json()
        d["test_city"] = self.test_city.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["city"] = SynthSpec.from_json(d["city"])
        d["test_city"] = SynthSpec.from_json(d["test_city"])
        return cls(**d)


def make_experiment(spec: ExperimentSpec, city: Optional[SynthCity] = None, test_city: Optional[SynthCity] = None) -> Experiment:
    """Tile a synthetic city into seed/val/pool tiles and a test city into test tiles.

    Seed and validation slum tiles are drawn from tiles whose ground truth
    covers at least 5% of the tile; non-slum ones from tiles with no slum
    pixels at all. Everything else becomes the unlabeled pool.
    """
    city = city or generate(spec.city)
    test_city = test_city or generate(spec.test_city)
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))

    tiles = tile_raster(city.raster_t2)
    truth = {t.tile_id: tile_truth(t, city.slum_t2) for t in tiles}
    means = {tid: derive_image_label(m)[1] for tid, m in truth.items()}
    slum = [t for t in tiles if derive_image_label(truth[t.tile_id])[0] == 1]
    clean = [t for t in tiles if means[t.tile_id] == 0.0]
    n_s, n_n = spec.seed_slum + spec.val_slum, spec.seed_nonslum + spec.val_nonslum
    if len(slum) < n_s or len(clean) < n_n:
        raise SynthError("synthetic city has too few tiles for the requested seed set")
    pick_s = [slum[i] for i in rng.choice(len(slum), size=n_s, replace=False)]
    pick_n = [clean[i] for i in rng.choice(len(clean), size=n_n, replace=False)]

    def lab(t):
        return LabeledTile.from_mask(t, truth[t.tile_id])

    seed = [lab(t) for t in pick_s[: spec.seed_slum]] + [lab(t) for t in pick_n[: spec.seed_nonslum]]
    val = [lab(t) for t in pick_s[spec.seed_slum :]] + [lab(t) for t in pick_n[spec.seed_nonslum :]]
    used = {lt.tile_id for lt in seed + val}
    pool = PoolState.from_tiles(seed, [t for t in tiles if t.tile_id not in used])

    test_tiles = tile_raster(test_city.raster_t2)
    test_truth = {t.tile_id: tile_truth(t, test_city.slum_t2) for t in test_tiles}
    t_slum = [t for t in test_tiles if derive_image_label(test_truth[t.tile_id])[0] == 1]
    t_clean = [t for t in test_tiles if test_truth[t.tile_id].mean() == 0.0]
    n_clean = int(round(len(t_slum) * (1 - spec.test_slum_fraction) / spec.test_slum_fraction))
    n_clean = min(n_clean, len(t_clean))
    t_neg = [t_clean[i] for i in sorted(rng.choice(len(t_clean), size=n_clean, replace=False))]
    test = [LabeledTile.from_mask(t, test_truth[t.tile_id]) for t in t_slum + t_neg]
    return Experiment(pool=pool, val=val, test=test, truth=truth, seed_ids=[lt.tile_id for lt in seed])


def save_city(city: SynthCity, spec: SynthSpec, out_dir: Path) -> dict[str, Path]:
    """Write both dates as PNG + sidecar, ground-truth masks and planted locations."""
    from .geodata import save_mask_png, save_raster

    out_dir = Path(out_dir)
    paths = {
        "t1": save_raster(city.raster_t1, out_dir / f"{city.raster_t1.source_id}.png"),
        "t2": save_raster(city.raster_t2, out_dir / f"{city.raster_t2.source_id}.png"),
    }
    for name, arr in city.ground_truth().items():
        p = out_dir / "truth" / f"{spec.source_id}_{name}.png"
        save_mask_png(arr, p)
        paths[name] = p
    planted = {"spec": spec.to_json(), "planted": [asdict(p) for p in city.planted]}
    paths["planted"] = out_dir / f"{spec.source_id}_planted.json"
    paths["planted"].write_text(json.dumps(planted, indent=2))
    return paths
