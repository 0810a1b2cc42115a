"""Tiles, masks, pools and the on-disk formats that carry them.

Geo transforms use the GDAL 6-tuple convention ``(x0, dx, rx, y0, ry, dy)``::

    lon = x0 + col * dx + row * rx
    lat = y0 + col * ry + row * dy

where ``(row, col)`` are pixel-corner coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

TILE_SIZE = 256
DEFAULT_OVERLAP = 56
IMAGE_LABEL_THRESHOLD = 0.05

MASK_SOURCES = ("human", "pseudo", "builtup_model")

GeoTransform = tuple[float, float, float, float, float, float]


class GeoDataError(ValueError):
    pass


def apply_transform(gt: Sequence[float], row: float, col: float) -> tuple[float, float]:
    """Map a pixel-corner coordinate to ``(lon, lat)``."""
    return (gt[0] + col * gt[1] + row * gt[2], gt[3] + col * gt[4] + row * gt[5])


def shift_transform(gt: Sequence[float], row: int, col: int) -> GeoTransform:
    x0, y0 = apply_transform(gt, row, col)
    return (x0, gt[1], gt[2], y0, gt[4], gt[5])


@dataclass
class Raster:
    pixels: np.ndarray  # (H, W, 3) uint8
    geo_transform: GeoTransform
    source_id: str
    timestamp: Optional[str] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class GeoTile:
    tile_id: str
    pixels: np.ndarray
    origin_px: tuple[int, int]
    geo_transform: GeoTransform
    source_id: str
    timestamp: Optional[str] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class SegMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    source: str = "human"

    def __post_init__(self):
        if self.source not in MASK_SOURCES:
            raise GeoDataError(f"unknown mask source {self.source!r}")
        v = np.asarray(self.values)
        if v.dtype != np.uint8:
            if not np.isin(v, (0, 1)).all():
                raise GeoDataError("mask not binary")
            v = v.astype(np.uint8)
        self.values = v

    def mean(self) -> float:
        return float(np.count_nonzero(self.values)) / self.values.size


@dataclass
class LabeledTile:
    tile: GeoTile
    mask: SegMask
    label: int
    mask_mean: float

    @property
    def tile_id(self) -> str:
        return self.tile.tile_id

    @classmethod
    def from_mask(cls, tile: GeoTile, mask: SegMask, threshold: float = IMAGE_LABEL_THRESHOLD) -> "LabeledTile":
        if mask.values.shape != tile.shape:
            raise GeoDataError(f"mask shape {mask.values.shape} != tile shape {tile.shape}")
        y, mu = derive_image_label(mask, threshold)
        return cls(tile=tile, mask=mask, label=y, mask_mean=mu)


@dataclass
class PoolState:
    """Labeled and unlabeled pools.

    Both pools are insertion-ordered dicts keyed by tile_id so iteration order
    is reproducible.
    """

    labeled: dict[str, LabeledTile]
    unlabeled: dict[str, GeoTile]
    pseudo_ids: set[str] = field(default_factory=set)
    initial_pool_size: int = 0
    seed_slum_ratio: float = 0.0

    @classmethod
    def from_tiles(cls, labeled: Iterable[LabeledTile], unlabeled: Iterable[GeoTile]) -> "PoolState":
        lab = {lt.tile_id: lt for lt in labeled}
        unl = {t.tile_id: t for t in unlabeled}
        overlap = lab.keys() & unl.keys()
        if overlap:
            raise GeoDataError(f"tiles in both pools: {sorted(overlap)[:5]}")
        n_slum = sum(lt.label for lt in lab.values())
        ratio = n_slum / len(lab) if lab else 0.0
        return cls(labeled=lab, unlabeled=unl, initial_pool_size=len(unl), seed_slum_ratio=ratio)

    def count(self, label: int) -> int:
        return sum(1 for lt in self.labeled.values() if lt.label == label)

    def check(self) -> None:
        if self.labeled.keys() & self.unlabeled.keys():
            raise GeoDataError("labeled and unlabeled pools overlap")
        if not self.pseudo_ids <= self.labeled.keys():
            raise GeoDataError("pseudo ids missing from labeled pool")


def make_tile_id(source_id: str, row: int, col: int) -> str:
    return f"{source_id}_r{row:05d}_c{col:05d}"


def window_starts(length: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def tile_raster(raster: Raster, window: int = TILE_SIZE, overlap: int = DEFAULT_OVERLAP) -> list[GeoTile]:
    """Cut ``raster`` into ``window``-sized tiles with the given overlap.

    Tiles are laid out row-major on a grid of stride ``window - overlap``. If
    the grid does not reach the far edge on an axis, one extra window is
    clamped flush to that edge. Tile pixels are views into the raster.
    """
    if not 0 <= overlap < window:
        raise GeoDataError("invalid overlap")
    h, w = raster.shape
    if h < window or w < window:
        raise GeoDataError(f"raster too small: {h}x{w} < {window}")
    stride = window - overlap
    tiles = []
    for r in window_starts(h, window, stride):
        for c in window_starts(w, window, stride):
            tiles.append(
                GeoTile(
                    tile_id=make_tile_id(raster.source_id, r, c),
                    pixels=raster.pixels[r : r + window, c : c + window],
                    origin_px=(r, c),
                    geo_transform=shift_transform(raster.geo_transform, r, c),
                    source_id=raster.source_id,
                    timestamp=raster.timestamp,
                )
            )
    return tiles


def derive_image_label(mask: SegMask, threshold: float = IMAGE_LABEL_THRESHOLD) -> tuple[int, float]:
    values = np.asarray(mask.values)
    if not np.isin(values, (0, 1)).all():
        raise GeoDataError("mask not binary")
    mu = float(np.count_nonzero(values)) / values.size
    return int(mu >= threshold), mu


@dataclass(frozen=True)
class SplitSpec:
    """Requested tile counts per split and class (slum, non-slum)."""

    train: tuple[int, int] = (20, 3938)
    val: tuple[int, int] = (12, 861)
    test: tuple[int, int] = (0, 0)
    seed: int = 0


def build_splits(labeled: Iterable[LabeledTile], spec: SplitSpec) -> dict[str, list[LabeledTile]]:
    by_class: dict[int, list[LabeledTile]] = {1: [], 0: []}
    for lt in sorted(labeled, key=lambda t: t.tile_id):
        by_class[lt.label].append(lt)

    names = ("train", "val", "test")
    shortfalls = []
    for label, cls_name, idx in ((1, "slum", 0), (0, "non-slum", 1)):
        need = sum(getattr(spec, n)[idx] for n in names)
        have = len(by_class[label])
        if need > have:
            shortfalls.append(f"{cls_name} short by {need - have}")
    if shortfalls:
        raise GeoDataError("insufficient tiles: " + ", ".join(shortfalls))

    rng = np.random.default_rng(spec.seed)
    out: dict[str, list[LabeledTile]] = {n: [] for n in names}
    for label, idx in ((1, 0), (0, 1)):
        items = by_class[label]
        order = rng.permutation(len(items))
        pos = 0
        for n in names:
            k = getattr(spec, n)[idx]
            out[n].extend(items[i] for i in order[pos : pos + k])
            pos += k
    return out


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the dihedral group acting on the first two axes."""
    out = np.rot90(arr, k % 4, axes=(0, 1))
    if k >= 4:
        out = np.flip(out, axis=1)
    return out


def augment_for_balance(
    train: Iterable[LabeledTile], slum_factor: int = 8, nonslum_factor: int = 1
) -> list[LabeledTile]:
    """Oversample slum tiles with geometric transforms.

    Copy ``k`` of a tile applies dihedral transform ``k`` to pixels and mask
    alike; copy 0 is the original. Copies get a ``~d<k>`` tile_id suffix.
    """
    if nonslum_factor < 1 or slum_factor < 1:
        raise GeoDataError("augmentation factors must be >= 1")
    if slum_factor < nonslum_factor:
        raise GeoDataError("slum_factor must be >= nonslum_factor")
    if max(slum_factor, nonslum_factor) > 8:
        raise GeoDataError("at most 8 distinct dihedral transforms")
    stream = []
    for lt in train:
        factor = slum_factor if lt.label == 1 else nonslum_factor
        for k in range(factor):
            stream.append(lt if k == 0 else transform_labeled(lt, k))
    return stream


def transform_labeled(lt: LabeledTile, k: int) -> LabeledTile:
    t = lt.tile
    tile = GeoTile(
        tile_id=f"{t.tile_id}~d{k}",
        pixels=dihedral(t.pixels, k),
        origin_px=t.origin_px,
        geo_transform=t.geo_transform,
        source_id=t.source_id,
        timestamp=t.timestamp,
    )
    mask = SegMask(dihedral(lt.mask.values, k), lt.mask.source)
    return LabeledTile(tile=tile, mask=mask, label=lt.label, mask_mean=lt.mask_mean)


# ---------------------------------------------------------------------------
# On-disk formats


def save_raster(raster: Raster, path: Path) -> Path:
    """Write ``raster`` as PNG plus a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster.pixels).save(path)
    sidecar = {
        "source_id": raster.source_id,
        "geo_transform": list(raster.geo_transform),
        "timestamp": raster.timestamp,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_raster(path: Path) -> Raster:
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        return _load_geotiff(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise GeoDataError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"))
    return Raster(
        pixels=pixels,
        geo_transform=tuple(float(v) for v in meta["geo_transform"]),
        source_id=meta.get("source_id", path.stem),
        timestamp=meta.get("timestamp"),
    )


def _load_geotiff(path: Path) -> Raster:
    try:
        import rasterio
    except ImportError as e:  # pragma: no cover - optional dependency
        raise GeoDataError("GeoTIFF input needs rasterio; convert to PNG + sidecar JSON") from e
    with rasterio.open(path) as src:  # pragma: no cover
        pixels = np.moveaxis(src.read([1, 2, 3]), 0, -1).astype(np.uint8)
        gt = src.transform.to_gdal()
        ts = src.tags().get("TIFFTAG_DATETIME")
    return Raster(pixels, tuple(gt), path.stem, ts)  # pragma: no cover


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask_png(path: Path, source: str = "human") -> SegMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return SegMask((arr >= 128).astype(np.uint8), source)


@dataclass
class ManifestEntry:
    tile_id: str
    source_id: str
    origin_px: tuple[int, int]
    geo_transform: GeoTransform
    timestamp: Optional[str] = None
    split: Optional[str] = None
    label: Optional[int] = None
    mask_path: Optional[str] = None
    mask_source: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "source_id": self.source_id,
            "origin_px": list(self.origin_px),
            "geo_transform": list(self.geo_transform),
            "timestamp": self.timestamp,
            "split": self.split,
            "label": self.label,
            "mask_path": self.mask_path,
            "mask_source": self.mask_source,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ManifestEntry":
        return cls(
            tile_id=d["tile_id"],
            source_id=d["source_id"],
            origin_px=(int(d["origin_px"][0]), int(d["origin_px"][1])),
            geo_transform=tuple(float(v) for v in d["geo_transform"]),
            timestamp=d.get("timestamp"),
            split=d.get("split"),
            label=d.get("label"),
            mask_path=d.get("mask_path"),
            mask_source=d.get("mask_source"),
        )

    @classmethod
    def for_tile(cls, tile: GeoTile, **kw) -> "ManifestEntry":
        return cls(tile.tile_id, tile.source_id, tile.origin_px, tile.geo_transform, tile.timestamp, **kw)


def write_manifest(entries: Iterable[ManifestEntry], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
    return path


def read_manifest(path: Path) -> list[ManifestEntry]:
    with Path(path).open() as fh:
        return [ManifestEntry.from_json(json.loads(line)) for line in fh if line.strip()]


class RasterStore:
    """Lazily loads rasters by source_id from a directory of PNG + sidecars."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, Raster] = {}

    def get(self, source_id: str) -> Raster:
        if source_id not in self._cache:
            path = self.root / f"{source_id}.png"
            if not path.exists():
                raise GeoDataError(f"no raster for source {source_id!r} under {self.root}")
            self._cache[source_id] = load_raster(path)
        return self._cache[source_id]

    def tile(self, entry: ManifestEntry, window: int = TILE_SIZE) -> GeoTile:
        raster = self.get(entry.source_id)
        r, c = entry.origin_px
        return GeoTile(
            tile_id=entry.tile_id,
            pixels=raster.pixels[r : r + window, c : c + window],
            origin_px=entry.origin_px,
            geo_transform=entry.geo_transform,
            source_id=entry.source_id,
            timestamp=entry.timestamp,
        )


def iter_labeled(
    entries: Iterable[ManifestEntry], store: RasterStore, base: Path, threshold: float = IMAGE_LABEL_THRESHOLD
) -> Iterator[LabeledTile]:
    """Yield a LabeledTile for every manifest entry that carries a mask."""
    for e in entries:
        if e.mask_path is None:
            continue
        tile = store.tile(e)
        mask = load_mask_png(Path(base) / e.mask_path, e.mask_source or "human")
        lt = LabeledTile.from_mask(tile, mask, threshold)
        if e.label is not None:
            lt.label = int(e.label)
        yield lt
