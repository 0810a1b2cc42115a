"""Command-line entry point.

Exit codes: 0 on success, 1 when a pipeline stage fails, 2 on usage errors or
a malformed config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig
from .evaluation import compute_metrics, write_reports
from .export import export_locations, plot_curves, write_curves, write_geojson
from .geodata import (
    GeoDataError,
    LabeledTile,
    ManifestEntry,
    PoolState,
    RasterStore,
    load_mask_png,
    load_raster,
    read_manifest,
    save_mask_png,
    tile_raster,
    write_manifest,
)
from .loop import run, write_run_manifest
from .model import Checkpoint
from .segmenter import SegmenterModel, binarize, train_joint, write_training_log

log = logging.getLogger("tempslum")

LABELED_SPLITS = ("seed", "train")
SUBCOMMANDS = ("tile", "synth", "discover-seeds", "train", "iterate", "evaluate", "export", "report")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Dataset plumbing


@dataclass
class Dataset:
    pool: PoolState
    val: list[LabeledTile] = field(default_factory=list)
    test: list[LabeledTile] = field(default_factory=list)
    seed_ids: list[str] = field(default_factory=list)


def load_dataset(cfg: RunConfig, window: Optional[int] = None) -> Dataset:
    """Build the pools from the configured manifest.

    Entries with split "seed" or "train" and a mask form the labeled pool,
    "val" and "test" entries become the held-out sets and everything else
    is unlabeled.
    """
    manifest = cfg.resolve(cfg.paths.manifest)
    store = RasterStore(cfg.resolve(cfg.paths.rasters))
    window = window or cfg.tiling.window
    base = manifest.parent
    thr = cfg.labels.image_threshold
    labeled, unlabeled, val, test = [], [], [], []
    for e in read_manifest(manifest):
        tile = store.tile(e, window)
        if e.split in LABELED_SPLITS + ("val", "test"):
            if e.mask_path is None:
                raise GeoDataError(f"{e.split} tile {e.tile_id} has no mask")
            lt = LabeledTile.from_mask(tile, load_mask_png(base / e.mask_path, e.mask_source or "human"), thr)
            {"val": val, "test": test}.get(e.split, labeled).append(lt)
        else:
            unlabeled.append(tile)
    pool = PoolState.from_tiles(labeled, unlabeled)
    return Dataset(pool, val, test, [lt.tile_id for lt in labeled])


def write_labeled_manifest(pool: PoolState, out_dir: Path, name: str = "labeled_manifest.jsonl") -> Path:
    """Labeled pool (seed and pseudo-labeled tiles) with masks stored beside it."""
    entries = []
    for tid, lt in pool.labeled.items():
        rel = Path("masks") / f"{tid}.png"
        save_mask_png(lt.mask.values, out_dir / rel)
        entries.append(
            ManifestEntry.for_tile(
                lt.tile,
                split="pseudo" if tid in pool.pseudo_ids else "seed",
                label=lt.label,
                mask_path=rel.as_posix(),
                mask_source=lt.mask.source,
            )
        )
    return write_manifest(entries, out_dir / name)


def load_labeled_pool(cfg: RunConfig, run_dir: Path) -> PoolState:
    path = run_dir / "labeled_manifest.jsonl"
    if not path.exists():
        raise GeoDataError(f"no labeled manifest in {run_dir}; run `iterate` first")
    store = RasterStore(cfg.resolve(cfg.paths.rasters))
    labeled, pseudo = [], set()
    for e in read_manifest(path):
        lt = LabeledTile.from_mask(store.tile(e, cfg.tiling.window), load_mask_png(run_dir / e.mask_path, e.mask_source))
        if e.label is not None:
            lt.label = int(e.label)
        labeled.append(lt)
        if e.split == "pseudo":
            pseudo.add(lt.tile_id)
    pool = PoolState.from_tiles(labeled, [])
    pool.pseudo_ids = pseudo
    return pool


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.rng_seed = args.seed
        cfg.train.rng_seed = args.seed
    if getattr(args, "out", None):
        cfg.paths.out = str(Path(args.out).resolve())
    return cfg


def _named_paths(items: Sequence[str], what: str) -> dict[str, Path]:
    out = {}
    for item in items:
        name, sep, path = item.rpartition("=")
        if not sep or not name or not path:
            raise UsageError(f"expected NAME=PATH for {what}, got {item!r}")
        out[name] = Path(path)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_tile(args) -> int:
    cfg = _load_config(args)
    window = args.window or cfg.tiling.window
    overlap = cfg.tiling.overlap if args.overlap is None else args.overlap
    entries = []
    for path in args.rasters:
        raster = load_raster(path)
        entries += [ManifestEntry.for_tile(t, split=args.split) for t in tile_raster(raster, window, overlap)]
    write_manifest(entries, args.manifest)
    print(f"{len(entries)} tiles -> {args.manifest}")
    return 0


SYNTH_PRESETS = ("full", "small")


def small_experiment_spec(seed: int = 0):
    from .synthgen import ExperimentSpec, SynthSpec

    return ExperimentSpec(
        city=SynthSpec(rng_seed=100 + seed, width=1656, height=1656, n_slum_clusters=6, n_builtup_blocks=4, n_dirt_patches=2,
                       schedule=("both", "both", "both", "t2", "t2", "t2")),
        test_city=SynthSpec(rng_seed=1000 + seed, width=1056, height=1056, n_slum_clusters=3, n_builtup_blocks=2,
                            n_dirt_patches=1, source_id="synthtest"),
        seed_slum=2, seed_nonslum=16, val_slum=1, val_nonslum=4, rng_seed=seed,
    )


def cmd_synth(args) -> int:
    from .synthgen import SYNTH_POS_WEIGHT, ExperimentSpec, generate, make_experiment, save_city

    out = Path(args.out_dir)
    if args.spec:
        spec = ExperimentSpec.from_json(json.loads(Path(args.spec).read_text()))
    elif args.preset == "small":
        spec = small_experiment_spec(args.seed or 0)
    else:
        seed = args.seed or 0
        spec = ExperimentSpec(rng_seed=seed)
        spec.city.rng_seed = 100 + seed
        spec.test_city.rng_seed = 1000 + seed
    if spec.test_city.source_id == spec.city.source_id:
        raise ConfigError("city and test city need distinct source ids")

    city, test_city = generate(spec.city), generate(spec.test_city)
    exp = make_experiment(spec, city, test_city)
    rasters = out / "rasters"
    save_city(city, spec.city, rasters)
    save_city(test_city, spec.test_city, rasters)
    builtup = out / "builtup"
    for src, arr in {**city.builtup_by_source(), **test_city.builtup_by_source()}.items():
        save_mask_png(arr, builtup / f"{src}.png")

    entries = []

    def labeled_entry(lt: LabeledTile, split: str) -> ManifestEntry:
        rel = Path("masks") / f"{lt.tile_id}.png"
        save_mask_png(lt.mask.values, out / rel)
        return ManifestEntry.for_tile(lt.tile, split=split, label=lt.label, mask_path=rel.as_posix(), mask_source="human")

    entries += [labeled_entry(lt, "seed") for lt in exp.pool.labeled.values()]
    entries += [labeled_entry(lt, "val") for lt in exp.val]
    entries += [labeled_entry(lt, "test") for lt in exp.test]
    entries += [ManifestEntry.for_tile(t, split="unlabeled") for t in exp.pool.unlabeled.values()]
    write_manifest(entries, out / "manifest.jsonl")
    for date, raster in (("t1", city.raster_t1), ("t2", city.raster_t2)):
        write_manifest([ManifestEntry.for_tile(t) for t in tile_raster(raster)], out / f"tiles_{date}.jsonl")
    # per-tile ground truth for the unlabeled pool, for offline analysis only
    truth = {tid: m.mean() for tid, m in exp.truth.items()}
    _dump_json({"spec": spec.to_json(), "pool_truth_fraction": truth}, out / "experiment.json")

    cfg = RunConfig()
    cfg.paths.rasters, cfg.paths.manifest, cfg.paths.out = "rasters", "manifest.jsonl", "run"
    cfg.rng_seed = cfg.train.rng_seed = spec.rng_seed
    cfg.train.pos_weight = SYNTH_POS_WEIGHT
    if not (out / "run.yaml").exists():
        cfg.save(out / "run.yaml")
    print(f"{len(entries)} manifest entries ({len(exp.pool.labeled)} seed, {len(exp.pool.unlabeled)} unlabeled) -> {out}")
    return 0


def cmd_discover_seeds(args) -> int:
    from .seeds import MaskLookupSegmenter, build_pairs, select_seed_candidates, write_candidate_report

    cfg = _load_config(args)
    t1_path, t2_path = Path(args.t1), Path(args.t2)
    rasters = Path(args.rasters) if args.rasters else t1_path.parent / "rasters"
    store = RasterStore(rasters)
    window = cfg.tiling.window
    tiles_t1 = [store.tile(e, window) for e in read_manifest(t1_path)]
    tiles_t2 = [store.tile(e, window) for e in read_manifest(t2_path)]
    masks_dir = Path(args.builtup_masks)
    sources = {t.source_id for t in tiles_t1 + tiles_t2}
    masks = {}
    for src in sorted(sources):
        p = masks_dir / f"{src}.png"
        if not p.exists():
            raise GeoDataError(f"no built-up mask for source {src!r} in {masks_dir}")
        masks[src] = load_mask_png(p, "builtup_model").values
    seg = MaskLookupSegmenter(masks)
    thr = cfg.seeds.builtup_threshold
    pairs = list(build_pairs(tiles_t1, tiles_t2, seg, thr))
    iou_max = cfg.seeds.iou_max if args.iou_max is None else args.iou_max
    min_area = cfg.seeds.min_area if args.min_area is None else args.min_area
    min_nuc = cfg.seeds.min_nucleation if args.min_nucleation is None else args.min_nucleation
    cands = select_seed_candidates(pairs, iou_max, min_area, min_nuc)
    if args.top is not None:
        cands = cands[: args.top]
    jl, sheet = write_candidate_report(cands, Path(args.out_dir))
    print(f"{len(cands)} candidates of {len(pairs)} pairs -> {jl}, {sheet}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(cfg)
    out = cfg.resolve(cfg.paths.out)
    res = train_joint(data.pool, cfg.train_config(), val=data.val or None)
    res.checkpoint.config = cfg.to_dict()
    res.checkpoint.save(out / "checkpoints" / "seed.pt")
    write_training_log(res.checkpoint.history, out / "training_log.csv")
    print(f"checkpoint {res.checkpoint.checkpoint_id} -> {out / 'checkpoints' / 'seed.pt'}")
    return 0


ITER_FIELDS = (
    "iteration", "K", "n_selected_slum", "n_selected_nonslum", "n_overlap", "admitted_slum",
    "admitted_nonslum", "rejected", "cumulative_slum_added", "n_labeled", "n_unlabeled", "checkpoint_id",
)


def cmd_iterate(args) -> int:
    cfg = _load_config(args)
    if args.k is not None:
        cfg.K = args.k
    if args.max_iters is not None:
        cfg.max_iterations = args.max_iters
    if cfg.K < 1 or cfg.max_iterations < 0:
        raise ConfigError("K must be >= 1 and max_iterations >= 0")
    data = load_dataset(cfg)
    out = cfg.resolve(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.yaml")

    iter_log = out / "iterations.jsonl"
    iter_log.write_text("")

    def on_iteration(rec):
        with iter_log.open("a") as fh:
            fh.write(json.dumps(rec.comparable(), sort_keys=True) + "\n")

    res = run(
        data.pool,
        cfg.train_config(),
        K=cfg.K,
        max_iterations=cfg.max_iterations,
        val=data.val or None,
        area_thresh=cfg.labels.area_threshold,
        prob_thresh=cfg.labels.prob_threshold,
        starvation_limit=cfg.starvation_limit,
        artifacts=out,
        on_iteration=on_iteration,
    )
    res.seed_checkpoint.config = res.checkpoint.config = cfg.to_dict()
    res.seed_checkpoint.save(out / "checkpoints" / "seed.pt")
    res.checkpoint.save(out / "checkpoints" / "final.pt")
    with (out / "iterations.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ITER_FIELDS)
        w.writeheader()
        for r in res.records:
            w.writerow(r.comparable())
    write_curves({f"K={cfg.K}": res.curve()}, out / "curve.csv")
    write_labeled_manifest(res.pool, out)
    write_run_manifest(res, cfg.to_dict(), data.seed_ids, out / "run_manifest.json", created_at=_now())
    print(
        f"stop: {res.stop_reason} after {len(res.records)} iterations, "
        f"{res.records[-1].cumulative_slum_added if res.records else 0}/{res.criterion.required_slums} slum tiles admitted"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(cfg)
    if not data.test:
        raise GeoDataError("manifest has no test tiles")
    out = cfg.resolve(cfg.paths.out)
    models = _named_paths(args.model or [], "--model")
    if not models:
        for name in ("seed", "final"):
            p = out / "checkpoints" / f"{name}.pt"
            if p.exists():
                models[name] = p
    if not models:
        raise GeoDataError(f"no checkpoints given and none found under {out / 'checkpoints'}")
    truth = [lt.mask for lt in data.test]
    reports = {}
    for name, path in models.items():
        seg = SegmenterModel.from_checkpoint(Checkpoint.load(path))
        probs = seg.predict_batch([lt.tile for lt in data.test])
        reports[name] = compute_metrics([binarize(p, cfg.labels.prob_threshold) for p in probs], truth)
    paths = write_reports(reports, Path(args.report_dir) if args.report_dir else out / "evaluation")
    print(paths["md"].read_text(), end="")
    return 0


def cmd_export(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.run) if args.run else cfg.resolve(cfg.paths.out)
    pool = load_labeled_pool(cfg, run_dir)
    model = None
    if args.resegment:
        model = SegmenterModel.from_checkpoint(Checkpoint.load(run_dir / "checkpoints" / "final.pt"))
    fc = cmd_export_locations(pool, model, cfg.labels.area_threshold, cfg.export.uncertain_factor)
    dest = Path(args.geojson) if args.geojson else run_dir / "locations.geojson"
    write_geojson(fc, dest)
    print(f"{len(fc['features'])} locations -> {dest}")
    return 0


def cmd_export_locations(pool: PoolState, model: Optional[SegmenterModel] = None,
                         area_thresh: float = 0.05, uncertain_factor: float = 2.0) -> dict:
    return export_locations(pool, model, area_thresh, uncertain_factor)


def _read_curve(run_dir: Path) -> tuple[list[tuple[int, int]], int, int]:
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    its = manifest["iterations"]
    K = its[0]["K"] if its else manifest["config"]["K"]
    curve = [(0, 0)] + [(r["iteration"], r["cumulative_slum_added"]) for r in its]
    return curve, K, manifest["stop_threshold"]


def cmd_report(args) -> int:
    runs = _named_paths(args.run, "--run") if args.run else {}
    if not runs:
        cfg = _load_config(args)
        runs = {"run": cfg.resolve(cfg.paths.out)}
    curves, thresholds = {}, set()
    for name, d in runs.items():
        curve, K, thr = _read_curve(d)
        curves[name if args.run else f"K={K}"] = curve
        thresholds.add(thr)
    out = Path(args.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curves(curves, out / "curves.csv")
    plot_curves(curves, thresholds.pop() if len(thresholds) == 1 else None, out / "curves.png")
    print(f"{len(curves)} curves -> {out / 'curves.csv'}, {out / 'curves.png'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempslum", description="Semi-supervised temporary-settlement mapping.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="YAML run config")
        sp.add_argument("--seed", type=int, help="override rng_seed")
        if out:
            sp.add_argument("--out", help="override the output directory")

    sp = sub.add_parser("tile", help="cut rasters into a tile manifest")
    common(sp, out=False)
    sp.add_argument("rasters", nargs="+", type=Path, help="PNG (+ .json sidecar) or GeoTIFF rasters")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--window", type=int)
    sp.add_argument("--overlap", type=int)
    sp.add_argument("--split")
    sp.set_defaults(func=cmd_tile)

    sp = sub.add_parser("synth", help="generate a synthetic bi-temporal dataset")
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--preset", choices=SYNTH_PRESETS, default="full")
    sp.add_argument("--spec", type=Path, help="experiment spec JSON (overrides --preset)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("discover-seeds", help="rank tiles by built-up change between two dates")
    common(sp, out=False)
    sp.add_argument("--t1", required=True, help="tile manifest of the earlier date")
    sp.add_argument("--t2", required=True, help="tile manifest of the later date")
    sp.add_argument("--rasters", help="raster directory (default: <t1 dir>/rasters)")
    sp.add_argument("--builtup-masks", required=True, help="directory of full-raster built-up masks <source_id>.png")
    sp.add_argument("--iou-max", type=float)
    sp.add_argument("--min-area", type=float)
    sp.add_argument("--min-nucleation", type=float)
    sp.add_argument("--top", type=int, help="keep only the first N candidates")
    sp.add_argument("--out-dir", default=".", help="where to write the candidate report")
    sp.set_defaults(func=cmd_discover_seeds)

    sp = sub.add_parser("train", help="train the seed model on the labeled split")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("iterate", help="run the pseudo-labeling loop")
    common(sp)
    sp.add_argument("--k", type=int)
    sp.add_argument("--max-iters", type=int)
    sp.set_defaults(func=cmd_iterate)

    sp = sub.add_parser("evaluate", help="score checkpoints on the test split")
    common(sp)
    sp.add_argument("--model", action="append", metavar="NAME=CHECKPOINT")
    sp.add_argument("--report-dir")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export", help="write settlement locations as GeoJSON")
    common(sp)
    sp.add_argument("--run", help="run directory (default: config output dir)")
    sp.add_argument("--geojson", help="output path (default: <run>/locations.geojson)")
    sp.add_argument("--resegment", action="store_true", help="recompute masks with the final model")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("report", help="cumulative-admission curves as CSV and PNG")
    common(sp)
    sp.add_argument("--run", action="append", metavar="NAME=RUN_DIR")
    sp.add_argument("--report-dir", default="report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
