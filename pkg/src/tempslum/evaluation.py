"""Segmentation metrics and run comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


@dataclass
class MetricsReport:
    mIoU: float
    precision: float
    recall: float
    f1: float
    per_image_iou: list[float] = field(default_factory=list)
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0
    # image-averaged variants; the pooled values above are canonical
    image_precision: float = 0.0
    image_recall: float = 0.0
    image_f1: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def image_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Slum-class IoU of one image; empty prediction on empty truth scores 1."""
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def compute_metrics(predictions: Sequence, ground_truth: Sequence) -> MetricsReport:
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truth)} ground-truth masks")
    ious = []
    tp = fp = fn = tn = 0
    img_p, img_r = [], []
    for pred, truth in zip(predictions, ground_truth):
        p = np.asarray(getattr(pred, "values", pred), dtype=bool)
        g = np.asarray(getattr(truth, "values", truth), dtype=bool)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
        ious.append(image_iou(p, g))
        i_tp = int(np.count_nonzero(p & g))
        i_fp = int(np.count_nonzero(p & ~g))
        i_fn = int(np.count_nonzero(~p & g))
        tp, fp, fn = tp + i_tp, fp + i_fp, fn + i_fn
        tn += p.size - i_tp - i_fp - i_fn
        img_p.append(_ratio(i_tp, i_tp + i_fp))
        img_r.append(_ratio(i_tp, i_tp + i_fn))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    ip = float(np.mean(img_p)) if img_p else 0.0
    ir = float(np.mean(img_r)) if img_r else 0.0
    return MetricsReport(
        mIoU=float(np.mean(ious)) if ious else 0.0,
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        per_image_iou=[float(v) for v in ious],
        TP=tp, FP=fp, FN=fn, TN=tn,
        image_precision=ip,
        image_recall=ir,
        image_f1=_f1(ip, ir),
    )


COLUMNS = ("mIoU", "precision", "recall", "f1")


def compare_runs(reports: Mapping[str, MetricsReport]) -> list[tuple[str, MetricsReport]]:
    """Rows ordered by mIoU descending, then name."""
    if not reports:
        raise ValueError("no reports to compare")
    return sorted(reports.items(), key=lambda kv: (-kv[1].mIoU, kv[0]))


def comparison_markdown(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    lines = ["| Method | " + " | ".join(COLUMNS) + " |", "|---" * (len(COLUMNS) + 1) + "|"]
    for name, rep in rows:
        lines.append(f"| {name} | " + " | ".join(f"{getattr(rep, c):.2f}" for c in COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def comparison_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method",) + COLUMNS)
    for name, rep in rows:
        w.writerow([name] + [repr(getattr(rep, c)) for c in COLUMNS])
    return buf.getvalue()


def write_reports(reports: Mapping[str, MetricsReport], out_dir: Path, stem: str = "comparison") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = compare_runs(reports)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "md": out_dir / f"{stem}.md",
    }
    paths["json"].write_text(json.dumps({k: v.to_json() for k, v in rows}, indent=2))
    paths["csv"].write_text(comparison_csv(rows))
    paths["md"].write_text(comparison_markdown(rows))
    return paths
