"""Tracking evaluation: precision/success curves, MPR/MSR scalars,
attribute-conditioned breakdowns, and machine-readable reports.

MPR/MSR take, per frame, the best match across the available modality ground
truths (smallest center error, largest IoU). Precision counts center error
<= threshold over a 0..50 px grid (step 1); success counts IoU > threshold
(strict) over a 0..1 grid (step 0.01); MSR is the plain mean of the success
curve over that grid.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import BoundingBox
from .errors import InvalidInputError

PRECISION_THRESHOLDS = np.arange(0, 51, 1, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.arange(0, 101) * 0.01, 2)


@dataclass
class EvalRecord:
    name: str
    predictions: list[BoundingBox]
    ground_truth: dict[str, list[BoundingBox]]
    attributes: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    mpr: float
    msr: float
    precision_curve: np.ndarray  # over PRECISION_THRESHOLDS
    success_curve: np.ndarray  # over SUCCESS_THRESHOLDS
    mean_center_error: float
    attribute_msr: dict[str, float] = field(default_factory=dict)
    px_threshold: float = 5.0


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center(), b.center()
    return math.hypot(ax - bx, ay - by)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    x0 = max(a.x, b.x)
    y0 = max(a.y, b.y)
    x1 = min(a.x + a.w, b.x + b.w)
    y1 = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _per_frame_best(record: EvalRecord) -> tuple[np.ndarray, np.ndarray]:
    """Best (smallest) center error and best (largest) IoU per frame across
    the available ground-truth modalities."""
    gts = [g for g in record.ground_truth.values() if g]
    if not gts:
        raise InvalidInputError(f"{record.name}: no ground truth")
    n = len(record.predictions)
    for g in gts:
        if len(g) != n:
            raise InvalidInputError(
                f"{record.name}: prediction/ground-truth length mismatch "
                f"({n} vs {len(g)})"
            )
    errs = np.full(n, np.inf)
    ious = np.zeros(n)
    for g in gts:
        for i, (p, b) in enumerate(zip(record.predictions, g)):
            errs[i] = min(errs[i], center_error(p, b))
            ious[i] = max(ious[i], iou(p, b))
    return errs, ious


def mpr_msr(records: list[EvalRecord], px_threshold: float = 5.0) -> MetricReport:
    if not records:
        raise InvalidInputError("no evaluation records")
    errs = []
    ious = []
    for rec in records:
        e, i = _per_frame_best(rec)
        errs.append(e)
        ious.append(i)
    errs = np.concatenate(errs)
    ious = np.concatenate(ious)
    precision = np.array([(errs <= t).mean() for t in PRECISION_THRESHOLDS])
    success = np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])
    return MetricReport(
        mpr=float((errs <= px_threshold).mean()),
        msr=float(success.mean()),
        precision_curve=precision,
        success_curve=success,
        mean_center_error=float(errs.mean()),
        px_threshold=px_threshold,
    )


def attribute_report(records: list[EvalRecord], px_threshold: float = 5.0) -> dict[str, float]:
    """MSR recomputed over the subset of sequences carrying each tag."""
    tags = sorted({t for rec in records for t in rec.attributes})
    table = {}
    for tag in tags:
        subset = [rec for rec in records if tag in rec.attributes]
        if subset:
            table[tag] = mpr_msr(subset, px_threshold).msr
    return table


def emit_report(report: MetricReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "mpr": report.mpr,
        "msr": report.msr,
        "px_threshold": report.px_threshold,
        "mean_center_error": report.mean_center_error,
        "precision_thresholds": PRECISION_THRESHOLDS.tolist(),
        "precision_curve": report.precision_curve.tolist(),
        "success_thresholds": SUCCESS_THRESHOLDS.tolist(),
        "success_curve": report.success_curve.tolist(),
        "attribute_msr": report.attribute_msr,
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    with open(os.path.join(out_dir, "precision.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerows(zip(PRECISION_THRESHOLDS.tolist(), report.precision_curve.tolist()))
    with open(os.path.join(out_dir, "success.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerows(zip(SUCCESS_THRESHOLDS.tolist(), report.success_curve.tolist()))


def load_report(out_dir: str) -> MetricReport:
    with open(os.path.join(out_dir, "metrics.json")) as fh:
        payload = json.load(fh)
    return MetricReport(
        mpr=payload["mpr"],
        msr=payload["msr"],
        precision_curve=np.array(payload["precision_curve"]),
        success_curve=np.array(payload["success_curve"]),
        mean_center_error=payload["mean_center_error"],
        attribute_msr=payload.get("attribute_msr", {}),
        px_threshold=payload["px_threshold"],
    )
