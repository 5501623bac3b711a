"""Evaluation metrics: Monte-Carlo oriented-box IoU with mAP sweeps,
n-degree/m-cm pose accuracy, ADD and ADD-S with AUC, and tracking aggregates.

Boxes are classic OBBs here: extents = s along the box's own axes (R columns),
centered at t. Threshold comparisons are inclusive (<=). Translation errors
are reported in centimeters, rotations in degrees.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import (
    Pose9D,
    SymmetrySpec,
    rotation_about_axis,
    rotation_geodesic_deg,
    sym_align_rotation,
    transform_points,
)

IOU_SEED = 901731
IOU_POINTS = 100_000
SYM_IOU_STEPS = 36
DEFAULT_POSE_THRESHOLDS = ((5, 2), (5, 5), (10, 2), (10, 5))
DEFAULT_IOU_THRESHOLDS = (0.75,)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    category: str
    gt: Pose9D
    pred: Pose9D
    model_points: np.ndarray  # normalized object frame (the frame poses act on)


@dataclass(frozen=True)
class MetricReport:
    """Per-metric, per-category pass rates plus optional tracking aggregates."""

    table: dict  # metric name -> {category: rate, ..., "overall": mean}
    tracking: dict | None = None

    def to_json(self) -> str:
        out = {"metrics": self.table}
        if self.tracking is not None:
            out["tracking"] = self.tracking
        return json.dumps(out, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        metrics = sorted(self.table)
        cats = sorted({c for m in self.table.values() for c in m})
        cats = [c for c in cats if c != "overall"] + ["overall"]
        buf = io.StringIO()
        buf.write("category," + ",".join(metrics) + "\n")
        for c in cats:
            row = [c] + [
                f"{self.table[m][c]:.6f}" if c in self.table[m] else ""
                for m in metrics
            ]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()


def _box_corners(pose: Pose9D) -> np.ndarray:
    units = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    )
    return (units * pose.s) @ pose.r.m.T + pose.t


def _stratified_points(lo, hi, n, seed):
    m = int(np.ceil(n ** (1.0 / 3.0)))
    rng = np.random.default_rng(seed)
    edges = [np.linspace(lo[i], hi[i], m + 1)[:-1] for i in range(3)]
    cell = (hi - lo) / m
    gx, gy, gz = np.meshgrid(*edges, indexing="ij")
    base = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return base + rng.uniform(0, 1, base.shape) * cell


def iou3d(a: Pose9D, b: Pose9D, sym: SymmetrySpec = SymmetrySpec.none(),
          n_points: int = IOU_POINTS, seed: int = IOU_SEED) -> float:
    """Monte-Carlo IoU of two oriented boxes with a fixed stratified lattice.

    For a continuous symmetry axis the result is maximized over SYM_IOU_STEPS
    rotations of the predicted box b about its own axis.
    """
    lo_a = _box_corners(a).min(axis=0)
    hi_a = _box_corners(a).max(axis=0)
    # a rotating b stays inside its bounding sphere
    rb = 0.5 * float(np.linalg.norm(b.s))
    lo = np.minimum(lo_a, b.t - rb)
    hi = np.maximum(hi_a, b.t + rb)
    pts = _stratified_points(lo, hi, n_points, seed)

    def one(rb_m):
        union, inter = _kernels.obb_pair_counts(
            pts, a.r.m, a.t, a.s, rb_m, b.t, b.s
        )
        return inter / union if union else 0.0

    if sym.kind == "none":
        return one(b.r.m)
    best = 0.0
    for k in range(SYM_IOU_STEPS):
        theta = 2.0 * np.pi * k / SYM_IOU_STEPS
        rb_m = b.r.m @ rotation_about_axis(sym.axis, theta).m
        best = max(best, one(rb_m))
    return best


def pose_accuracy(gt: Pose9D, pred: Pose9D, n_deg: float, m_cm: float,
                  sym: SymmetrySpec = SymmetrySpec.none()) -> bool:
    """True iff symmetry-aligned rotation error <= n_deg and |t| error <= m_cm."""
    r_aligned = sym_align_rotation(gt.r, pred.r, sym)
    rot_err = rotation_geodesic_deg(r_aligned, pred.r)
    t_err_cm = 100.0 * float(np.linalg.norm(gt.t - pred.t))
    return rot_err <= n_deg and t_err_cm <= m_cm


def rotation_error_deg(gt: Pose9D, pred: Pose9D,
                       sym: SymmetrySpec = SymmetrySpec.none()) -> float:
    return rotation_geodesic_deg(sym_align_rotation(gt.r, pred.r, sym), pred.r)


def translation_error_cm(gt: Pose9D, pred: Pose9D) -> float:
    return 100.0 * float(np.linalg.norm(gt.t - pred.t))


def map_sweep(records, syms: dict,
              pose_thresholds=DEFAULT_POSE_THRESHOLDS,
              iou_thresholds=DEFAULT_IOU_THRESHOLDS,
              iou_points: int = IOU_POINTS) -> MetricReport:
    """Pass rates per threshold, per category, with the overall row averaging
    over the categories present (empty categories are excluded)."""
    cats = sorted({r.category for r in records})
    table = {}
    iou_cache = {}
    if iou_thresholds:
        for r in records:
            iou_cache[id(r)] = iou3d(
                r.gt, r.pred, syms.get(r.category, SymmetrySpec.none()),
                n_points=iou_points,
            )
    for n_deg, m_cm in pose_thresholds:
        name = f"{n_deg}deg{m_cm}cm"
        per_cat = {}
        for c in cats:
            rs = [r for r in records if r.category == c]
            hits = [
                pose_accuracy(r.gt, r.pred, n_deg, m_cm,
                              syms.get(c, SymmetrySpec.none()))
                for r in rs
            ]
            per_cat[c] = float(np.mean(hits))
        per_cat["overall"] = float(np.mean([per_cat[c] for c in cats]))
        table[name] = per_cat
    for thr in iou_thresholds or ():
        name = f"iou{int(round(thr * 100))}"
        per_cat = {}
        for c in cats:
            vals = [iou_cache[id(r)] for r in records if r.category == c]
            per_cat[c] = float(np.mean([v >= thr for v in vals]))
        per_cat["overall"] = float(np.mean([per_cat[c] for c in cats]))
        table[name] = per_cat
    return MetricReport(table=table)


def add_metric(model_points: np.ndarray, gt: Pose9D, pred: Pose9D) -> float:
    """Mean displacement (m) of the model points under the two transforms."""
    a = transform_points(gt, model_points)
    b = transform_points(pred, model_points)
    return float(np.linalg.norm(a - b, axis=1).mean())


def adds_metric(model_points: np.ndarray, gt: Pose9D, pred: Pose9D) -> float:
    """Nearest-neighbour (symmetric-object) variant of ADD, in meters."""
    a = transform_points(gt, model_points)
    b = transform_points(pred, model_points)
    return float(_kernels.nn_min_dists(a, b).mean())


def auc_add(errors_m, max_cm: float = 10.0) -> float:
    """Exact area under the step accuracy-vs-threshold curve on [0, max_cm],
    normalized to [0, 1]. errors_m are per-record ADD(-S) values in meters."""
    e_cm = np.asarray(errors_m, dtype=np.float64) * 100.0
    if e_cm.size == 0:
        return 0.0
    return float(np.clip(1.0 - e_cm / max_cm, 0.0, 1.0).mean())


def tracking_report(sequences, syms: dict, iou_points: int = IOU_POINTS) -> MetricReport:
    """Aggregate tracking metrics over sequences of per-frame EvalRecords:
    mean oriented-box IoU, mean rotation error (deg, symmetry-aligned),
    mean translation error (cm) and the 5deg5cm pass rate."""
    records = [r for seq in sequences for r in seq]
    if not records:
        raise ValueError("no tracking records")
    ious, rerrs, terrs, hits = [], [], [], []
    for r in records:
        sym = syms.get(r.category, SymmetrySpec.none())
        ious.append(iou3d(r.gt, r.pred, sym, n_points=iou_points))
        rerrs.append(rotation_error_deg(r.gt, r.pred, sym))
        terrs.append(translation_error_cm(r.gt, r.pred))
        hits.append(pose_accuracy(r.gt, r.pred, 5, 5, sym))
    tracking = {
        "miou": float(np.mean(ious)),
        "r_err_deg": float(np.mean(rerrs)),
        "t_err_cm": float(np.mean(terrs)),
        "rate_5deg5cm": float(np.mean(hits)),
        "frames": len(records),
    }
    return MetricReport(table={}, tracking=tracking)
