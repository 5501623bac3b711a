"""Abstract shape priors used as the alignment reference: categorical mean
shapes, bounding-box corners, axes skeletons and FPS-subsampled model points.

All priors live in the normalized object frame: centered at the bounding-box
center, with every bounding-box side of length 1 (where applicable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .templates import CategorySpec, name_seed, sample_template

PRIOR_KINDS = ("mean-shape", "bbox-corners", "axes", "fps-model")


@dataclass(frozen=True)
class ShapePrior:
    points: np.ndarray
    kind: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"prior points must be (N, 3), got {pts.shape}")
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "bbox-corners" and pts.shape[0] != 8:
            raise ValueError("bbox-corners prior must have exactly 8 points")
        if self.kind == "axes" and pts.shape[0] != 4:
            raise ValueError("axes prior must have exactly 4 points")
        if self.kind == "mean-shape":
            sides = pts.max(axis=0) - pts.min(axis=0)
            if np.any(sides > 1.0 + 1e-6):
                raise ValueError(f"mean-shape prior bbox sides {sides} exceed 1")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def normalize_prior(points: np.ndarray, kind: str = "mean-shape") -> ShapePrior:
    """Center at the bbox center and scale per-axis to unit bbox sides."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError(f"degenerate extent {extent}: points must span every axis")
    centered = pts - (lo + hi) / 2.0
    return ShapePrior(centered / extent, kind)


def bbox_corners_prior() -> ShapePrior:
    """The 8 corners of the unit cube centered at the origin."""
    corners = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    )
    return ShapePrior(corners, "bbox-corners")


def axes_prior() -> ShapePrior:
    """Origin plus the three half-extent axis tips."""
    pts = np.array([[0, 0, 0], [0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]], dtype=np.float64)
    return ShapePrior(pts, "axes")


def fps(points: np.ndarray, k: int) -> ShapePrior:
    """Greedy farthest-point sampling of k points.

    Seeded deterministically at the point farthest from the centroid, then each
    step adds the point maximizing the minimum distance to the chosen set.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    d = pts - pts.mean(axis=0)
    start = int(np.argmax((d * d).sum(axis=1)))
    idx = _kernels.fps_indices(pts, k, start)
    return ShapePrior(pts[idx], "fps-model")


def mean_shape(category: CategorySpec, n: int = 1024) -> ShapePrior:
    """Categorical mean-shape prior: the parametric template sampled at its
    mean shape parameters, normalized to a unit bounding box.

    Deterministic: the sampling stream is seeded by the category name.
    """
    if n < 8:
        raise ValueError("mean shape needs n >= 8 points")
    rng = np.random.default_rng(name_seed(category.name))
    pts, _ = sample_template(category.template, category.mean_params(), n, rng)
    return normalize_prior(pts, "mean-shape")


def make_prior(kind: str, category: CategorySpec | None = None, n: int = 1024,
               model_points: np.ndarray | None = None) -> ShapePrior:
    """Construct a prior by kind name (the config-facing entry point)."""
    if kind == "mean-shape":
        if category is None:
            raise ValueError("mean-shape prior requires a category")
        return mean_shape(category, n)
    if kind == "bbox-corners":
        return bbox_corners_prior()
    if kind == "axes":
        return axes_prior()
    if kind == "fps-model":
        if model_points is None:
            raise ValueError("fps-model prior requires model points")
        return normalize_prior(fps(model_points, n).points, "fps-model")
    raise ValueError(f"unknown prior kind {kind!r}")
