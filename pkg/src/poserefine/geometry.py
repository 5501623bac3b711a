"""Pose algebra on SO(3) x R^3 x R^3: rotations, 9DoF poses, focalization,
symmetry-aware alignment and the closed-form Umeyama similarity fit.

All functions here are pure, operate on 64-bit floats and are safe to share
across threads. Point clouds are (N, 3) float64 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_PARALLEL = 1e-8
ORTHO_TOL = 1e-9


def _as_vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(v)}")
    return a


@dataclass(frozen=True)
class Rotation:
    """A proper rotation: 3x3 orthonormal matrix with det +1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValueError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3e})")
        if abs(np.linalg.det(m) - 1.0) > ORTHO_TOL:
            raise ValueError(f"matrix has det {np.linalg.det(m):.9f}, not +1")
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    def inv(self) -> "Rotation":
        return Rotation(self.m.T)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.m @ other.m)


@dataclass(frozen=True)
class Pose9D:
    """Rotation + translation (m) + per-axis bounding-box size (m)."""

    r: Rotation
    t: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        t = _as_vec3(self.t, "t")
        s = _as_vec3(self.s, "s")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if np.any(s <= 0):
            raise ValueError(f"size components must be > 0, got {s}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", s)

    @staticmethod
    def identity(size=(1.0, 1.0, 1.0)) -> "Pose9D":
        return Pose9D(Rotation.identity(), np.zeros(3), np.asarray(size, dtype=np.float64))


@dataclass(frozen=True)
class PoseDelta:
    """Relative transformation applied on top of an initial pose estimate."""

    r_delta: Rotation
    t_delta: np.ndarray
    s_delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t_delta", _as_vec3(self.t_delta, "t_delta"))
        object.__setattr__(self, "s_delta", _as_vec3(self.s_delta, "s_delta"))

    @staticmethod
    def identity() -> "PoseDelta":
        return PoseDelta(Rotation.identity(), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class SymmetrySpec:
    """Continuous rotational symmetry about an object-frame axis, or none."""

    kind: str = "none"  # "none" | "continuous-axis"
    axis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "continuous-axis"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "continuous-axis":
            if self.axis is None:
                raise ValueError("continuous-axis symmetry requires an axis")
            a = _as_vec3(self.axis, "axis")
            if abs(np.linalg.norm(a) - 1.0) > 1e-12:
                a = a / np.linalg.norm(a)
            object.__setattr__(self, "axis", a)
        elif self.axis is not None:
            object.__setattr__(self, "axis", None)

    @staticmethod
    def none() -> "SymmetrySpec":
        return SymmetrySpec("none")

    @staticmethod
    def continuous(axis) -> "SymmetrySpec":
        return SymmetrySpec("continuous-axis", np.asarray(axis, dtype=np.float64))


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: skew(v) @ x == cross(v, x)."""
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


def rotation_about_axis(axis, angle_rad: float) -> Rotation:
    """Rodrigues rotation by angle_rad about a (not necessarily unit) axis."""
    k = _as_vec3(axis, "axis")
    n = np.linalg.norm(k)
    if n < 1e-12:
        raise ValueError("rotation axis has zero length")
    k = k / n
    kx = skew(k)
    m = np.eye(3) + math.sin(angle_rad) * kx + (1.0 - math.cos(angle_rad)) * (kx @ kx)
    return Rotation(m)


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Haar-uniform random rotation (normalized Gaussian quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(m)


def rotation_from_6d(rx, ry) -> Rotation:
    """Recover a rotation from its first two (unnormalized) columns.

    Gram-Schmidt: c1 = rx/|rx|, c2 = normalize(ry - (ry.c1)c1), c3 = c1 x c2.
    Raises ValueError on degenerate input (|rx| ~ 0 or rx ~ parallel ry).
    """
    rx = _as_vec3(rx, "rx")
    ry = _as_vec3(ry, "ry")
    nx = np.linalg.norm(rx)
    if nx <= EPS_PARALLEL:
        raise ValueError("degenerate 6d input: first column has ~zero norm")
    c1 = rx / nx
    c2 = ry - np.dot(ry, c1) * c1
    n2 = np.linalg.norm(c2)
    if n2 <= EPS_PARALLEL:
        raise ValueError("degenerate 6d input: columns are ~parallel")
    c2 = c2 / n2
    c3 = np.cross(c1, c2)
    return Rotation(np.stack([c1, c2, c3], axis=1))


def compose_pose(init: Pose9D, delta: PoseDelta) -> Pose9D:
    """Apply a relative transformation: (R_d R, t + t_d, s + s_d)."""
    s_est = init.s + delta.s_delta
    if np.any(s_est <= 0):
        raise ValueError(f"composed size has non-positive component: {s_est}")
    return Pose9D(Rotation(delta.r_delta.m @ init.r.m), init.t + delta.t_delta, s_est)


def invert_delta(delta: PoseDelta) -> PoseDelta:
    """The delta undoing another: compose(compose(p, d), invert_delta(d)) == p."""
    return PoseDelta(delta.r_delta.inv(), -delta.t_delta, -delta.s_delta)


def transform_points(pose: Pose9D, pts: np.ndarray) -> np.ndarray:
    """Map object-frame points to camera frame: x -> s * (R x) + t.

    The element-wise size product is applied to the rotated point, i.e. the
    scaling acts along camera axes.
    """
    pts = np.asarray(pts, dtype=np.float64)
    return (pts @ pose.r.m.T) * pose.s + pose.t


def inverse_transform_points(pose: Pose9D, pts: np.ndarray) -> np.ndarray:
    """Inverse of transform_points: y -> R^T ((y - t) / s)."""
    pts = np.asarray(pts, dtype=np.float64)
    return ((pts - pose.t) / pose.s) @ pose.r.m


def focalize(observed: np.ndarray, prior_points: np.ndarray, init: Pose9D):
    """Re-express both input clouds relative to the initial estimate.

    Returns (observed - t_init, s_init * (R_init @ prior)): the observed cloud
    shifted by the initial translation, and the prior transformed into camera
    frame without the translation, so both concentrate around the origin.
    """
    obs_focal = np.asarray(observed, dtype=np.float64) - init.t
    prior_focal = (np.asarray(prior_points, dtype=np.float64) @ init.r.m.T) * init.s
    return obs_focal, prior_focal


def rotation_geodesic_deg(a: Rotation, b: Rotation) -> float:
    """Geodesic distance on SO(3) in degrees, in [0, 180]."""
    cos_theta = (np.trace(a.m @ b.m.T) - 1.0) / 2.0
    cos_theta = min(1.0, max(-1.0, cos_theta))
    return math.degrees(math.acos(cos_theta))


def sym_align_rotation(r_gt: Rotation, r_est: Rotation, sym: SymmetrySpec) -> Rotation:
    """Rotate r_gt about the symmetry axis to best match r_est.

    For a continuous axis the objective Tr(r_est^T r_gt R_axis(theta)) is
    A cos(theta) + B sin(theta) + C, so the optimum is theta* = atan2(B, A)
    in closed form. Returns r_gt unchanged for kind="none".
    """
    if sym.kind == "none":
        return r_gt
    k = sym.axis
    m = r_est.m.T @ r_gt.m
    a = np.trace(m) - k @ m @ k
    b = np.trace(m @ skew(k))
    theta = math.atan2(b, a)
    return Rotation(r_gt.m @ rotation_about_axis(k, theta).m)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares similarity transform: argmin sum |c R x_i + t - y_i|^2.

    Closed form via centroids, cross-covariance and SVD with the
    det-sign correction diag(1, 1, det(U V^T)).

    Returns (Rotation, t, c) with c = 1.0 when with_scale is False.
    Raises ValueError when the source configuration is degenerate
    (covariance rank < 2, e.g. collinear points).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (N, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise ValueError("need at least 3 point correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    cov = dd.T @ ds / n
    u, d, vt = np.linalg.svd(cov)
    scale_ref = ds.std(axis=0).max()
    if scale_ref <= 0 or d[1] <= 1e-9 * max(d[0], 1e-300):
        raise ValueError("degenerate source configuration: covariance rank < 2")
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    r = Rotation(u @ sgn @ vt)
    if with_scale:
        var_s = (ds * ds).sum() / n
        c = float(np.trace(np.diag(d) @ sgn) / var_s)
    else:
        c = 1.0
    t = mu_d - c * (r.m @ mu_s)
    return r, t, c
