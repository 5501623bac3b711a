"""Synthetic scene generation and the on-disk dataset format.

A scene sample is one object instance drawn from a category's parametric
template, posed in camera space, partially observed (normal-facing visibility
plus a random occlusion carve-out) and paired with a Gaussian-perturbed
initial pose. The camera sits at the origin looking down +z.

The world transform convention matches the refiner's loss: a normalized
object-frame point x maps to camera space as s * (R x) + t, with the
element-wise size product applied after the rotation.

Dataset format: a directory holding manifest.json plus one little-endian
binary record per sample (magic "CATR", u32 version, u32 flags, u32 counts,
then float64 arrays in declared order: model points, observed points,
gt pose, init pose, viewpoint, and optionally a predicted pose).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Pose9D,
    Rotation,
    SymmetrySpec,
    rotation_about_axis,
    random_rotation,
    transform_points,
)
from .templates import CategorySpec, default_categories, sample_template

RECORD_MAGIC = b"CATR"
RECORD_VERSION = 1
MANIFEST_NAME = "manifest.json"
MIN_VISIBLE = 32


class DatasetFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    """Gaussian pose noise: half-normal angle (deg) about a random axis,
    additive translation (m), relative multiplicative size."""

    rot_std_deg: float = 5.0
    trans_std_m: float = 0.02
    size_rel_std: float = 0.02

    def __post_init__(self):
        if self.rot_std_deg < 0 or self.trans_std_m < 0 or self.size_rel_std < 0:
            raise ValueError("perturbation stds must be >= 0")


@dataclass(frozen=True)
class AugmentSpec:
    """Depth-style corruption: random point dropping, isotropic Gaussian
    noise, random zero-point fill."""

    drop_frac: float = 0.15
    noise_sigma_m: float = 0.002
    zero_frac: float = 0.05


@dataclass(frozen=True)
class SceneSample:
    sample_id: str
    category: str
    model_points: np.ndarray  # metric object frame (size applied, unrotated)
    observed: np.ndarray  # camera frame partial cloud
    gt: Pose9D
    init: Pose9D
    viewpoint: np.ndarray  # unit vector, object -> camera

    def __post_init__(self):
        if self.observed.shape[0] == 0:
            raise ValueError("observed cloud must be nonempty")

    def model_points_normalized(self) -> np.ndarray:
        """Model points in the unit-bbox object frame the gt pose acts on."""
        return self.model_points / self.gt.s


@dataclass(frozen=True)
class GenConfig:
    categories: tuple = ("bottle", "bowl", "can", "laptop", "mug")
    samples_per_category: int = 100
    n_model: int = 2048
    n_o: int = 1024
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    transform: str = "camera-axis-scale"  # or "rigid" (instance-level worlds)


# ---------------------------------------------------------------------------
# generators


def gen_instance(cat: CategorySpec, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Sample one instance: a dense metric surface cloud plus its bbox sizes.

    Point coordinates are centered at the bounding-box center.
    """
    pts, _, size = _gen_instance_full(cat, np.random.default_rng(rng_seed), 2048)
    return pts, size


def _gen_instance_full(cat: CategorySpec, rng, n_model: int):
    params = cat.sample_params(rng)
    pts, normals = sample_template(cat.template, params, n_model, rng)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pts = pts - (lo + hi) / 2.0
    return pts, normals, hi - lo


def render_partial(
    model_norm: np.ndarray,
    normals: np.ndarray,
    pose: Pose9D,
    viewpoint: np.ndarray,
    rng: np.random.Generator,
    carve_frac: float = 0.1,
    rigid: bool = False,
) -> np.ndarray:
    """Pose the model and keep the points facing the viewpoint.

    model_norm are normalized object-frame points with matching outward
    normals (the parametric templates supply them analytically). Visibility
    keeps points whose camera-frame normal has positive dot with the view
    direction; a carve_frac neighbourhood around a random surviving point is
    then removed to emulate occlusion. Raises ValueError when fewer than 32
    points survive.
    """
    if rigid:
        cam = model_norm @ pose.r.m.T + pose.t
        n_cam = normals @ pose.r.m.T
    else:
        cam = transform_points(pose, model_norm)
        # y = diag(s) R x, so normals map through diag(1/s) R
        n_cam = (normals @ pose.r.m.T) / pose.s
    n_cam = n_cam / np.linalg.norm(n_cam, axis=1, keepdims=True)
    keep = (n_cam @ np.asarray(viewpoint, dtype=np.float64)) > 0.0
    vis = cam[keep]
    if carve_frac > 0 and vis.shape[0] > MIN_VISIBLE:
        k = int(np.ceil(carve_frac * vis.shape[0]))
        center = vis[rng.integers(0, vis.shape[0])]
        d = np.linalg.norm(vis - center, axis=1)
        vis = vis[np.argsort(d, kind="stable")[k:]]
    if vis.shape[0] < MIN_VISIBLE:
        raise ValueError(
            f"empty visibility: only {vis.shape[0]} points survive (need {MIN_VISIBLE})"
        )
    return vis


def ball_sample(points: np.ndarray, init: Pose9D, n_o: int, rng: np.random.Generator) -> np.ndarray:
    """Adaptive sampling: keep points inside the ball centered at the initial
    translation with radius 0.6 * |s_init|_2, then draw exactly n_o of them
    (without replacement when enough survive, with replacement otherwise)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("cannot ball-sample an empty cloud")
    r = 0.6 * float(np.linalg.norm(init.s))
    d = np.linalg.norm(pts - init.t, axis=1)
    idx = np.nonzero(d <= r)[0]
    if idx.size == 0:
        raise ValueError(f"empty ball: no points within radius {r:.3f} of t_init")
    chosen = rng.choice(idx, size=n_o, replace=idx.size < n_o)
    return pts[chosen]


def augment_depth(cloud: np.ndarray, rng: np.random.Generator,
                  spec: AugmentSpec = AugmentSpec()) -> np.ndarray:
    """Depth-style corruption: Bernoulli dropping, Gaussian jitter, zero fill."""
    pts = np.asarray(cloud, dtype=np.float64)
    if spec.drop_frac > 0 and pts.shape[0] > 0:
        keep = rng.uniform(0, 1, pts.shape[0]) >= spec.drop_frac
        if not keep.any():
            keep[0] = True
        pts = pts[keep]
    else:
        pts = pts.copy()
    if spec.noise_sigma_m > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma_m, pts.shape)
    if spec.zero_frac > 0 and pts.shape[0] > 0:
        zero = rng.uniform(0, 1, pts.shape[0]) < spec.zero_frac
        pts[zero] = 0.0
    return pts


def perturb_pose(gt: Pose9D, spec: PerturbSpec, rng: np.random.Generator) -> Pose9D:
    """Gaussian-noise a pose (the training/tracking initializer).

    Draw order: rotation axis, rotation angle, translation noise, size factors.
    """
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.normal(0.0, np.radians(spec.rot_std_deg)))
    if angle > 0:
        r = Rotation(rotation_about_axis(axis, angle).m @ gt.r.m)
    else:
        r = gt.r
    t = gt.t + rng.normal(0.0, spec.trans_std_m, 3)
    factors = np.maximum(1.0 + rng.normal(0.0, spec.size_rel_std, 3), 0.01)
    return Pose9D(r, t, gt.s * factors)


def _sample_camera_pose(rng, size) -> Pose9D:
    t = np.array(
        [rng.uniform(-0.25, 0.25), rng.uniform(-0.20, 0.20), rng.uniform(0.55, 1.05)]
    )
    return Pose9D(random_rotation(rng), t, size)


def gen_scene(cat: CategorySpec, cfg: GenConfig, sample_id: str, rng_key) -> SceneSample:
    """Generate one full scene sample (deterministic in rng_key)."""
    rng = np.random.default_rng(rng_key)
    for _ in range(8):  # extreme poses can under-fill visibility; redraw
        pts, normals, size = _gen_instance_full(cat, rng, cfg.n_model)
        gt = _sample_camera_pose(rng, size)
        viewpoint = -gt.t / np.linalg.norm(gt.t)
        try:
            observed = render_partial(
                pts / size, normals, gt, viewpoint, rng,
                rigid=cfg.transform == "rigid",
            )
            break
        except ValueError:
            continue
    else:
        raise RuntimeError(f"could not render a visible sample for {cat.name}")
    init = perturb_pose(gt, cfg.perturb, rng)
    return SceneSample(
        sample_id=sample_id,
        category=cat.name,
        model_points=pts,
        observed=observed,
        gt=gt,
        init=init,
        viewpoint=viewpoint,
    )


def gen_dataset(cfg: GenConfig, registry: dict | None = None) -> list[SceneSample]:
    """Generate samples for every configured category.

    Each sample's RNG stream derives from (seed, category, index), so the
    result is independent of generation order.
    """
    registry = registry if registry is not None else default_categories()
    if not cfg.categories:
        raise ValueError("no categories configured")
    samples = []
    for cname in cfg.categories:
        if cname not in registry:
            raise ValueError(f"unknown category {cname!r}")
        cat = registry[cname]
        for i in range(cfg.samples_per_category):
            key = [cfg.seed, _name_key(cname), i]
            samples.append(gen_scene(cat, cfg, f"{cname}_{i:06d}", key))
    return samples


def _name_key(name: str) -> int:
    from .templates import name_seed

    return name_seed(name) % (2**31)


# ---------------------------------------------------------------------------
# binary records


def _pose_to_flat(pose: Pose9D) -> np.ndarray:
    return np.concatenate([pose.r.m.reshape(9), pose.t, pose.s])


def _pose_from_flat(flat: np.ndarray) -> Pose9D:
    return Pose9D(Rotation(flat[:9].reshape(3, 3)), flat[9:12], flat[12:15])


def write_sample_record(path, sample: SceneSample, pred: Pose9D | None = None):
    flags = 1 if pred is not None else 0
    with open(path, "wb") as f:
        f.write(RECORD_MAGIC)
        f.write(struct.pack("<III", RECORD_VERSION, flags, 0))
        f.write(struct.pack("<II", sample.model_points.shape[0], sample.observed.shape[0]))
        for arr in (
            sample.model_points,
            sample.observed,
            _pose_to_flat(sample.gt),
            _pose_to_flat(sample.init),
            sample.viewpoint,
        ):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if pred is not None:
            f.write(np.ascontiguousarray(_pose_to_flat(pred), dtype="<f8").tobytes())


def read_sample_record(path, sample_id: str, category: str):
    """Returns (SceneSample, pred Pose9D or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RECORD_MAGIC:
        raise DatasetFormatError(f"bad record magic {raw[:4]!r} in {path}")
    try:
        version, flags, _ = struct.unpack_from("<III", raw, 4)
        if version != RECORD_VERSION:
            raise DatasetFormatError(f"unsupported record version {version}")
        n_model, n_obs = struct.unpack_from("<II", raw, 16)
        off = 24
        want = (n_model * 3 + n_obs * 3 + 15 + 15 + 3 + (15 if flags & 1 else 0)) * 8
        if len(raw) - off != want:
            raise DatasetFormatError(
                f"record {path} has {len(raw) - off} payload bytes, expected {want}"
            )
        vals = np.frombuffer(raw, dtype="<f8", offset=off)
        pos = 0

        def take(n):
            nonlocal pos
            out = vals[pos : pos + n]
            pos += n
            return np.array(out, dtype=np.float64)

        model = take(n_model * 3).reshape(n_model, 3)
        observed = take(n_obs * 3).reshape(n_obs, 3)
        gt = _pose_from_flat(take(15))
        init = _pose_from_flat(take(15))
        viewpoint = take(3)
        pred = _pose_from_flat(take(15)) if flags & 1 else None
    except (struct.error, ValueError) as e:
        raise DatasetFormatError(f"truncated or corrupt record {path}: {e}") from e
    sample = SceneSample(sample_id, category, model, observed, gt, init, viewpoint)
    return sample, pred


def _sym_to_json(sym: SymmetrySpec) -> dict:
    out = {"kind": sym.kind}
    if sym.axis is not None:
        out["axis"] = list(sym.axis)
    return out


def _sym_from_json(d: dict) -> SymmetrySpec:
    if d["kind"] == "none":
        return SymmetrySpec.none()
    return SymmetrySpec.continuous(np.asarray(d["axis"]))


def _cat_to_json(cat: CategorySpec) -> dict:
    return {
        "template": cat.template,
        "shape_param_ranges": {k: list(v) for k, v in cat.shape_param_ranges.items()},
        "symmetry": _sym_to_json(cat.symmetry),
    }


def _cat_from_json(name: str, d: dict) -> CategorySpec:
    return CategorySpec(
        name,
        d["template"],
        {k: tuple(v) for k, v in d["shape_param_ranges"].items()},
        _sym_from_json(d["symmetry"]),
    )


def write_dataset(samples, path, registry: dict | None = None,
                  transform: str = "camera-axis-scale",
                  preds: dict | None = None, kind: str = "samples",
                  extra_manifest: dict | None = None):
    """Write samples (optionally with predicted poses) as a dataset directory."""
    registry = registry if registry is not None else default_categories()
    os.makedirs(path, exist_ok=True)
    index = []
    used = sorted({s.category for s in samples})
    for i, s in enumerate(samples):
        fname = f"sample_{i:06d}.bin"
        pred = preds.get(s.sample_id) if preds else None
        write_sample_record(os.path.join(path, fname), s, pred)
        index.append({"id": s.sample_id, "category": s.category, "file": fname})
    manifest = {
        "format": "poserefine-dataset",
        "version": RECORD_VERSION,
        "kind": kind,
        "transform": transform,
        "categories": {c: _cat_to_json(registry[c]) for c in used if c in registry},
        "samples": index,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_manifest(path) -> dict:
    mpath = os.path.join(path, MANIFEST_NAME)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt manifest {mpath}: {e}") from e
    if manifest.get("format") != "poserefine-dataset":
        raise DatasetFormatError(f"{mpath} is not a poserefine dataset manifest")
    if manifest.get("version") != RECORD_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {manifest.get('version')}")
    return manifest


def read_dataset(path):
    """Read a dataset directory; returns (samples, preds dict, manifest)."""
    manifest = read_manifest(path)
    samples, preds = [], {}
    for ent in manifest["samples"]:
        sample, pred = read_sample_record(
            os.path.join(path, ent["file"]), ent["id"], ent["category"]
        )
        samples.append(sample)
        if pred is not None:
            preds[ent["id"]] = pred
    return samples, preds, manifest


def categories_from_manifest(manifest: dict) -> dict:
    return {name: _cat_from_json(name, d) for name, d in manifest["categories"].items()}
