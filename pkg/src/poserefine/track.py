"""Frame-to-frame 9DoF tracking over synthetic sequences: each frame starts
from the previous frame's estimate (re-initialized from a perturbed ground
truth at non-consecutive frames), plus the refinement throughput benchmark.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose9D, rotation_about_axis, Rotation
from .network import RefinerModel, iterate_refine
from .priors import ShapePrior
from .synthdata import (
    MANIFEST_NAME,
    PerturbSpec,
    RECORD_VERSION,
    SceneSample,
    _cat_from_json,
    _cat_to_json,
    _gen_instance_full,
    _sample_camera_pose,
    ball_sample,
    perturb_pose,
    read_manifest,
    read_sample_record,
    render_partial,
    write_sample_record,
)
from .templates import CategorySpec, default_categories


@dataclass(frozen=True)
class MotionSpec:
    rot_deg_per_frame: float = 5.0
    trans_m_per_frame: float = 0.01


@dataclass(frozen=True)
class Sequence:
    seq_id: str
    category: str
    frames: list  # SceneSample per frame
    consecutive_flags: list  # frame 0 is False by convention
    motion: MotionSpec

    def __post_init__(self):
        if len(self.frames) != len(self.consecutive_flags):
            raise ValueError("one flag per frame required")
        if self.consecutive_flags and self.consecutive_flags[0]:
            raise ValueError("frame 0 must carry a False flag")


@dataclass(frozen=True)
class TrackConfig:
    iters: int = 1  # inter-frame deltas are small; one step suffices
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    n_o: int = 1024
    seed: int = 0


_DESK_LO = np.array([-0.25, -0.20, 0.55])
_DESK_HI = np.array([0.25, 0.20, 1.05])


def gen_sequence(cat: CategorySpec, length: int, motion: MotionSpec,
                 rng: np.random.Generator, seq_id: str = "seq",
                 n_model: int = 2048, discontinuities=()) -> Sequence:
    """One instance on a smooth rigid trajectory, re-rendered per frame.

    Per-frame rotation/translation stay within the motion bounds; at each
    injected discontinuity the pose teleports and the frame is flagged
    non-consecutive.
    """
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    disc = set(int(i) for i in discontinuities)
    if 0 in disc:
        raise ValueError("frame 0 is already non-consecutive by convention")
    pts, normals, size = _gen_instance_full(cat, rng, n_model)
    norm_pts = pts / size
    pose = _sample_camera_pose(rng, size)
    axis = rng.standard_normal(3)
    vel = rng.standard_normal(3)
    frames, flags = [], []
    for fi in range(length):
        if fi in disc:
            pose = _sample_camera_pose(rng, size)
        elif fi > 0:
            axis = axis + 0.3 * rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            ang = np.radians(motion.rot_deg_per_frame) * rng.uniform(0.5, 1.0)
            vel = vel + 0.3 * rng.standard_normal(3)
            vel /= max(np.linalg.norm(vel), 1e-12)
            step = motion.trans_m_per_frame * rng.uniform(0.5, 1.0)
            t_new = np.clip(pose.t + vel * step, _DESK_LO, _DESK_HI)
            r_new = pose.r if ang == 0 else Rotation(
                rotation_about_axis(axis, ang).m @ pose.r.m
            )
            pose = Pose9D(r_new, t_new, pose.s)
        viewpoint = -pose.t / np.linalg.norm(pose.t)
        observed = render_partial(norm_pts, normals, pose, viewpoint, rng)
        frames.append(SceneSample(
            sample_id=f"{seq_id}_f{fi:04d}",
            category=cat.name,
            model_points=pts,
            observed=observed,
            gt=pose,
            init=pose,  # tracking perturbs at run time
            viewpoint=viewpoint,
        ))
        flags.append(False if (fi == 0 or fi in disc) else True)
    return Sequence(seq_id, cat.name, frames, flags, motion)


def model_refiner(model: RefinerModel, priors: dict, iters: int):
    """Wrap a trained model as a tracking refiner callable."""

    def refine(sample: SceneSample, init: Pose9D, rng) -> Pose9D:
        obs = ball_sample(sample.observed, init, model.n_o, rng)
        poses = iterate_refine(obs, priors[sample.category], init, model, iters)
        return poses[-1]

    return refine


def oracle_refiner():
    """Plumbing stub: returns the ground truth regardless of the input pose."""

    def refine(sample: SceneSample, init: Pose9D, rng) -> Pose9D:
        return sample.gt

    return refine


def track_sequence(seq: Sequence, refiner, cfg: TrackConfig):
    """Track one sequence; returns (per-frame Pose9D list, reinit frame list).

    Frame 0 initializes from a perturbed ground truth; subsequent frames start
    from the previous output; a False consecutive flag (beyond frame 0)
    re-initializes from that frame's perturbed gt.
    """
    rng = np.random.default_rng([cfg.seed, 4099])
    poses, events = [], []
    prev = None
    for fi, (sample, consecutive) in enumerate(zip(seq.frames, seq.consecutive_flags)):
        if fi == 0 or not consecutive:
            init = perturb_pose(sample.gt, cfg.perturb, rng)
            if fi > 0:
                events.append(fi)
        else:
            init = prev
        est = refiner(sample, init, rng)
        poses.append(est)
        prev = est
    return poses, events


# ---------------------------------------------------------------------------
# sequence dataset io (dataset format + per-frame flag arrays)


def write_sequences(seqs, path, registry=None):
    registry = registry if registry is not None else default_categories()
    os.makedirs(path, exist_ok=True)
    index = []
    used = sorted({s.category for s in seqs})
    for si, seq in enumerate(seqs):
        files = []
        for fi, frame in enumerate(seq.frames):
            fname = f"seq_{si:04d}_f{fi:04d}.bin"
            write_sample_record(os.path.join(path, fname), frame)
            files.append(fname)
        index.append({
            "id": seq.seq_id,
            "category": seq.category,
            "motion": {
                "rot_deg_per_frame": seq.motion.rot_deg_per_frame,
                "trans_m_per_frame": seq.motion.trans_m_per_frame,
            },
            "flags": [bool(f) for f in seq.consecutive_flags],
            "frames": files,
        })
    manifest = {
        "format": "poserefine-dataset",
        "version": RECORD_VERSION,
        "kind": "sequences",
        "transform": "camera-axis-scale",
        "categories": {c: _cat_to_json(registry[c]) for c in used if c in registry},
        "samples": [],
        "sequences": index,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_sequences(path):
    manifest = read_manifest(path)
    seqs = []
    for ent in manifest.get("sequences", []):
        frames = []
        for fi, fname in enumerate(ent["frames"]):
            sample, _ = read_sample_record(
                os.path.join(path, fname), f"{ent['id']}_f{fi:04d}", ent["category"]
            )
            frames.append(sample)
        motion = MotionSpec(**ent["motion"])
        seqs.append(Sequence(ent["id"], ent["category"], frames, ent["flags"], motion))
    return seqs, manifest


# ---------------------------------------------------------------------------
# throughput


def bench_throughput(model: RefinerModel, prior: ShapePrior, iters: int = 4,
                     n_runs: int = 100, seed: int = 0) -> dict:
    """Wall-clock refinements per second at the given iteration count.

    Single-threaded loop over n_runs independent refinements on a fixed-size
    synthetic input; reports mean and p95 Hz plus a per-iteration breakdown.
    """
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-0.1, 0.1, (model.n_o, 3))
    init = Pose9D.identity((0.15, 0.2, 0.15))
    model.set_requires_grad(False)
    iterate_refine(obs, prior, init, model, iters)  # warmup
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        iterate_refine(obs, prior, init, model, iters)
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    hz = 1.0 / times
    return {
        "iters": iters,
        "runs": n_runs,
        "hz_mean": float(hz.mean()),
        "hz_p95": float(np.percentile(hz, 5)),  # 95% of runs are at least this fast
        "ms_per_refinement": float(times.mean() * 1e3),
        "ms_per_iteration": float(times.mean() * 1e3 / iters),
    }
