"""The four-term training objective: point matching + angular distance +
L1 translation + L1 size, with the ground-truth rotation aligned about the
known symmetry axis before every term.

Plain-float versions operate on Pose9D; the *_batch version builds the
differentiable graph used in training (the symmetry alignment is computed
outside the tape and treated as a constant target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .geometry import Pose9D, Rotation, SymmetrySpec, sym_align_rotation, transform_points
from .priors import ShapePrior


@dataclass(frozen=True)
class LossBreakdown:
    l_pm: float
    l_rot: float
    l_t: float
    l_s: float

    @property
    def total(self) -> float:
        return self.l_pm + self.l_rot + self.l_t + self.l_s


def loss_pm(gt: Pose9D, est: Pose9D, prior: ShapePrior) -> float:
    """Mean L1 distance between the prior points under the two transforms."""
    a = transform_points(gt, prior.points)
    b = transform_points(est, prior.points)
    return float(np.abs(a - b).sum(axis=1).mean())


def loss_rot(r_gt: Rotation, r_est: Rotation) -> float:
    """(3 - Tr(R_gt R_est^T)) / 4, in [0, 1]."""
    return float((3.0 - np.trace(r_gt.m @ r_est.m.T)) / 4.0)


def loss_t(gt: Pose9D, est: Pose9D) -> float:
    return float(np.abs(gt.t - est.t).sum())


def loss_s(gt: Pose9D, est: Pose9D) -> float:
    return float(np.abs(gt.s - est.s).sum())


def total_loss(gt: Pose9D, est: Pose9D, prior: ShapePrior,
               sym: SymmetrySpec = SymmetrySpec.none()) -> LossBreakdown:
    """Sum of the four terms with the gt rotation symmetry-aligned to est."""
    r_aligned = sym_align_rotation(gt.r, est.r, sym)
    gt_al = Pose9D(r_aligned, gt.t, gt.s)
    return LossBreakdown(
        l_pm=loss_pm(gt_al, est, prior),
        l_rot=loss_rot(r_aligned, est.r),
        l_t=loss_t(gt_al, est),
        l_s=loss_s(gt_al, est),
    )


def _align_gt_rotations(gt_r: np.ndarray, est_r: np.ndarray, syms) -> np.ndarray:
    out = np.empty_like(gt_r)
    for i, sym in enumerate(syms):
        if sym.kind == "none":
            out[i] = gt_r[i]
        else:
            # est_r comes from the float32 tape; orthonormality holds to ~1e-6
            # which is plenty for target selection
            u, _, vt = np.linalg.svd(est_r[i].astype(np.float64))
            r_est = Rotation(u @ np.diag([1, 1, np.linalg.det(u @ vt)]) @ vt)
            out[i] = sym_align_rotation(Rotation(gt_r[i]), r_est, sym).m
    return out


def total_loss_batch(
    r_est: DiffTensor,
    t_est: DiffTensor,
    s_est: DiffTensor,
    gt_r: np.ndarray,
    gt_t: np.ndarray,
    gt_s: np.ndarray,
    prior_pts: np.ndarray,
    syms,
    mode: str = "category",
):
    """Differentiable batch loss.

    r_est/t_est/s_est are (B,3,3)/(B,3)/(B,3) tensors from refine_batch;
    gt_* are float64 arrays; prior_pts is (B, N_p, 3) in the frame matching
    `mode` (normalized for category, metric for instance, where the size
    product is dropped and the size term is omitted).

    Returns (scalar mean total loss, per-sample float breakdown (B, 4)).
    """
    dt = r_est.dtype
    b = gt_r.shape[0]
    gt_r_al = _align_gt_rotations(np.asarray(gt_r, dtype=np.float64), r_est.data, syms)

    prior_t = DiffTensor(prior_pts.astype(dt), dtype=dt)
    rot_est = ad.matmul(prior_t, ad.transpose(r_est, (0, 2, 1)))  # (B, Np, 3)
    gt_rot = np.einsum("bij,bnj->bni", gt_r_al, prior_pts)
    if mode == "category":
        est_pts = ad.add(
            ad.mul(rot_est, ad.reshape(s_est, (b, 1, 3))),
            ad.reshape(t_est, (b, 1, 3)),
        )
        gt_pts = gt_s[:, None, :] * gt_rot + gt_t[:, None, :]
    else:
        est_pts = ad.add(rot_est, ad.reshape(t_est, (b, 1, 3)))
        gt_pts = gt_rot + gt_t[:, None, :]
    diff = ad.sub(est_pts, DiffTensor(gt_pts.astype(dt), dtype=dt))
    l_pm = ad.tmean(ad.tsum(ad.tabs(diff), axis=-1), axis=-1)  # (B,)

    tr = ad.tsum(ad.mul(r_est, DiffTensor(gt_r_al.astype(dt), dtype=dt)), axis=(1, 2))
    l_rot = ad.add_const(ad.scale(tr, -0.25), 0.75)  # (3 - tr)/4

    l_t = ad.tsum(ad.tabs(ad.sub(t_est, DiffTensor(gt_t.astype(dt), dtype=dt))), axis=-1)

    if mode == "category":
        l_s = ad.tsum(ad.tabs(ad.sub(s_est, DiffTensor(gt_s.astype(dt), dtype=dt))), axis=-1)
        per_sample = ad.add(ad.add(l_pm, l_rot), ad.add(l_t, l_s))
        parts = (l_pm, l_rot, l_t, l_s)
    else:
        per_sample = ad.add(ad.add(l_pm, l_rot), l_t)
        parts = (l_pm, l_rot, l_t, None)

    total = ad.tmean(per_sample)
    breakdown = np.stack(
        [p.data if p is not None else np.zeros(b, dtype=dt) for p in parts], axis=1
    ).astype(np.float64)
    return total, breakdown
