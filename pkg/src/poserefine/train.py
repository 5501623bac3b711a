"""Iterative refinement training: Gaussian-noised initial poses, K refinement
iterations per sample with per-iteration supervision, an adaptive-moment
optimizer with optional lookahead, a cosine-annealed schedule and resumable
checkpoints.

Gradients do not flow across refinement iterations: each iteration's estimate
is detached before becoming the next initial pose, so every iteration trains
on a fresh alignment problem at whatever error level the previous one left.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as net
from . import priors as priors_mod
from .geometry import Pose9D, Rotation
from .losses import total_loss_batch
from .network import RefinerModel, refine_batch
from .synthdata import AugmentSpec, PerturbSpec, SceneSample, augment_depth, ball_sample, perturb_pose


class NanLossError(RuntimeError):
    def __init__(self, msg, dump_path=None):
        super().__init__(msg)
        self.dump_path = dump_path


@dataclass(frozen=True)
class OptimizerSpec:
    """Decoupled-weight-decay adaptive moments, optionally lookahead-wrapped."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lookahead: bool = False
    lookahead_period: int = 6
    lookahead_alpha: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 16
    base_lr: float = 1e-4
    anneal_start_frac: float = 0.72
    iters_per_sample: int = 4
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    mode: str = "category"
    prior_kind: str = "mean-shape"
    seed: int = 0
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)

    def __post_init__(self):
        if not (0.0 < self.anneal_start_frac < 1.0):
            raise ValueError("anneal_start_frac must be in (0, 1)")
        if self.iters_per_sample < 1:
            raise ValueError("iters_per_sample must be >= 1")
        if self.mode not in ("category", "instance"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "instance" and self.prior_kind not in ("bbox-corners", "fps-model"):
            raise ValueError("instance mode requires bbox-corners or fps-model priors")


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Constant base_lr, then cosine-annealed to zero over the remaining steps."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    knee = cfg.anneal_start_frac * total_steps
    if step < knee:
        return cfg.base_lr
    progress = (step - knee) / max(total_steps - knee, 1e-12)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_optimizer_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(t.data) for k, t in params.items()},
        "v": {k: np.zeros_like(t.data) for k, t in params.items()},
        "slow": {k: t.data.copy() for k, t in params.items()},
    }


def optimizer_step(params: dict, grads: dict, state: dict, lr: float,
                   spec: OptimizerSpec = OptimizerSpec()):
    """Update params in place from grads; `grads` may omit untouched entries."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - spec.beta1**t
    bc2 = 1.0 - spec.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state["m"][name]
        v = state["v"][name]
        m *= spec.beta1
        m += (1.0 - spec.beta1) * g
        v *= spec.beta2
        v += (1.0 - spec.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + spec.eps)
        if spec.weight_decay:
            p.data -= (lr * spec.weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
    if spec.lookahead and state["step"] % spec.lookahead_period == 0:
        for name, p in params.items():
            slow = state["slow"][name]
            slow += spec.lookahead_alpha * (p.data - slow)
            p.data = slow.copy()
    elif not spec.lookahead:
        pass


def build_priors(categories: dict, cfg: TrainConfig, n_p: int,
                 samples: list | None = None) -> dict:
    """Per-category prior point sets in the normalized object frame."""
    out = {}
    for name, cat in categories.items():
        if cfg.prior_kind == "fps-model":
            cat_samples = [s for s in (samples or []) if s.category == name]
            if not cat_samples:
                raise ValueError(f"fps-model prior needs samples for {name}")
            pts = cat_samples[0].model_points_normalized()
            out[name] = priors_mod.make_prior("fps-model", n=n_p, model_points=pts)
        else:
            out[name] = priors_mod.make_prior(cfg.prior_kind, category=cat, n=n_p)
    return out


def _pose_arrays(poses):
    r = np.stack([p.r.m for p in poses])
    t = np.stack([p.t for p in poses])
    s = np.stack([p.s for p in poses])
    return r, t, s


def _prepare_batch(batch, priors, cfg: TrainConfig, model: RefinerModel, rng):
    """Sample inputs for one batch: perturbed inits, augmented + ball-sampled
    observations, per-sample prior points."""
    obs = np.empty((len(batch), model.n_o, 3))
    pri = np.empty((len(batch), model.n_p, 3))
    inits = []
    for i, sample in enumerate(batch):
        init = perturb_pose(sample.gt, cfg.perturb, rng)
        cloud = augment_depth(sample.observed, rng, cfg.augment)
        obs[i] = ball_sample(cloud, init, model.n_o, rng)
        p = priors[sample.category].points
        if cfg.mode == "instance":
            p = p * sample.gt.s  # fixed metric extent from the model
        pri[i] = p
        inits.append(init)
    r0, t0, s0 = _pose_arrays(inits)
    gt_r, gt_t, gt_s = _pose_arrays([s.gt for s in batch])
    return obs, pri, (r0, t0, s0), (gt_r, gt_t, gt_s)


def _dump_nan_state(model, breakdown, epoch, batch_idx, out_dir):
    path = os.path.join(out_dir or ".", "nan_dump.json")
    info = {
        "epoch": epoch,
        "batch": batch_idx,
        "breakdown": np.asarray(breakdown).tolist(),
        "param_norms": {
            k: float(np.linalg.norm(t.data)) for k, t in model.params.items()
        },
        "grad_norms": {
            k: float(np.linalg.norm(t.grad)) if t.grad is not None else None
            for k, t in model.params.items()
        },
    }
    try:
        with open(path, "w") as f:
            json.dump(info, f, indent=1)
    except OSError:
        path = None
    return path


def train_epoch(model: RefinerModel, samples, priors, syms, cfg: TrainConfig,
                opt_state: dict, epoch: int, total_steps: int,
                log_fn=None, out_dir=None) -> dict:
    """One pass over the dataset.

    Per sample: perturb the gt into an initial pose, run K refinement
    iterations, supervise every iterate, back-propagate each iteration's loss
    (the pose handed forward is detached) and take one optimizer step per
    batch on the summed K-iteration loss.
    """
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([cfg.seed, 7919, epoch])
    order = rng.permutation(len(samples))
    model.set_requires_grad(True)
    losses = []
    t_start = time.perf_counter()
    for batch_idx, lo in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [samples[i] for i in order[lo : lo + cfg.batch_size]]
        obs, pri, (r_c, t_c, s_c), (gt_r, gt_t, gt_s) = _prepare_batch(
            batch, priors, cfg, model, rng
        )
        sym_list = [syms[s.category] for s in batch]
        model.zero_grad()
        iter_losses = []
        for _k in range(cfg.iters_per_sample):
            out = refine_batch(model, obs, pri, r_c, t_c, s_c)
            total, breakdown = total_loss_batch(
                out["r_est"], out["t_est"], out["s_est"],
                gt_r, gt_t, gt_s, pri, sym_list, mode=cfg.mode,
            )
            if not np.isfinite(total.data):
                dump = _dump_nan_state(model, breakdown, epoch, batch_idx, out_dir)
                raise NanLossError(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}", dump
                )
            total.backward()
            iter_losses.append(breakdown.mean(axis=0))
            # detach: the next iteration starts from the current estimate
            r_c = out["r_est"].data.astype(np.float64)
            t_c = out["t_est"].data.astype(np.float64)
            s_c = out["s_est"].data.astype(np.float64)
        step = opt_state["step"]
        lr = lr_schedule(min(step, total_steps), total_steps, cfg)
        grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
        optimizer_step(model.params, grads, opt_state, lr, cfg.optimizer)
        rec = np.sum(iter_losses, axis=0)
        losses.append(rec)
        if log_fn:
            log_fn({
                "event": "step",
                "epoch": epoch,
                "step": opt_state["step"],
                "lr": lr,
                "l_pm": float(rec[0]),
                "l_rot": float(rec[1]),
                "l_t": float(rec[2]),
                "l_s": float(rec[3]),
                "total": float(rec.sum()),
            })
    mean = np.mean(losses, axis=0)
    metrics = {
        "epoch": epoch,
        "loss_total": float(mean.sum()),
        "l_pm": float(mean[0]),
        "l_rot": float(mean[1]),
        "l_t": float(mean[2]),
        "l_s": float(mean[3]),
        "seconds": time.perf_counter() - t_start,
    }
    if log_fn:
        log_fn({"event": "epoch", **metrics})
    return metrics


def save_checkpoint(path, model: RefinerModel, opt_state: dict, epoch: int):
    """Model + optimizer moments + epoch in the CATW container (float32)."""
    extra_arrays = {}
    for kind in ("m", "v", "slow"):
        for name, arr in opt_state[kind].items():
            extra_arrays[f"opt.{kind}.{name}"] = arr
    net.save_model(
        path, model,
        extra={"epoch": epoch, "opt_step": opt_state["step"]},
        extra_arrays=extra_arrays,
    )


def load_checkpoint(path):
    """Returns (model, opt_state, epoch). Inverse of save_checkpoint."""
    model, extras, arrays = net.load_model(path)
    opt_state = init_optimizer_state(model.params)
    opt_state["step"] = int(extras.get("opt_step", 0))
    for key, arr in arrays.items():
        parts = key.split(".", 2)
        if len(parts) == 3 and parts[0] == "opt" and parts[1] in ("m", "v", "slow"):
            if parts[2] in opt_state[parts[1]]:
                opt_state[parts[1]][parts[2]] = arr.astype(np.float32)
    return model, opt_state, int(extras.get("epoch", 0))


def train(model: RefinerModel, samples, categories: dict, cfg: TrainConfig,
          log_path=None, ckpt_path=None, start_epoch: int = 0,
          opt_state: dict | None = None, epoch_hook=None):
    """Full training run; resumable from (start_epoch, opt_state)."""
    syms = {name: cat.symmetry for name, cat in categories.items()}
    priors = build_priors(categories, cfg, model.n_p, samples)
    if opt_state is None:
        opt_state = init_optimizer_state(model.params)
    batches = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches
    log_f = open(log_path, "a") if log_path else None

    def log_fn(rec):
        if log_f:
            log_f.write(json.dumps(rec) + "\n")
            log_f.flush()

    history = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            metrics = train_epoch(
                model, samples, priors, syms, cfg, opt_state, epoch,
                total_steps, log_fn=log_fn if log_f else None,
                out_dir=os.path.dirname(ckpt_path) if ckpt_path else None,
            )
            history.append(metrics)
            if ckpt_path:
                save_checkpoint(ckpt_path, model, opt_state, epoch + 1)
            if epoch_hook:
                epoch_hook(epoch, model, metrics)
    finally:
        if log_f:
            log_f.close()
    return model, opt_state, history
