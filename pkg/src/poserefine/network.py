"""The pose refiner network: a Siamese point encoder feeding two disentangled
heads (point-wise trainable fusion for rotation, pooled global feature plus
initial scale for translation/size), with the single-iteration refinement
forward pass and checkpoint serialization.

The encoder maps each point 3 -> 64 -> 64 (per-point features), continues
64 -> 128 -> 1024 and max-pools into a per-cloud global feature; every point
then carries [point64 | global1024] = 1088 channels. Both input clouds go
through literally the same parameter set.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .geometry import Pose9D, PoseDelta, Rotation, compose_pose, focalize, rotation_from_6d
from .priors import ShapePrior

CHECKPOINT_MAGIC = b"CATW"
CHECKPOINT_VERSION = 1

D_POINT = 64
D_GLOBAL = 1024
D_FEAT = D_POINT + D_GLOBAL  # 1088


class CheckpointFormatError(RuntimeError):
    pass


class RefinerModel:
    """Named parameter collection plus architecture hyperparameters."""

    def __init__(self, params: dict, hyper: dict):
        self.params = params
        self.hyper = hyper

    @property
    def dtype(self):
        return np.dtype(self.hyper["dtype"])

    @property
    def mode(self) -> str:
        return self.hyper["mode"]

    @property
    def n_o(self) -> int:
        return self.hyper["n_o"]

    @property
    def n_p(self) -> int:
        return self.hyper["n_p"]

    def p(self, name: str) -> DiffTensor:
        return self.params[name]

    def set_requires_grad(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def build_model(
    n_o: int,
    n_p: int,
    mode: str = "category",
    seed: int = 0,
    dtype=np.float32,
    t_net: bool = False,
    enc_point_dims=(64, 64),
    enc_global_dims=(128, 1024),
    rot_hidden: int = 256,
    ts_hidden=(512, 256),
    gn_groups: int = 8,
) -> RefinerModel:
    """Create a freshly initialized refiner.

    Hidden layers use uniform +-sqrt(6/fan_in) init; the output layers start
    at zero weight with biases chosen so the predicted delta is the identity.
    The default widths give d = 64 + 1024 = 1088 per-point features.
    """
    if mode not in ("category", "instance"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, DiffTensor] = {}

    def mk(name, shape, kind="fan_in"):
        if kind == "fan_in":
            bound = np.sqrt(6.0 / shape[0])
            arr = rng.uniform(-bound, bound, shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            raise ValueError(kind)
        params[name] = DiffTensor(arr.astype(dtype), requires_grad=True, dtype=dtype)

    dims = [3] + list(enc_point_dims) + list(enc_global_dims)
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        mk(f"enc.w{i}", (fi, fo))
        mk(f"enc.b{i}", (fo,), "zeros")
    d_point = enc_point_dims[-1]
    d_global = enc_global_dims[-1]
    d_feat = d_point + d_global

    if t_net:
        mk("tnet.w1", (3, 32))
        mk("tnet.b1", (32,), "zeros")
        mk("tnet.w2", (32, 9), "zeros")
        ident = np.eye(3).reshape(9).astype(dtype)
        params["tnet.b2"] = DiffTensor(ident, requires_grad=True, dtype=dtype)

    n_total = n_o + n_p
    for branch, bias6 in (("x", (1.0, 0.0, 0.0)), ("y", (0.0, 1.0, 0.0))):
        mk(f"rot.{branch}.w1", (d_feat, rot_hidden))
        mk(f"rot.{branch}.b1", (rot_hidden,), "zeros")
        mk(f"rot.{branch}.gn_gamma", (rot_hidden,), "ones")
        mk(f"rot.{branch}.gn_beta", (rot_hidden,), "zeros")
        mk(f"rot.{branch}.w2", (rot_hidden, 3))
        mk(f"rot.{branch}.b2", (3,), "zeros")
        mk(f"rot.{branch}.agg_w", (n_total, 1), "zeros")
        params[f"rot.{branch}.agg_b"] = DiffTensor(
            np.asarray(bias6, dtype=dtype), requires_grad=True, dtype=dtype
        )

    ts_in = d_feat + (3 if mode == "category" else 0)
    mk("ts.w1", (ts_in, ts_hidden[0]))
    mk("ts.b1", (ts_hidden[0],), "zeros")
    mk("ts.w2", (ts_hidden[0], ts_hidden[1]))
    mk("ts.b2", (ts_hidden[1],), "zeros")
    mk("ts.t.w", (ts_hidden[1], 3), "zeros")
    mk("ts.t.b", (3,), "zeros")
    if mode == "category":
        mk("ts.s.w", (ts_hidden[1], 3), "zeros")
        mk("ts.s.b", (3,), "zeros")

    hyper = {
        "format": "refiner",
        "enc_point_dims": list(enc_point_dims),
        "enc_global_dims": list(enc_global_dims),
        "d_point": d_point,
        "d_global": d_global,
        "d": d_feat,
        "rot_hidden": rot_hidden,
        "ts_hidden": list(ts_hidden),
        "gn_groups": gn_groups,
        "n_o": n_o,
        "n_p": n_p,
        "mode": mode,
        "t_net": bool(t_net),
        "dtype": dtype.name,
    }
    return RefinerModel(params, hyper)


# ---------------------------------------------------------------------------
# forward passes


def _tnet_transform(model: RefinerModel, pts: DiffTensor) -> DiffTensor:
    h = ad.gelu(ad.linear(pts, model.p("tnet.w1"), model.p("tnet.b1")))
    g = ad.max_pool(h, axis=1)  # (B, 32)
    t9 = ad.linear(g, model.p("tnet.w2"), model.p("tnet.b2"))
    tmat = ad.reshape(t9, (t9.shape[0], 3, 3))
    return ad.matmul(pts, tmat)


def _encoder_features(model: RefinerModel, pts: DiffTensor):
    """Shared per-point trunk: returns (point features (B,N,64), global (B,1024)).

    The final trunk layer stays linear before the pool so the encoder remains
    strictly per-point up to the max (duplicate points cannot move the global).
    """
    if model.hyper["t_net"]:
        pts = _tnet_transform(model, pts)
    n_pt = len(model.hyper["enc_point_dims"])
    n_all = n_pt + len(model.hyper["enc_global_dims"])
    h = pts
    pt_feat = None
    for i in range(1, n_all + 1):
        h = ad.linear(h, model.p(f"enc.w{i}"), model.p(f"enc.b{i}"))
        if i < n_all:
            h = ad.gelu(h)
        if i == n_pt:
            pt_feat = h
    glob = ad.max_pool(h, axis=1)
    return pt_feat, glob


def encoder_forward(points: DiffTensor, model: RefinerModel) -> DiffTensor:
    """Encode one cloud into per-point [point64 | global1024] features.

    Accepts (N, 3) or (B, N, 3); returns (N, 1088) or (B, N, 1088).
    """
    single = points.data.ndim == 2
    pts = ad.reshape(points, (1,) + points.shape) if single else points
    pt_feat, glob = _encoder_features(model, pts)
    n = pts.shape[1]
    glob_rep = ad.expand(ad.reshape(glob, (glob.shape[0], 1, glob.shape[1])), 1, n)
    f = ad.concat([pt_feat, glob_rep], axis=2)
    return ad.reshape(f, f.shape[1:]) if single else f


def _rot_branch(model: RefinerModel, branch: str, f_op: DiffTensor) -> DiffTensor:
    """Per-point layers 1088 -> 256 -> 3, then trainable aggregation to (B, 3)."""
    h = ad.linear(f_op, model.p(f"rot.{branch}.w1"), model.p(f"rot.{branch}.b1"))
    h = ad.group_norm(
        h, model.hyper["gn_groups"],
        model.p(f"rot.{branch}.gn_gamma"), model.p(f"rot.{branch}.gn_beta"),
    )
    h = ad.gelu(h)
    h = ad.linear(h, model.p(f"rot.{branch}.w2"), model.p(f"rot.{branch}.b2"))  # (B,N,3)
    hT = ad.transpose(h, (0, 2, 1))  # (B, 3, N)
    agg = ad.matmul(hT, model.p(f"rot.{branch}.agg_w"))  # (B, 3, 1)
    return ad.add(ad.reshape(agg, (agg.shape[0], 3)), model.p(f"rot.{branch}.agg_b"))


def _rot_branch_fused(model, branch, pt_o, glob_o, pt_p, glob_p):
    """Same map as _rot_branch but with the 1088-wide concat computed block-wise."""
    w1 = model.p(f"rot.{branch}.w1")
    b1 = model.p(f"rot.{branch}.b1")
    h_o = ad.point_global_linear(pt_o, glob_o, w1, b1)
    h_p = ad.point_global_linear(pt_p, glob_p, w1, b1)
    h = ad.concat([h_o, h_p], axis=1)  # (B, No+Np, hidden)
    h = ad.group_norm(
        h, model.hyper["gn_groups"],
        model.p(f"rot.{branch}.gn_gamma"), model.p(f"rot.{branch}.gn_beta"),
    )
    h = ad.gelu(h)
    h = ad.linear(h, model.p(f"rot.{branch}.w2"), model.p(f"rot.{branch}.b2"))
    hT = ad.transpose(h, (0, 2, 1))
    agg = ad.matmul(hT, model.p(f"rot.{branch}.agg_w"))
    return ad.add(ad.reshape(agg, (agg.shape[0], 3)), model.p(f"rot.{branch}.agg_b"))


def rot_head_forward(f_op: DiffTensor, model: RefinerModel):
    """Predict the 6d rotation from the stacked per-point features.

    f_op is (N_o+N_p, 1088) or batched (B, N_o+N_p, 1088); returns (rx, ry).
    """
    single = f_op.data.ndim == 2
    f = ad.reshape(f_op, (1,) + f_op.shape) if single else f_op
    if f.shape[1] != model.n_o + model.n_p:
        raise ValueError(
            f"rot head expects {model.n_o + model.n_p} rows, got {f.shape[1]}"
        )
    rx = _rot_branch(model, "x", f)
    ry = _rot_branch(model, "y", f)
    if single:
        rx, ry = ad.reshape(rx, (3,)), ad.reshape(ry, (3,))
    return rx, ry


def _ts_forward(model: RefinerModel, feats: DiffTensor):
    h = ad.gelu(ad.linear(feats, model.p("ts.w1"), model.p("ts.b1")))
    h = ad.gelu(ad.linear(h, model.p("ts.w2"), model.p("ts.b2")))
    t_delta = ad.linear(h, model.p("ts.t.w"), model.p("ts.t.b"))
    if model.mode == "category":
        s_delta = ad.linear(h, model.p("ts.s.w"), model.p("ts.s.b"))
    else:
        s_delta = None
    return t_delta, s_delta


def ts_head_forward(f_o: DiffTensor, s_init, model: RefinerModel):
    """Pool the observed-cloud features and predict (t_delta, s_delta).

    f_o is (N_o, 1088) or (B, N_o, 1088); s_init is appended to the pooled
    global feature (category mode).
    """
    single = f_o.data.ndim == 2
    f = ad.reshape(f_o, (1,) + f_o.shape) if single else f_o
    pooled = ad.max_pool(f, axis=1)  # (B, 1088)
    if model.mode == "category":
        s = ad.as_tensor(np.atleast_2d(np.asarray(s_init)), like=pooled)
        feats = ad.concat([pooled, s], axis=1)
    else:
        feats = pooled
    t_delta, s_delta = _ts_forward(model, feats)
    if single:
        t_delta = ad.reshape(t_delta, (3,))
        if s_delta is not None:
            s_delta = ad.reshape(s_delta, (3,))
    return t_delta, s_delta


def rotation_6d_tensor(rx: DiffTensor, ry: DiffTensor) -> DiffTensor:
    """Differentiable Gram-Schmidt: (B,3)+(B,3) -> (B,3,3) rotation matrices."""
    eps = 1e-12
    nx = ad.tsqrt(ad.add_const(ad.tsum(ad.mul(rx, rx), axis=-1, keepdims=True), eps))
    c1 = ad.div(rx, nx)
    dot = ad.tsum(ad.mul(ry, c1), axis=-1, keepdims=True)
    v2 = ad.sub(ry, ad.mul(dot, c1))
    n2 = ad.tsqrt(ad.add_const(ad.tsum(ad.mul(v2, v2), axis=-1, keepdims=True), eps))
    c2 = ad.div(v2, n2)
    c3 = ad.cross3(c1, c2)
    cols = [ad.reshape(c, (c.shape[0], 3, 1)) for c in (c1, c2, c3)]
    return ad.concat(cols, axis=2)


def refine_batch(
    model: RefinerModel,
    observed: np.ndarray,
    prior_pts: np.ndarray,
    r_init: np.ndarray,
    t_init: np.ndarray,
    s_init: np.ndarray,
):
    """One refinement iteration over a batch (the differentiable core path).

    observed: (B, N_o, 3) camera-frame points; prior_pts: (B, N_p, 3) in the
    normalized object frame (category mode) or pre-scaled metric frame
    (instance mode); r/t/s_init: (B,3,3), (B,3), (B,3).

    Returns a dict of DiffTensors: the predicted delta (rx, ry, r_delta,
    t_delta, s_delta) and the composed estimate (r_est, t_est, s_est).
    """
    dt = model.dtype
    b = observed.shape[0]
    if observed.shape[1] != model.n_o or prior_pts.shape[1] != model.n_p:
        raise ValueError(
            f"model expects N_o={model.n_o}, N_p={model.n_p}; "
            f"got {observed.shape[1]}, {prior_pts.shape[1]}"
        )
    # focalization (constants for the tape)
    obs_f = (observed - t_init[:, None, :]).astype(dt)
    rot_prior = np.einsum("bij,bnj->bni", r_init, prior_pts)
    if model.mode == "category":
        pri_f = (s_init[:, None, :] * rot_prior).astype(dt)
    else:
        pri_f = rot_prior.astype(dt)

    obs_t = DiffTensor(obs_f, dtype=dt)
    pri_t = DiffTensor(pri_f, dtype=dt)
    pt_o, glob_o = _encoder_features(model, obs_t)
    pt_p, glob_p = _encoder_features(model, pri_t)

    rx = _rot_branch_fused(model, "x", pt_o, glob_o, pt_p, glob_p)
    ry = _rot_branch_fused(model, "y", pt_o, glob_o, pt_p, glob_p)
    r_delta = rotation_6d_tensor(rx, ry)

    mp_o = ad.max_pool(pt_o, axis=1)  # (B, 64)
    if model.mode == "category":
        s_in = DiffTensor(s_init.astype(dt), dtype=dt)
        ts_feats = ad.concat([mp_o, glob_o, s_in], axis=1)
    else:
        ts_feats = ad.concat([mp_o, glob_o], axis=1)
    t_delta, s_delta = _ts_forward(model, ts_feats)

    r_init_t = DiffTensor(r_init.astype(dt), dtype=dt)
    r_est = ad.matmul(r_delta, r_init_t)
    t_est = ad.add(t_delta, DiffTensor(t_init.astype(dt), dtype=dt))
    if model.mode == "category":
        s_est = ad.add(s_delta, DiffTensor(s_init.astype(dt), dtype=dt))
    else:
        s_delta = DiffTensor(np.zeros((b, 3), dtype=dt), dtype=dt)
        s_est = DiffTensor(s_init.astype(dt), dtype=dt)
    return {
        "rx": rx, "ry": ry, "r_delta": r_delta,
        "t_delta": t_delta, "s_delta": s_delta,
        "r_est": r_est, "t_est": t_est, "s_est": s_est,
    }


def forward_refine(observed: np.ndarray, prior: ShapePrior, init: Pose9D,
                   model: RefinerModel):
    """Single-sample refinement returning (PoseDelta, Pose9D estimate).

    The rotation is re-orthonormalized in float64 at this boundary.
    """
    obs = np.asarray(observed, dtype=np.float64)
    out = refine_batch(
        model,
        obs[None],
        prior.points[None],
        init.r.m[None],
        init.t[None],
        init.s[None],
    )
    rx = out["rx"].data[0].astype(np.float64)
    ry = out["ry"].data[0].astype(np.float64)
    delta = PoseDelta(
        rotation_from_6d(rx, ry),
        out["t_delta"].data[0].astype(np.float64),
        out["s_delta"].data[0].astype(np.float64),
    )
    return delta, compose_pose(init, delta)


def iterate_refine(observed, prior, init, model, iters: int):
    """Run forward_refine `iters` times, re-assigning the estimate as the next
    initial pose. Returns the list of successive estimates (length iters)."""
    poses = []
    cur = init
    for _ in range(iters):
        _, cur = forward_refine(observed, prior, cur, model)
        poses.append(cur)
    return poses


def refine_dataset(model: RefinerModel, samples, priors: dict, iters: int,
                   rng, batch_size: int = 16):
    """Batched K-iteration refinement of every sample's stored initial pose.

    Observations are ball-sampled once per sample around the stored init;
    each iteration re-assigns the estimate as the next initial pose.
    Returns one pose row per sample: [init, est_1, ..., est_K].
    """
    from .synthdata import ball_sample

    rows = [[s.init] for s in samples]
    if iters == 0:
        return rows
    obs_all = np.stack(
        [ball_sample(s.observed, s.init, model.n_o, rng) for s in samples]
    )
    pri_all = np.empty((len(samples), model.n_p, 3))
    for i, s in enumerate(samples):
        p = priors[s.category].points
        pri_all[i] = p * s.gt.s if model.mode == "instance" else p
    for lo in range(0, len(samples), batch_size):
        hi = min(lo + batch_size, len(samples))
        r_c = np.stack([s.init.r.m for s in samples[lo:hi]])
        t_c = np.stack([s.init.t for s in samples[lo:hi]])
        s_c = np.stack([s.init.s for s in samples[lo:hi]])
        for _k in range(iters):
            out = refine_batch(model, obs_all[lo:hi], pri_all[lo:hi], r_c, t_c, s_c)
            rx = out["rx"].data.astype(np.float64)
            ry = out["ry"].data.astype(np.float64)
            t_c = t_c + out["t_delta"].data.astype(np.float64)
            s_c = s_c + out["s_delta"].data.astype(np.float64)
            r_c = np.stack(
                [rotation_from_6d(rx[i], ry[i]).m @ r_c[i] for i in range(hi - lo)]
            )
            for i in range(hi - lo):
                rows[lo + i].append(
                    Pose9D(Rotation(r_c[i]), t_c[i], s_c[i])
                )
    return rows


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_block(buf, payload: bytes):
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def save_model(path, model: RefinerModel, extra: dict | None = None,
               extra_arrays: dict | None = None):
    """Write the CATW checkpoint: hyperparameter block + named float32 entries.

    extra merges into the hyper JSON block (e.g. epoch); extra_arrays appends
    additional named entries (e.g. optimizer moments).
    """
    hyper = dict(model.hyper)
    if extra:
        hyper.update(extra)
    entries = [(name, t.data) for name, t in model.params.items()]
    if extra_arrays:
        entries += list(extra_arrays.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(f, json.dumps(hyper, sort_keys=True).encode())
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path):
    """Read a CATW checkpoint; returns (RefinerModel, hyper_extras, extra_arrays)."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    hyper = json.loads(buf.read(hlen).decode())
    (n_entries,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    try:
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(nlen).decode()
            (ndim,) = struct.unpack("<I", buf.read(4))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = buf.read(count * 4)
            if len(data) != count * 4:
                raise struct.error("short read")
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    except struct.error as e:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {e}") from e

    model = build_model(
        n_o=hyper["n_o"],
        n_p=hyper["n_p"],
        mode=hyper["mode"],
        dtype=np.float32,
        t_net=hyper["t_net"],
        enc_point_dims=tuple(hyper["enc_point_dims"]),
        enc_global_dims=tuple(hyper["enc_global_dims"]),
        rot_hidden=hyper["rot_hidden"],
        ts_hidden=tuple(hyper["ts_hidden"]),
        gn_groups=hyper["gn_groups"],
    )
    extras_arrays = {}
    for name, arr in arrays.items():
        if name in model.params:
            if model.params[name].data.shape != arr.shape:
                raise CheckpointFormatError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {model.params[name].data.shape}"
                )
            model.params[name] = DiffTensor(arr, requires_grad=True, dtype=np.float32)
        else:
            extras_arrays[name] = arr
    missing = set(model.params) - set(arrays)
    if missing:
        raise CheckpointFormatError(f"checkpoint is missing parameters: {sorted(missing)}")
    extras = {k: v for k, v in hyper.items() if k not in model.hyper}
    return model, extras, extras_arrays
