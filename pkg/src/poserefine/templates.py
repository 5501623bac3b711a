"""Procedural category templates: parametric surfaces with analytic outward
normals, sampled at metric desk scale. The canonical object frame is y-up,
centered at the bounding-box center; rotationally symmetric categories spin
about +y.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import SymmetrySpec

Y_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CategorySpec:
    name: str
    template: str
    shape_param_ranges: dict
    symmetry: SymmetrySpec

    def __post_init__(self):
        if not self.shape_param_ranges:
            raise ValueError("shape_param_ranges must be nonempty")
        for key, (lo, hi) in self.shape_param_ranges.items():
            if not (hi >= lo):
                raise ValueError(f"bad range for {key}: ({lo}, {hi})")

    def mean_params(self) -> dict:
        return {k: 0.5 * (lo + hi) for k, (lo, hi) in self.shape_param_ranges.items()}

    def sample_params(self, rng: np.random.Generator) -> dict:
        return {k: rng.uniform(lo, hi) for k, (lo, hi) in self.shape_param_ranges.items()}


def name_seed(name: str) -> int:
    """Stable 64-bit seed derived from a category name."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _disk(n, r, y, ny, rng):
    rad = r * np.sqrt(rng.uniform(0, 1, n))
    az = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([rad * np.cos(az), np.full(n, y), rad * np.sin(az)], axis=1)
    nrm = np.tile([0.0, ny, 0.0], (n, 1))
    return pts, nrm


def _annulus(n, r_in, r_out, y, ny, rng):
    rad = np.sqrt(rng.uniform(r_in**2, r_out**2, n))
    az = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([rad * np.cos(az), np.full(n, y), rad * np.sin(az)], axis=1)
    nrm = np.tile([0.0, ny, 0.0], (n, 1))
    return pts, nrm


def _cylinder_side(n, r, y0, y1, rng):
    az = rng.uniform(0, 2 * np.pi, n)
    y = rng.uniform(y0, y1, n)
    ca, sa = np.cos(az), np.sin(az)
    pts = np.stack([r * ca, y, r * sa], axis=1)
    nrm = np.stack([ca, np.zeros(n), sa], axis=1)
    return pts, nrm


def _split_counts(n, areas):
    areas = np.asarray(areas, dtype=np.float64)
    frac = areas / areas.sum()
    counts = np.floor(frac * n).astype(int)
    counts[0] += n - counts.sum()
    return counts


def _sample_bottle(p, n, rng):
    r, h = p["body_radius"], p["body_height"]
    nr = r * p["neck_radius_frac"]
    nh = h * p["neck_height_frac"]
    areas = [
        2 * np.pi * r * h,  # body side
        np.pi * r**2,  # bottom
        np.pi * (r**2 - nr**2),  # shoulder
        2 * np.pi * nr * nh,  # neck side
        np.pi * nr**2,  # cap
    ]
    c = _split_counts(n, areas)
    parts = [
        _cylinder_side(c[0], r, 0.0, h, rng),
        _disk(c[1], r, 0.0, -1.0, rng),
        _annulus(c[2], nr, r, h, 1.0, rng),
        _cylinder_side(c[3], nr, h, h + nh, rng),
        _disk(c[4], nr, h + nh, 1.0, rng),
    ]
    pts = np.concatenate([a for a, _ in parts])
    nrm = np.concatenate([b for _, b in parts])
    return pts, nrm


def _sample_can(p, n, rng):
    r, h = p["radius"], p["height"]
    areas = [2 * np.pi * r * h, np.pi * r**2, np.pi * r**2]
    c = _split_counts(n, areas)
    parts = [
        _cylinder_side(c[0], r, 0.0, h, rng),
        _disk(c[1], r, 0.0, -1.0, rng),
        _disk(c[2], r, h, 1.0, rng),
    ]
    pts = np.concatenate([a for a, _ in parts])
    nrm = np.concatenate([b for _, b in parts])
    return pts, nrm


def _sample_bowl(p, n, rng):
    # ellipsoidal shell from the bottom pole up to the rim (open top)
    r = p["radius"]
    squash = p["y_squash"]
    rim = p["rim_y_frac"]
    u = rng.uniform(-1.0, rim, n)  # y/r on the unit sphere, area-uniform
    az = rng.uniform(0, 2 * np.pi, n)
    rho = np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    pts = np.stack([r * rho * np.cos(az), r * squash * u, r * rho * np.sin(az)], axis=1)
    # ellipsoid x^2/r^2 + y^2/(r*squash)^2 + z^2/r^2 = 1, normal ~ grad
    nrm = _unit(np.stack([rho * np.cos(az), u / squash, rho * np.sin(az)], axis=1))
    return pts, nrm


def _box_faces(n, ex, ey, ez, rng):
    """Axis-aligned box [-ex/2,ex/2]x[0,ey]x[-ez/2,ez/2], area-weighted faces."""
    areas = [ex * ey, ex * ey, ey * ez, ey * ez, ex * ez, ex * ez]
    c = _split_counts(n, areas)
    out_p, out_n = [], []
    specs = [
        (np.array([0, 0, 1.0]), lambda k: (rng.uniform(-ex / 2, ex / 2, k), rng.uniform(0, ey, k), np.full(k, ez / 2))),
        (np.array([0, 0, -1.0]), lambda k: (rng.uniform(-ex / 2, ex / 2, k), rng.uniform(0, ey, k), np.full(k, -ez / 2))),
        (np.array([1.0, 0, 0]), lambda k: (np.full(k, ex / 2), rng.uniform(0, ey, k), rng.uniform(-ez / 2, ez / 2, k))),
        (np.array([-1.0, 0, 0]), lambda k: (np.full(k, -ex / 2), rng.uniform(0, ey, k), rng.uniform(-ez / 2, ez / 2, k))),
        (np.array([0, 1.0, 0]), lambda k: (rng.uniform(-ex / 2, ex / 2, k), np.full(k, ey), rng.uniform(-ez / 2, ez / 2, k))),
        (np.array([0, -1.0, 0]), lambda k: (rng.uniform(-ex / 2, ex / 2, k), np.full(k, 0.0), rng.uniform(-ez / 2, ez / 2, k))),
    ]
    for (nrm, gen), k in zip(specs, c):
        x, y, z = gen(k)
        out_p.append(np.stack([x, y, z], axis=1))
        out_n.append(np.tile(nrm, (k, 1)))
    return np.concatenate(out_p), np.concatenate(out_n)


def _sample_laptop(p, n, rng):
    w, d, th = p["width"], p["depth"], p["thickness"]
    sh = p["screen_height"]
    beta = np.radians(p["open_angle_deg"] - 90.0)  # lean-back angle of the screen
    n_base = int(n * (w * d) / (w * d + w * sh))
    base_p, base_n = _box_faces(n_base, w, th, d, rng)
    # screen: slab rising from the back edge, leaning back by beta
    u = np.array([0.0, np.cos(beta), -np.sin(beta)])  # along the screen
    v = np.array([0.0, np.sin(beta), np.cos(beta)])  # screen outward normal (front)
    k = n - n_base
    su = rng.uniform(0, sh, k)
    sx = rng.uniform(-w / 2, w / 2, k)
    side = rng.uniform(0, 1, k) < 0.5
    off = np.where(side, th / 2, -th / 2)
    hinge = np.array([0.0, th, -d / 2])
    scr_p = hinge + sx[:, None] * np.array([1.0, 0, 0]) + su[:, None] * u + off[:, None] * v
    scr_n = np.where(side[:, None], v, -v)
    return np.concatenate([base_p, scr_p]), np.concatenate([base_n, scr_n])


def _sample_mug(p, n, rng):
    r, h = p["radius"], p["height"]
    a = p["handle_radius"]  # major radius of the handle arc
    b = a * 0.25  # tube radius
    areas = [2 * np.pi * r * h, np.pi * r**2, 2 * np.pi * b * (np.pi * a)]
    c = _split_counts(n, areas)
    side = _cylinder_side(c[0], r, 0.0, h, rng)
    bottom = _disk(c[1], r, 0.0, -1.0, rng)
    # half-torus handle in the xy-plane, sticking out of the +x wall
    k = c[2]
    center = np.array([r, h / 2, 0.0])
    psi = rng.uniform(-np.pi / 2, np.pi / 2, k)
    chi = rng.uniform(0, 2 * np.pi, k)
    keep = rng.uniform(0, 1, k) < (a + b * np.cos(chi)) / (a + b)
    psi, chi = psi[keep], chi[keep]
    ring_dir = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=1)
    tube_n = np.stack(
        [np.cos(psi) * np.cos(chi), np.sin(psi) * np.cos(chi), np.sin(chi)], axis=1
    )
    handle_p = center + a * ring_dir + b * tube_n
    parts_p = [side[0], bottom[0], handle_p]
    parts_n = [side[1], bottom[1], tube_n]
    return np.concatenate(parts_p), np.concatenate(parts_n)


_SAMPLERS = {
    "bottle": _sample_bottle,
    "bowl": _sample_bowl,
    "can": _sample_can,
    "laptop": _sample_laptop,
    "mug": _sample_mug,
}


def sample_template(template: str, params: dict, n: int, rng: np.random.Generator):
    """Sample n surface points + outward unit normals in the raw template frame."""
    if template not in _SAMPLERS:
        raise ValueError(f"unknown template {template!r}")
    pts, nrm = _SAMPLERS[template](params, n, rng)
    if pts.shape[0] != n:  # rejection sampling may under-fill (mug handle)
        extra_rng = np.random.default_rng(rng.integers(0, 2**63))
        while pts.shape[0] < n:
            p2, n2 = _SAMPLERS[template](params, n, extra_rng)
            pts = np.concatenate([pts, p2])
            nrm = np.concatenate([nrm, n2])
        pts, nrm = pts[:n], nrm[:n]
    return pts, nrm


def default_categories() -> dict:
    """The shipped category registry (camera-like categories excluded)."""
    sym_y = SymmetrySpec.continuous(Y_AXIS)
    none = SymmetrySpec.none()
    cats = [
        CategorySpec(
            "bottle",
            "bottle",
            {
                "body_radius": (0.03, 0.05),
                "body_height": (0.12, 0.22),
                "neck_radius_frac": (0.35, 0.55),
                "neck_height_frac": (0.20, 0.35),
            },
            sym_y,
        ),
        CategorySpec(
            "bowl",
            "bowl",
            {
                "radius": (0.05, 0.09),
                "rim_y_frac": (0.10, 0.45),
                "y_squash": (0.55, 0.95),
            },
            sym_y,
        ),
        CategorySpec(
            "can",
            "can",
            {"radius": (0.03, 0.06), "height": (0.08, 0.16)},
            sym_y,
        ),
        CategorySpec(
            "laptop",
            "laptop",
            {
                "width": (0.25, 0.35),
                "depth": (0.18, 0.26),
                "thickness": (0.012, 0.020),
                "screen_height": (0.16, 0.24),
                "open_angle_deg": (95.0, 125.0),
            },
            none,
        ),
        CategorySpec(
            "mug",
            "mug",
            {
                "radius": (0.035, 0.055),
                "height": (0.08, 0.12),
                "handle_radius": (0.020, 0.032),
            },
            none,
        ),
    ]
    return {c.name: c for c in cats}
