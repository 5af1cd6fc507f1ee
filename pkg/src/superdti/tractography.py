"""Deterministic FACT streamline tracking with brute-force seeding.

Tracking runs in voxel index coordinates (voxel ``i`` spans
``[i - 0.5, i + 0.5)`` on each axis); reported points are converted to
millimetres by the voxel spacing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NUDGE = 1e-6
MIN_LENGTH_VOXELS = 2.0


@dataclass
class Streamline:
    points: np.ndarray          # (n, 3) millimetres
    seed: tuple
    termination: tuple          # (backward end, forward end)

    def __len__(self):
        return self.points.shape[0]

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def brute_force_seed(fa, fa_thresh: float = 0.2, mask=None) -> np.ndarray:
    """One seed at the centre of every voxel with ``FA >= fa_thresh``."""
    fa = np.asarray(fa, dtype=np.float64)
    sel = fa >= fa_thresh
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    return np.argwhere(sel).astype(np.float64)


def _voxel(p):
    return tuple(np.floor(np.asarray(p) + 0.5).astype(int))


def _track_half(p0, d0, v1, fa, fa_thresh, cos_thresh, max_steps):
    # plain floats: per-step numpy overhead dominates on small vectors
    nx, ny, nz = len(fa), len(fa[0]), len(fa[0][0])
    px, py, pz = (float(c) for c in p0)
    dx, dy, dz = (float(c) for c in d0)
    ix, iy, iz = (math.floor(c + 0.5) for c in (px, py, pz))
    pts = []
    for _ in range(max_steps):
        t = math.inf
        if dx:
            t = min(t, (ix + math.copysign(0.5, dx) - px) / dx)
        if dy:
            t = min(t, (iy + math.copysign(0.5, dy) - py) / dy)
        if dz:
            t = min(t, (iz + math.copysign(0.5, dz) - pz) / dz)
        qx, qy, qz = px + t * dx, py + t * dy, pz + t * dz
        pts.append((qx, qy, qz))
        px, py, pz = qx + NUDGE * dx, qy + NUDGE * dy, qz + NUDGE * dz
        ix, iy, iz = math.floor(px + 0.5), math.floor(py + 0.5), math.floor(pz + 0.5)
        if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
            return pts, "boundary"
        if fa[ix][iy][iz] < fa_thresh:
            return pts, "low-FA"
        vx, vy, vz = v1[ix][iy][iz]
        dot = dx * vx + dy * vy + dz * vz
        if abs(dot) < cos_thresh:
            return pts, "angle"
        if dot < 0:
            vx, vy, vz = -vx, -vy, -vz
        dx, dy, dz = float(vx), float(vy), float(vz)
    return pts, "max-length"


def fact_track(v1, fa, seeds, fa_thresh: float = 0.2, angle_thresh: float = 40.0,
               spacing=(1.0, 1.0, 1.0), max_length: float | None = None,
               min_length: float = MIN_LENGTH_VOXELS) -> list:
    """Bidirectional FACT from every seed.

    Within a voxel the track follows that voxel's principal direction in a
    straight line to the voxel face.  On entering a new voxel it stops if
    FA < ``fa_thresh`` or the unsigned angle between the old and new
    directions exceeds ``angle_thresh`` degrees; otherwise the new direction
    is signed to keep the current heading.  Tracks shorter than
    ``min_length`` voxels are dropped.  Results follow seed order.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    fa = np.asarray(fa, dtype=np.float64)
    if v1.shape[:3] != fa.shape or v1.shape[-1] != 3:
        raise ValueError("direction field and FA map are not aligned")
    norms = np.linalg.norm(v1, axis=-1, keepdims=True)
    v1 = v1 / np.where(norms > 0, norms, 1.0)
    cos_thresh = float(np.cos(np.radians(angle_thresh)))
    if max_length is None:
        max_length = 10.0 * max(fa.shape)
    # each step crosses one voxel, so path length bounds the step count
    max_steps = int(np.ceil(max_length)) * 3
    spacing = np.asarray(spacing, dtype=np.float64)
    fa_list, v1_list = fa.tolist(), v1.tolist()
    out = []
    for seed in np.asarray(seeds, dtype=np.float64).reshape(-1, 3):
        sv = _voxel(seed)
        d = v1[sv]
        if not np.any(d) or fa[sv] < fa_thresh:
            continue
        fwd, why_f = _track_half(seed, d, v1_list, fa_list, fa_thresh, cos_thresh, max_steps)
        bwd, why_b = _track_half(seed, -d, v1_list, fa_list, fa_thresh, cos_thresh, max_steps)
        pts = np.array(bwd[::-1] + [tuple(seed)] + fwd)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        total = float(np.sum(seg))
        if total > max_length:
            n_seg = int(np.searchsorted(np.cumsum(seg), max_length, side="right"))
            pts = pts[:n_seg + 1]
            why_f = "max-length"
            total = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
        if len(pts) < 2 or total < min_length:
            continue
        out.append(Streamline(pts * spacing, tuple(int(i) for i in sv), (why_b, why_f)))
    return out


def track_volume(v1, fa, fa_thresh: float = 0.2, angle_thresh: float = 40.0,
                 spacing=(1.0, 1.0, 1.0), mask=None) -> list:
    """Brute-force seeding followed by FACT."""
    seeds = brute_force_seed(fa, fa_thresh, mask)
    return fact_track(v1, fa, seeds, fa_thresh, angle_thresh, spacing)


def _visited_voxels(sl: Streamline, spacing):
    vox = sl.points / np.asarray(spacing, dtype=np.float64)
    # segment midpoints lie strictly inside the voxel each FACT segment crosses
    mids = 0.5 * (vox[1:] + vox[:-1])
    return np.floor(np.concatenate([vox, mids]) + 0.5).astype(int)


def roi_filter(streamlines, roi_mask, spacing=(1.0, 1.0, 1.0)) -> list:
    """Keep streamlines with at least one point or segment inside the ROI."""
    roi = np.asarray(roi_mask, dtype=bool)
    shape = np.array(roi.shape)
    kept = []
    for sl in streamlines:
        v = _visited_voxels(sl, spacing)
        ok = np.all((v >= 0) & (v < shape), axis=1)
        v = v[ok]
        if v.size and np.any(roi[v[:, 0], v[:, 1], v[:, 2]]):
            kept.append(sl)
    return kept


def count_fibers(streamlines) -> int:
    return len(streamlines)


def _neighbour_sum(field, offsets):
    """Sum ``field`` over the given integer neighbour offsets (zero outside the grid)."""
    X, Y, Z = field.shape[:3]
    pad = np.pad(field, [(1, 1)] * 3 + [(0, 0)] * (field.ndim - 3))
    acc = np.zeros_like(field)
    for dx, dy, dz in offsets:
        acc += pad[1 + dx:1 + dx + X, 1 + dy:1 + dy + Y, 1 + dz:1 + dz + Z]
    return acc


def directions_from_colormap(color, fa=None, spacing=(1.0, 1.0, 1.0), iterations: int = 4,
                             radius: int = 3) -> np.ndarray:
    """Recover signed unit directions from a ``|v1| * FA`` colour map.

    Component magnitudes come from the colour channels; the two free signs
    (x and y relative to z) are chosen per voxel.  The first pass prefers
    the candidate that points along the local layout of anisotropic
    neighbours within ``radius`` voxels (a bundle extends along its
    fibres); later passes add agreement with the adjacent voxels' current
    directions.
    """
    color = np.asarray(color, dtype=np.float64)
    n = np.linalg.norm(color, axis=-1, keepdims=True)
    mag = color / np.where(n > 0, n, 1.0)
    weight = n[..., 0] if fa is None else np.asarray(fa, dtype=np.float64)
    signs = np.array([(1, 1, 1), (-1, 1, 1), (1, -1, 1), (-1, -1, 1)], dtype=np.float64)
    cands = mag[None] * signs[:, None, None, None, :]
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
               if (dx, dy, dz) != (0, 0, 0)]
    sp = np.asarray(spacing, dtype=np.float64)
    X, Y, Z = weight.shape
    R = int(radius)
    pad_w = np.pad(weight, R)
    layout = np.zeros(weight.shape + (3, 3))
    rng = range(-R, R + 1)
    for d in [(a, b, c) for a in rng for b in rng for c in rng]:
        if d == (0, 0, 0) or np.dot(d, d) > R * R:
            continue
        u = np.asarray(d) * sp
        u = u / np.linalg.norm(u)
        w = pad_w[R + d[0]:R + d[0] + X, R + d[1]:R + d[1] + Y, R + d[2]:R + d[2] + Z]
        layout += w[..., None, None] * np.outer(u, u)
    layout /= np.maximum(np.trace(layout, axis1=-2, axis2=-1), 1e-12)[..., None, None]
    cur = cands[np.argmax(np.einsum("kxyzi,xyzij,kxyzj->kxyz", cands, layout, cands), axis=0),
                np.arange(X)[:, None, None], np.arange(Y)[None, :, None], np.arange(Z)[None, None, :]]
    for _ in range(iterations):
        # neighbour orientation tensor: FA-weighted sum of v v^T
        orient = _neighbour_sum((weight[..., None] * cur)[..., :, None] * cur[..., None, :], offsets)
        orient /= np.maximum(np.trace(orient, axis1=-2, axis2=-1), 1e-12)[..., None, None]
        score = np.einsum("kxyzi,xyzij,kxyzj->kxyz", cands, layout + orient, cands)
        best = np.argmax(score, axis=0)
        cur = np.take_along_axis(cands, best[None, ..., None], axis=0)[0]
    return cur
