"""Image-quality and ROI metrics used to compare estimated maps to references.

All metrics take an optional foreground ``mask``; by default every voxel
counts.  ``psnr`` returns ``math.inf`` for identical images, serialised in
reports as the string ``"inf"``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

PSNR_INF_SENTINEL = "inf"
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _prepare(img, ref, mask):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != ref.shape:
            # a spatial mask applied to a trailing channel axis
            mask = np.broadcast_to(mask[..., None], ref.shape)
    return img, ref, mask


def nmse(img, ref, mask=None) -> float:
    """``||img - ref||^2 / ||ref||^2`` over the mask."""
    img, ref, mask = _prepare(img, ref, mask)
    den = float(np.sum(ref[mask] ** 2))
    if not den > 0:
        raise ValueError("reference has zero energy inside the mask")
    return float(np.sum((img[mask] - ref[mask]) ** 2)) / den


def psnr(img, ref, mask=None) -> float:
    """``10 log10(MAX^2 / MSE)`` with MAX the reference maximum inside the mask."""
    img, ref, mask = _prepare(img, ref, mask)
    mse = float(np.mean((img[mask] - ref[mask]) ** 2))
    if mse == 0:
        return math.inf
    peak = float(np.max(ref[mask]))
    return 10.0 * math.log10(peak ** 2 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _local_mean(img, w):
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    h = len(w) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_map(img, ref, data_range: float) -> np.ndarray:
    """Local SSIM on the valid (fully covered) window centres of a 2-D image."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if min(img.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {img.shape}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _local_mean(img, w), _local_mean(ref, w)
    sxx = _local_mean(img * img, w) - mx * mx
    syy = _local_mean(ref * ref, w) - my * my
    sxy = _local_mean(img * ref, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))


def ssim(img, ref, mask=None, data_range: float | None = None) -> float:
    """Mean structural similarity (Gaussian 11x11, sigma 1.5, K1=0.01, K2=0.03).

    2-D images are used directly; 3-D volumes are evaluated slice by slice
    along the last axis and a 4-D ``(X, Y, Z, C)`` map is averaged over
    channels.  Only window centres inside ``mask`` contribute.  The dynamic
    range defaults to the reference maximum inside the mask.
    """
    img, ref, mask = _prepare(img, ref, mask)
    if data_range is None:
        data_range = float(np.max(ref[mask])) if np.any(mask) else 0.0
    if img.ndim == 4:
        return float(np.mean([ssim(img[..., c], ref[..., c], mask[..., c], data_range)
                              for c in range(img.shape[-1])]))
    if img.ndim == 2:
        img, ref, mask = img[..., None], ref[..., None], mask[..., None]
    h = SSIM_WIN // 2
    total, count = 0.0, 0
    for z in range(img.shape[2]):
        m = mask[h:img.shape[0] - h, h:img.shape[1] - h, z]
        if not np.any(m):
            if min(img.shape[:2]) < SSIM_WIN:
                raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
            continue
        smap = ssim_map(img[:, :, z], ref[:, :, z], data_range)
        total += float(np.sum(smap[m]))
        count += int(np.count_nonzero(m))
    if count == 0:
        if min(img.shape[:2]) < SSIM_WIN:
            raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
        raise ValueError("no SSIM window centre falls inside the mask")
    return total / count


def roi_stats(values, labels, ref, rois=None) -> dict:
    """Mean per label and the percent error of that mean against the reference."""
    values = np.asarray(values, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    labels = np.asarray(labels)
    if rois is None:
        rois = [int(l) for l in np.unique(labels) if l != 0]
    out = {}
    for roi in rois:
        sel = labels == roi
        if not np.any(sel):
            warnings.warn(f"ROI {roi} is empty; skipped", RuntimeWarning, stacklevel=2)
            continue
        mean, ref_mean = float(values[sel].mean()), float(ref[sel].mean())
        err = abs(mean - ref_mean) / ref_mean * 100 if ref_mean != 0 else (0.0 if mean == 0 else math.inf)
        out[roi] = {"mean": mean, "ref_mean": ref_mean, "percent_error": err}
    return out


def lesion_contrast(fa_map, lesion_mask, background_mask):
    """``(mean_lesion - mean_background) / mean_background`` and its magnitude."""
    fa_map = np.asarray(fa_map, dtype=np.float64)
    lesion = np.asarray(lesion_mask, dtype=bool)
    bg = np.asarray(background_mask, dtype=bool)
    if not np.any(lesion) or not np.any(bg):
        raise ValueError("lesion and background masks must be non-empty")
    if np.any(lesion & bg):
        raise ValueError("lesion and background masks overlap")
    mb = float(fa_map[bg].mean())
    if mb == 0:
        raise ValueError("background mean FA is zero")
    c = (float(fa_map[lesion].mean()) - mb) / mb
    return c, abs(c)


def surrounding_background(lesion_mask, region_mask, width: int = 2) -> np.ndarray:
    """In-plane ring of ``width`` voxels around the lesion, restricted to its region."""
    lesion = np.asarray(lesion_mask, dtype=bool)
    struct = np.zeros((3, 3, 3), dtype=bool)
    struct[:, :, 1] = True
    grown = ndimage.binary_dilation(lesion, structure=struct, iterations=width)
    return grown & ~lesion & np.asarray(region_mask, dtype=bool)


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return PSNR_INF_SENTINEL if v > 0 else "-inf"
    if isinstance(v, (np.floating, np.integer)):
        return _json_value(v.item())
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


@dataclass
class MapScore:
    psnr: float
    nmse: float
    ssim: float


@dataclass
class EvalReport:
    """Scores for one or more maps/methods plus provenance."""

    experiment: str
    scores: dict = field(default_factory=dict)
    rois: dict = field(default_factory=dict)
    lesion: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, method: str, map_name: str, img, ref, mask=None):
        score = MapScore(psnr(img, ref, mask), nmse(img, ref, mask), ssim(img, ref, mask))
        self.scores.setdefault(method, {})[map_name] = asdict(score)
        return score

    def to_dict(self) -> dict:
        return _json_value(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        def restore(v):
            if v == PSNR_INF_SENTINEL:
                return math.inf
            if isinstance(v, dict):
                return {k: restore(x) for k, x in v.items()}
            return v
        return cls(**restore(json.loads(text)))


def evaluate_maps(pred, ref, mask=None) -> dict:
    return asdict(MapScore(psnr(pred, ref, mask), nmse(pred, ref, mask), ssim(pred, ref, mask)))
