"""Diffusion tensor model: forward signal, log-linear fitting, eigensystems
and the scalar maps (FA, MD, direction-encoded color) derived from them.

Tensors are stored with six unique components in the order
``[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`` along the last axis.  Eigenvectors are
stored column-wise: ``evecs[..., :, k]`` belongs to ``evals[..., k]`` and
eigenvalues are sorted descending.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

MIN_SIGNAL_FRACTION = 1e-6
MASK_FRACTION = 0.1
JACOBI_GAP_TOL = 1e-12
RECON_TOL = 1e-12


class DegenerateSchemeError(ValueError):
    """The acquisition cannot determine all seven log-linear unknowns."""


class VoxelSkipped(ValueError):
    """A voxel's measurements are unusable; it is treated as background."""


@dataclass
class GradientScheme:
    """Per-measurement b-values (s/mm^2) and unit gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if self.bvals.shape[0] != self.bvecs.shape[0]:
            raise ValueError(
                f"{self.bvals.shape[0]} b-values but {self.bvecs.shape[0]} directions")
        if np.any(~np.isfinite(self.bvals)) or np.any(self.bvals < 0):
            raise ValueError("b-values must be finite and non-negative")
        weighted = self.bvals > 0
        norms = np.linalg.norm(self.bvecs[weighted], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("directions with b > 0 must have unit norm")

    def __len__(self):
        return self.bvals.shape[0]

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals == 0

    @property
    def n_b0(self) -> int:
        return int(np.count_nonzero(self.b0_mask))

    @property
    def n_weighted(self) -> int:
        return len(self) - self.n_b0

    def subset(self, indices) -> "GradientScheme":
        indices = np.asarray(indices)
        return GradientScheme(self.bvals[indices], self.bvecs[indices], self.name)


@dataclass
class TensorField:
    """Per-voxel tensors ``(..., 6)`` plus the non-weighted signal ``S0``."""

    tensor: np.ndarray
    s0: np.ndarray

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        self.s0 = np.broadcast_to(
            np.asarray(self.s0, dtype=np.float64), self.tensor.shape[:-1]).copy()
        if self.tensor.shape[-1] != 6:
            raise ValueError("tensor components must be on a trailing axis of length 6")

    @property
    def shape(self):
        return self.tensor.shape[:-1]

    def matrices(self) -> np.ndarray:
        return to_matrix(self.tensor)


@dataclass
class EigenSystem:
    """Sorted eigenvalues ``(..., 3)`` and column eigenvectors ``(..., 3, 3)``."""

    evals: np.ndarray
    evecs: np.ndarray

    @property
    def v1(self) -> np.ndarray:
        return self.evecs[..., :, 0]

    @property
    def negative(self) -> np.ndarray:
        """Voxels with at least one negative eigenvalue (fit pathology)."""
        return np.any(self.evals < 0, axis=-1)


@dataclass
class DtiMaps:
    fa: np.ndarray
    md: np.ndarray
    color: np.ndarray
    eigen: EigenSystem
    s0: np.ndarray
    mask: np.ndarray
    tensor: np.ndarray = field(repr=False, default=None)


def to_matrix(tensor):
    """Expand ``(..., 6)`` components to symmetric ``(..., 3, 3)`` matrices."""
    t = np.asarray(tensor, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(t, -1, 0)
    rows = [np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1),
            np.stack([xz, yz, zz], -1)]
    return np.stack(rows, -2)


def from_matrix(mat):
    m = np.asarray(mat, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
                     m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], -1)


def build_design_matrix(scheme: GradientScheme, check_rank: bool = True) -> np.ndarray:
    """Log-linear design matrix mapping ``[ln S0, Dxx, ..., Dyz]`` to ``ln S``.

    Raises
    ------
    DegenerateSchemeError
        If there are fewer than 7 rows or the matrix is rank deficient.
    """
    b = scheme.bvals
    gx, gy, gz = scheme.bvecs.T
    X = np.stack([np.ones_like(b),
                  -b * gx * gx, -b * gy * gy, -b * gz * gz,
                  -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz], axis=1)
    if check_rank:
        if X.shape[0] < 7:
            raise DegenerateSchemeError(f"need at least 7 measurements, got {X.shape[0]}")
        if np.linalg.matrix_rank(X) < 7:
            raise DegenerateSchemeError("design matrix is rank deficient")
    return X


def scheme_condition_number(scheme: GradientScheme) -> float:
    """Ratio of extreme singular values of the design matrix (inf if singular)."""
    X = build_design_matrix(scheme, check_rank=False)
    if X.shape[0] < 7:
        return float("inf")
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= s[0] * X.shape[0] * np.finfo(float).eps:
        return float("inf")
    return float(s[0] / s[-1])


def predict_signal(field_or_tensor, scheme: GradientScheme, s0=None) -> np.ndarray:
    """Evaluate ``S_i = S0 exp(-b_i g_i^T D g_i)`` for every measurement.

    Accepts a :class:`TensorField` or a raw ``(..., 6)`` component array with
    ``s0`` given separately. Output has the measurement axis last.
    """
    if isinstance(field_or_tensor, TensorField):
        tensor, s0 = field_or_tensor.tensor, field_or_tensor.s0
    else:
        tensor = np.asarray(field_or_tensor, dtype=np.float64)
        s0 = 1.0 if s0 is None else s0
    ev = np.linalg.eigvalsh(to_matrix(tensor))
    if np.any(ev < -1e-15):
        warnings.warn("tensor is not positive semi-definite", RuntimeWarning, stacklevel=2)
    X = build_design_matrix(scheme, check_rank=False)
    exponent = tensor @ X[:, 1:].T
    return np.asarray(s0, dtype=np.float64)[..., None] * np.exp(exponent)


def fit_tensor_lls(signals, scheme: GradientScheme):
    """Unweighted log-linear least squares tensor fit.

    Parameters
    ----------
    signals : array_like, shape (..., n_meas)
    scheme : GradientScheme

    Returns
    -------
    field : TensorField
    valid : ndarray of bool, shape (...)
        False where the voxel was skipped (non-finite or no positive signal);
        skipped voxels carry a zero tensor and ``S0 = 0``.
    """
    y = np.asarray(signals, dtype=np.float64)
    if y.shape[-1] != len(scheme):
        raise ValueError(f"signals have {y.shape[-1]} measurements, scheme has {len(scheme)}")
    X = build_design_matrix(scheme)
    flat = y.reshape(-1, y.shape[-1])
    valid = np.all(np.isfinite(flat), axis=1)
    if scheme.n_b0:
        s0_est = flat[:, scheme.b0_mask].mean(axis=1)
    else:
        s0_est = flat.max(axis=1)
    valid &= s0_est > 0
    floor = MIN_SIGNAL_FRACTION * np.where(valid, s0_est, 1.0)
    safe = np.where(valid[:, None], np.maximum(flat, floor[:, None]), 1.0)
    beta = np.linalg.lstsq(X, np.log(safe).T, rcond=None)[0].T
    tensor = np.where(valid[:, None], beta[:, 1:], 0.0)
    s0 = np.where(valid, np.exp(beta[:, 0]), 0.0)
    shape = y.shape[:-1]
    return TensorField(tensor.reshape(shape + (6,)), s0.reshape(shape)), valid.reshape(shape)


def fit_voxel(signals, scheme: GradientScheme) -> TensorField:
    """Single-voxel fit; raises :class:`VoxelSkipped` on unusable data."""
    field, valid = fit_tensor_lls(np.asarray(signals, dtype=np.float64)[None], scheme)
    if not valid[0]:
        raise VoxelSkipped("non-finite or non-positive signals")
    return TensorField(field.tensor[0], field.s0[0])


def _sign_convention(evecs):
    # largest-magnitude component of each eigenvector made non-negative
    idx = np.argmax(np.abs(evecs), axis=-2)
    big = np.take_along_axis(evecs, idx[..., None, :], axis=-2)
    return evecs * np.where(big < 0, -1.0, 1.0)


def _jacobi_eigh(A, sweeps=12):
    """Cyclic Jacobi rotations applied to a stack of symmetric 3x3 matrices."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    for _ in range(sweeps):
        off = A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2
        if not np.any(off > 0):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[:, p, q]
            rot = apq != 0
            if not np.any(rot):
                continue
            with np.errstate(over="ignore"):
                # a huge theta means a negligible rotation; t underflows to 0 correctly
                theta = np.where(rot, (A[:, q, q] - A[:, p, p]) / (2 * np.where(rot, apq, 1.0)), 0.0)
                t = np.where(rot, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t = np.where(rot & (theta == 0), 1.0, t)
            c = 1.0 / np.sqrt(t ** 2 + 1)
            s = t * c
            J = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            J[:, p, p] = c
            J[:, q, q] = c
            J[:, p, q] = s
            J[:, q, p] = -s
            A = np.swapaxes(J, 1, 2) @ A @ J
            V = V @ J
    return np.diagonal(A, axis1=1, axis2=2).copy(), V


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _null_vector(M):
    # eigenvector for a simple eigenvalue: largest cross product of rows of (A - lambda I)
    r0, r1, r2 = M[:, 0], M[:, 1], M[:, 2]
    c = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], 1)
    best = np.argmax(np.einsum("nij,nij->ni", c, c), axis=1)
    return _unit(c[np.arange(len(c)), best])


def _closed_form(A):
    n = A.shape[0]
    q = np.trace(A, axis1=1, axis2=2) / 3
    p1 = A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2
    dev = np.diagonal(A, axis1=1, axis2=2) - q[:, None]
    p = np.sqrt((np.sum(dev ** 2, axis=1) + 2 * p1) / 6)
    safe_p = np.where(p > 0, p, 1.0)
    B = (A - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    r = np.clip(np.linalg.det(B) / 2, -1.0, 1.0)
    phi = np.arccos(r) / 3
    l1 = q + 2 * p * np.cos(phi)
    l3 = q + 2 * p * np.cos(phi + 2 * np.pi / 3)
    v1 = _null_vector(A - l1[:, None, None] * np.eye(3))
    v3 = _null_vector(A - l3[:, None, None] * np.eye(3))
    v3 = _unit(v3 - np.sum(v3 * v1, axis=1, keepdims=True) * v1)
    v2 = np.cross(v3, v1)
    V = np.stack([v1, v2, v3], axis=2)
    # Rayleigh quotients are more accurate than the trigonometric roots
    evals = np.einsum("nik,nij,njk->nk", V, A, V)
    return evals, V, p, q


def eig3_sym(tensor) -> EigenSystem:
    """Eigendecomposition of symmetric 3x3 tensors given as ``(..., 6)``.

    Uses the trigonometric closed form of the characteristic polynomial and
    falls back to Jacobi rotations where the eigenvalue gaps are tiny
    relative to the trace scale or the closed-form reconstruction check fails.
    Negative eigenvalues are kept as-is.
    """
    t = np.asarray(tensor, dtype=np.float64)
    shape = t.shape[:-1]
    A = to_matrix(t.reshape(-1, 6))
    n = A.shape[0]
    evals = np.zeros((n, 3))
    evecs = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if n == 0:
        return EigenSystem(evals.reshape(shape + (3,)), evecs.reshape(shape + (3, 3)))

    scale = np.sqrt(np.sum(A ** 2, axis=(1, 2)))
    lam, V, p, q = _closed_form(A)
    iso = p == 0
    order = np.argsort(-lam, axis=1)
    lam = np.take_along_axis(lam, order, 1)
    V = np.take_along_axis(V, order[:, None, :], 2)
    gaps = np.minimum(lam[:, 0] - lam[:, 1], lam[:, 1] - lam[:, 2])
    recon = np.einsum("nik,nk,njk->nij", V, lam, V)
    resid = np.sqrt(np.sum((recon - A) ** 2, axis=(1, 2)))
    bad = (~iso) & ((gaps < JACOBI_GAP_TOL * np.maximum(scale, 1e-300))
                    | ~(resid <= RECON_TOL * scale)
                    | ~np.all(np.isfinite(V), axis=(1, 2)))
    good = ~iso & ~bad
    evals[good], evecs[good] = lam[good], V[good]
    evals[iso] = q[iso, None]
    if np.any(bad):
        jl, jv = _jacobi_eigh(A[bad])
        order = np.argsort(-jl, axis=1)
        evals[bad] = np.take_along_axis(jl, order, 1)
        evecs[bad] = np.take_along_axis(jv, order[:, None, :], 2)
    evecs = _sign_convention(evecs)
    return EigenSystem(evals.reshape(shape + (3,)), evecs.reshape(shape + (3, 3)))


def fa(evals) -> np.ndarray:
    """Fractional anisotropy, with negative eigenvalues clamped to zero."""
    if isinstance(evals, EigenSystem):
        evals = evals.evals
    lam = np.maximum(np.asarray(evals, dtype=np.float64), 0.0)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    # pairwise form: sum_i (l_i - mean)^2 == sum_{i<j} (l_i - l_j)^2 / 3, exact zero when isotropic
    num = (l1 - l2) ** 2 + (l1 - l3) ** 2 + (l2 - l3) ** 2
    den = np.sum(lam ** 2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(0.5 * num / np.where(den > 0, den, 1.0))
    return np.clip(np.where(den > 0, out, 0.0), 0.0, 1.0)


def md(evals) -> np.ndarray:
    """Mean diffusivity from eigenvalues clamped at zero."""
    if isinstance(evals, EigenSystem):
        evals = evals.evals
    return np.maximum(np.asarray(evals, dtype=np.float64), 0.0).mean(axis=-1)


def colormap_voxel(v1, fa_value) -> np.ndarray:
    """Direction-encoded color ``|v1| * FA`` (red = x, green = y, blue = z)."""
    return np.abs(np.asarray(v1, dtype=np.float64)) * np.asarray(fa_value, dtype=np.float64)[..., None]


def foreground_mask(b0_mean) -> np.ndarray:
    """Voxels whose mean b=0 signal exceeds 10% of the 99th percentile."""
    b0_mean = np.asarray(b0_mean, dtype=np.float64)
    ref = np.percentile(b0_mean, 99) if b0_mean.size else 0.0
    return b0_mean > MASK_FRACTION * ref


def compute_maps(dwi, scheme: GradientScheme | None = None, mask=None) -> DtiMaps:
    """Full conventional pipeline on a 4-D volume: fit, eigensystem and maps.

    ``dwi`` is either a :class:`superdti.phantom.DwiVolume` or a raw
    ``(X, Y, Z, n)`` array (then ``scheme`` is required).
    """
    data = getattr(dwi, "data", dwi)
    scheme = scheme if scheme is not None else dwi.scheme
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] != len(scheme):
        raise ValueError(f"volume has {data.shape[-1]} measurements, scheme has {len(scheme)}")
    if mask is None:
        b0 = data[..., scheme.b0_mask].mean(axis=-1) if scheme.n_b0 else data.max(axis=-1)
        mask = foreground_mask(b0)
    mask = np.asarray(mask, dtype=bool)
    spatial = data.shape[:-1]
    tensor = np.zeros(spatial + (6,))
    s0 = np.zeros(spatial)
    if np.any(mask):
        fit, valid = fit_tensor_lls(data[mask], scheme)
        idx = np.flatnonzero(mask)
        idx = idx[valid]
        tensor.reshape(-1, 6)[idx] = fit.tensor[valid]
        s0.reshape(-1)[idx] = fit.s0[valid]
        mask = mask.copy()
        mask.reshape(-1)[np.flatnonzero(mask)[~valid]] = False
    eigen = eig3_sym(tensor)
    fa_map = np.where(mask, fa(eigen.evals), 0.0)
    md_map = np.where(mask, md(eigen.evals), 0.0)
    color = colormap_voxel(eigen.v1, fa_map)
    return DtiMaps(fa_map, md_map, color, eigen, s0, mask, tensor)
