"""Synthetic DTI phantoms: gradient schemes, tensor fields, DWI synthesis
and the corruptions used in the robustness experiments (Rician noise,
in-plane motion, FA-reducing lesions).

Geometry is expressed in voxel index coordinates (voxel centres sit on
integer positions).  A phantom specification is a plain JSON document::

    {
      "dims": [64, 64, 16], "spacing": [2.0, 2.0, 2.0], "seed": 0,
      "bias": 0.1,
      "regions": [
        {"label": 1, "shape": "cylinder",
         "params": {"center": [32, 32, 7.5], "axis": [0, 0, 1], "radius": 28},
         "evals": [0.8e-3, 0.8e-3, 0.8e-3], "orientation": "isotropic", "s0": 1.0},
        {"label": 2, "shape": "arc",
         "params": {"center": [32, 40, 7.5], "normal": [0, 0, 1], "radius": 16,
                    "tube_radius": 3, "angles": [200, 340]},
         "evals": [1.7e-3, 0.3e-3, 0.3e-3], "orientation": "tangent"}
      ],
      "lesions": [{"region": 3, "shape": "box",
                   "params": {"lo": [10, 10, 4], "hi": [14, 14, 8]}, "factor": 0.5}]
    }

Shapes are ``box`` (``lo``/``hi`` corners, inclusive), ``cylinder``
(``center``, ``axis``, ``radius``, optional ``half_length``) and ``arc``
(a torus section: ``center``, ``normal``, ``radius``, ``tube_radius``,
``angles`` in degrees measured from ``ref`` within the arc plane).
Orientation rules are ``isotropic``, ``axis`` (cylinder axis), ``tangent``
(arc tangent) or an explicit 3-vector.  An optional ``falloff`` in [0, 1]
scales the tensor's anisotropic part by ``1 - falloff * (r / R)**2`` with
``r / R`` the relative distance from a tube's centre line, so FA fades
toward the tube wall at constant MD.  An optional ``texture`` in [0, 1]
further scales it by ``1 - texture * u`` with ``u`` a smooth seeded random
field with uniform marginals on [0, 1], so FA also varies along a bundle.
``supersample`` (odd, default 1) averages tensors over sub-voxel samples
to give partial-volume boundaries.  Later regions overwrite
earlier ones.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .dti import GradientScheme, TensorField, eig3_sym, fa, foreground_mask, from_matrix, predict_signal

SHAPES = ("box", "cylinder", "arc")


@dataclass
class Region:
    label: int
    shape: str
    params: dict
    evals: tuple
    orientation: object = "isotropic"
    s0: float = 1.0
    falloff: float = 0.0
    texture: float = 0.0


TEXTURE_SIGMA = 1.5  # voxels


@dataclass
class Lesion:
    region: int
    shape: str
    params: dict
    factor: float = 0.5


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 16)
    spacing: tuple = (2.0, 2.0, 2.0)
    regions: list = field(default_factory=list)
    lesions: list = field(default_factory=list)
    seed: int = 0
    bias: float = 0.0
    supersample: int = 1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.regions = [r if isinstance(r, Region) else Region(**r) for r in self.regions]
        self.lesions = [l if isinstance(l, Lesion) else Lesion(**l) for l in self.lesions]

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"phantom needs at least 16 voxels per axis, got {self.dims}")
        if self.supersample < 1 or self.supersample % 2 == 0:
            raise ValueError("supersample must be a positive odd integer (labels are read at the centre)")
        labels = [r.label for r in self.regions]
        if len(set(labels)) != len(labels):
            raise ValueError("region labels must be unique")
        if any(l <= 0 for l in labels):
            raise ValueError("region labels must be positive (0 is air)")
        for r in self.regions:
            if r.shape not in SHAPES:
                raise ValueError(f"unknown shape {r.shape!r}")
            l1, l2, l3 = r.evals
            if not (l1 >= l2 >= l3 >= 0):
                raise ValueError(f"region {r.label}: eigenvalues must satisfy l1 >= l2 >= l3 >= 0")
        for les in self.lesions:
            if les.region not in labels:
                raise ValueError(f"lesion references unknown region {les.region}")
            if not 0 <= les.factor <= 1:
                raise ValueError("lesion factor must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class DwiVolume:
    """4-D signal ``(X, Y, Z, n_meas)`` with its acquisition scheme."""

    data: np.ndarray
    scheme: GradientScheme
    spacing: tuple = (2.0, 2.0, 2.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.shape[-1] != len(self.scheme):
            raise ValueError(
                f"volume has {self.data.shape[-1]} measurements, scheme has {len(self.scheme)}")

    def replace(self, data, **meta) -> "DwiVolume":
        return DwiVolume(data, self.scheme, self.spacing, {**self.meta, **meta})

    def select(self, indices) -> "DwiVolume":
        indices = np.asarray(indices)
        return DwiVolume(self.data[..., indices], self.scheme.subset(indices), self.spacing,
                         dict(self.meta))


@dataclass
class Phantom:
    field: TensorField
    labels: np.ndarray
    fa: np.ndarray
    md: np.ndarray
    v1: np.ndarray
    lesion_mask: np.ndarray
    spacing: tuple

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    @property
    def color(self) -> np.ndarray:
        return np.abs(self.v1) * self.fa[..., None]


# -- gradient schemes ---------------------------------------------------------

def repulsion_energy(dirs) -> float:
    """Antipodally symmetric electrostatic energy of a set of unit vectors."""
    g = np.asarray(dirs, dtype=np.float64)
    iu = np.triu_indices(len(g), 1)
    minus = np.linalg.norm(g[:, None] - g[None], axis=-1)[iu]
    plus = np.linalg.norm(g[:, None] + g[None], axis=-1)[iu]
    return float(np.sum(1 / minus) + np.sum(1 / plus))


def _repulsion_grad(g):
    d_minus = g[:, None] - g[None]
    d_plus = g[:, None] + g[None]
    r_minus = np.linalg.norm(d_minus, axis=-1)
    r_plus = np.linalg.norm(d_plus, axis=-1)
    np.fill_diagonal(r_minus, np.inf)
    np.fill_diagonal(r_plus, np.inf)
    return -(np.sum(d_minus / r_minus[..., None] ** 3, axis=1)
             + np.sum(d_plus / r_plus[..., None] ** 3, axis=1))


def optimize_directions(m: int, seed: int = 0, iterations: int = 2000,
                        step: float = 0.1, decay: float = 0.999):
    """Minimise the repulsion energy of ``m`` directions on the sphere.

    Projected gradient descent with a decaying step; a step that would raise
    the energy is rejected and the step halved, so the returned energy trace
    is non-increasing.
    """
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(m, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    energy = repulsion_energy(g)
    trace = [energy]
    scale = step / max(m, 1)
    for _ in range(iterations):
        grad = _repulsion_grad(g)
        grad -= np.sum(grad * g, axis=1, keepdims=True) * g
        cand = g - scale * grad
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        e = repulsion_energy(cand)
        if e <= energy:
            g, energy = cand, e
            scale *= decay
        else:
            scale *= 0.5
        trace.append(energy)
    # canonical hemisphere: first non-zero component positive
    for i in range(m):
        nz = np.flatnonzero(np.abs(g[i]) > 1e-12)
        if len(nz) and g[i, nz[0]] < 0:
            g[i] = -g[i]
    return g, np.array(trace)


def generate_scheme(m: int, b: float = 1000.0, n_b0: int = 1, seed: int = 0,
                    iterations: int = 2000) -> GradientScheme:
    """Single-shell scheme: ``n_b0`` b=0 entries followed by ``m`` repulsion-optimised directions."""
    if m < 6:
        raise ValueError(f"a tensor scheme needs at least 6 directions, got {m}")
    if n_b0 < 1:
        raise ValueError("at least one b=0 measurement is required")
    dirs, _ = optimize_directions(m, seed=seed, iterations=iterations)
    bvals = np.concatenate([np.zeros(n_b0), np.full(m, float(b))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return GradientScheme(bvals, bvecs, name=f"shell-{m}-b{int(b)}-s{seed}")


def random_scheme(m: int, b: float = 1000.0, n_b0: int = 1, seed: int = 0) -> GradientScheme:
    """Uniformly random directions; the baseline the optimised schemes beat."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(m, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GradientScheme(np.concatenate([np.zeros(n_b0), np.full(m, float(b))]),
                          np.concatenate([np.zeros((n_b0, 3)), dirs]), name=f"random-{m}-s{seed}")


# -- geometry -----------------------------------------------------------------

def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims],
                                indexing="ij"), axis=-1)


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _perpendicular(v):
    v = _normalize(v)
    trial = np.eye(3)[np.argmin(np.abs(v))]
    u = trial - np.dot(trial, v) * v
    return u / np.linalg.norm(u)


def _arc_frame(params):
    n = _normalize(params.get("normal", (0, 0, 1)))
    ref = params.get("ref")
    u = _perpendicular(n) if ref is None else _normalize(np.asarray(ref) - np.dot(ref, n) * n)
    w = np.cross(n, u)
    return n, u, w


def shape_mask(shape: str, params: dict, pts: np.ndarray) -> np.ndarray:
    if shape == "box":
        lo = np.asarray(params["lo"], dtype=np.float64)
        hi = np.asarray(params["hi"], dtype=np.float64)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)
    if shape == "cylinder":
        c = np.asarray(params["center"], dtype=np.float64)
        a = _normalize(params.get("axis", (0, 0, 1)))
        d = pts - c
        h = d @ a
        radial = d - h[..., None] * a
        inside = np.sum(radial ** 2, axis=-1) <= params["radius"] ** 2
        half = params.get("half_length")
        if half is not None:
            inside &= np.abs(h) <= half
        return inside
    if shape == "arc":
        c = np.asarray(params["center"], dtype=np.float64)
        n, u, w = _arc_frame(params)
        d = pts - c
        h = d @ n
        x, y = d @ u, d @ w
        rho = np.hypot(x, y)
        inside = (rho - params["radius"]) ** 2 + h ** 2 <= params["tube_radius"] ** 2
        a0, a1 = params.get("angles", (0.0, 360.0))
        ang = np.degrees(np.arctan2(y, x)) % 360.0
        span = (a1 - a0) % 360.0 or 360.0
        inside &= ((ang - a0) % 360.0) <= span
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def radial_fraction(shape: str, params: dict, pts: np.ndarray) -> np.ndarray:
    """Distance from a tube's centre line relative to its radius (0 for boxes)."""
    if shape == "cylinder":
        c = np.asarray(params["center"], dtype=np.float64)
        a = _normalize(params.get("axis", (0, 0, 1)))
        d = pts - c
        radial = d - (d @ a)[..., None] * a
        return np.linalg.norm(radial, axis=-1) / params["radius"]
    if shape == "arc":
        c = np.asarray(params["center"], dtype=np.float64)
        n, u, w = _arc_frame(params)
        d = pts - c
        rho = np.hypot(d @ u, d @ w)
        return np.hypot(rho - params["radius"], d @ n) / params["tube_radius"]
    return np.zeros(pts.shape[:-1])


def arc_tangent(params: dict, pts: np.ndarray) -> np.ndarray:
    """Unit tangent of the arc's circle through each point's projection."""
    c = np.asarray(params["center"], dtype=np.float64)
    n, u, w = _arc_frame(params)
    d = pts - c
    radial = d - (d @ n)[..., None] * n
    norm = np.linalg.norm(radial, axis=-1, keepdims=True)
    radial = radial / np.where(norm > 0, norm, 1.0)
    return np.cross(n, radial)


def _tensor_from_frame(evals, v1, v3):
    l1, l2, l3 = (np.asarray(e, dtype=np.float64)[..., None, None] for e in evals)
    outer = lambda v: v[..., :, None] * v[..., None, :]
    mat = l2 * np.eye(3) + (l1 - l2) * outer(v1) + (l3 - l2) * outer(v3)
    return from_matrix(mat)


def _orientation(region: Region, pts):
    rule = region.orientation
    n = pts.shape[0]
    if isinstance(rule, str):
        if rule == "isotropic":
            v1 = np.broadcast_to([1.0, 0.0, 0.0], (n, 3)).copy()
            return v1, np.broadcast_to(_perpendicular(v1[0]), (n, 3)).copy()
        if rule == "axis":
            a = _normalize(region.params.get("axis", (0, 0, 1)))
            return np.broadcast_to(a, (n, 3)).copy(), np.broadcast_to(_perpendicular(a), (n, 3)).copy()
        if rule == "tangent":
            if region.shape != "arc":
                raise ValueError("'tangent' orientation requires an arc region")
            nrm, _, _ = _arc_frame(region.params)
            return arc_tangent(region.params, pts), np.broadcast_to(nrm, (n, 3)).copy()
        raise ValueError(f"unknown orientation rule {rule!r}")
    a = _normalize(rule)
    return np.broadcast_to(a, (n, 3)).copy(), np.broadcast_to(_perpendicular(a), (n, 3)).copy()


def lesion_alpha(tensor, factor):
    """Deviatoric scale that multiplies a tensor's FA by ``factor`` at fixed MD.

    Writing ``D' = m I + alpha (D - m I)``, FA'^2 = 1.5 a^2 s^2 / (3 m^2 + a^2 s^2)
    with ``s = ||D - m I||_F``; solving for FA' = factor * FA gives alpha.
    """
    mat = np.asarray(tensor, dtype=np.float64)
    m = (mat[..., 0] + mat[..., 1] + mat[..., 2]) / 3
    s2 = ((mat[..., 0] - m) ** 2 + (mat[..., 1] - m) ** 2 + (mat[..., 2] - m) ** 2
          + 2 * (mat[..., 3] ** 2 + mat[..., 4] ** 2 + mat[..., 5] ** 2))
    norm2 = 3 * m ** 2 + s2
    fa2 = np.where(norm2 > 0, 1.5 * s2 / np.where(norm2 > 0, norm2, 1.0), 0.0)
    target2 = factor ** 2 * fa2
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.sqrt(3 * m ** 2 * target2 / (s2 * (1.5 - target2)))
    return np.where(s2 > 0, alpha, 1.0)


def inject_lesion(field: TensorField, mask, factor: float) -> TensorField:
    """Shrink eigenvalues toward their mean inside ``mask`` so FA drops by ``factor``.

    Eigenvectors and mean diffusivity are preserved.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != field.shape:
        raise ValueError("lesion mask does not match the tensor grid")
    if factor == 1.0 or not np.any(mask):
        return TensorField(field.tensor.copy(), field.s0.copy())
    t = field.tensor.copy()
    sel = t[mask]
    m = sel[:, :3].mean(axis=1, keepdims=True)
    alpha = lesion_alpha(sel, factor)[:, None]
    iso = np.concatenate([np.repeat(m, 3, axis=1), np.zeros((len(sel), 3))], axis=1)
    t[mask] = iso + alpha * (sel - iso)
    return TensorField(t, field.s0.copy())


def _standardise(x):
    return (x - x.mean()) / max(x.std(), 1e-300)


def smooth_field(dims, seed, sigma: float = TEXTURE_SIGMA) -> np.ndarray:
    """Gaussian-filtered white noise on the grid, deterministic in ``seed``."""
    noise = np.random.default_rng(seed).normal(size=dims)
    return ndimage.gaussian_filter(noise, sigma, mode="wrap")


def _rasterise(spec: PhantomSpec, pts: np.ndarray, texture: dict):
    """Tensor, S0, label and principal direction at each point (one point per voxel)."""
    n = pts.shape[0]
    tensor = np.zeros((n, 6))
    s0 = np.zeros(n)
    labels = np.zeros(n, dtype=np.int32)
    evals = np.zeros((n, 3))
    v1 = np.zeros((n, 3))
    for region in spec.regions:
        inside = shape_mask(region.shape, region.params, pts)
        if not np.any(inside):
            continue
        a, c = _orientation(region, pts[inside])
        lam = np.broadcast_to(np.asarray(region.evals, dtype=np.float64), (len(a), 3))
        if region.falloff:
            # MD-preserving anisotropy loss toward the tube wall
            r = np.clip(radial_fraction(region.shape, region.params, pts[inside]), 0.0, 1.0)
            mean = lam.mean(axis=1, keepdims=True)
            lam = mean + (1.0 - region.falloff * r ** 2)[:, None] * (lam - mean)
        if region.texture:
            u = texture[region.label][inside]
            mean = lam.mean(axis=1, keepdims=True)
            lam = mean + (1.0 - region.texture * u)[:, None] * (lam - mean)
        tensor[inside] = _tensor_from_frame(lam.T, a, c)
        s0[inside] = region.s0
        labels[inside] = region.label
        evals[inside] = lam
        v1[inside] = a if region.orientation != "isotropic" else 0.0
    return tensor, s0, labels, evals, v1


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Rasterise a phantom spec into tensors, labels and analytic maps.

    With ``spec.supersample = n > 1`` each voxel's tensor and S0 are the
    mean over an ``n x n x n`` grid of sub-voxel samples, so voxels on a
    region boundary carry partial-volume mixtures.  Tensors are averaged
    over tissue samples only and S0 over all of them, so an air fraction
    dims the signal.  Labels are taken at the voxel centre and voxels with
    an air centre stay empty; FA, MD and the principal direction come from
    the eigensystem of the averaged tensor.
    """
    spec.validate()
    dims = spec.dims
    centres = _grid(dims).reshape(-1, 3)
    # texture values in [0, 1] with uniform marginals, fixed per voxel
    texture = {r.label: special.ndtr(_standardise(smooth_field(dims, (spec.seed, r.label)))).reshape(-1)
               for r in spec.regions if r.texture}
    n_sub = int(spec.supersample)
    if n_sub == 1:
        tensor, s0, labels, evals, v1 = _rasterise(spec, centres, texture)
    else:
        offsets = (np.arange(n_sub) + 0.5) / n_sub - 0.5
        tensor = np.zeros((centres.shape[0], 6))
        s0 = np.zeros(centres.shape[0])
        count = np.zeros(centres.shape[0])
        for d in np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), -1).reshape(-1, 3):
            t, s, lab, *_ = _rasterise(spec, centres + d, texture)
            tensor += t
            s0 += s
            count += lab > 0
        # air has no tensor: average diffusion over tissue samples only, while
        # the air fraction still scales the signal through S0
        _, _, labels, _, _ = _rasterise(spec, centres, texture)
        tissue = labels > 0
        tensor = np.where(tissue[:, None], tensor / np.maximum(count, 1)[:, None], 0.0)
        s0 = np.where(tissue, s0 / n_sub ** 3, 0.0)
        eig = eig3_sym(tensor)
        evals = eig.evals
        v1 = np.where((fa(evals) > 1e-9)[:, None], eig.v1, 0.0)
    if spec.bias:
        rng = np.random.default_rng(spec.seed)
        coef = rng.uniform(-1, 1, size=3)
        centred = (centres - (np.asarray(dims) - 1) / 2) / (np.asarray(dims) / 2)
        s0 *= 1.0 + spec.bias * (centred @ coef) / np.sum(np.abs(coef))
    field_ = TensorField(tensor.reshape(dims + (6,)), s0.reshape(dims))
    labels = labels.reshape(dims)
    lesion_mask = np.zeros(dims, dtype=bool)
    evals = evals.reshape(dims + (3,))
    for les in spec.lesions:
        inside = shape_mask(les.shape, les.params, centres).reshape(dims) & (labels == les.region)
        field_ = inject_lesion(field_, inside, les.factor)
        lam = evals[inside]
        mean = lam.mean(axis=1, keepdims=True)
        diag = np.concatenate([lam, np.zeros_like(lam)], axis=1)
        evals[inside] = mean + lesion_alpha(diag, les.factor)[:, None] * (lam - mean)
        lesion_mask |= inside
    return Phantom(field_, labels, fa(evals), evals.mean(axis=-1) * (labels > 0),
                   v1.reshape(dims + (3,)), lesion_mask, spec.spacing)


def default_phantom_spec(dims=(64, 64, 16), seed: int = 0, jitter: bool = True,
                         lesion_factor: float | None = None,
                         spacing=(2.0, 2.0, 2.0), falloff: bool = True,
                         texture: bool = True, supersample: int = 3) -> PhantomSpec:
    """Desk-scale brain-like phantom with three bundles.

    Isotropic tissue inside a cylindrical head, a CSF-like ventricle, an
    axial arc bundle (CC-like, label 3), a vertical bundle (CST-like,
    label 4) and an anterior-posterior bundle (SLF-like, label 5).  With
    ``jitter`` the geometry and eigenvalues vary with ``seed`` so that
    different seeds act as different subjects.  Bundles carry a radial FA
    falloff and a smooth FA texture, so FA takes a continuum of values
    rather than one value per bundle, and boundaries are partial-volume
    averaged over ``supersample**3`` sub-voxel samples.
    """
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    j = (lambda lo, hi: rng.uniform(lo, hi)) if jitter else (lambda lo, hi: (lo + hi) / 2)
    sx, sy = nx / 64, ny / 64
    zc = (nz - 1) / 2
    brain_d = j(0.7e-3, 0.9e-3)
    wm = lambda: (j(1.5e-3, 1.9e-3), j(0.25e-3, 0.45e-3), j(0.2e-3, 0.35e-3))

    def sorted_evals(t):
        return tuple(sorted(t, reverse=True))

    regions = [
        dict(label=1, shape="cylinder",
             params=dict(center=[(nx - 1) / 2, (ny - 1) / 2, zc], axis=[0, 0, 1],
                         radius=0.46 * min(nx, ny)),
             evals=(brain_d,) * 3, orientation="isotropic", s0=1.0),
        dict(label=2, shape="box",
             params=dict(lo=[nx / 2 - j(3, 5) * sx, ny / 2 - j(7, 10) * sy, 0],
                         hi=[nx / 2 + j(3, 5) * sx, ny / 2 - j(1, 3) * sy, nz]),
             evals=(3.0e-3,) * 3, orientation="isotropic", s0=1.4),
        dict(label=3, shape="arc",
             params=dict(center=[(nx - 1) / 2 + j(-2, 2) * sx, ny / 2 + j(2, 6) * sy, zc],
                         normal=[0, 0, 1], ref=[1, 0, 0], radius=j(14, 18) * min(sx, sy),
                         tube_radius=j(2.5, 3.5) * min(sx, sy), angles=[200, 340]),
             evals=sorted_evals(wm()), orientation="tangent", s0=0.8, falloff=j(0.3, 0.5),
             texture=j(0.4, 0.7)),
        dict(label=4, shape="cylinder",
             params=dict(center=[j(14, 18) * sx, j(22, 28) * sy, zc], axis=[0, 0, 1],
                         radius=j(2.5, 3.5) * min(sx, sy)),
             evals=sorted_evals(wm()), orientation="axis", s0=0.8, falloff=j(0.3, 0.5),
             texture=j(0.4, 0.7)),
        dict(label=5, shape="cylinder",
             params=dict(center=[j(46, 50) * sx, (ny - 1) / 2 + j(-3, 3) * sy, zc],
                         axis=[0, 1, 0], radius=j(2.5, 3.5) * min(sx, sy),
                         half_length=j(16, 20) * sy),
             evals=sorted_evals(wm()), orientation="axis", s0=0.8, falloff=j(0.3, 0.5),
             texture=j(0.4, 0.7)),
    ]
    lesions = []
    if lesion_factor is not None:
        c = regions[4]["params"]["center"]
        lesions.append(dict(region=5, shape="box",
                            params=dict(lo=[c[0] - 4, c[1] - 3, 0], hi=[c[0] + 4, c[1] + 3, nz]),
                            factor=lesion_factor))
    for flag, key in ((falloff, "falloff"), (texture, "texture")):
        if not flag:
            for r in regions:
                r.pop(key, None)
    return PhantomSpec(dims=dims, spacing=spacing, regions=regions, lesions=lesions,
                       seed=seed, bias=0.1 if jitter else 0.0, supersample=supersample)


# -- acquisition --------------------------------------------------------------

def synthesize_dwi(field: TensorField, scheme: GradientScheme, s0=None,
                   spacing=(2.0, 2.0, 2.0)) -> DwiVolume:
    """Noiseless DWIs from a tensor field (``s0`` overrides the field's S0)."""
    if not np.all(np.isfinite(field.tensor)):
        raise ValueError("tensor field contains non-finite values")
    base = field.s0 if s0 is None else np.broadcast_to(np.asarray(s0, dtype=np.float64), field.shape)
    data = predict_signal(field.tensor, scheme, base)
    return DwiVolume(data, scheme, tuple(spacing), {"scheme": scheme.name})


def add_rician_noise(dwi: DwiVolume, snr_db: float, seed: int = 0) -> DwiVolume:
    """Magnitude (Rician) noise with ``sigma = S_ref / 10**(snr_db / 20)``.

    ``S_ref`` is the mean b=0 signal over the foreground mask; both values
    are recorded in the returned volume's ``meta``.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return dwi.replace(dwi.data.copy(), snr_db=float("inf"), sigma=0.0)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    scheme = dwi.scheme
    b0 = dwi.data[..., scheme.b0_mask].mean(axis=-1) if scheme.n_b0 else dwi.data.max(axis=-1)
    fg = foreground_mask(b0)
    s_ref = float(b0[fg].mean()) if np.any(fg) else float(b0.max())
    sigma = s_ref / 10 ** (snr_db / 20)
    rng = np.random.default_rng(seed)
    n1 = rng.normal(0.0, sigma, size=dwi.data.shape)
    n2 = rng.normal(0.0, sigma, size=dwi.data.shape)
    noisy = np.sqrt((dwi.data + n1) ** 2 + n2 ** 2)
    return dwi.replace(noisy, snr_db=float(snr_db), sigma=sigma, s_ref=s_ref,
                       snr_reference="mean foreground b0")


def rigid_inplane(image2d, shift=(0.0, 0.0), rotation_deg=0.0):
    """Rotate about the slice centre then translate; bilinear, zero fill."""
    img = np.asarray(image2d, dtype=np.float64)
    th = np.radians(rotation_deg)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    c = (np.asarray(img.shape, dtype=np.float64) - 1) / 2
    t = np.asarray(shift, dtype=np.float64)
    # output o samples input at R^T (o - c - t) + c
    Rinv = R.T
    offset = c - Rinv @ (c + t)
    return ndimage.affine_transform(img, Rinv, offset=offset, order=1, mode="constant", cval=0.0)


def apply_motion(dwi: DwiVolume, indices, shift=(1.0, 0.0), rotation_deg=0.0) -> DwiVolume:
    """Rigid in-plane motion applied slice-wise to the listed weighted volumes."""
    indices = [int(i) for i in np.atleast_1d(indices)]
    n = dwi.data.shape[-1]
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"volume index {i} out of range for {n} measurements")
        if dwi.scheme.bvals[i] == 0:
            raise ValueError(f"volume {i} is a b=0 image; motion applies to weighted volumes")
    out = dwi.data.copy()
    for i in indices:
        for z in range(out.shape[2]):
            out[:, :, z, i] = rigid_inplane(dwi.data[:, :, z, i], shift, rotation_deg)
    np.maximum(out, 0.0, out=out)
    return dwi.replace(out, motion=dict(indices=indices, shift=list(map(float, shift)),
                                        rotation_deg=float(rotation_deg)))
