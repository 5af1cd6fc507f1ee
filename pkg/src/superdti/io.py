"""Readers and writers for volumes, gradient schemes, streamlines and checkpoints.

Byte layouts are documented in ``docs/formats.md``.  Every writer/reader
pair round-trips bit for bit; parse failures raise :class:`FormatError`
naming the offending byte offset or the expected and actual sizes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import network as nw
from .dti import GradientScheme
from .tractography import Streamline
from .training import TrainedModel

VOLUME_MAGIC = "SDTI"
VOLUME_VERSION = 1
STREAMLINE_MAGIC = b"SDST"
STREAMLINE_VERSION = 1
CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1
SEMANTICS = ("dwi", "fa", "md", "colormap", "tensor", "eigvec", "labels", "mask", "error")
BVEC_TOL = 1e-6
_RENORM_TOL = 1e-9


class FormatError(ValueError):
    """A file does not match its documented layout."""


# -- volumes ------------------------------------------------------------------

def _raw_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def write_volume(path, data, spacing=(1.0, 1.0, 1.0), semantics: str = "dwi",
                 divisor: float | None = None, extra: dict | None = None) -> Path:
    """Write ``data`` (``(X, Y, Z)`` or ``(X, Y, Z, C)``) as a JSON sidecar plus float32 raw file."""
    if semantics not in SEMANTICS:
        raise ValueError(f"unknown value semantics {semantics!r}; expected one of {SEMANTICS}")
    path = Path(path)
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"volume must be 3-D or 4-D, got shape {arr.shape}")
    header = {
        "magic": VOLUME_MAGIC, "version": VOLUME_VERSION,
        "dims": [int(d) for d in arr.shape[:3]], "channels": int(arr.shape[3]),
        "spacing": [float(s) for s in spacing], "semantics": semantics,
        "divisor": None if divisor is None else float(divisor),
        "dtype": "<f4", "order": "x-fastest", "data_file": _raw_path(path).name,
        "extra": extra or {},
    }
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    # x-fastest: x varies first, then y, z, channel
    flat = np.asarray(arr, dtype="<f4").transpose(3, 2, 1, 0).tobytes()
    _raw_path(path).write_bytes(flat)
    return path


def read_volume_header(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("magic") != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {header.get('magic') if isinstance(header, dict) else None!r}, "
                          f"expected {VOLUME_MAGIC!r}")
    if header.get("version") != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"{path}: dims must be three positive integers, got {dims!r}")
    if not isinstance(header.get("channels"), int) or header["channels"] < 1:
        raise FormatError(f"{path}: channels must be a positive integer")
    return header


def read_volume(path):
    """Return ``(data, header)``; ``data`` is float32 ``(X, Y, Z, C)``."""
    path = Path(path)
    header = read_volume_header(path)
    raw = path.parent / header.get("data_file", _raw_path(path).name)
    blob = raw.read_bytes()
    nx, ny, nz = header["dims"]
    nc = header["channels"]
    expected = nx * ny * nz * nc * 4
    if len(blob) != expected:
        raise FormatError(f"{raw}: expected {expected} bytes for dims {header['dims']} x {nc} channels "
                          f"of float32, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4").reshape(nc, nz, ny, nx).transpose(3, 2, 1, 0)
    return np.ascontiguousarray(data), header


# -- gradient schemes ---------------------------------------------------------

def write_scheme(bvals_path, bvecs_path, scheme: GradientScheme):
    """FSL layout: one line of b-values; three lines of x, y and z components."""
    fmt = lambda row: " ".join(repr(float(v)) for v in row) + "\n"
    Path(bvals_path).write_text(fmt(scheme.bvals))
    Path(bvecs_path).write_text("".join(fmt(scheme.bvecs[:, k]) for k in range(3)))


def read_scheme(bvals_path, bvecs_path, name: str = "") -> GradientScheme:
    """Parse an FSL bvals/bvecs pair.

    Directions with b > 0 must be unit length within 1e-6; ones off by more
    than 1e-9 are renormalised so downstream code sees exact unit vectors.
    """
    try:
        bvals = np.array([float(t) for t in Path(bvals_path).read_text().split()])
        rows = [ln.split() for ln in Path(bvecs_path).read_text().splitlines() if ln.strip()]
        if len(rows) != 3:
            raise FormatError(f"{bvecs_path}: expected 3 lines of components, found {len(rows)}")
        bvecs = np.array([[float(t) for t in r] for r in rows])
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"non-numeric entry in scheme files: {exc}") from exc
    counts = [len(bvals)] + [len(r) for r in bvecs]
    if len(set(counts)) != 1:
        raise FormatError(f"bvals/bvecs count mismatch: bvals {counts[0]}, bvecs lines {counts[1:]}")
    bvecs = bvecs.T.copy()
    weighted = bvals > 0
    norms = np.linalg.norm(bvecs, axis=1)
    bad = np.flatnonzero(weighted & (np.abs(norms - 1) > BVEC_TOL))
    if bad.size:
        raise FormatError(f"bvec column {int(bad[0])} has norm {norms[bad[0]]:.6g}; "
                          f"b>0 directions must be unit within {BVEC_TOL}")
    fix = weighted & (np.abs(norms - 1) > _RENORM_TOL)
    bvecs[fix] /= norms[fix, None]
    return GradientScheme(bvals, bvecs, name=name or Path(bvals_path).stem)


# -- streamlines --------------------------------------------------------------

_SL_HEADER = struct.Struct("<4sII3f")


def write_streamlines(path, streamlines, spacing=(1.0, 1.0, 1.0)):
    parts = [_SL_HEADER.pack(STREAMLINE_MAGIC, STREAMLINE_VERSION, len(streamlines), *map(float, spacing))]
    for sl in streamlines:
        pts = np.asarray(getattr(sl, "points", sl), dtype="<f4").reshape(-1, 3)
        parts.append(struct.pack("<I", pts.shape[0]))
        parts.append(pts.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_streamlines(path):
    """Return ``(streamlines, spacing)``; seeds and termination reasons are not stored."""
    blob = Path(path).read_bytes()
    if len(blob) < _SL_HEADER.size:
        raise FormatError(f"{path}: expected at least {_SL_HEADER.size} header bytes, found {len(blob)}")
    magic, version, count, *spacing = _SL_HEADER.unpack_from(blob, 0)
    if magic != STREAMLINE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected {STREAMLINE_MAGIC!r}")
    if version != STREAMLINE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = _SL_HEADER.size
    out = []
    for i in range(count):
        if off + 4 > len(blob):
            raise FormatError(f"{path}: streamline {i} point count missing at byte offset {off}")
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        need = n * 12
        if off + need > len(blob):
            raise FormatError(f"{path}: streamline {i} at byte offset {off} needs {need} bytes, "
                              f"{len(blob) - off} remain")
        pts = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off).reshape(n, 3).copy()
        off += need
        out.append(Streamline(pts, (), ("unknown", "unknown")))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after byte offset {off}")
    return out, tuple(spacing)


def streamlines_to_text(streamlines) -> str:
    """One streamline per line, ``x,y,z`` points separated by semicolons."""
    lines = []
    for sl in streamlines:
        pts = np.asarray(getattr(sl, "points", sl)).reshape(-1, 3)
        lines.append(";".join(",".join(f"{v:.6g}" for v in p) for p in pts))
    return "\n".join(lines) + ("\n" if lines else "")


# -- checkpoints --------------------------------------------------------------

_CK_HEADER = struct.Struct("<4sII")


def write_checkpoint(path, model: TrainedModel, extra: dict | None = None):
    """Magic, version, JSON metadata, then float64 weights and biases in layer order."""
    params = model.params
    meta = {
        "architecture": params.arch.to_dict(),
        "target": model.target, "target_divisor": model.target_divisor,
        "include_b0": model.include_b0, "patch_size": model.patch_size,
        "patch_stride": model.patch_stride, "meta": model.meta, "extra": extra or {},
    }
    text = json.dumps(meta, sort_keys=True).encode()
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)), text]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> TrainedModel:
    blob = Path(path).read_bytes()
    if len(blob) < _CK_HEADER.size:
        raise FormatError(f"{path}: expected at least {_CK_HEADER.size} header bytes, found {len(blob)}")
    magic, version, n = _CK_HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = _CK_HEADER.size
    try:
        meta = json.loads(blob[off:off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata at byte offset {off} is not valid JSON") from exc
    off += n
    arch = nw.ArchitectureSpec.from_dict(meta["architecture"])
    shapes = []
    for l, layer in enumerate(arch.layers, start=1):
        shapes.append((layer.out_channels, arch.channels_in(l), layer.kernel, layer.kernel))
    shapes += [(layer.out_channels,) for layer in arch.layers]
    expected = off + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for this architecture, found {len(blob)}")
    arrays = []
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=k, offset=off).reshape(s).astype(np.float64))
        off += 8 * k
    depth = arch.depth
    params = nw.NetworkParams(arch, arrays[:depth], arrays[depth:])
    return TrainedModel(params, meta["target"], meta["target_divisor"], meta["include_b0"],
                        meta["patch_size"], meta["patch_stride"], meta.get("meta", {}))
