"""Patch-based training and slice-wise inference for DWI -> map regression."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network as nw

log = logging.getLogger(__name__)

TARGET_KINDS = ("fa", "md", "colormap")
OVERLAP = 0.66


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    """Optimisation and data settings.

    ``lr_schedule`` is a list of ``(last_epoch, lr)`` pairs; epoch ``e``
    (1-based) uses the first entry with ``e <= last_epoch`` and the final
    entry beyond that.
    """

    epochs: int = 100
    lr_schedule: list = field(default_factory=lambda: [(80, 2e-4), (100, 1e-4)])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 32
    patch_size: int = 21
    overlap: float = OVERLAP
    augment: bool = True
    seed: int = 0
    target: str = "fa"
    width: int = 64
    depth: int = 10
    include_b0: bool = True
    patches_per_epoch: int | None = None
    val_patches: int | None = 512
    model: str = "superdti"

    def __post_init__(self):
        self.lr_schedule = [tuple(e) for e in self.lr_schedule]
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.target not in TARGET_KINDS:
            raise ValueError(f"target must be one of {TARGET_KINDS}")
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch size and batch size must be positive")

    @property
    def patch_stride(self) -> int:
        return max(1, int(round(self.patch_size * (1 - self.overlap))))

    def lr(self, epoch: int) -> float:
        for last, rate in self.lr_schedule:
            if epoch <= last:
                return rate
        return self.lr_schedule[-1][1]

    def to_dict(self) -> dict:
        return asdict(self)


# -- data preparation ---------------------------------------------------------

def make_inputs(dwi, include_b0: bool = True) -> np.ndarray:
    """Channel stack ``(X, Y, Z, C)``: mean b=0 image (optional) then the weighted DWIs."""
    data = np.asarray(dwi.data, dtype=np.float64)
    scheme = dwi.scheme
    weighted = data[..., ~scheme.b0_mask]
    if include_b0:
        if not scheme.n_b0:
            raise ValueError("include_b0 requested but the scheme has no b=0 images")
        b0 = data[..., scheme.b0_mask].mean(axis=-1, keepdims=True)
        return np.concatenate([b0, weighted], axis=-1)
    return weighted


@dataclass
class NormalizedSubject:
    inputs: np.ndarray
    target: np.ndarray | None
    input_divisor: float
    target_divisor: float
    mask: np.ndarray | None = None

    def denormalize_target(self, values):
        return np.asarray(values) * self.target_divisor


def normalize_subject(inputs, target=None, kind: str = "fa", target_divisor: float | None = None,
                      mask=None) -> NormalizedSubject:
    """Divide a subject's DWI stack by its own maximum.

    FA targets are left as-is.  MD and colormap targets are divided by
    ``target_divisor`` (default: this subject's target maximum); the divisor
    is kept so predictions can be mapped back.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    peak = float(np.max(inputs)) if inputs.size else 0.0
    if not peak > 0:
        raise ValueError("subject has no positive intensity to normalise by")
    t = None
    if kind == "fa":
        target_divisor = 1.0
    if target is not None:
        target = np.asarray(target, dtype=np.float64)
        if target_divisor is None:
            target_divisor = float(np.max(target)) or 1.0
        t = target / target_divisor
    return NormalizedSubject(inputs / peak, t, peak,
                             1.0 if target_divisor is None else float(target_divisor), mask)


def patch_starts(n: int, patch: int, stride: int) -> list:
    """Top-left offsets along one axis, with a final edge-anchored patch."""
    if n < patch:
        raise ValueError(f"axis of length {n} is smaller than the patch size {patch}")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


@dataclass
class PatchSet:
    inputs: np.ndarray
    targets: np.ndarray
    slice_ids: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.inputs[idx], self.targets[idx], self.slice_ids[idx], self.origins[idx])

    @classmethod
    def concat(cls, sets) -> "PatchSet":
        sets = list(sets)
        return cls(np.concatenate([s.inputs for s in sets]), np.concatenate([s.targets for s in sets]),
                   np.concatenate([s.slice_ids for s in sets]), np.concatenate([s.origins for s in sets]))


def _channels_first(vol):
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 3:
        vol = vol[..., None]
    return vol


def extract_patches(inputs, targets=None, patch: int = 21, stride: int = 7,
                    subject_id: int = 0) -> PatchSet:
    """Tile every axial slice of ``(X, Y, Z[, C])`` volumes with square patches."""
    x = _channels_first(inputs)
    y = _channels_first(targets) if targets is not None else np.zeros(x.shape[:3] + (0,))
    nx, ny, nz, _ = x.shape
    xs, ys = patch_starts(nx, patch, stride), patch_starts(ny, patch, stride)
    pin, pout, ids, origins = [], [], [], []
    for z in range(nz):
        for i in xs:
            for j in ys:
                pin.append(np.moveaxis(x[i:i + patch, j:j + patch, z], -1, 0))
                pout.append(np.moveaxis(y[i:i + patch, j:j + patch, z], -1, 0))
                ids.append((subject_id, z))
                origins.append((i, j))
    return PatchSet(np.stack(pin), np.stack(pout), np.array(ids, dtype=np.int64).reshape(-1, 2),
                    np.array(origins, dtype=np.int64).reshape(-1, 2))


def transform_patch(arr, k: int, flip: bool, rotate_vectors: bool = False):
    """Rotate ``(..., C, H, W)`` by ``k`` quarter turns, then optionally flip left-right.

    With ``rotate_vectors`` a 3-channel |direction| map also swaps its x/y
    channels on odd quarter turns.
    """
    out = np.rot90(arr, k, axes=(-2, -1))
    if flip:
        out = out[..., :, ::-1]
    if rotate_vectors and k % 2 == 1 and out.shape[-3] == 3:
        out = out[..., [1, 0, 2], :, :]
    return np.ascontiguousarray(out)


VARIANTS = [(k, f) for f in (False, True) for k in range(4)]


def augment(patches: PatchSet, rotate_vectors: bool = False) -> PatchSet:
    """All 8 rotation/flip variants of every pair, applied identically to input and target.

    Channel permutation of direction targets is off by default: the input
    DWIs keep their gradient directions under this relocation, so each
    voxel's tensor, and therefore its |v1| colour, is unchanged.
    """
    if patches.inputs.shape[-1] != patches.inputs.shape[-2]:
        raise ValueError("augmentation requires square patches")
    ins, outs = [], []
    for k, f in VARIANTS:
        ins.append(transform_patch(patches.inputs, k, f))
        outs.append(transform_patch(patches.targets, k, f, rotate_vectors))
    n = len(VARIANTS)
    return PatchSet(np.concatenate(ins), np.concatenate(outs),
                    np.tile(patches.slice_ids, (n, 1)), np.tile(patches.origins, (n, 1)))


# -- training -----------------------------------------------------------------

@dataclass
class TrainedModel:
    """Network parameters plus everything needed to apply them to a new subject."""

    params: nw.NetworkParams
    target: str = "fa"
    target_divisor: float = 1.0
    include_b0: bool = True
    patch_size: int = 21
    patch_stride: int = 7
    meta: dict = field(default_factory=dict)

    def predict(self, dwi, mask=None) -> np.ndarray:
        norm = normalize_subject(make_inputs(dwi, self.include_b0))
        out = infer_map(self.params, norm.inputs, self.patch_size, self.patch_stride)
        return finalize_map(out * self.target_divisor, self.target, mask)


@dataclass
class TrainResult:
    model: TrainedModel
    curve: list
    best_epoch: int
    initial_train_loss: float

    @property
    def params(self) -> nw.NetworkParams:
        return self.model.params

    def curve_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{e},{tr!r},{va!r}" for e, tr, va in self.curve]
        return "\n".join(rows) + "\n"


@dataclass
class Subject:
    """One phantom 'subject': the acquisition the network sees and its reference map."""

    dwi: object
    target: np.ndarray
    mask: np.ndarray | None = None


def split_subjects(subjects, ratio=(4, 1)):
    """Subject-level train/validation split (first subjects train)."""
    subjects = list(subjects)
    n_val = max(1, int(round(len(subjects) * ratio[1] / sum(ratio))))
    if len(subjects) - n_val < 1:
        raise ValueError("need at least two subjects for a train/validation split")
    return subjects[:-n_val], subjects[-n_val:]


def build_architecture(config: TrainConfig, in_channels: int, out_channels: int):
    if config.model == "mlp":
        return nw.mlp_architecture(in_channels, out_channels)
    return nw.superdti_architecture(in_channels, out_channels, width=config.width, depth=config.depth)


def _prepare(subjects, config, target_divisor, patch, stride):
    sets = []
    for sid, subj in enumerate(subjects):
        norm = normalize_subject(make_inputs(subj.dwi, config.include_b0), subj.target,
                                 config.target, target_divisor)
        sets.append(extract_patches(norm.inputs, norm.target, patch, stride, subject_id=sid))
    return PatchSet.concat(sets)


def step_schedule(epochs: int, lr: float) -> list:
    """Full rate for 60% of epochs, half to 85%, a quarter after that."""
    e = int(epochs)
    return [(max(1, e * 3 // 5), lr), (max(1, e * 17 // 20), lr / 2), (e, lr / 4)]


def target_divisor_for(subjects, kind: str) -> float:
    if kind == "fa":
        return 1.0
    return float(max(np.max(s.target) for s in subjects)) or 1.0


def train(train_subjects, val_subjects, config: TrainConfig, arch: nw.ArchitectureSpec | None = None,
          init: nw.NetworkParams | None = None) -> TrainResult:
    """ADAM training on overlapping patches; keeps the lowest-validation-loss parameters."""
    patch, stride = config.patch_size, config.patch_stride
    divisor = target_divisor_for(train_subjects, config.target)
    train_set = _prepare(train_subjects, config, divisor, patch, stride)
    val_set = _prepare(val_subjects, config, divisor, patch, stride)
    if config.val_patches is not None and len(val_set) > config.val_patches:
        pick = np.random.default_rng(config.seed + 1).choice(len(val_set), config.val_patches, replace=False)
        val_set = val_set.subset(np.sort(pick))
    in_ch, out_ch = train_set.inputs.shape[1], train_set.targets.shape[1]
    if arch is None:
        arch = build_architecture(config, in_ch, out_ch)
    params = init.copy() if init is not None else nw.init_params(arch, seed=config.seed)
    return fit_patches(params, train_set, val_set, config, divisor)


def _evaluate(params, patches: PatchSet, batch: int) -> float:
    total, n = 0.0, len(patches)
    for s in range(0, n, batch):
        pred = nw.forward(params, patches.inputs[s:s + batch])
        total += nw.loss(pred, patches.targets[s:s + batch]) * min(batch, n - s)
    return total / n


def fit_patches(params: nw.NetworkParams, train_set: PatchSet, val_set: PatchSet,
                config: TrainConfig, target_divisor: float = 1.0) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    state = nw.AdamState.zeros_like(params)
    variants = VARIANTS if (config.augment and config.patch_size > 1) else VARIANTS[:1]
    n_virtual = len(train_set) * len(variants)
    per_epoch = n_virtual if config.patches_per_epoch is None else min(config.patches_per_epoch, n_virtual)
    initial = _evaluate(params, train_set, config.batch_size)
    best_val, best_params, best_epoch = np.inf, params.copy(), 0
    curve = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr(epoch)
        order = rng.permutation(n_virtual)[:per_epoch]
        running, seen = 0.0, 0
        for s in range(0, per_epoch, config.batch_size):
            idx = order[s:s + config.batch_size]
            pidx, vidx = idx % len(train_set), idx // len(train_set)
            xb = np.empty((len(idx),) + train_set.inputs.shape[1:])
            yb = np.empty((len(idx),) + train_set.targets.shape[1:])
            for b, (p, v) in enumerate(zip(pidx, vidx)):
                k, f = variants[v]
                xb[b] = transform_patch(train_set.inputs[p], k, f)
                yb[b] = transform_patch(train_set.targets[p], k, f)
            # overflow is reported as TrainingDiverged below rather than as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                value, gw, gb = nw.backward(params, xb, yb)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {s // config.batch_size}")
                params, state = nw.adam_step(params, (gw, gb), state, lr, config.beta1, config.beta2,
                                             config.eps, config.weight_decay)
            running += value * len(idx)
            seen += len(idx)
        train_loss = running / seen
        with np.errstate(over="ignore", invalid="ignore"):
            val_loss = _evaluate(params, val_set, config.batch_size)
        if not (np.isfinite(val_loss) and params.all_finite()):
            raise TrainingDiverged(f"non-finite validation loss or parameters at epoch {epoch}")
        curve.append((epoch, float(train_loss), float(val_loss)))
        log.info("epoch %d lr %.2e train %.5g val %.5g", epoch, lr, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_params, best_epoch = val_loss, params.copy(), epoch
    model = TrainedModel(best_params, config.target, target_divisor, config.include_b0,
                         config.patch_size, config.patch_stride,
                         meta={"best_epoch": best_epoch, "seed": config.seed, "model": config.model})
    return TrainResult(model, curve, best_epoch, float(initial))


# -- inference ----------------------------------------------------------------

def infer_map(params: nw.NetworkParams, inputs, patch: int = 21, stride: int = 7,
              batch: int = 64) -> np.ndarray:
    """Slice-wise patch inference; overlapping predictions are averaged uniformly.

    ``inputs`` is a normalised ``(X, Y, Z, C)`` stack; returns ``(X, Y, Z, C_out)``.
    """
    x = _channels_first(inputs)
    nx, ny, nz, _ = x.shape
    if all(l.kernel == 1 for l in params.arch.layers):
        # a per-voxel network gives identical values with or without tiling
        y = nw.forward(params, np.moveaxis(x, (2, 3), (0, 1)))
        return np.moveaxis(y, (0, 1), (2, 3))
    xs, ys = patch_starts(nx, patch, stride), patch_starts(ny, patch, stride)
    out_ch = params.arch.out_channels
    acc = np.zeros((nx, ny, nz, out_ch))
    count = np.zeros((nx, ny, 1, 1))
    for i in xs:
        for j in ys:
            count[i:i + patch, j:j + patch] += 1
    origins = [(i, j) for i in xs for j in ys]
    for z in range(nz):
        tiles = np.stack([np.moveaxis(x[i:i + patch, j:j + patch, z], -1, 0) for i, j in origins])
        for s in range(0, len(tiles), batch):
            pred = nw.forward(params, tiles[s:s + batch])
            for (i, j), p in zip(origins[s:s + batch], pred):
                acc[i:i + patch, j:j + patch, z] += np.moveaxis(p, 0, -1)
    return acc / count


def finalize_map(values, kind: str, mask=None) -> np.ndarray:
    """Clamp a de-normalised prediction to its valid range and drop the channel axis for scalars."""
    v = np.asarray(values, dtype=np.float64)
    if kind in ("fa", "md") and v.ndim == 4 and v.shape[-1] == 1:
        v = v[..., 0]
    v = np.clip(v, 0.0, 1.0) if kind in ("fa", "colormap") else np.maximum(v, 0.0)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        v = v * (m[..., None] if v.ndim == m.ndim + 1 else m)
    return v


# -- per-voxel MLP baseline ---------------------------------------------------

def mlp_config(base: TrainConfig, **overrides) -> TrainConfig:
    """Same optimiser settings as ``base`` for the per-voxel MLP (1x1 'patches', no augmentation)."""
    cfg = asdict(base)
    cfg.update(model="mlp", patch_size=1, augment=False,
               val_patches=max(base.val_patches or 0, 20000), batch_size=max(base.batch_size, 256))
    cfg.update(overrides)
    return TrainConfig(**cfg)


def train_mlp(train_subjects, val_subjects, config: TrainConfig, hidden: int = 150,
              n_hidden: int = 3) -> TrainResult:
    """Fully connected per-voxel regression from the q measurements."""
    if config.model != "mlp" or config.patch_size != 1:
        config = mlp_config(config)
    divisor = target_divisor_for(train_subjects, config.target)
    train_set = _prepare(train_subjects, config, divisor, 1, 1)
    val_set = _prepare(val_subjects, config, divisor, 1, 1)
    # background voxels carry no information about the mapping
    keep = np.any(train_set.inputs[:, :, 0, 0] > 0, axis=1)
    train_set = train_set.subset(np.flatnonzero(keep))
    keep = np.any(val_set.inputs[:, :, 0, 0] > 0, axis=1)
    val_set = val_set.subset(np.flatnonzero(keep))
    if config.val_patches is not None and len(val_set) > config.val_patches:
        pick = np.random.default_rng(config.seed + 1).choice(len(val_set), config.val_patches, replace=False)
        val_set = val_set.subset(np.sort(pick))
    arch = nw.mlp_architecture(train_set.inputs.shape[1], train_set.targets.shape[1], hidden, n_hidden)
    params = nw.init_params(arch, seed=config.seed)
    return fit_patches(params, train_set, val_set, config, divisor)
