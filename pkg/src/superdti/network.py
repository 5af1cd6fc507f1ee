"""Residual convolution/deconvolution network with hand-written backprop.

Layer ``l`` (1-based) computes ``H_l = act(W_l * H_{l-1} + B_l)``; a layer
with a skip source ``s`` instead convolves ``H_{l-1} + H_s``.  All layers
preserve spatial size (odd kernel, stride 1, padding ``k // 2``).  A
``deconv`` layer is a stride-1 transposed convolution cropped by the
padding, which equals a correlation with the spatially flipped kernel.

Activations are kept internally in a zero-padded, flattened ``(C, N*P)``
layout (see :class:`_Grid`) so each kernel tap is a shifted slice.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class LayerSpec:
    kind: str = "conv"
    out_channels: int = 64
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "relu"
    skip: int | None = None


@dataclass
class ArchitectureSpec:
    in_channels: int
    layers: list = field(default_factory=list)
    name: str = "superdti"

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def skips(self) -> list:
        return [(l.skip, i + 1) for i, l in enumerate(self.layers) if l.skip is not None]

    def channels_in(self, l: int) -> int:
        """Input channel count of 1-based layer ``l``."""
        return self.in_channels if l == 1 else self.layers[l - 2].out_channels

    def validate(self):
        if not self.layers:
            raise ValueError("architecture has no layers")
        for i, layer in enumerate(self.layers, start=1):
            if layer.kind not in ("conv", "deconv"):
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.activation not in ("relu", "none"):
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.kernel % 2 != 1 or layer.stride != 1 or layer.padding != layer.kernel // 2:
                raise ValueError(f"layer {i}: only size-preserving layers (odd k, s1, p=k//2) are supported")
            if layer.skip is not None:
                s = layer.skip
                if not 1 <= s < i - 1:
                    raise ValueError(f"layer {i}: skip source {s} must satisfy 1 <= s < {i - 1}")
                if self.layers[s - 1].out_channels != self.channels_in(i):
                    raise ValueError(
                        f"layer {i}: skip from layer {s} adds {self.layers[s - 1].out_channels} "
                        f"channels to an input of {self.channels_in(i)}")
        if self.layers[-1].activation != "none":
            raise ValueError("the last layer must be linear")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSpec":
        return cls(**doc).validate()


def superdti_architecture(in_channels: int, out_channels: int = 1, width: int = 64,
                          depth: int = 10, n_skips: int = 4) -> ArchitectureSpec:
    """Encoder-decoder of ``depth // 2`` conv then deconv layers.

    Skip paths join layer ``L - l`` into the input of layer ``l`` for the
    ``n_skips`` decoder layers nearest the output (1->9, 2->8, 3->7, 4->6 at
    the default depth).
    """
    if depth < 2:
        raise ValueError("depth must be at least 2")
    n_enc = depth // 2
    layers = []
    for l in range(1, depth + 1):
        last = l == depth
        skip_src = depth - l
        has_skip = (not last and l > n_enc and 1 <= skip_src < l - 1
                    and skip_src <= n_skips)
        layers.append(LayerSpec(
            kind="conv" if l <= n_enc else "deconv",
            out_channels=out_channels if last else width,
            activation="none" if last else "relu",
            skip=skip_src if has_skip else None))
    return ArchitectureSpec(in_channels, layers, name="superdti").validate()


def mlp_architecture(in_channels: int, out_channels: int = 1, hidden: int = 150,
                     n_hidden: int = 3) -> ArchitectureSpec:
    """Per-voxel fully connected net, expressed as 1x1 convolutions."""
    layers = [LayerSpec("conv", hidden, kernel=1, padding=0) for _ in range(n_hidden)]
    layers.append(LayerSpec("conv", out_channels, kernel=1, padding=0, activation="none"))
    return ArchitectureSpec(in_channels, layers, name="mlp").validate()


@dataclass
class NetworkParams:
    arch: ArchitectureSpec
    weights: list
    biases: list

    def __post_init__(self):
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            layer = self.arch.layers[l - 1]
            want = (layer.out_channels, self.arch.channels_in(l), layer.kernel, layer.kernel)
            if w.shape != want or b.shape != (layer.out_channels,):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape}, expected {want}")

    def arrays(self):
        return list(self.weights) + list(self.biases)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(arch: ArchitectureSpec, seed: int = 0, dtype=np.float64) -> NetworkParams:
    """He-normal weights, zero biases; the linear output layer starts small."""
    arch.validate()
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l, layer in enumerate(arch.layers, start=1):
        cin = arch.channels_in(l)
        fan_in = cin * layer.kernel ** 2
        std = np.sqrt(2.0 / fan_in) if layer.activation == "relu" else np.sqrt(1.0 / fan_in)
        weights.append((rng.standard_normal((layer.out_channels, cin, layer.kernel, layer.kernel))
                        * std).astype(dtype))
        biases.append(np.zeros(layer.out_channels, dtype=dtype))
    return NetworkParams(arch, weights, biases)


def zero_params(arch: ArchitectureSpec) -> NetworkParams:
    p = init_params(arch)
    return NetworkParams(arch, [np.zeros_like(w) for w in p.weights],
                         [np.zeros_like(b) for b in p.biases])


def _effective_kernel(w, kind):
    return w[:, :, ::-1, ::-1] if kind == "deconv" else w


class _Grid:
    """Zero-padded, flattened activation layout shared by all layers.

    An activation is stored as ``(C, margin + N*P + margin)`` where each image
    occupies ``P = (H + 2p) * (W + 2p)`` entries with a zero border of width
    ``p``.  A kernel tap at offset ``(da, db)`` is then the contiguous slice
    shifted by ``da * (W + 2p) + db``, so convolution needs no im2col copies.
    """

    def __init__(self, n, h, w, pad):
        self.n, self.h, self.w, self.pad = n, h, w, pad
        self.wp = w + 2 * pad
        self.hp = h + 2 * pad
        self.np_ = n * self.hp * self.wp
        self.margin = pad * self.wp + pad
        interior = np.zeros((n, self.hp, self.wp))
        interior[:, pad:pad + h, pad:pad + w] = 1.0
        self.interior = interior.reshape(-1)

    def offsets(self, k):
        r = k // 2
        return [(a - r) * self.wp + (b - r) for a in range(k) for b in range(k)]

    def to_buffer(self, x):
        """``(C, N, H, W)`` -> padded flat buffer."""
        c = x.shape[0]
        buf = np.zeros((c, self.np_ + 2 * self.margin), dtype=x.dtype)
        view = buf[:, self.margin:self.margin + self.np_].reshape(c, self.n, self.hp, self.wp)
        view[:, :, self.pad:self.pad + self.h, self.pad:self.pad + self.w] = x
        return buf

    def wrap(self, flat):
        """Core ``(C, N*P)`` array -> buffer with zero margins."""
        buf = np.zeros((flat.shape[0], self.np_ + 2 * self.margin), dtype=flat.dtype)
        buf[:, self.margin:self.margin + self.np_] = flat
        return buf

    def core(self, buf):
        return buf[:, self.margin:self.margin + self.np_]

    def to_image(self, flat):
        c = flat.shape[0]
        img = flat.reshape(c, self.n, self.hp, self.wp)
        return img[:, :, self.pad:self.pad + self.h, self.pad:self.pad + self.w]


def _check_input(params, x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != params.arch.in_channels:
        raise ValueError(f"expected input (N, {params.arch.in_channels}, H, W), got {x.shape}")
    k = max(l.kernel for l in params.arch.layers)
    if min(x.shape[2:]) < k:
        raise ValueError(f"spatial size {x.shape[2:]} smaller than kernel {k}")
    return x


def _conv(grid, buf, wmat_stack, offsets, out_channels):
    """Sum of shifted tap products: one matmul then ``k*k`` shifted adds."""
    z_all = (wmat_stack @ buf).reshape(len(offsets), out_channels, -1)
    m, n = grid.margin, grid.np_
    z = z_all[0][:, m + offsets[0]:m + offsets[0] + n].copy()
    for t in range(1, len(offsets)):
        z += z_all[t][:, m + offsets[t]:m + offsets[t] + n]
    return z


def _tap_stack(w, kind):
    w = _effective_kernel(w, kind)
    o, c, k, _ = w.shape
    # (k*k*O, C): rows ordered by tap then output channel
    return np.ascontiguousarray(np.transpose(w, (2, 3, 0, 1)).reshape(k * k * o, c))


def forward(params: NetworkParams, x, cache: bool = False):
    """Run the network on ``(N, C, H, W)`` (or a single ``(C, H, W)``) input.

    With ``cache=True`` also returns the per-layer tape used by :func:`backward`.
    """
    single = np.asarray(x).ndim == 3
    x = _check_input(params, x)
    dtype = np.result_type(x.dtype, params.weights[0].dtype)
    arch = params.arch
    pad = max(l.kernel // 2 for l in arch.layers)
    n, _, h, w = x.shape
    grid = _Grid(n, h, w, pad)
    outputs = [grid.to_buffer(np.moveaxis(x.astype(dtype, copy=False), 1, 0))]
    tape = []
    for l, layer in enumerate(arch.layers, start=1):
        inp = outputs[l - 1]
        if layer.skip is not None:
            inp = inp + outputs[layer.skip]
        offs = grid.offsets(layer.kernel)
        z = _conv(grid, inp, _tap_stack(params.weights[l - 1], layer.kind), offs, layer.out_channels)
        z += params.biases[l - 1][:, None]
        if layer.activation == "relu":
            active = z > 0
            z *= active
        else:
            active = None
        z *= grid.interior
        outputs.append(grid.wrap(z))
        if cache:
            tape.append((inp, active))
    y = np.moveaxis(grid.to_image(grid.core(outputs[-1])), 0, 1)
    y = np.ascontiguousarray(y)
    if single:
        y = y[0]
    if cache:
        return y, (grid, tape)
    return y


def loss(pred, target) -> float:
    """Per-sample squared L2 norm, averaged over channels and samples."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    n, c = pred.shape[:2]
    return float(np.sum((pred - target) ** 2) / (n * c))


def loss_grad(pred, target):
    n, c = pred.shape[:2]
    return 2.0 * (pred - target) / (n * c)


def backward(params: NetworkParams, x, target, weight_decay: float = 0.0):
    """Loss and analytic gradients for one batch.

    Returns ``(loss_value, grad_weights, grad_biases)``; the loss includes
    ``weight_decay / 2 * sum ||W||^2`` when ``weight_decay`` is non-zero.
    """
    x = _check_input(params, x)
    target = np.asarray(target)
    if target.ndim == 3:
        target = target[None]
    pred, (grid, tape) = forward(params, x, cache=True)
    value = loss(pred, target)
    arch = params.arch
    L = arch.depth
    m, npx = grid.margin, grid.np_
    grad_out = [None] * (L + 1)
    g_last = np.moveaxis(loss_grad(pred, target), 1, 0)
    grad_out[L] = grid.core(grid.to_buffer(g_last))
    gw = [None] * L
    gb = [None] * L
    for l in range(L, 0, -1):
        layer = arch.layers[l - 1]
        inp, active = tape[l - 1]
        gz = grad_out[l]
        if active is not None:
            gz = gz * active
        gb[l - 1] = gz.sum(axis=1)
        k = layer.kernel
        offs = grid.offsets(k)
        gw_eff = np.empty((k * k,) + (layer.out_channels, inp.shape[0]), dtype=gz.dtype)
        for t, o in enumerate(offs):
            gw_eff[t] = gz @ inp[:, m + o:m + o + npx].T
        gw_eff = np.transpose(gw_eff.reshape(k, k, layer.out_channels, -1), (2, 3, 0, 1))
        gw[l - 1] = np.ascontiguousarray(_effective_kernel(gw_eff, layer.kind))
        if l == 1:
            continue
        taps = _tap_stack(params.weights[l - 1], layer.kind).reshape(k * k, layer.out_channels, -1)
        c_in = taps.shape[2]
        g_buf = np.zeros((c_in, npx + 2 * m), dtype=gz.dtype)
        g_all = (np.transpose(taps, (0, 2, 1)).reshape(k * k * c_in, layer.out_channels) @ gz)
        g_all = g_all.reshape(k * k, c_in, npx)
        for t, o in enumerate(offs):
            g_buf[:, m + o:m + o + npx] += g_all[t]
        g_in = g_buf[:, m:m + npx] * grid.interior
        for dst in ((l - 1,) if layer.skip is None else (l - 1, layer.skip)):
            grad_out[dst] = g_in if grad_out[dst] is None else grad_out[dst] + g_in
    if weight_decay:
        value += 0.5 * weight_decay * sum(float(np.sum(w ** 2)) for w in params.weights)
        gw = [g + weight_decay * w for g, w in zip(gw, params.weights)]
    return value, gw, gb


def objective(params: NetworkParams, x, target, weight_decay: float = 0.0) -> float:
    value = loss(forward(params, x), target)
    if weight_decay:
        value += 0.5 * weight_decay * sum(float(np.sum(w ** 2)) for w in params.weights)
    return value


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], 0)


def adam_step(params: NetworkParams, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """One bias-corrected ADAM update; weight decay enters as ``wd * W`` on weights.

    ``grads`` is ``(grad_weights, grad_biases)``.  Returns new params and state.
    """
    gw, gb = grads
    n_w = len(params.weights)
    if len(state.m) != n_w + len(params.biases):
        raise ValueError("optimizer state does not match parameters")
    flat_g = [g + weight_decay * w if weight_decay else g for g, w in zip(gw, params.weights)] + list(gb)
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params.arrays(), flat_g, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return (NetworkParams(params.arch, new_p[:n_w], new_p[n_w:]),
            AdamState(new_m, new_v, t))


def _objective_pattern(params, x, target, weight_decay):
    pred, (_, tape) = forward(params, x, cache=True)
    value = loss(pred, target)
    if weight_decay:
        value += 0.5 * weight_decay * sum(float(np.sum(w ** 2)) for w in params.weights)
    return value, [t[1] for t in tape if t[1] is not None]


def grad_check(params: NetworkParams, x, target, eps: float = 1e-5, fraction: float = 0.01,
               seed: int = 0, weight_decay: float = 0.0, min_samples: int = 20,
               return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Samples a random ``fraction`` of all parameters (at least ``min_samples``
    and at least one entry per array).  Relative error per entry is
    ``|a - n| / max(|a| + |n|, floor)`` with ``floor = 1e-6 * max|a|`` over
    the whole network: components far below the dominant gradient scale sit
    under the central difference's own truncation error.  A central difference whose +/-eps
    perturbation flips any ReLU is not a derivative estimate; such entries
    are skipped and replaced by a fresh draw.
    """
    if not eps > 0:
        raise ValueError("finite-difference step must be positive")
    params = params.copy()
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3:
        target = target[None]
    _, gw, gb = backward(params, x, target, weight_decay)
    analytic = gw + gb
    floor = max(1e-6 * max(float(np.max(np.abs(g))) for g in analytic), 1e-12)
    _, base = _objective_pattern(params, x, target, weight_decay)
    arrays = params.arrays()
    sizes = np.array([a.size for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    n_pick = min(total, max(min_samples, int(np.ceil(fraction * total))))
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    # one guaranteed entry per array first, then the random sample
    firsts = [int(offsets[i] + rng.integers(sizes[i])) for i in range(len(arrays))]
    queue = list(dict.fromkeys(firsts + [int(f) for f in order]))
    worst, checked, skipped = 0.0, 0, 0
    for flat in queue:
        if checked >= max(n_pick, len(arrays)):
            break
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = flat - int(offsets[i])
        arr = arrays[i].reshape(-1)
        orig = arr[j]
        arr[j] = orig + eps
        fp, pat_p = _objective_pattern(params, x, target, weight_decay)
        arr[j] = orig - eps
        fm, pat_m = _objective_pattern(params, x, target, weight_decay)
        arr[j] = orig
        if any(np.any(a != b) for a, b in zip(pat_p, base)) or any(
                np.any(a != b) for a, b in zip(pat_m, base)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * eps)
        ana = analytic[i].reshape(-1)[j]
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), floor))
        checked += 1
    if return_details:
        return worst, {"checked": checked, "skipped_kinks": skipped, "n_params": total}
    return worst
