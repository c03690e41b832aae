"""Layer vocabulary: conv, max-pool, ReLU, LRN, fully-connected, 2-way softmax,
channel/feature concatenation, and the scaled VGG-style backbone."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, concat, make, matmul, relu

FEATURE_NET = "feature-net"
MATCHING_NET = "matching-net"
GROUPS = (FEATURE_NET, MATCHING_NET)

LAYER_KINDS = ("conv", "pool", "relu", "lrn", "fc", "softmax", "concat-channels", "concat-features")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def _nchw(fn, x: Tensor, *args) -> Tensor:
    # public ops take (N,)C,H,W; the kernels below run channels-last
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(fn.__name__, x.shape)
    out = transpose(fn(transpose(x, (0, 2, 3, 1)), *args), (0, 3, 1, 2))
    return out.reshape(out.shape[1:]) if single else out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) or (C,H,W) with ``weight`` (O,C,k,k), plus per-channel bias."""
    return _nchw(conv2d_cl, x, weight, bias, stride, pad)


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    return _nchw(max_pool2d_cl, x, size, stride)


def local_response_norm(x: Tensor, size: int = 5, alpha: float = 1e-4, beta: float = 0.75, k: float = 1.0) -> Tensor:
    """Cross-channel LRN: x / (k + alpha/size * sum_window x^2)^beta over channel axis 1
    (or the feature axis of a 1-D/2-D input)."""
    if x.ndim in (1, 2):
        return lrn_cl(x, size, alpha, beta, k)
    return _nchw(lrn_cl, x, size, alpha, beta, k)


def conv2d_cl(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-last convolution: x (N,H,W,C), weight (O,C,k,k) -> (N,H',W',O)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, h, w, c = x.shape
    o, _, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d (square kernels only)", weight.shape)
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output dims non-positive: {ho}x{wo} from {h}x{w}, k={k}, stride={stride}, pad={pad}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    offsets = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate([xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
                           for i, j in offsets], axis=-1).reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o)

    def backward(g):
        gm = g.reshape(n * ho * wo, o)
        gw = (cols.T @ gm).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, k * k, c)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for idx, (i, j) in enumerate(offsets):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, idx]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward, "conv2d")


def max_pool2d_cl(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Channels-last max pooling; the gradient goes to the first maximum of each window."""
    stride = stride or size
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    n, h, w, c = x.shape
    ho, wo = conv_output_size(h, size, stride, 0), conv_output_size(w, size, stride, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d output dims non-positive: {ho}x{wo} from {h}x{w}")
    xd = x.data
    tiled = stride == size
    if tiled:
        # non-overlapping windows: view as (n, ho, size, wo, size, c)
        blocks = xd[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c)
        views = [blocks[:, :, i, :, j] for i in range(size) for j in range(size)]
    else:
        views = [xd[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
                 for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        gx = np.zeros_like(xd)
        gblocks = gx[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c) if tiled else None
        taken = np.zeros(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            i, j = divmod(idx, size)
            sel = v == out
            sel &= ~taken
            taken |= sel
            if tiled:
                np.multiply(g, sel, out=gblocks[:, :, i, :, j])
            else:
                gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g * sel
        return (gx,)

    return make(out, (x,), backward, "max_pool2d")


def _window_matrix(c: int, lo: int, hi: int, dtype) -> np.ndarray:
    # band[j, i] = 1 when input channel j lies in the window of output channel i (i-lo <= j <= i+hi)
    d = np.arange(c)[:, None] - np.arange(c)[None, :]
    return ((d >= -lo) & (d <= hi)).astype(dtype)


def _channel_window_sum(sq: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """out[..., c] = sum(sq[..., c-lo : c+hi+1]) along the last axis, zero outside."""
    c = sq.shape[-1]
    return (sq.reshape(-1, c) @ _window_matrix(c, lo, hi, sq.dtype)).reshape(sq.shape)


def lrn_cl(x: Tensor, size: int = 5, alpha: float = 1e-4, beta: float = 0.75, k: float = 1.0) -> Tensor:
    """LRN across the last axis."""
    xd = x.data
    lo, hi = size // 2, (size - 1) // 2
    scale = _channel_window_sum(xd * xd, lo, hi)
    scale *= alpha / size
    scale += k
    if (scale <= 0).any():
        raise ValueError("local_response_norm: non-positive normalizer (k must be > 0 or inputs nonzero)")
    inv = scale ** -beta
    out = xd * inv

    def backward(g):
        t = g * out
        t /= scale
        gx = _channel_window_sum(t, hi, lo)
        gx *= xd
        gx *= -2.0 * alpha * beta / size
        gx += g * inv
        return (gx,)

    return make(out, (x,), backward, "lrn")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """x (N,F) or (F,) times weight (F,O), plus bias."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax2(logits: Tensor) -> Tensor:
    """Two-way softmax along the last axis, max-subtracted."""
    if logits.shape[-1] != 2:
        raise ShapeError("softmax2 (needs exactly 2 logits)", logits.shape)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make(p.astype(logits.dtype), (logits,), backward, "softmax2")


def concat_channels(images: Sequence[Tensor]) -> Tensor:
    """Stack per-category images along the channel axis, in the order given."""
    images = list(images)
    ref = images[0].shape[-2:]
    for im in images[1:]:
        if im.shape[-2:] != ref or im.ndim != images[0].ndim:
            raise ShapeError("concat_channels", images[0].shape, im.shape)
    return concat(images, axis=-3)


def concat_features(features: Sequence[Tensor]) -> Tensor:
    features = list(features)
    width = features[0].shape[-1]
    for f in features[1:]:
        if f.shape[-1] != width:
            raise ShapeError("concat_features (equal widths required)", features[0].shape, f.shape)
    return concat(features, axis=-1)


# -- parameterized blocks ------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)
    group: str = FEATURE_NET

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.group not in GROUPS:
            raise ValueError(f"parameter group must be one of {GROUPS}, got {self.group!r}")


@dataclass(frozen=True)
class LRNConfig:
    size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    in_channels: int = 3
    feature_dim: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    lrn: LRNConfig = LRNConfig()

    def __post_init__(self):
        if self.image_size < 1 or self.in_channels < 1 or self.feature_dim < 1 or not self.widths:
            raise ValueError(f"invalid backbone config {self}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"conv widths must be positive: {self.widths}")
        if self.final_side < 1:
            raise ValueError(f"{len(self.widths)} pooling stages leave no spatial extent at S={self.image_size}")

    @property
    def final_side(self) -> int:
        side = self.image_size
        for _ in self.widths:
            side = conv_output_size(conv_output_size(side, self.kernel, 1, self.kernel // 2), 2, 2, 0)
        return side

    def layer_specs(self) -> list[LayerSpec]:
        specs = []
        for w in self.widths:
            specs += [LayerSpec("conv", {"out": w, "kernel": self.kernel, "stride": 1, "pad": self.kernel // 2}),
                      LayerSpec("relu"), LayerSpec("lrn", vars(self.lrn)), LayerSpec("pool", {"size": 2, "stride": 2})]
        specs += [LayerSpec("fc", {"out": self.feature_dim}), LayerSpec("relu")]
        return specs


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone:
    """[conv3x3 -> ReLU -> LRN -> maxpool2x2] per stage, then fc -> ReLU to D features."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone",
                 dtype=np.float32, init_std: float | None = None):
        self.config = config
        self.params: list[Parameter] = []
        self.convs: list[tuple[Parameter, Parameter]] = []
        c = config.in_channels
        k = config.kernel
        for i, w in enumerate(config.widths):
            shape = (w, c, k, k)
            data = (rng.standard_normal(shape) * init_std).astype(dtype) if init_std else he_normal(rng, shape, c * k * k, dtype)
            wp = Parameter(data, f"{prefix}.conv{i}.weight", FEATURE_NET)
            bp = Parameter(np.zeros(w, dtype), f"{prefix}.conv{i}.bias", FEATURE_NET)
            self.convs.append((wp, bp))
            self.params += [wp, bp]
            c = w
        flat = c * config.final_side ** 2
        shape = (flat, config.feature_dim)
        data = (rng.standard_normal(shape) * init_std).astype(dtype) if init_std else he_normal(rng, shape, flat, dtype)
        self.fc_w = Parameter(data, f"{prefix}.fc.weight", FEATURE_NET)
        self.fc_b = Parameter(np.zeros(config.feature_dim, dtype), f"{prefix}.fc.bias", FEATURE_NET)
        self.params += [self.fc_w, self.fc_b]

    def __call__(self, images: Tensor) -> Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError("backbone input", images.shape, (None, cfg.in_channels, cfg.image_size, cfg.image_size))
        x = transpose(images, (0, 2, 3, 1))
        for w, b in self.convs:
            x = conv2d_cl(x, w, b, stride=1, pad=cfg.kernel // 2)
            x = relu(x)
            x = lrn_cl(x, cfg.lrn.size, cfg.lrn.alpha, cfg.lrn.beta, cfg.lrn.k)
            x = max_pool2d_cl(x, 2, 2)
        x = x.reshape(x.shape[0], -1)
        return relu(linear(x, self.fc_w, self.fc_b))


class MLP:
    """Stack of fc layers; hidden layers get ReLU (+ optional LRN), the last is left as logits."""

    def __init__(self, in_dim: int, widths: Sequence[int], rng: np.random.Generator, prefix: str,
                 group: str = MATCHING_NET, init_std: float = 0.01, dtype=np.float32, lrn: LRNConfig | None = None):
        if in_dim < 1 or not widths or any(w < 1 for w in widths):
            raise ValueError(f"invalid fc widths {in_dim} -> {list(widths)}")
        self.in_dim = in_dim
        self.widths = tuple(widths)
        self.lrn = lrn
        self.layers: list[tuple[Parameter, Parameter]] = []
        d = in_dim
        for i, w in enumerate(widths):
            W = Parameter((rng.standard_normal((d, w)) * init_std).astype(dtype), f"{prefix}.fc{i}.weight", group)
            b = Parameter(np.zeros(w, dtype), f"{prefix}.fc{i}.bias", group)
            self.layers.append((W, b))
            d = w

    @property
    def params(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (W, b) in enumerate(self.layers):
            x = linear(x, W, b)
            if i < len(self.layers) - 1:
                x = relu(x)
                if self.lrn is not None:
                    x = lrn_cl(x, self.lrn.size, self.lrn.alpha, self.lrn.beta, self.lrn.k)
        return x
