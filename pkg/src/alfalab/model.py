"""Layer inventories for parameter accounting and the small runnable gaze net.

ResNet-18 is described by shapes only. ``MiniGazeNet`` is the network that is
actually trained: three 3x3 convolutions (each followed by a per-channel affine
and ReLU), average pooling, global average pooling and a 2-unit linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .adapters import Adapter, AdaptedLayer, AlfaAdapter, alfa_delta, effective_weight, merged_weight
from .decompose import DecomposedLayer, decompose_layer
from .errors import ShapeError

IMAGE_SIZE = 32


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | linear | batchnorm
    m: int
    n: int
    k: int = 1
    stride: int = 1
    padding: int = 0
    decomposable: bool = False

    @property
    def params(self) -> int:
        if self.kind == "conv":
            return self.m * self.n
        if self.kind == "linear":
            return self.m * self.n + self.m
        if self.kind == "batchnorm":
            return 2 * self.m
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class ModelInventory:
    name: str
    specs: tuple[LayerSpec, ...]

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.specs)

    @property
    def convs(self) -> list[LayerSpec]:
        return [s for s in self.specs if s.kind == "conv"]

    @property
    def decomposable(self) -> list[LayerSpec]:
        return [s for s in self.specs if s.decomposable]

    def adapted_layers(self, count: int | None = None) -> list[LayerSpec]:
        """The last ``count`` decomposable layers (all but the stem by default)."""
        dec = self.decomposable
        if count is None:
            count = len(dec) - 1
        if not 0 <= count <= len(dec):
            raise ValueError(f"layer count {count} outside [0, {len(dec)}]")
        return dec[len(dec) - count :]


def _conv(name, out_ch, in_ch, k, stride=1, padding=None):
    pad = k // 2 if padding is None else padding
    return LayerSpec(name, "conv", out_ch, in_ch * k * k, k, stride, pad, decomposable=True)


def _bn(name, ch):
    return LayerSpec(name, "batchnorm", ch, 1)


def resnet18_inventory(num_outputs: int = 2) -> ModelInventory:
    specs = [_conv("conv1", 64, 3, 7, stride=2), _bn("bn1", 64)]
    in_ch = 64
    for stage, ch in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            pre = f"layer{stage}.{block}"
            specs += [
                _conv(f"{pre}.conv1", ch, in_ch, 3, stride),
                _bn(f"{pre}.bn1", ch),
                _conv(f"{pre}.conv2", ch, ch, 3),
                _bn(f"{pre}.bn2", ch),
            ]
            if stride != 1 or in_ch != ch:
                specs += [
                    _conv(f"{pre}.downsample", ch, in_ch, 1, stride, 0),
                    _bn(f"{pre}.downsample.bn", ch),
                ]
            in_ch = ch
    specs.append(LayerSpec("fc", "linear", num_outputs, 512))
    return ModelInventory("resnet18", tuple(specs))


def minigaze_inventory() -> ModelInventory:
    return ModelInventory(
        "minigaze",
        (
            _conv("conv1", 8, 1, 3),
            _bn("conv1.affine", 8),
            _conv("conv2", 16, 8, 3),
            _bn("conv2.affine", 16),
            _conv("conv3", 32, 16, 3),
            _bn("conv3.affine", 32),
            LayerSpec("head", "linear", 2, 32),
        ),
    )


INVENTORIES = {"resnet18": resnet18_inventory, "minigaze": minigaze_inventory}


def layer_rank(spec: LayerSpec, d: int) -> int:
    return min(d, spec.m, spec.n)


def truncated_size(inv: ModelInventory, d: int) -> int:
    """Stored parameters when every decomposable layer keeps rank ``d``."""
    if d < 1:
        raise ValueError("rank must be >= 1")
    total = 0
    for s in inv.specs:
        if s.decomposable:
            total += layer_rank(s, d) * (s.m + s.n)
        else:
            total += s.params
    return total


def noncompressive(inv: ModelInventory, d: int) -> list[str]:
    """Layers whose factored form is no smaller than the dense matrix."""
    return [s.name for s in inv.decomposable if layer_rank(s, d) * (s.m + s.n) >= s.m * s.n]


# --------------------------------------------------------------------------- conv primitives


def pad_images(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, H*W) patches, stride 1, rows ordered (c, kr, kc)."""
    b, c, h, w = x.shape
    xp = pad_images(x, pad)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = np.empty((b, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(b, c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + ho, j : j + wo] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d_direct(x: np.ndarray, weight: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Reference convolution by explicit loops over output pixels and taps.

    ``weight`` is the flattened (out_ch, in_ch*k*k) matrix. Slow; used to check
    the patch-matrix path and for single-map inspection.
    """
    b, c, h, w = x.shape
    w4 = weight.reshape(weight.shape[0], c, k, k)
    xp = pad_images(x, pad)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((b, w4.shape[0], ho, wo))
    for y in range(ho):
        for xx in range(wo):
            window = xp[:, :, y : y + k, xx : xx + k]
            for i in range(k):
                for j in range(k):
                    out[:, :, y, xx] += window[:, :, i, j] @ w4[:, :, i, j].T
    return out


def conv2d(x: np.ndarray, weight, k: int, pad: int):
    """3-D convolution as a matmul over patches.

    ``weight`` is a dense (out, in*k*k) matrix or a tuple of (left, right)
    factor pairs whose products are summed; pairs are applied right to left
    so the dense product is never formed.
    """
    cols = im2col(x, k, pad)
    terms = weight if isinstance(weight, tuple) else ((weight,),)
    n_in = terms[0][-1].shape[1]
    if n_in != cols.shape[1]:
        raise ShapeError(f"weight with {n_in} columns does not match {cols.shape[1]} patch rows")
    out = None
    for term in terms:
        y = cols
        for m in reversed(term):
            y = np.matmul(m, y)
        out = y if out is None else out + y
    b, _, h, w = x.shape
    return out.reshape(b, out.shape[1], h + 2 * pad - k + 1, w + 2 * pad - k + 1), cols


def avg_pool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


# --------------------------------------------------------------------------- network

CONVS = ("conv1", "conv2", "conv3")
_POOL_AFTER = {"conv1": True, "conv2": True, "conv3": False}


@dataclass
class MiniGazeNet:
    """Weights for the runnable net.

    ``weights`` holds dense conv matrices (until decomposed), per-channel
    affine ``<conv>.scale``/``<conv>.bias``, and ``head``/``head.bias``.
    ``factors`` holds truncated factors for decomposed convs; a conv with a
    factor entry ignores any dense matrix of the same name.
    """

    weights: dict[str, np.ndarray]
    factors: dict[str, DecomposedLayer] = field(default_factory=dict)

    @property
    def inventory(self) -> ModelInventory:
        return minigaze_inventory()

    def spec(self, name: str) -> LayerSpec:
        return next(s for s in self.inventory.specs if s.name == name)

    @property
    def decomposed(self) -> bool:
        return bool(self.factors)

    def copy(self) -> "MiniGazeNet":
        return MiniGazeNet({k: v.copy() for k, v in self.weights.items()}, dict(self.factors))

    def conv_weight(self, name: str) -> np.ndarray:
        if name in self.factors:
            return self.factors[name].weight()
        return self.weights[name]


def init_minigaze(rng: np.random.Generator) -> MiniGazeNet:
    w = {}
    for s in minigaze_inventory().convs:
        w[s.name] = rng.normal(0.0, math.sqrt(2.0 / s.n), size=(s.m, s.n))
        w[f"{s.name}.scale"] = np.ones(s.m)
        w[f"{s.name}.bias"] = np.zeros(s.m)
    w["head"] = rng.normal(0.0, 1.0 / math.sqrt(32), size=(2, 32))
    w["head.bias"] = np.zeros(2)
    return MiniGazeNet(w)


def zero_minigaze() -> MiniGazeNet:
    net = init_minigaze(np.random.default_rng(0))
    return MiniGazeNet({k: np.zeros_like(v) for k, v in net.weights.items()})


def conv_weights(
    net: MiniGazeNet, mode: str = "base", adapters: Mapping[str, Adapter] | None = None
) -> dict[str, np.ndarray]:
    adapters = adapters or {}
    if mode == "base":
        return {c: net.conv_weight(c) for c in CONVS}
    if mode == "adapted":
        out = {}
        for c in CONVS:
            if c in net.factors:
                out[c] = effective_weight(net.factors[c], adapters.get(c))
            else:
                out[c] = net.conv_weight(c)
        return out
    if mode == "merged":
        return conv_weights(merge_net(net, adapters), "base")
    raise ValueError(f"unknown forward mode {mode!r}")


def path_weights(
    net: MiniGazeNet, mode: str = "base", adapters: Mapping[str, Adapter] | None = None
) -> dict[str, np.ndarray | tuple]:
    """Inference-time conv weights for ``conv2d``.

    Decomposed layers stay factored: ``U (Vbase x)`` for the base, ``U ((Vbase
    + dV) x)`` for Alfa and ``U (Vbase x) + A (B x)`` for LoRA. The merged mode
    folds adapters first, so a merged LoRA layer runs as one dense matrix.
    """
    adapters = adapters or {}
    if mode == "merged":
        net, adapters, mode = merge_net(net, adapters), {}, "base"
    elif mode not in ("base", "adapted"):
        raise ValueError(f"unknown forward mode {mode!r}")
    out = {}
    for c in CONVS:
        f = net.factors.get(c)
        ad = adapters.get(c) if mode == "adapted" else None
        if f is None:
            out[c] = net.weights[c]
        elif ad is None:
            out[c] = ((f.U, f.Vbase),)
        elif isinstance(ad, AlfaAdapter):
            out[c] = ((f.U, f.Vbase + alfa_delta(ad, f)),)
        else:
            out[c] = ((f.U, f.Vbase), (ad.A, ad.B))
    return out


def merge_net(net: MiniGazeNet, adapters: Mapping[str, Adapter]) -> MiniGazeNet:
    """Fold adapters into a new net. Alfa layers stay factored, LoRA layers expand."""
    out = net.copy()
    for name, ad in adapters.items():
        merged = merged_weight(AdaptedLayer(net.factors[name], ad))
        if isinstance(merged, DecomposedLayer):
            out.factors[name] = merged
        else:
            del out.factors[name]
            out.weights[name] = merged
    return out


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {images.shape[1:]}")
    if not np.all(np.isfinite(images)):
        raise ShapeError("images contain non-finite values")
    return images


def forward_batch(net: MiniGazeNet, images: np.ndarray, weights: Mapping[str, np.ndarray]):
    """Returns (outputs (B, 2), cache for ``backward_batch``)."""
    x = _check_images(images)[:, None]
    cache = {}
    for c in CONVS:
        z, cols = conv2d(x, weights[c], 3, 1)
        scale = net.weights[f"{c}.scale"][None, :, None, None]
        a = z * scale + net.weights[f"{c}.bias"][None, :, None, None]
        h = np.maximum(a, 0.0)
        cache[c] = (x.shape, cols, z, a)
        x = avg_pool2(h) if _POOL_AFTER[c] else h
    feat = x.mean(axis=(2, 3))
    cache["feat"] = feat
    cache["last_shape"] = x.shape
    out = feat @ net.weights["head"].T + net.weights["head.bias"]
    return out, cache


def conv_input(net: MiniGazeNet, images: np.ndarray, layer: str) -> np.ndarray:
    """Feature maps (B, C, H, W) that ``layer`` receives in the base forward pass."""
    x = _check_images(images)[:, None]
    for c in CONVS:
        if c == layer:
            return x
        z, _ = conv2d(x, net.conv_weight(c), 3, 1)
        a = z * net.weights[f"{c}.scale"][None, :, None, None]
        h = np.maximum(a + net.weights[f"{c}.bias"][None, :, None, None], 0.0)
        x = avg_pool2(h) if _POOL_AFTER[c] else h
    raise KeyError(layer)


def backward_batch(
    net: MiniGazeNet, cache, weights: Mapping[str, np.ndarray], dout: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients for head, affine parameters and each conv's effective weight."""
    grads = {
        "head": dout.T @ cache["feat"],
        "head.bias": dout.sum(axis=0),
    }
    dfeat = dout @ net.weights["head"]
    b, ch, h, w = cache["last_shape"]
    dx = np.broadcast_to(dfeat[:, :, None, None] / (h * w), (b, ch, h, w))
    for c in reversed(CONVS):
        in_shape, cols, z, a = cache[c]
        if _POOL_AFTER[c]:
            dx = avg_pool2_backward(dx)
        da = dx * (a > 0)
        grads[f"{c}.bias"] = da.sum(axis=(0, 2, 3))
        grads[f"{c}.scale"] = (da * z).sum(axis=(0, 2, 3))
        dz = (da * net.weights[f"{c}.scale"][None, :, None, None]).reshape(b, z.shape[1], -1)
        grads[c] = np.matmul(dz, cols.transpose(0, 2, 1)).sum(axis=0)
        if c != CONVS[0]:
            dcols = np.matmul(weights[c].T, dz)
            dx = col2im(dcols, in_shape, 3, 1)
    return grads


def predict(
    net: MiniGazeNet,
    images: np.ndarray,
    mode: str = "base",
    adapters: Mapping[str, Adapter] | None = None,
    batch: int = 256,
) -> np.ndarray:
    images = _check_images(images)
    ws = path_weights(net, mode, adapters)
    outs = [forward_batch(net, images[i : i + batch], ws)[0] for i in range(0, len(images), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, 2))


def forward(
    net: MiniGazeNet,
    image: np.ndarray,
    mode: str = "base",
    adapters: Mapping[str, Adapter] | None = None,
) -> tuple[float, float]:
    """(yaw, pitch) in radians for one 32x32 image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {image.shape}")
    out = predict(net, image[None], mode, adapters)[0]
    return float(out[0]), float(out[1])


def decompose_net(net: MiniGazeNet, d: int) -> tuple[MiniGazeNet, list[str]]:
    """Factor every conv at rank ``d``; ranks above a layer's limit are clamped.

    Returns the decomposed net and a list of clamp warnings.
    """
    warnings = []
    out = MiniGazeNet({k: v.copy() for k, v in net.weights.items() if k not in CONVS})
    for s in net.inventory.convs:
        rank = layer_rank(s, d)
        if rank != d:
            warnings.append(f"{s.name}: rank {d} clamped to {rank}")
        out.factors[s.name] = decompose_layer(net.conv_weight(s.name), rank, s.name)
    return out, warnings

