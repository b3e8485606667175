"""Flat tensor-name layouts for nets and adapters stored in ATF1 files.

Net files: dense convs as ``conv1``, factors as ``conv1.U``/``conv1.Vbase``,
affine as ``conv1.scale``/``conv1.bias``, head as ``head``/``head.bias``.
Adapter files: ``<layer>/alfa/<param>`` or ``<layer>/lora/<param>`` plus a copy
of the layer's basis as ``<layer>/vbase`` so attention can be inspected alone.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .adapters import Adapter, AlfaAdapter, LoraAdapter, check_compatible
from .decompose import DecomposedLayer
from .errors import FormatError, ShapeError
from .fileio import load_atf
from .model import CONVS, MiniGazeNet, minigaze_inventory


def net_tensors(net: MiniGazeNet) -> dict[str, np.ndarray]:
    out = {}
    for c in CONVS:
        if c in net.factors:
            out[f"{c}.U"] = net.factors[c].U
            out[f"{c}.Vbase"] = net.factors[c].Vbase
        else:
            out[c] = net.weights[c]
        out[f"{c}.scale"] = net.weights[f"{c}.scale"]
        out[f"{c}.bias"] = net.weights[f"{c}.bias"]
    out["head"] = net.weights["head"]
    out["head.bias"] = net.weights["head.bias"]
    return out


def _expect(t: Mapping[str, np.ndarray], name: str, shape: tuple) -> np.ndarray:
    if name not in t:
        raise ShapeError(f"missing tensor {name!r}")
    arr = np.asarray(t[name], dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
    return arr


def net_from_tensors(t: Mapping[str, np.ndarray]) -> MiniGazeNet:
    specs = {s.name: s for s in minigaze_inventory().convs}
    weights, factors = {}, {}
    for c in CONVS:
        s = specs[c]
        if f"{c}.U" in t:
            u = np.asarray(t[f"{c}.U"], dtype=np.float64)
            if u.ndim != 2 or u.shape[0] != s.m or not 1 <= u.shape[1] <= min(s.m, s.n):
                raise ShapeError(f"tensor '{c}.U' has shape {u.shape}, layer is {(s.m, s.n)}")
            v = _expect(t, f"{c}.Vbase", (u.shape[1], s.n))
            factors[c] = DecomposedLayer(c, u, v)
        else:
            weights[c] = _expect(t, c, (s.m, s.n))
        weights[f"{c}.scale"] = _expect(t, f"{c}.scale", (s.m,))
        weights[f"{c}.bias"] = _expect(t, f"{c}.bias", (s.m,))
    weights["head"] = _expect(t, "head", (2, 32))
    weights["head.bias"] = _expect(t, "head.bias", (2,))
    return MiniGazeNet(weights, factors)


def adapter_tensors(
    adapters: Mapping[str, Adapter],
    net: MiniGazeNet,
    affine: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Adapter file contents; ``affine`` holds tuned ``<conv>.scale``/``.bias`` if any."""
    out = {}
    for c, ad in adapters.items():
        for k, v in ad.params.items():
            out[f"{c}/{ad.kind}/{k}"] = v
        out[f"{c}/vbase"] = net.factors[c].Vbase
    for k, v in (affine or {}).items():
        c, part = k.split(".")
        out[f"{c}/affine/{part}"] = v
    return out


def affine_from_tensors(t: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in t.items():
        parts = name.split("/")
        if len(parts) == 3 and parts[1] == "affine":
            if parts[2] not in ("scale", "bias"):
                raise FormatError(f"unexpected tensor {name!r} in adapter file")
            out[f"{parts[0]}.{parts[2]}"] = np.asarray(arr, dtype=np.float64)
    return out


def adapters_from_tensors(t: Mapping[str, np.ndarray]):
    """Returns (adapters by layer, stored bases by layer)."""
    groups: dict[str, dict] = {}
    vbases = {}
    for name, arr in t.items():
        parts = name.split("/")
        if len(parts) == 2 and parts[1] == "vbase":
            vbases[parts[0]] = np.asarray(arr, dtype=np.float64)
        elif len(parts) == 3 and parts[1] == "affine":
            continue
        elif len(parts) == 3 and parts[1] in ("alfa", "lora"):
            g = groups.setdefault(parts[0], {"kind": parts[1], "params": {}})
            if g["kind"] != parts[1]:
                raise FormatError(f"layer {parts[0]!r} mixes adapter kinds")
            g["params"][parts[2]] = np.asarray(arr, dtype=np.float64)
        else:
            raise FormatError(f"unexpected tensor {name!r} in adapter file")
    adapters: dict[str, Adapter] = {}
    for c, g in groups.items():
        p = g["params"]
        try:
            if g["kind"] == "alfa":
                H = sum(1 for k in p if k.startswith("q_a."))
                r, d = p["q_a.0"].shape
                n = vbases[c].shape[1] if c in vbases else 0
                ad = AlfaAdapter(H, r, d, n, p)
            else:
                m, r = p["a"].shape
                ad = LoraAdapter(m, p["b"].shape[1], r, p)
        except KeyError as exc:
            raise FormatError(f"layer {c!r}: missing adapter tensor {exc}") from exc
        for k, shape in ad.shapes().items():
            if k not in p or p[k].shape != shape:
                got = p[k].shape if k in p else None
                raise ShapeError(f"{c}/{g['kind']}/{k}: shape {got}, expected {shape}")
        adapters[c] = ad
    return adapters, vbases


def bind_adapters(adapters: Mapping[str, Adapter], net: MiniGazeNet) -> None:
    """Check adapters against the net's factors; raises ShapeError on mismatch."""
    for c, ad in adapters.items():
        if c not in net.factors:
            raise ShapeError(f"adapter targets {c!r}, which is not factored in the net")
        if isinstance(ad, AlfaAdapter) and ad.n == 0:
            ad.n = net.factors[c].n
        check_compatible(ad, net.factors[c])


def load_net(path) -> MiniGazeNet:
    return net_from_tensors(load_atf(path))
