"""Alfa attention adapter over the semantic basis, the LoRA baseline, merging
and closed-form parameter accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .decompose import DecomposedLayer
from .errors import ParameterError, ShapeError, SliceIndexError
from .numerics import Matrix, Node, Tape


@dataclass
class AlfaAdapter:
    H: int
    r: int
    d: int
    n: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "alfa"

    def q_a(self, h: int) -> np.ndarray:
        return self.params[f"q_a.{h}"]

    def q_b(self, h: int) -> np.ndarray:
        return self.params[f"q_b.{h}"]

    @property
    def p_a(self) -> np.ndarray:
        return self.params["p_a"]

    @property
    def p_b(self) -> np.ndarray:
        return self.params["p_b"]

    def shapes(self) -> dict[str, tuple[int, int]]:
        H, r, d = self.H, self.r, self.d
        out = {}
        for h in range(H):
            out[f"q_a.{h}"] = (r, d)
            out[f"q_b.{h}"] = (d, r)
        out["p_a"] = (r * H, H * d)
        out["p_b"] = (d, r * H)
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "AlfaAdapter":
        return AlfaAdapter(self.H, self.r, self.d, self.n, {k: v.copy() for k, v in self.params.items()})


@dataclass
class LoraAdapter:
    m: int
    n: int
    r: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "lora"

    @property
    def A(self) -> np.ndarray:
        return self.params["a"]

    @property
    def B(self) -> np.ndarray:
        return self.params["b"]

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {"a": (self.m, self.r), "b": (self.r, self.n)}

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.m, self.n, self.r, {k: v.copy() for k, v in self.params.items()})


Adapter = Union[AlfaAdapter, LoraAdapter]


@dataclass
class AdaptedLayer:
    base: DecomposedLayer
    adapter: Adapter | None = None

    def __post_init__(self):
        check_compatible(self.adapter, self.base)


def check_compatible(adapter: Adapter | None, base: DecomposedLayer) -> None:
    if adapter is None:
        return
    if isinstance(adapter, AlfaAdapter):
        if (adapter.d, adapter.n) != (base.d, base.n):
            raise ShapeError(
                f"Alfa adapter built for (d={adapter.d}, n={adapter.n}) "
                f"but layer {base.name!r} has (d={base.d}, n={base.n})"
            )
    elif (adapter.m, adapter.n) != (base.m, base.n):
        raise ShapeError(
            f"LoRA adapter built for {(adapter.m, adapter.n)} but layer has {(base.m, base.n)}"
        )


def default_sigma(d: int) -> float:
    return 1.0 / math.sqrt(d)


def init_alfa(
    d: int, n: int, H: int, r: int, sigma: float | None, rng: np.random.Generator
) -> AlfaAdapter:
    if min(d, n, H, r) < 1:
        raise ParameterError(f"dimensions must be positive: d={d} n={n} H={H} r={r}")
    sigma = default_sigma(d) if sigma is None else sigma
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    ad = AlfaAdapter(H, r, d, n)
    for h in range(H):
        ad.params[f"q_a.{h}"] = rng.normal(0.0, sigma, size=(r, d))
        ad.params[f"q_b.{h}"] = np.zeros((d, r))
    ad.params["p_a"] = rng.normal(0.0, sigma, size=(r * H, H * d))
    ad.params["p_b"] = np.zeros((d, r * H))
    return ad


def init_lora(m: int, n: int, r: int, sigma: float, rng: np.random.Generator) -> LoraAdapter:
    if min(m, n, r) < 1:
        raise ParameterError(f"dimensions must be positive: m={m} n={n} r={r}")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    return LoraAdapter(m, n, r, {"a": rng.normal(0.0, sigma, size=(m, r)), "b": np.zeros((r, n))})


# --------------------------------------------------------------------------- Alfa forward


def alfa_graph(
    tape: Tape, p: dict[str, Node], vbase: Node, H: int
) -> tuple[Node, list[Node]]:
    """Record the Alfa residual on ``tape``.

    ``p`` maps adapter parameter names to tape nodes. Returns the residual
    node (d x n) and the per-head attention nodes (d x d).
    """
    n = vbase.shape[1]
    inv_sqrt_n = 1.0 / math.sqrt(n)
    keys_t = tape.transpose(vbase)  # n x d; also the value matrix
    attns, blocks = [], []
    for h in range(H):
        q = tape.matmul(tape.matmul(p[f"q_b.{h}"], p[f"q_a.{h}"]), vbase)
        attn = tape.softmax_rows(tape.scale(tape.matmul(q, keys_t), inv_sqrt_n))
        z_h = tape.matmul(keys_t, tape.transpose(attn))  # n x d
        blocks.append(tape.transpose(z_h))
        attns.append(attn)
    z = tape.stack(blocks)  # Hd x n
    delta = tape.matmul(p["p_b"], tape.matmul(p["p_a"], z))
    return delta, attns


def record_alfa(tape: Tape, adapter: AlfaAdapter, base: DecomposedLayer, prefix: str = ""):
    check_compatible(adapter, base)
    nodes = {k: tape.param(prefix + k, v) for k, v in adapter.params.items()}
    vb = tape.const(base.Vbase)
    return alfa_graph(tape, nodes, vb, adapter.H)


def alfa_delta(adapter: AlfaAdapter, base: DecomposedLayer) -> Matrix:
    """Learnable residual on the right factor; zero while ``p_b`` is zero."""
    delta, _ = record_alfa(Tape(), adapter, base)
    return delta.value


def alfa_attention(adapter: AlfaAdapter, base: DecomposedLayer) -> list[Matrix]:
    _, attns = record_alfa(Tape(), adapter, base)
    return [a.value for a in attns]


def alfa_delta_and_grads(
    adapter: AlfaAdapter, base: DecomposedLayer, grad_delta: Matrix
) -> dict[str, np.ndarray]:
    """Adapter gradients given dLoss/dResidual."""
    tape = Tape()
    delta, _ = record_alfa(tape, adapter, base)
    return tape.vjp(delta, grad_delta)


def lora_delta(adapter: LoraAdapter) -> Matrix:
    a, b = adapter.A, adapter.B
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"LoRA factors {a.shape} and {b.shape} do not chain")
    return a @ b


def effective_weight(base: DecomposedLayer, adapter: Adapter | None) -> Matrix:
    """Weight used by the adapter path, rebuilt from factors on every call."""
    if adapter is None:
        return base.U @ base.Vbase
    if isinstance(adapter, AlfaAdapter):
        return base.U @ (base.Vbase + alfa_delta(adapter, base))
    return base.U @ base.Vbase + lora_delta(adapter)


def merged_weight(layer: AdaptedLayer) -> Matrix | DecomposedLayer:
    """Fold the adapter into stored weights.

    Alfa stays factored as (U, Vbase + residual); LoRA must expand to the full
    m x n matrix; no adapter returns the base layer itself.
    """
    ad = layer.adapter
    if ad is None:
        return layer.base
    if isinstance(ad, AlfaAdapter):
        return layer.base.with_right_factor(layer.base.Vbase + alfa_delta(ad, layer.base))
    return layer.base.U @ layer.base.Vbase + lora_delta(ad)


def head_topk(adapter: AlfaAdapter, base: DecomposedLayer, h: int, k: int) -> list[int]:
    return [i for i, _ in head_topk_mass(adapter, base, h, k)]


def head_topk_mass(
    adapter: AlfaAdapter, base: DecomposedLayer, h: int, k: int
) -> list[tuple[int, float]]:
    """Top-``k`` rank slices of head ``h`` by received attention mass."""
    if not 0 <= h < adapter.H:
        raise SliceIndexError(f"head {h} outside [0, {adapter.H})")
    if not 1 <= k <= adapter.d:
        raise SliceIndexError(f"top-k {k} outside [1, {adapter.d}]")
    mass = alfa_attention(adapter, base)[h].sum(axis=0)
    order = sorted(range(adapter.d), key=lambda i: (-mass[i], i))
    return [(i, float(mass[i])) for i in order[:k]]


# --------------------------------------------------------------------------- accounting


def alfa_layer_params(H: int, r: int, d: int) -> int:
    # queries 2rd per head, projection rH*Hd + d*rH
    return H * 2 * r * d + r * H * H * d + d * r * H


def alfa_param_count(H: int, r: int, d: int, layers: int) -> int:
    if min(H, r, d, layers) < 1:
        raise ParameterError("all arguments must be positive")
    return layers * H * r * d * (H + 3)


def lora_layer_params(m: int, n: int, r: int) -> int:
    return r * (m + n)
