"""Truncated-SVD semantic basis for one layer and its rank-1 slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SliceIndexError
from .numerics import Matrix, as_matrix, svd


@dataclass(frozen=True)
class DecomposedLayer:
    """``W ~ U @ Vbase`` with ``U`` (m x d) orthonormal and ``Vbase = S_d V_d^T``.

    The singular values live inside ``Vbase`` as its row norms.
    """

    name: str
    U: Matrix
    Vbase: Matrix

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.Vbase.shape[1]

    def weight(self) -> Matrix:
        return self.U @ self.Vbase

    def with_right_factor(self, v: Matrix) -> "DecomposedLayer":
        if v.shape != self.Vbase.shape:
            raise ShapeError(f"right factor {v.shape} does not match {self.Vbase.shape}")
        return DecomposedLayer(self.name, self.U, v)


def flatten_conv(weight: np.ndarray) -> Matrix:
    """(out_ch, in_ch, k, k) -> (out_ch, in_ch*k*k), row-major over (in_ch, kr, kc)."""
    return np.ascontiguousarray(weight.reshape(weight.shape[0], -1), dtype=np.float64)


def decompose_layer(w: Matrix, d: int, name: str = "") -> DecomposedLayer:
    w = as_matrix(w)
    res = svd(w, d)
    return DecomposedLayer(name, res.U, res.S[:, None] * res.Vt)


def reconstruction_error(layer: DecomposedLayer, w: Matrix) -> float:
    w = as_matrix(w)
    if w.shape != (layer.m, layer.n):
        raise ShapeError(f"weight {w.shape} does not match layer {(layer.m, layer.n)}")
    return float(np.linalg.norm(w - layer.weight()))


def rank_slice(layer: DecomposedLayer, s: int) -> Matrix:
    """Rank-1 contribution of component ``s``: outer(U[:, s], Vbase[s])."""
    if not 0 <= s < layer.d:
        raise SliceIndexError(f"slice {s} outside [0, {layer.d})")
    return np.outer(layer.U[:, s], layer.Vbase[s])
