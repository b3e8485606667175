"""Dense numeric substrate: matrix helpers, Jacobi SVD, a small reverse-mode
tape, AdamW and a central-difference gradient oracle.

Matrices are plain 2-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, RankError, ShapeError

Matrix = np.ndarray


def as_matrix(x) -> Matrix:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seedable PCG64 generator; extra ints select independent sub-streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------- SVD


@dataclass(frozen=True)
class SvdResult:
    U: Matrix
    S: np.ndarray
    Vt: Matrix

    @property
    def d(self) -> int:
        return len(self.S)

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.Vt


def _jacobi_columns(a: Matrix, tol: float = 1e-15, max_sweeps: int = 80):
    """One-sided (Hestenes) Jacobi: rotate columns of ``a`` until mutually
    orthogonal. Returns (rotated columns, accumulated rotation)."""
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p], a[:, q] = new_p, new_q
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    return a, v


def _complete_orthonormal(q: Matrix, k: int) -> Matrix:
    """Replace columns ``k:`` of ``q`` by an orthonormal completion of ``q[:, :k]``."""
    m, d = q.shape
    out = q.copy()
    cand = 0
    for j in range(k, d):
        while True:
            e = np.zeros(m)
            e[cand % m] = 1.0
            cand += 1
            for _ in range(2):
                e -= out[:, :j] @ (out[:, :j].T @ e)
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                out[:, j] = e / nrm
                break
    return out


def svd(w: Matrix, d: int) -> SvdResult:
    """Rank-``d`` truncated SVD by one-sided Jacobi on the smaller Gram side.

    Each right singular vector is signed so that its largest-magnitude entry
    is positive.
    """
    w = as_matrix(w)
    m, n = w.shape
    if not 1 <= d <= min(m, n):
        raise RankError(f"rank {d} outside [1, {min(m, n)}] for shape {w.shape}")
    transposed = n > m
    a = w.T if transposed else w
    cols, rot = _jacobi_columns(a)
    sig = np.linalg.norm(cols, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    cols = cols[:, order]
    rot = rot[:, order]
    scale = sig[0] if sig[0] > 0 else 1.0
    nonzero = int(np.sum(sig > scale * 1e-13)) if sig[0] > 0 else 0
    left = np.zeros_like(cols)
    left[:, :nonzero] = cols[:, :nonzero] / sig[:nonzero]
    sig = np.where(np.arange(len(sig)) < nonzero, sig, 0.0)
    if nonzero < cols.shape[1]:
        left = _complete_orthonormal(left, nonzero)
    # a = left diag(sig) rot^T; for w = a^T the roles of the factors swap
    if transposed:
        U, Vt = rot, left.T
    else:
        U, Vt = left, rot.T
    U = U[:, :d].copy()
    Vt = Vt[:d].copy()
    S = sig[:d].copy()
    for i in range(d):
        j = int(np.argmax(np.abs(Vt[i])))
        if Vt[i, j] < 0:
            Vt[i] = -Vt[i]
            U[:, i] = -U[:, i]
    return SvdResult(U=U, S=S, Vt=Vt)


# --------------------------------------------------------------------------- tape


@dataclass(eq=False)
class Node:
    value: Matrix
    parents: tuple = ()
    backward_fn: Callable[[Matrix], tuple] | None = None
    name: str | None = None
    grad: Matrix | None = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Eager reverse-mode tape over a fixed set of matrix primitives.

    Values are computed as nodes are recorded, so recording order is a
    topological order. Anything outside the primitive set is composed from it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _record(self, value, parents=(), backward_fn=None, name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), tuple(parents), backward_fn, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._record(as_matrix(value).copy(), name=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._record(as_matrix(value))

    def matmul(self, a: Node, b: Node) -> Node:
        out = matmul(a.value, b.value)
        return self._record(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"cannot add {a.shape} and {b.shape}")
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def transpose(self, a: Node) -> Node:
        return self._record(a.value.T.copy(), (a,), lambda g: (g.T,))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def softmax_rows(self, a: Node) -> Node:
        p = softmax_rows(a.value)

        def back(g):
            return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

        return self._record(p, (a,), back)

    def l1_mean(self, a: Node) -> Node:
        """Sum of absolute entries divided by the row count; d|x|/dx at 0 is 0."""
        rows = a.shape[0]
        val = np.array([[np.abs(a.value).sum() / rows]])
        sgn = np.sign(a.value)
        return self._record(val, (a,), lambda g: (g[0, 0] * sgn / rows,))

    def stack(self, parts: Sequence[Node]) -> Node:
        cols = {p.shape[1] for p in parts}
        if len(cols) != 1:
            raise ShapeError(f"cannot stack blocks of shapes {[p.shape for p in parts]}")
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def back(g):
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

        return self._record(np.vstack([p.value for p in parts]), tuple(parts), back)

    def backward(self, loss: Node) -> dict[str, Matrix]:
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be a 1x1 scalar node, got shape {loss.shape}")
        return self.vjp(loss, np.ones((1, 1)))

    def vjp(self, out: Node, cotangent: Matrix) -> dict[str, Matrix]:
        """Pull ``cotangent`` back from ``out`` to every registered parameter."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != out.shape:
            raise ShapeError(f"cotangent {cotangent.shape} does not match node {out.shape}")
        for node in self.nodes:
            node.grad = None
        out.grad = cotangent.copy()
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self.params.items()
        }


def fd_gradient(f: Callable[[Matrix], float], p: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of scalar ``f`` at ``p``."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    p = as_matrix(p)
    grad = np.zeros_like(p)
    work = p.copy()
    for idx in np.ndindex(*p.shape):
        orig = work[idx]
        work[idx] = orig + h
        fp = f(work.copy())
        work[idx] = orig - h
        fm = f(work.copy())
        work[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64), 0)


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW update with decoupled weight decay; returns new arrays."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = param * (1.0 - lr * weight_decay) if weight_decay else param
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


@dataclass
class AdamW:
    """Keeps per-tensor AdamW state for a dict of named parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_scale: dict[str, float] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            st = self.state.get(name) or AdamState.zeros_like(params[name])
            params[name], self.state[name] = adamw_step(
                params[name],
                g,
                st,
                self.lr * self.lr_scale.get(name, 1.0),
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            )
