"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` (float64, rank <= 3).  A :class:`Tape`
records every operation applied to its nodes; :meth:`Tape.backward` walks the
record in reverse and returns the gradient of a scalar loss with respect to
each leaf.

There is no broadcasting: binary elementwise ops require equal shapes.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .rng import make_rng

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


class Node:
    __slots__ = ("id", "value", "parents", "vjp", "name", "needs_grad")

    def __init__(self, id: int, value: np.ndarray, parents: tuple["Node", ...], vjp, name, needs_grad):
        self.id = id
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.shape}, name={self.name!r})"


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of operations.  One tape per forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction
    def _push(self, value, parents=(), vjp: VJP | None = None, name=None, needs_grad=None) -> Node:
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        node = Node(len(self.nodes), value, tuple(parents), vjp, name, needs_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input (model parameter)."""
        return self._push(as_tensor(value), name=name, needs_grad=True)

    def constant(self, value) -> Node:
        return self._push(as_tensor(value), needs_grad=False)

    # -- ops
    def matmul(self, a: Node, b: Node) -> Node:
        A, B = a.value, b.value
        if A.ndim == 2 and B.ndim == 2:
            if A.shape[1] != B.shape[0]:
                raise ShapeError(f"matmul {A.shape} @ {B.shape}")

            def vjp(g):
                return g @ B.T, A.T @ g

        elif A.ndim == 3 and B.ndim == 2:
            if A.shape[2] != B.shape[0]:
                raise ShapeError(f"matmul {A.shape} @ {B.shape}")

            k, n = B.shape
            A2 = A.reshape(-1, k)

            def vjp(g):
                g2 = g.reshape(-1, n)
                return (g2 @ B.T).reshape(A.shape), A2.T @ g2

            # flattening the batch keeps this a single GEMM
            return self._push((A2 @ B).reshape(A.shape[0], A.shape[1], n), (a, b), vjp)

        elif A.ndim == 3 and B.ndim == 3:
            if A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
                raise ShapeError(f"batched matmul {A.shape} @ {B.shape}")

            def vjp(g):
                return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

        else:
            raise ShapeError(f"matmul unsupported for ranks {A.ndim}, {B.ndim}")
        return self._push(A @ B, (a, b), vjp)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add {a.shape} + {b.shape}")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"sub {a.shape} - {b.shape}")
        return self._push(a.value - b.value, (a, b), lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mul {a.shape} * {b.shape}")
        A, B = a.value, b.value
        return self._push(A * B, (a, b), lambda g: (g * B, g * A))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    def transpose(self, a: Node) -> Node:
        if a.value.ndim == 2:
            return self._push(a.value.T, (a,), lambda g: (g.T,))
        if a.value.ndim == 3:
            return self._push(a.value.transpose(0, 2, 1), (a,), lambda g: (g.transpose(0, 2, 1),))
        raise ShapeError("transpose needs rank 2 or 3")

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._push(a.value * mask, (a,), lambda g: (g * mask,))

    def row_softmax(self, a: Node, mask: np.ndarray | None = None) -> Node:
        """Softmax over the last axis.  ``mask`` (bool, same trailing shape) marks allowed entries."""
        x = a.value
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return self._push(s, (a,), vjp)

    def embed_gather(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        T = table.value
        if T.ndim != 2:
            raise ShapeError("embedding table must be rank 2")
        if ids.size and (ids.min() < 0 or ids.max() >= T.shape[0]):
            raise IndexError(f"token id out of range [0, {T.shape[0]})")

        flat = ids.ravel()
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)

        def vjp(g):
            # segment sums over sorted ids; fixed order, so deterministic
            out = np.zeros_like(T)
            if len(flat):
                out[uniq] = np.add.reduceat(g.reshape(-1, T.shape[1])[order], starts, axis=0)
            return (out,)

        return self._push(T[ids], (table,), vjp)

    def narrow(self, a: Node, axis: int, start: int, stop: int) -> Node:
        """Contiguous slice ``[start, stop)`` along ``axis``."""
        x = a.value
        axis = axis % x.ndim
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, stop)
        sl = tuple(sl)

        def vjp(g):
            out = np.zeros_like(x)
            out[sl] = g
            return (out,)

        return self._push(x[sl], (a,), vjp)

    def select(self, a: Node, axis: int, index: int, keepdims: bool = False) -> Node:
        """Single-index slice along ``axis``."""
        x = a.value
        axis = axis % x.ndim
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(index, index + 1) if keepdims else index
        sl = tuple(sl)

        def vjp(g):
            out = np.zeros_like(x)
            out[sl] = g
            return (out,)

        return self._push(x[sl], (a,), vjp)

    def concat(self, parts: Sequence[Node], axis: int = -1) -> Node:
        values = [p.value for p in parts]
        axis = axis % values[0].ndim
        bounds = np.cumsum([0] + [v.shape[axis] for v in values])

        def vjp(g):
            grads = []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            return grads

        return self._push(np.concatenate(values, axis=axis), tuple(parts), vjp)

    def layer_norm(self, a: Node, eps: float = 1e-5) -> Node:
        """Parameter-free normalisation over the last axis."""
        x = a.value
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        y = xc * inv

        def vjp(g):
            n = x.shape[-1]
            return (inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).sum(axis=-1, keepdims=True) / n),)

        return self._push(y, (a,), vjp)

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._push(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))

    def cross_entropy_from_logits(self, logits: Node, labels) -> Node:
        """Mean cross-entropy of rows of ``logits`` against integer ``labels``."""
        z = logits.value
        single = z.ndim == 1
        if single:
            z = z[None, :]
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if z.ndim != 2 or len(labels) != z.shape[0]:
            raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
            raise IndexError("label out of range")
        n = z.shape[0]
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
        rows = np.arange(n)
        loss = float((lse[:, 0] - z[rows, labels]).mean())

        def vjp(g):
            probs = np.exp(z - lse)
            probs[rows, labels] -= 1.0
            probs *= float(g) / n
            return (probs[0] if single else probs,)

        return self._push(np.asarray(loss), (logits,), vjp)

    # -- differentiation
    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every named leaf reachable from it.

        Unnamed leaves are keyed by ``"#<node id>"``.
        """
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not np.isfinite(loss.value):
            raise NonFiniteError("loss is not finite")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None) if node.vjp is not None else grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.needs_grad or pg is None:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        out = {}
        for node in self.nodes[: loss.id + 1]:
            if node.vjp is None and node.needs_grad:
                key = node.name if node.name is not None else f"#{node.id}"
                out[key] = grads.get(node.id, np.zeros_like(node.value))
        return out


# ------------------------------------------------------------------ norms


def frobenius_norm(M) -> float:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError("frobenius_norm needs a matrix")
    return float(np.sqrt(np.sum(M * M)))


@dataclass
class PowerIterationResult:
    value: float
    residual: float
    iterations: int
    converged: bool


def power_iteration(M, max_iters: int = 10_000, tol: float = 1e-14, seed: int = 0) -> PowerIterationResult:
    """Largest singular value via power iteration on ``M^T M``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError("spectral_norm needs a matrix")
    n = M.shape[1]
    if not np.any(M):
        return PowerIterationResult(0.0, 0.0, 0, True)
    v = make_rng(seed, "misc").standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = M.T @ (M @ v)
        new_lam = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # start vector in the null space: restart on a fresh direction
            v = make_rng(seed + it, "misc").standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        v = w / norm_w
        if abs(new_lam - lam) <= tol * max(new_lam, 1e-300):
            lam = float(v @ (M.T @ (M @ v)))
            residual = float(np.linalg.norm(M.T @ (M @ v) - lam * v))
            return PowerIterationResult(float(np.sqrt(max(lam, 0.0))), residual, it, True)
        lam = new_lam
    residual = float(np.linalg.norm(M.T @ (M @ v) - lam * v))
    return PowerIterationResult(float(np.sqrt(max(lam, 0.0))), residual, max_iters, False)


def spectral_norm(M, max_iters: int = 10_000, tol: float = 1e-14, seed: int = 0) -> float:
    res = power_iteration(M, max_iters, tol, seed)
    if not res.converged:
        warnings.warn(
            f"power iteration stopped after {res.iterations} iterations (residual {res.residual:.3g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return res.value


# -------------------------------------------------------------- binary io


def save_tensor(path: str | Path, x) -> None:
    """Little-endian: uint64 rank, uint64 dims..., float64 payload (row-major)."""
    arr = as_tensor(x)
    header = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (rank,) = struct.unpack_from("<Q", raw, 0)
    if rank > MAX_RANK:
        raise ShapeError(f"stored rank {rank} exceeds {MAX_RANK}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 * (1 + rank)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match header {dims}")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)
