"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every primitive computes its forward value eagerly with numpy and, when a tape
is active, appends a node holding its inputs, its output and a vector-Jacobian
closure.  Nodes are appended in execution order, which is a valid topological
order, so the backward sweep is a single reverse pass over the list.

Contractions over the batch axis use ``np.einsum(..., optimize=False)`` rather
than ``@``: BLAS kernels may round a row differently depending on where it sits
in the batch, and per-sample values must not depend on batch composition.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeGraph",
    "ShapeError",
    "GraphError",
    "evaluate",
    "backward",
    "mark",
    "grad",
    "finite_diff_grad",
    "hvp",
    "add",
    "sub",
    "mul",
    "matmul",
    "bias_add",
    "conv2d",
    "relu",
    "global_avg_pool",
    "flatten",
    "total",
    "softmax_cross_entropy",
    "mse",
]

GRAD_STEP = 1e-5
HVP_STEP = 1e-4


class ShapeError(ValueError):
    """A primitive received operands whose shapes violate its rule."""


class GraphError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float64 array that can sit on a tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    index: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class _Tape:
    nodes: list[Node] = field(default_factory=list)
    marks: dict[str, Tensor] = field(default_factory=dict)


_local = threading.local()


def _active() -> _Tape | None:
    return getattr(_local, "tape", None)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    t = Tensor._wrap(out)
    tape = _active()
    if tape is not None:
        tape.nodes.append(Node(len(tape.nodes), op, inputs, t, vjp))
    return t


def _shape_error(op: str, msg: str) -> ShapeError:
    tape = _active()
    where = f"node {len(tape.nodes)} ({op})" if tape is not None else op
    return ShapeError(f"{where}: {msg}")


def mark(name: str, tensor: Tensor) -> Tensor:
    """Designate an intermediate tensor so ``backward`` reports its gradient."""
    tape = _active()
    if tape is not None:
        tape.marks[name] = tensor
    return tensor


class TapeGraph:
    """A scalar-valued composite function ``fn(**bindings) -> Tensor``.

    ``evaluate`` records a fresh tape on each call; ``backward`` differentiates
    the most recent recording.  One instance must not be driven from two threads
    at once; distinct instances are independent.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self.nodes: list[Node] = []
        self.marks: dict[str, Tensor] = {}
        self.bindings: dict[str, Tensor] = {}
        self.sink: Tensor | None = None

    def evaluate(self, bindings: Mapping[str, object]) -> Tensor:
        bound = {k: _as_tensor(v) for k, v in bindings.items()}
        tape = _Tape()
        prev = _active()
        _local.tape = tape
        try:
            out = self.fn(**bound)
        finally:
            _local.tape = prev
        if not isinstance(out, Tensor):
            out = _as_tensor(out)
        if out.size != 1:
            raise GraphError(f"sink must be scalar, got shape {out.shape}")
        self.nodes, self.marks, self.bindings, self.sink = tape.nodes, tape.marks, bound, out
        return out

    def backward(self, seed: float = 1.0) -> dict[str, np.ndarray]:
        if self.sink is None:
            raise GraphError("backward called before evaluate")
        keep = {id(t) for t in self.marks.values()} | {id(t) for t in self.bindings.values()}
        grads: dict[int, np.ndarray] = {id(self.sink): np.full(self.sink.shape, float(seed))}
        for node in reversed(self.nodes):
            key_out = id(node.output)
            # drop intermediate gradients once propagated; marked ones are reported
            g = grads.get(key_out) if key_out in keep else grads.pop(key_out, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return {name: self._lookup(grads, t) for name, t in {**self.bindings, **self.marks}.items()}

    def _lookup(self, grads, t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros(t.shape) if g is None else g


def evaluate(graph: TapeGraph, bindings: Mapping[str, object]) -> Tensor:
    return graph.evaluate(bindings)


def backward(graph: TapeGraph, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of the sink with respect to every binding and marked tensor."""
    return graph.backward(seed)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("mul", a, b)
    x, y = a.data, b.data
    return _record("mul", (a, b), x * y,
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(B, K) @ (K, N)."""
    x, w = a.data, b.data
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("matmul", f"cannot multiply {x.shape} by {w.shape}")
    out = np.einsum("bk,kn->bn", x, w, optimize=False)

    def vjp(g):
        return (np.einsum("bn,kn->bk", g, w, optimize=False),
                np.einsum("bk,bn->kn", x, g, optimize=False))

    return _record("matmul", (a, b), out, vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (B, F) or per-channel (B, C, H, W) bias."""
    h, bias = x.data, b.data
    if bias.ndim != 1 or h.ndim not in (2, 4) or h.shape[1] != bias.shape[0]:
        raise _shape_error("bias_add", f"bias {bias.shape} does not fit input {h.shape}")
    if h.ndim == 2:
        return _record("bias_add", (x, b), h + bias, lambda g: (g, g.sum(axis=0)))
    return _record("bias_add", (x, b), h + bias[:, None, None],
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) with (O, C, k, k) and zero padding."""
    h, k_ = x.data, w.data
    if h.ndim != 4 or k_.ndim != 4 or h.shape[1] != k_.shape[1] or k_.shape[2] != k_.shape[3]:
        raise _shape_error("conv2d", f"input {h.shape} incompatible with kernel {k_.shape}")
    if stride < 1 or pad < 0:
        raise _shape_error("conv2d", f"bad stride={stride} pad={pad}")
    B, C, H, W = h.shape
    O, _, k, _ = k_.shape
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise _shape_error("conv2d", f"kernel {k} larger than padded input {H}x{W}")
    hp = np.pad(h, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else h
    cols = np.empty((B, Ho, Wo, C, k, k))
    for di in range(k):
        for dj in range(k):
            patch = hp[:, :, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride]
            cols[:, :, :, :, di, dj] = patch.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(B * Ho * Wo, C * k * k)
    wmat = k_.reshape(O, C * k * k)
    out = np.einsum("nk,ok->no", cols2, wmat, optimize=False)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = np.einsum("no,nk->ok", g2, cols2, optimize=False).reshape(k_.shape)
        gcols = np.einsum("no,ok->nk", g2, wmat, optimize=False).reshape(B, Ho, Wo, C, k, k)
        ghp = np.zeros(hp.shape)
        for di in range(k):
            for dj in range(k):
                ghp[:, :, di:di + stride * (Ho - 1) + 1:stride,
                    dj:dj + stride * (Wo - 1) + 1:stride] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        gx = ghp[:, :, pad:pad + H, pad:pad + W] if pad else ghp
        return gx, gw

    return _record("conv2d", (x, w), np.ascontiguousarray(out), vjp)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken to be 0."""
    h = x.data
    return _record("relu", (x,), np.maximum(h, 0.0), lambda g: (g * (h > 0),))


def global_avg_pool(x: Tensor) -> Tensor:
    h = x.data
    if h.ndim != 4:
        raise _shape_error("global_avg_pool", f"expected (B, C, H, W), got {h.shape}")
    area = h.shape[2] * h.shape[3]
    return _record("global_avg_pool", (x,), h.sum(axis=(2, 3)) / area,
                   lambda g: (np.broadcast_to(g[:, :, None, None] / area, h.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    if len(shape) < 1:
        raise _shape_error("flatten", "cannot flatten a scalar")
    return _record("flatten", (x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    shape = x.shape
    return _record("total", (x,), np.array(math.fsum(x.data.ravel())),
                   lambda g: (np.full(shape, float(g)),))


def _reduce(per_sample: np.ndarray, reduction: str) -> tuple[np.ndarray, float]:
    # fsum is correctly rounded, so the reduction ignores sample order
    m = per_sample.shape[0]
    s = math.fsum(per_sample)
    if reduction == "sum":
        return np.array(s), 1.0
    if reduction == "mean":
        return np.array(s / m), 1.0 / m
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) cross-entropy of integer class labels under softmax(logits)."""
    z = logits.data
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64).ravel()
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise _shape_error("softmax_cross_entropy", f"logits {z.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise _shape_error("softmax_cross_entropy", f"labels out of range for {z.shape[1]} classes")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    per = (np.log(se[:, 0]) + zmax[:, 0]) - z[rows, y]
    value, w = _reduce(per, reduction)

    def vjp(g):
        p = e / se
        p[rows, y] -= 1.0
        return (p * (float(g) * w),)

    return _record("softmax_cross_entropy", (logits,), value, vjp)


def mse(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Per-sample ½‖pred − target‖², averaged (or summed) over the batch."""
    p = pred.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise _shape_error("mse", f"prediction {p.shape} vs target {t.shape}")
    r = p - t
    per = 0.5 * (r * r).reshape(r.shape[0], -1).sum(axis=1)
    value, w = _reduce(per, reduction)
    return _record("mse", (pred,), value, lambda g: (r * (float(g) * w),))


# ---------------------------------------------------------------------------
# oracles and derived quantities


def grad(f: Callable[[Tensor], Tensor], w) -> np.ndarray:
    """Gradient of scalar ``f`` at ``w`` by one reverse sweep."""
    g = TapeGraph(lambda w: f(w))
    g.evaluate({"w": np.asarray(w, dtype=np.float64)})
    return g.backward()["w"]


def finite_diff_grad(f: Callable, x, step: float = GRAD_STEP) -> np.ndarray:
    """Central differences (f(x + s e_k) - f(x - s e_k)) / 2s for every coordinate."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x.copy()))
        flat[k] = orig - step
        fm = float(f(x.copy()))
        flat[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near coordinate {k}")
        out[k] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def hvp(f: Callable[[Tensor], Tensor] | None, w, v, step: float = HVP_STEP,
        grad_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """H(w) v as the central difference of reverse-mode gradients along ``v``.

    ``grad_fn`` overrides how gradients are obtained (it must itself use
    ``backward``); otherwise ``f`` is differentiated with :func:`grad`.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if w.shape != v.shape:
        raise ValueError(f"dimension mismatch: w {w.shape} vs v {v.shape}")
    if not step > 0:
        raise ValueError("step must be positive")
    if grad_fn is None:
        if f is None:
            raise ValueError("need f or grad_fn")
        grad_fn = lambda p: grad(f, p)  # noqa: E731
    return (grad_fn(w + step * v) - grad_fn(w - step * v)) / (2 * step)


def gradcheck(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
              step: float = GRAD_STEP) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The output of ``op`` is reduced to a scalar through a fixed random
    projection so every output coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    names = [f"x{i}" for i in range(len(inputs))]
    probe = None

    def f_of(*arrs):
        nonlocal probe
        out = op(*arrs)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return total(mul(out, Tensor._wrap(probe)))

    g = TapeGraph(lambda **kw: f_of(*[kw[n] for n in names]))
    g.evaluate(dict(zip(names, inputs)))
    ad = g.backward()
    worst = 0.0
    for i, name in enumerate(names):

        def fi(xi, i=i):
            args = [Tensor._wrap(np.asarray(a, dtype=np.float64)) for a in inputs]
            args[i] = Tensor._wrap(xi)
            return f_of(*args).item()

        fd = finite_diff_grad(fi, inputs[i], step)
        denom = max(np.linalg.norm(fd), np.linalg.norm(ad[name]), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - ad[name]) / denom))
    return worst
