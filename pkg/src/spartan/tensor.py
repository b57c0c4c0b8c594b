"""Dense float tensors plus a reverse-mode tape.

The tape records one node per produced tensor, in creation order, so the node
list is always topologically sorted.  Backward rules are attached per node and
are free to disagree with the true derivative of the forward rule -- that is
what lets filtering layers train a Heaviside forward pass with a synthetic
gradient.

Training and attacks run in float32; gradient checking runs in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)


class TapeError(RuntimeError):
    """Raised when a tape is used outside its contract (corruption, nesting)."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    # min/max propagate NaN and catch +-Inf without allocating a bool mask
    if not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """Row-major dense array of 32-bit floats (64-bit for gradient checks)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        _check_finite(self.data, "tensor construction")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter:
    """A named trainable tensor with a gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: Tensor, name: str):
        self.value = value
        self.grad = Tensor(np.zeros_like(value.data))
        self.name = name

    def zero_grad(self) -> None:
        self.grad.data[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Rng:
    """Deterministic, splittable random stream.

    A seed plus a split path fully determine the stream (PCG64 under a
    SeedSequence), so identical seeds reproduce identical draws across runs
    and platforms.  ``split`` derives an independent child stream; the parent
    is not advanced.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, key: int) -> "Rng":
        return Rng(self.seed, self.path + (int(key),))

    def uniform(self, low: float, high: float, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Node:
    """One recorded operation: output, parents, and its backward rule."""

    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable, op: str):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


_ACTIVE_TAPE: "Tape | None" = None


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


class Tape:
    """Reverse-mode recording of a forward computation.

    Use as a context manager around the forward pass, then call ``backward``
    on the scalar loss.  Gradients for every Parameter seen by the forward
    pass accumulate into ``Parameter.grad``; gradients for explicitly
    requested input tensors are returned.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[int, Parameter] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, out: Tensor, parents: tuple, backward: Callable, op: str) -> None:
        self.nodes.append(Node(out, parents, backward, op))

    def register_parameter(self, param: Parameter) -> None:
        self._params[id(param.value)] = param

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] = ()) -> list[np.ndarray]:
        if loss.size != 1:
            raise ValueError("backward requires a scalar loss")
        position = {id(node.out): i for i, node in enumerate(self.nodes)}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            out_grad = grads.get(id(node.out))
            if out_grad is None:
                continue  # branch not connected to the loss
            parent_grads = node.backward(out_grad)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                pos = position.get(id(parent))
                if pos is not None and pos >= i:
                    raise TapeError(
                        f"corrupt tape: node {node.op!r} at {i} consumes a "
                        f"tensor produced later (position {pos})"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, copy=True)
        for key, param in self._params.items():
            g = grads.get(key)
            if g is not None:
                param.grad.data += g
        return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


def _unwrap(x) -> Tensor:
    if isinstance(x, Parameter):
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE.register_parameter(x)
        return x.value
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor or Parameter, got {type(x).__name__}")


def record(out: Tensor, parents: tuple, backward: Callable, op: str) -> Tensor:
    """Attach a node to the active tape, if any, and return the output."""
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, parents, backward, op)
    return out


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError(f"{op}: mixed dtypes {dt} and {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# construction


def construct(shape, fill=0.0, data=None, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor of ``shape`` filled with a constant or explicit data."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"shape extents must be >= 1, got {shape}")
    n = int(np.prod(shape)) if shape else 1
    if data is not None:
        flat = np.asarray(data, dtype=dtype).reshape(-1)
        if flat.size != n:
            raise ValueError(f"data length {flat.size} does not match shape {shape}")
        return Tensor(flat.reshape(shape).copy())
    return Tensor(np.full(shape, fill, dtype=dtype))


def he_uniform_init(shape, fan_in: int, rng: Rng, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform draw on [-sqrt(6/fan_in), +sqrt(6/fan_in)]."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape, dtype=dtype))


# ---------------------------------------------------------------------------
# differentiable operations


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may be a scalar or a row bias."""
    ta, tb = _unwrap(a), _unwrap(b)
    _same_dtype("add", ta, tb)
    A, B = ta.data, tb.data
    if A.shape == B.shape:
        reduce_b = None
    elif B.ndim == 0:
        reduce_b = "all"
    elif A.ndim == 2 and B.shape == (A.shape[1],):
        reduce_b = "rows"
    else:
        raise ValueError(f"add: incompatible shapes {A.shape} and {B.shape}")
    out = Tensor(A + B)

    def backward(g):
        if reduce_b is None:
            return g, g
        if reduce_b == "all":
            return g, g.sum()
        return g, g.sum(axis=0)

    return record(out, (ta, tb), backward, "add")


def scale(x, c: float) -> Tensor:
    tx = _unwrap(x)
    c = float(c)
    out = Tensor(tx.data * tx.dtype.type(c))

    def backward(g):
        return (g * c,)

    return record(out, (tx,), backward, "scale")


def sum_all(x) -> Tensor:
    tx = _unwrap(x)
    out = Tensor(tx.data.sum(dtype=tx.dtype))

    def backward(g):
        return (np.full_like(tx.data, g),)

    return record(out, (tx,), backward, "sum_all")


def l1_sum(x) -> Tensor:
    """Sum of absolute values; backward is sign(x), with sign(0) = 0."""
    tx = _unwrap(x)
    out = Tensor(np.abs(tx.data).sum(dtype=tx.dtype))

    def backward(g):
        return (g * np.sign(tx.data),)

    return record(out, (tx,), backward, "l1_sum")


def gather_sum(logits, classes) -> Tensor:
    """Sum of one selected logit per row: sum_i logits[i, classes[i]]."""
    tl = _unwrap(logits)
    idx = np.asarray(classes, dtype=np.int64)
    n, k = tl.shape
    if idx.shape != (n,) or idx.min() < 0 or idx.max() >= k:
        raise ValueError("gather_sum: class indices out of range")
    rows = np.arange(n)
    out = Tensor(tl.data[rows, idx].sum(dtype=tl.dtype))

    def backward(g):
        d = np.zeros_like(tl.data)
        d[rows, idx] = g
        return (d,)

    return record(out, (tl,), backward, "gather_sum")


def reshape(x, shape) -> Tensor:
    tx = _unwrap(x)
    out = Tensor(tx.data.reshape(shape))

    def backward(g):
        return (g.reshape(tx.shape),)

    return record(out, (tx,), backward, "reshape")


def matmul(a, b) -> Tensor:
    ta, tb = _unwrap(a), _unwrap(b)
    _same_dtype("matmul", ta, tb)
    A, B = ta.data, tb.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {A.shape} x {B.shape}")
    out = Tensor(A @ B)

    def backward(g):
        return g @ B.T, A.T @ g

    return record(out, (ta, tb), backward, "matmul")


def relu(x) -> Tensor:
    tx = _unwrap(x)
    out = Tensor(np.maximum(tx.data, 0))

    def backward(g):
        return (g * (tx.data > 0),)

    return record(out, (tx,), backward, "relu")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + oh, j : j + ow]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation with per-filter bias.

    The float64 forward accumulates products in (channel, row, col) order to
    stay bit-identical to a naive loop oracle; float32 goes through im2col
    and a batched matmul.
    """
    tx, tw, tb = _unwrap(x), _unwrap(w), _unwrap(b)
    _same_dtype("conv2d", tx, tw, tb)
    xd, wd, bd = tx.data, tw.data, tb.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d: x must be [N,C,H,W] and w [F,C,KH,KW]")
    n, c, h, ww = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise ValueError(f"conv2d: channel mismatch (input {c}, kernel {cw})")
    if h < kh or ww < kw:
        raise ValueError(f"conv2d: input {h}x{ww} smaller than kernel {kh}x{kw}")
    if bd.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bd.shape} != ({f},)")
    oh, ow = h - kh + 1, ww - kw + 1
    w2 = wd.reshape(f, c * kh * kw)
    cols = None
    if xd.dtype == np.float64:
        out_d = np.broadcast_to(bd[None, :, None, None], (n, f, oh, ow)).astype(xd.dtype)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xd[:, ci, i : i + oh, j : j + ow]
                    out_d = out_d + patch[:, None, :, :] * wd[None, :, ci, i, j, None, None]
    else:
        cols = _im2col(xd, kh, kw)
        out_d = np.matmul(w2[None], cols).reshape(n, f, oh, ow)
        out_d += bd[None, :, None, None]
    out = Tensor(out_d)

    def backward(g):
        nonlocal cols
        if cols is None:
            cols = _im2col(xd, kh, kw)
        g2 = np.ascontiguousarray(g.reshape(n, f, oh * ow))
        db = g.sum(axis=(0, 2, 3))
        # matmul consumes the transposed view via strides; no big copies
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, kh, kw)
        dcols = np.matmul(w2.T[None], g2).reshape(n, c, kh, kw, oh, ow)
        dx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
        return dx, dw, db

    return record(out, (tx, tw, tb), backward, "conv2d")


def conv2d_1x1(x, w, b) -> Tensor:
    """Per-pixel affine map across channels (1x1 kernels)."""
    tx, tw, tb = _unwrap(x), _unwrap(w), _unwrap(b)
    _same_dtype("conv2d_1x1", tx, tw, tb)
    xd, wd, bd = tx.data, tw.data, tb.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (1, 1):
        raise ValueError("conv2d_1x1: x must be [N,C,H,W] and w [F,C,1,1]")
    n, c, h, ww = xd.shape
    f, cw = wd.shape[:2]
    if cw != c:
        raise ValueError(f"conv2d_1x1: channel mismatch (input {c}, kernel {cw})")
    if bd.shape != (f,):
        raise ValueError(f"conv2d_1x1: bias shape {bd.shape} != ({f},)")
    w2 = wd[:, :, 0, 0]
    x2 = xd.reshape(n, c, h * ww)
    if xd.dtype == np.float64:
        out_d = np.broadcast_to(bd[None, :, None, None], (n, f, h, ww)).astype(xd.dtype)
        for ci in range(c):
            out_d = out_d + xd[:, ci][:, None] * w2[None, :, ci, None, None]
    else:
        out_d = np.matmul(w2[None], x2).reshape(n, f, h, ww)
        out_d += bd[None, :, None, None]
    out = Tensor(out_d)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(n, f, h * ww))
        db = g.sum(axis=(0, 2, 3))
        dw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, 1, 1)
        dx = np.matmul(w2.T[None], g2).reshape(n, c, h, ww)
        return dx, dw, db

    return record(out, (tx, tw, tb), backward, "conv2d_1x1")


def maxpool2x2(x) -> Tensor:
    """Max over disjoint 2x2 windows; gradient goes to the first max in
    row-major window order."""
    tx = _unwrap(x)
    xd = tx.data
    if xd.ndim != 4:
        raise ValueError("maxpool2x2: input must be [N,C,H,W]")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = xd.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    out = Tensor(np.ascontiguousarray(windows.max(axis=-1)))

    def backward(g):
        idx = windows.argmax(axis=-1)  # argmax takes the first max: (0,0),(0,1),(1,0),(1,1)
        d = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        dx = d.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx),)

    return record(out, (tx,), backward, "maxpool2x2")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilized by
    max-subtraction.  Backward is (softmax - onehot) / batch."""
    tl = _unwrap(logits)
    ld = tl.data
    if ld.ndim != 2:
        raise ValueError("softmax_cross_entropy: logits must be [N,K]")
    n, k = ld.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {idx.shape} != ({n},)")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError("softmax_cross_entropy: label out of range")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = Tensor(np.asarray(-logp[rows, idx].mean(), dtype=ld.dtype))
    softmax = np.exp(logp)

    def backward(g):
        d = softmax.copy()
        d[rows, idx] -= 1
        return (g * d / n,)

    return record(out, (tl,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Requires float64 input; returns max over coordinates of
    |a - b| / max(1e-8, |a| + |b|).
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        (gx,) = tape.backward(y, inputs=[x])
    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    analytic = gx.reshape(-1)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())
