"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the model zoo are provided: matmul, bias add,
relu, 2-D convolution, pooling, reshape, parameter slicing, softmax and
cross-entropy. Operations executed inside an active :class:`Tape` are
recorded; outside a tape they simply compute.

Data is float32 by default. Passing float64 arrays through the same ops gives
the 64-bit mode used for gradient verification.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12
_LOG_FLOOR = float(np.log(PROB_FLOOR))


class NumericDomainError(ArithmeticError):
    """Raised when an operation receives non-finite input."""


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # ascontiguousarray would promote 0-d arrays to 1-d, so only copy when needed.
        if isinstance(data, np.ndarray):
            self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Op:
    """A primitive: ``forward`` maps input arrays to an output array and may
    stash what ``backward`` needs; ``backward`` maps the output gradient to one
    gradient (or None) per input."""

    needs: tuple[bool, ...] = ()

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Tapes are thread-confined: each thread keeps its own stack of active
    tapes, so independent tapes can run concurrently.
    """

    def __init__(self):
        self.nodes: list[tuple[Op, tuple[Tensor, ...], Tensor]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: Op, inputs: tuple[Tensor, ...], out: Tensor) -> None:
        self.nodes.append((op, inputs, out))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every ``requires_grad`` tensor."""
        if root.data.size != 1:
            raise ValueError("backward needs a scalar root")
        root.grad = np.ones_like(root.data)
        # Nodes were appended in execution order, so reversal is a reverse
        # topological order of the recorded graph.
        for op, inputs, out in reversed(self.nodes):
            if out.grad is None:
                continue
            if isinstance(op, _Slice):
                # Write straight into the flat buffer instead of a dense zero-padded copy.
                flat = inputs[0]
                if flat.grad is None:
                    flat.grad = np.zeros_like(flat.data)
                flat.grad[op.start:op.stop] += out.grad.reshape(-1)
                continue
            op.needs = tuple(t.requires_grad for t in inputs)
            grads = op.backward(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g

    def replay(self) -> None:
        """Re-run every recorded forward in order, overwriting outputs."""
        for op, inputs, out in self.nodes:
            out.data = op.forward(*(t.data for t in inputs))


def _apply(op: Op, *inputs: Tensor) -> Tensor:
    out = Tensor(op.forward(*(t.data for t in inputs)))
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


class _MatMul(Op):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        need_a, need_b = self.needs or (True, True)
        return (g @ self.b.T if need_a else None), (self.a.T @ g if need_b else None)


class _Add(Op):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.sa), _unbroadcast(g, self.sb)


class _Mul(Op):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class _Sum(Op):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, g):
        return (np.broadcast_to(g, self.shape),)


class _Relu(Op):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)


class _Reshape(Op):
    def __init__(self, shape):
        self.shape = shape

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class _Slice(Op):
    """View ``flat[start:stop]`` reshaped; gradient lands in the flat buffer."""

    def __init__(self, start, stop, shape):
        self.start, self.stop, self.shape = start, stop, shape

    def forward(self, flat):
        self.n, self.dtype = flat.shape[0], flat.dtype
        return flat[self.start:self.stop].reshape(self.shape)

    def backward(self, g):
        full = np.zeros(self.n, dtype=self.dtype)
        full[self.start:self.stop] = g.reshape(-1)
        return (full,)


class _Conv2d(Op):
    """3-D cross-correlation over (N, C, H, W) with zero padding, stride 1."""

    def __init__(self, padding):
        self.p = padding

    def forward(self, x, w):
        p = self.p
        n, c, h, wd = x.shape
        f, c2, kh, kw = w.shape
        if c != c2:
            raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n c oh ow kh kw
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
        self.cols, self.w, self.xshape, self.oshape = cols, w, xp.shape, (n, f, oh, ow)
        out = cols @ w.reshape(f, -1).T
        return np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def backward(self, g):
        n, f, oh, ow = self.oshape
        _, c, kh, kw = self.w.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (g2.T @ self.cols).reshape(self.w.shape)
        if self.needs and not self.needs[0]:
            return None, dw
        dcols = (g2 @ self.w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros(self.xshape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.p
        dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp
        return dx, dw


class _Pool2d(Op):
    """Non-overlapping k x k pooling; trailing rows/cols that do not fill a
    window are dropped."""

    def __init__(self, k, kind):
        self.k, self.kind = k, kind

    def forward(self, x):
        k = self.k
        n, c, h, w = x.shape
        oh, ow = h // k, w // k
        self.in_shape, self.oh, self.ow = x.shape, oh, ow
        blocks = x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k)
        if self.kind == "avg":
            return blocks.mean(axis=(3, 5))
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
        self.arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        k, (n, c, h, w), oh, ow = self.k, self.in_shape, self.oh, self.ow
        dx = np.zeros(self.in_shape, dtype=g.dtype)
        if self.kind == "avg":
            blk = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k))
        else:
            flat = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
            np.put_along_axis(flat, self.arg[..., None], g[..., None], axis=-1)
            blk = flat.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :oh * k, :ow * k] = blk.reshape(n, c, oh * k, ow * k)
        return (dx,)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} received non-finite input")


class _Softmax(Op):
    def forward(self, z):
        _check_finite(z, "softmax")
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        self.p = e / e.sum(axis=-1, keepdims=True)
        return self.p

    def backward(self, g):
        p = self.p
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    return labels.astype(np.int64, copy=False)


class _CrossEntropy(Op):
    """Mean of -log(max(p[label], floor)) over the batch."""

    def __init__(self, labels):
        self.labels = labels

    def forward(self, probs):
        n = probs.shape[0]
        self.labels = _check_labels(self.labels, probs.shape[1])
        picked = probs[np.arange(n), self.labels]
        self.picked, self.shape = picked, probs.shape
        return np.asarray(-np.log(np.maximum(picked, PROB_FLOOR)).mean(), dtype=probs.dtype)

    def backward(self, g):
        n = self.shape[0]
        dp = np.zeros(self.shape, dtype=self.picked.dtype)
        live = self.picked > PROB_FLOOR
        dp[np.arange(n), self.labels] = np.where(live, -1.0 / np.maximum(self.picked, PROB_FLOOR), 0.0) / n
        return (dp * g,)


class _SoftmaxCrossEntropy(Op):
    """Fused softmax + cross-entropy on logits.

    The value matches ``cross_entropy(softmax(z))`` whenever the true-class
    probability is above the floor; the gradient is always ``(p - y) / n`` so
    confidently wrong examples keep their learning signal.
    """

    def __init__(self, labels):
        self.labels = labels

    def forward(self, z):
        _check_finite(z, "softmax_cross_entropy")
        n, k = z.shape
        self.labels = _check_labels(self.labels, k)
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
        logp = zs - lse
        self.p = np.exp(logp)
        picked = np.maximum(logp[np.arange(n), self.labels], _LOG_FLOOR)
        return np.asarray(-picked.mean(), dtype=z.dtype)

    def backward(self, g):
        n = self.p.shape[0]
        d = self.p.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


# ------------------------------------------------------------ public wrappers


def matmul(a, b) -> Tensor:
    return _apply(_MatMul(), _as_tensor(a), _as_tensor(b))


def add(a, b) -> Tensor:
    return _apply(_Add(), _as_tensor(a), _as_tensor(b))


def mul(a, b) -> Tensor:
    return _apply(_Mul(), _as_tensor(a), _as_tensor(b))


def tsum(a) -> Tensor:
    return _apply(_Sum(), _as_tensor(a))


def relu(x) -> Tensor:
    return _apply(_Relu(), _as_tensor(x))


def reshape(x, shape) -> Tensor:
    return _apply(_Reshape(tuple(shape)), _as_tensor(x))


def flatten(x) -> Tensor:
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def param_slice(flat: Tensor, start: int, stop: int, shape) -> Tensor:
    return _apply(_Slice(start, stop, tuple(shape)), flat)


def conv2d(x, w, padding: int = 1) -> Tensor:
    return _apply(_Conv2d(padding), _as_tensor(x), _as_tensor(w))


def max_pool2d(x, k: int = 2) -> Tensor:
    return _apply(_Pool2d(k, "max"), _as_tensor(x))


def avg_pool2d(x, k: int = 2) -> Tensor:
    return _apply(_Pool2d(k, "avg"), _as_tensor(x))


def softmax(logits) -> Tensor:
    """Row-wise softmax with max-subtraction. Raises NumericDomainError on
    non-finite logits."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("softmax expects (batch, K) logits with K >= 2")
    return _apply(_Softmax(), logits)


def cross_entropy(probs, labels) -> Tensor:
    return _apply(_CrossEntropy(labels), _as_tensor(probs))


def softmax_cross_entropy(logits, labels) -> Tensor:
    return _apply(_SoftmaxCrossEntropy(labels), _as_tensor(logits))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    """Tape-free log-softmax used by evaluation paths."""
    _check_finite(z, "log_softmax")
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def per_example_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log p[label] per row, floored at the probability floor."""
    logp = log_softmax_np(logits)
    labels = _check_labels(labels, logits.shape[1])
    return -np.maximum(logp[np.arange(len(labels)), labels], _LOG_FLOOR)
