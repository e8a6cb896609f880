"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the kernels a ResNet-style supernet needs are provided: convolution,
batch normalization, ReLU/PReLU, residual addition, pooling, a linear head,
and the two classification losses. Every op records a closure that maps the
output gradient to gradients of its inputs; :func:`backward` walks the graph
in reverse topological order and *adds* into the ``grad`` buffers of leaf
tensors that require gradients.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for an op."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaf tensors created by the user hold parameters or inputs. Non-leaf
    tensors are produced by ops and carry a reference to their parents and a
    backward closure; their gradients are never stored, only propagated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "leaf",
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    __rmul__ = __mul__


_grad_enabled = True


class no_grad:
    """Context manager: ops inside build no graph."""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self.prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add to whatever is already in the buffers, so calling this
    twice doubles them. The graph is kept intact and may be replayed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def leading_slice(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Take the first ``sizes[d]`` entries along each leading dimension ``d``.

    The gradient is scattered back into the corresponding corner of a
    zero array shaped like ``a``.
    """
    if len(sizes) > a.data.ndim:
        raise ShapeError("leading_slice: too many sizes")
    for d, n in enumerate(sizes):
        if not 0 < n <= a.shape[d]:
            raise ShapeError(f"leading_slice: size {n} invalid for dim {d} of {a.shape}")
    index = tuple(slice(0, n) for n in sizes)
    if all(n == a.shape[d] for d, n in enumerate(sizes)):
        return a
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), fn, "slice")


# ---------------------------------------------------------------------------
# network kernels
# ---------------------------------------------------------------------------

def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of pre-padded ``xp``.

    Also returns the channel-major im2col matrix of shape
    ``(C*kh*kw, B*Ho*Wo)`` for reuse in the weight gradient.
    """
    B, C, H, W = xp.shape
    O, _, kh, kw = w.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                               j:j + stride * (Wo - 1) + 1:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    out = (w.reshape(O, C * kh * kw) @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weight, no bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel {kh}x{kw} unsupported")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} unsupported")
    if padding < 0 or padding >= kh or padding >= kw:
        raise ShapeError(f"conv2d: padding {padding} unsupported for a {kh}x{kw} kernel")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d: output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out, cols = _correlate(xp, w.data, stride)

    def fn(g):
        gw = gx = None
        if w.requires_grad:
            g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
            gw = (g2 @ cols.T).reshape(w.shape)
        if x.requires_grad:
            # input gradient = full correlation of the dilated output gradient
            # with the spatially flipped, channel-transposed kernel
            rh = H + 2 * padding - kh - (Ho - 1) * stride
            rw = W + 2 * padding - kw - (Wo - 1) * stride
            gd = np.zeros((B, O, (Ho - 1) * stride + 1 + rh + 2 * (kh - 1 - padding),
                           (Wo - 1) * stride + 1 + rw + 2 * (kw - 1 - padding)))
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gd[:, :, ph:ph + (Ho - 1) * stride + 1:stride, pw:pw + (Wo - 1) * stride + 1:stride] = g
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(gd, wt, 1)
        return gx, gw

    return _result(out, (x, w), fn, "conv2d")


class BNCollector:
    """Pools per-channel batch statistics across calibration forwards.

    Uses the parallel (Chan et al.) combination of count, mean and sum of
    squared deviations, so the result equals the statistics of the
    concatenated calibration set.
    """

    def __init__(self) -> None:
        self._acc: dict[str, tuple[int, np.ndarray, np.ndarray]] = {}

    def update(self, key: str, x: np.ndarray) -> None:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        m2 = ((x - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
        if key not in self._acc:
            self._acc[key] = (n, mean, m2)
            return
        na, ma, m2a = self._acc[key]
        tot = na + n
        delta = mean - ma
        self._acc[key] = (tot, ma + delta * n / tot, m2a + m2 + delta ** 2 * na * n / tot)

    def stats(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (m.copy(), m2 / n) for k, (n, m, m2) in self._acc.items()}


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    collector: Optional[BNCollector] = None,
    key: str = "",
) -> Tensor:
    """Per-channel batch normalization.

    In ``train`` mode the batch statistics normalize the input and the
    running buffers (passed as numpy views) are updated in place by an
    exponential moving average with the biased batch variance. ``eval``
    uses the running buffers. ``collect`` normalizes like ``train`` but
    feeds ``collector`` instead of touching the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({C},)")
    if running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"batchnorm2d: running stats must have shape ({C},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode not in ("train", "eval", "collect"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    def bshape(v):
        return v[None, :, None, None]

    if mode == "eval":
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - bshape(running_mean)) * bshape(invstd)
        out = xhat * bshape(gamma.data) + bshape(beta.data)

        def fn_eval(g):
            return (
                g * bshape(gamma.data * invstd),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _result(out, (x, gamma, beta), fn_eval, "batchnorm2d")

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - bshape(mean)
    var = (centered ** 2).mean(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * bshape(invstd)
    out = xhat * bshape(gamma.data) + bshape(beta.data)
    if mode == "train":
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif collector is not None:
        collector.update(key, x.data)

    def fn(g):
        dxhat = g * bshape(gamma.data)
        s1 = dxhat.sum(axis=(0, 2, 3))
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
        gx = bshape(invstd / n) * (n * dxhat - bshape(s1) - xhat * bshape(s2))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, gamma, beta), fn, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel parametric ReLU on NCHW (or NC) input."""
    if slope is None:
        raise ValueError("prelu requires a slope tensor")
    C = x.shape[1]
    if slope.shape != (C,):
        raise ShapeError(f"prelu: slope must have shape ({C},), got {slope.shape}")
    a = slope.data.reshape((1, C) + (1,) * (x.data.ndim - 2))
    mask = x.data > 0
    out = np.where(mask, x.data, a * x.data)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def fn(g):
        return np.where(mask, g, a * g), np.where(mask, 0.0, g * x.data).sum(axis=axes)

    return _result(out, (x, slope), fn, "prelu")


def activation(x: Tensor, kind: str, slope: Optional[Tensor] = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("activation 'prelu' needs a slope")
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),), "gap")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear expects x[B,F], w[K,F], b[K]")
    if w.shape[1] != x.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.data @ w.data.T + b.data

    def fn(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _result(out, (x, w, b), fn, "linear")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / B),)

    return _result(np.asarray(loss), (logits,), fn, "cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_logits) -> Tensor:
    """Batch mean of KL(softmax(teacher) || softmax(student)).

    The teacher is a constant: a Tensor argument contributes only its data.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != t.shape or t.ndim != 2:
        raise ShapeError(f"kl_divergence: shapes {student_logits.shape} and {t.shape} differ")
    B = t.shape[0]
    logq = log_softmax(student_logits.data)
    logp = log_softmax(t)
    p = np.exp(logp)
    loss = (p * (logp - logq)).sum(axis=1).mean()
    # clamp tiny negative round-off; the divergence is non-negative
    loss = max(loss, 0.0)

    def fn(g):
        return ((np.exp(logq) - p) * (float(g) / B),)

    return _result(np.asarray(loss), (student_logits,), fn, "kl_divergence")
