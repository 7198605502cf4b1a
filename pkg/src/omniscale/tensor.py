"""A small float64 tensor with reverse-mode differentiation.

Only the operators used by the OS-CNN family are provided: 1D convolution
with "same" padding, batch normalisation, ReLU, channel concatenation,
addition, global average pooling, a linear layer and softmax
cross-entropy. Each op records a closure that maps the output gradient to
its inputs; ``Tensor.backward`` walks the graph in reverse topological
order and calls every closure once.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, InvalidArgumentError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(graph_nodes(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)


class Parameter(Tensor):
    """Trainable leaf. ``kind`` is ``"weight"``, ``"bias"`` or ``"bn"``."""

    def __init__(self, data, kind: str = "weight"):
        super().__init__(data, requires_grad=True)
        self.kind = kind


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first), each once."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution ------------------------------------------------------------

def same_padding(k: int) -> tuple[int, int]:
    """Left/right zero padding that keeps length for a stride-1 kernel of size k."""
    left = (k - 1) // 2
    return left, k - 1 - left


# kernels at least this long go through the FFT path
_FFT_MIN_KERNEL = 24
# cap on temporaries of the direct path; batches are processed in chunks below it
_CHUNK_ELEMENTS = 1 << 23


def _fft_len(n: int) -> int:
    return scipy.fft.next_fast_len(n, real=True)


def _batch_chunks(B, per_sample):
    step = max(1, _CHUNK_ELEMENTS // max(1, per_sample))
    return [slice(i, min(B, i + step)) for i in range(0, B, step)]


def _correlate(xp, w, L):
    """out[b, o, t] = sum_{c, j} w[o, c, j] * xp[b, c, t + j] for t < L."""
    B, C, Lp = xp.shape
    O, _, K = w.shape
    if K >= _FFT_MIN_KERNEL:
        n = _fft_len(Lp)
        X = scipy.fft.rfft(xp, n, axis=2)
        W = scipy.fft.rfft(w, n, axis=2)
        Y = np.matmul(X.transpose(2, 0, 1), W.conj().transpose(2, 1, 0))  # (F, B, O)
        return scipy.fft.irfft(Y.transpose(1, 2, 0), n, axis=2)[:, :, :L]
    out = np.zeros((B, O, L))
    for sl in _batch_chunks(B, O * K * Lp):
        # one GEMM for every kernel offset, then shift-and-add
        Z = np.tensordot(w, xp[sl], axes=([1], [1]))  # (O, K, b, Lp)
        acc = out[sl].transpose(1, 0, 2)
        for j in range(K):
            acc += Z[:, j, :, j : j + L]
    return out


def _correlate_grad_weight(xp, g, K):
    """gw[o, c, j] = sum_{b, t} g[b, o, t] * xp[b, c, t + j]."""
    B, C, Lp = xp.shape
    O, L = g.shape[1], g.shape[2]
    if K >= _FFT_MIN_KERNEL:
        n = _fft_len(Lp)
        X = scipy.fft.rfft(xp, n, axis=2)
        G = scipy.fft.rfft(g, n, axis=2)
        Y = np.matmul(G.conj().transpose(2, 1, 0), X.transpose(2, 0, 1))  # (F, O, C)
        return scipy.fft.irfft(Y.transpose(1, 2, 0), n, axis=2)[:, :, :K]
    gw = np.zeros((O, C, K))
    for sl in _batch_chunks(B, C * K * L):
        cols = np.ascontiguousarray(sliding_window_view(xp[sl], K, axis=2)[:, :, :L])  # (b, C, L, K)
        gw += np.tensordot(g[sl], cols, axes=([0, 2], [0, 2]))
    return gw


def _correlate_grad_input(g, w, Lp):
    """gxp[b, c, s] = sum_{o, j} w[o, c, j] * g[b, o, s - j]."""
    B, O, L = g.shape
    _, C, K = w.shape
    if K >= _FFT_MIN_KERNEL:
        n = _fft_len(Lp)
        G = scipy.fft.rfft(g, n, axis=2)
        W = scipy.fft.rfft(w, n, axis=2)
        Y = np.matmul(G.transpose(2, 0, 1), W.transpose(2, 0, 1))  # (F, B, C)
        return scipy.fft.irfft(Y.transpose(1, 2, 0), n, axis=2)[:, :, :Lp]
    gxp = np.zeros((B, C, Lp))
    for sl in _batch_chunks(B, C * K * L):
        Z = np.tensordot(w, g[sl], axes=([0], [1]))  # (C, K, b, L)
        acc = gxp[sl].transpose(1, 0, 2)
        for j in range(K):
            acc[:, :, j : j + L] += Z[:, j]
    return gxp


def conv1d(x: Tensor, weight: Tensor, kernel_size: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with "same" padding.

    ``x`` is (batch, in_channels, length) and ``weight`` is
    (out_channels, in_channels, kernel_size). Even kernels get the extra
    padding on the right, so output index 0 lines up with input index 0.
    """
    weight = as_tensor(weight)
    if weight.data.ndim == 3 and kernel_size is not None and kernel_size != weight.shape[2]:
        raise InvalidArgumentError(f"weight kernel size {weight.shape[2]} != {kernel_size}")
    return multi_conv1d(x, [weight])


def multi_conv1d(x: Tensor, weights: Sequence[Tensor]) -> Tensor:
    """Several "same"-padded convolutions of one input, concatenated along channels.

    Equivalent to ``concat_channels([conv1d(x, w) for w in weights])``. All
    kernels are placed in one zero-filled frame, centred by their own
    padding rule, so the input is padded and transformed once.
    """
    x = as_tensor(x)
    weights = [as_tensor(w) for w in weights]
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"conv1d expects (batch, channels, length) input, got {x.shape}")
    if not weights:
        raise InvalidArgumentError("at least one kernel is required")
    B, C, L = x.shape
    for w in weights:
        if w.data.ndim != 3:
            raise InvalidArgumentError(f"conv1d weight must be (out, in, k), got {w.shape}")
        if w.shape[1] != C:
            raise InvalidArgumentError(f"weight expects {w.shape[1]} input channels, input has {C}")
        if w.shape[2] < 1 or L < 1:
            raise InvalidArgumentError(f"kernel of size {w.shape[2]} does not fit an input of length {L}")
    pads = [same_padding(w.shape[2]) for w in weights]
    P = max(p[0] for p in pads)
    R = max(p[1] for p in pads)
    K = P + R + 1
    rows = np.cumsum([0] + [w.shape[0] for w in weights])
    frame = np.zeros((rows[-1], C, K))
    offsets = []
    for w, (left, _), lo, hi in zip(weights, pads, rows[:-1], rows[1:]):
        off = P - left
        frame[lo:hi, :, off : off + w.shape[2]] = w.data
        offsets.append(off)
    xp = np.pad(x.data, ((0, 0), (0, 0), (P, R)))
    out = np.ascontiguousarray(_correlate(xp, frame, L))

    def backward(g):
        if any(w.requires_grad for w in weights):
            gframe = _correlate_grad_weight(xp, g, K)
            for w, off, lo, hi in zip(weights, offsets, rows[:-1], rows[1:]):
                w._accumulate(gframe[lo:hi, :, off : off + w.shape[2]])
        if x.requires_grad:
            x._accumulate(_correlate_grad_input(g, frame, xp.shape[2])[:, :, P : P + L])

    return _result(out, (x, *weights), backward, "conv1d")


# -- normalisation ----------------------------------------------------------

def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over batch and time.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, as in common frameworks).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"batchnorm1d expects (batch, channels, length), got {x.shape}")
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise InvalidArgumentError(f"gamma/beta must have shape ({C},)")
    n = B * L
    if training:
        if n < 2:
            raise DegenerateBatchError("batch norm needs at least two values per channel in training mode")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                s1 = gxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = inv_std[None, :, None] / n * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None]
            x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward, "batchnorm1d")


# -- elementwise and structural ops -----------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise InvalidArgumentError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 3 or x.shape[0] != ref[0] or x.shape[2] != ref[2]:
            raise InvalidArgumentError(f"cannot concatenate {x.shape} with {ref} along channels")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            x._accumulate(g[:, lo:hi])

    return _result(np.concatenate([x.data for x in xs], axis=1), xs, backward, "concat")


def global_average_pool(x: Tensor) -> Tensor:
    """(batch, channels, length) -> (batch, channels) by the per-channel mean."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"global_average_pool expects 3-d input, got {x.shape}")
    L = x.shape[2]
    if L == 0:
        raise InvalidArgumentError("cannot pool an empty time axis")
    return _result(
        x.data.mean(axis=2),
        (x,),
        lambda g: x._accumulate(np.repeat(g[:, :, None] / L, L, axis=2)),
        "gap",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with x (batch, in) and weight (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidArgumentError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise InvalidArgumentError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, backward, "linear")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidArgumentError(f"logits {logits.shape} and labels {labels.shape} do not match")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidArgumentError("label outside [0, n_classes)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(B), labels]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(B), labels] -= 1.0
        logits._accumulate(g * p / B)

    return _result(np.array(loss), (logits,), backward, "softmax_xent")
