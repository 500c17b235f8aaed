"""
Differentiable numeric primitives with explicit forward and backward passes.

Every primitive comes as a pair of functions: `<name>_forward(...)` returns the
value together with a cache, and `<name>_backward(dout, cache)` returns the
gradients with respect to the inputs, in argument order. The plain
`<name>(...)` helpers return the value only and are what inference code calls.

A Tape records primitive applications on Vars. `Tape.backward` replays the
recorded backward functions in exact reverse order of application and
accumulates gradients additively, which is all the generator's policy
gradient, its maximum-likelihood gradient and the discriminator's minimax
gradient need.

All arithmetic is float64. Forward functions are pure: identical inputs give
bit-identical outputs, and none of them writes into its arguments.
"""
from typing import Callable, Iterable, NamedTuple, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from scipy.special import log_softmax as _log_softmax

from mtgan.errors import InputError, NumericError, ShapeError

DTYPE = np.float64

# central-difference step used by grad_check
FD_EPS = 1e-5

# relative-error denominator floor
FD_FLOOR = 1e-8


def as_array(a, ndim=None, name="array") -> np.ndarray:
    """Converts to a float64 array and checks rank and finiteness."""
    arr = np.asarray(a, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def as_matrix(data, rows=None, cols=None) -> np.ndarray:
    """Builds a (rows x cols) float64 matrix, accepting either nested rows or a flat row-major list."""
    arr = np.asarray(data, dtype=DTYPE)
    if arr.ndim == 1 and rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"{arr.size} values cannot fill a {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    arr = as_array(arr, ndim=2, name="matrix")
    if (rows is not None and arr.shape[0] != rows) or (cols is not None and arr.shape[1] != cols):
        raise ShapeError(f"expected a {rows}x{cols} matrix, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# affine


def affine_forward(x, W, b):
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2 or x.shape[-1:] != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not agree")
    return x @ W.T + b, (x, W)


def affine_backward(dout, cache):
    x, W = cache
    dx = dout @ W
    if x.ndim == 1:
        dW = np.outer(dout, x)
        db = np.array(dout, dtype=DTYPE)
    else:
        dW = dout.T @ x
        db = dout.sum(axis=0)
    return dx, dW, db


def affine(x, W, b) -> np.ndarray:
    """Returns W·x + b (row-wise when x is a batch)."""
    return affine_forward(x, W, b)[0]


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid_forward(z):
    s = expit(np.asarray(z, dtype=DTYPE))
    return s, s


def sigmoid_backward(dout, cache):
    s = cache
    return (dout * s * (1.0 - s),)


def sigmoid(z) -> np.ndarray:
    return sigmoid_forward(z)[0]


def tanh_forward(z):
    t = np.tanh(np.asarray(z, dtype=DTYPE))
    return t, t


def tanh_backward(dout, cache):
    t = cache
    return (dout * (1.0 - t * t),)


def tanh(z) -> np.ndarray:
    return tanh_forward(z)[0]


def relu_forward(z):
    z = np.asarray(z, dtype=DTYPE)
    return np.maximum(z, 0.0), z > 0.0


def relu_backward(dout, cache):
    mask = cache
    return (dout * mask,)


def relu(z) -> np.ndarray:
    return relu_forward(z)[0]


# ---------------------------------------------------------------------------
# softmax family


def softmax_forward(z):
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dout, cache):
    p = cache
    return (p * (dout - (dout * p).sum(axis=-1, keepdims=True)),)


def softmax(z) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    return softmax_forward(z)[0]


def log_softmax_forward(z):
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ShapeError("log_softmax of an empty vector")
    lp = _log_softmax(z, axis=-1)
    return lp, np.exp(lp)


def log_softmax_backward(dout, cache):
    p = cache
    return (dout - p * dout.sum(axis=-1, keepdims=True),)


def log_softmax(z) -> np.ndarray:
    return log_softmax_forward(z)[0]


# ---------------------------------------------------------------------------
# LSTM cell
#
# Gate layout inside the stacked weight matrix W (4H x (D+H)) is input, forget,
# output, candidate. Gates use the logistic sigmoid, the candidate uses tanh.


class LSTMWeights(NamedTuple):
    W: np.ndarray
    b: np.ndarray


def lstm_cell_forward(x, h_prev, c_prev, W, b):
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    H = h_prev.shape[-1]
    D = x.shape[-1]
    if c_prev.shape != h_prev.shape or W.shape != (4 * H, D + H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, W {W.shape}, b {b.shape}"
        )
    xh = np.concatenate([x, h_prev], axis=-1)
    a = xh @ W.T + b
    i = expit(a[..., :H])
    f = expit(a[..., H:2 * H])
    o = expit(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (xh, i, f, o, g, c_prev, tc, W, D)


def lstm_cell_backward(dh, dc, cache):
    xh, i, f, o, g, c_prev, tc, W, D = cache
    dct = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            dct * g * i * (1.0 - i),
            dct * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dct * i * (1.0 - g * g),
        ],
        axis=-1,
    )
    if xh.ndim == 1:
        dW = np.outer(da, xh)
        db = da
    else:
        dW = da.T @ xh
        db = da.sum(axis=0)
    dxh = da @ W
    return dxh[..., :D], dxh[..., D:], dct * f, dW, db


def lstm_cell(x, h_prev, c_prev, weights: LSTMWeights) -> Tuple[np.ndarray, np.ndarray]:
    """Advances one LSTM step and returns the new (hidden, cell) pair."""
    return lstm_cell_forward(x, h_prev, c_prev, weights.W, weights.b)[0]


# ---------------------------------------------------------------------------
# 1-D convolution over time and max-over-time pooling
#
# M is (T x k). A single kernel is (l x k) with a scalar bias and yields a
# length T-l+1 vector; a bank is (n x l x k) with a length-n bias and yields a
# (T-l+1) x n feature map. Forward also accepts leading batch axes on M.


def conv1d_forward(M, kernel, b):
    M = np.asarray(M, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if M.ndim < 2 or kernel.ndim not in (2, 3) or kernel.shape[-1] != M.shape[-1]:
        raise ShapeError(f"conv1d: input {M.shape} and kernel {kernel.shape} do not agree")
    l = kernel.shape[-2]
    T = M.shape[-2]
    if l > T:
        raise ShapeError(f"conv1d: window {l} longer than sequence {T}")
    # (..., T-l+1, k, l)
    windows = sliding_window_view(M, l, axis=-2)
    if kernel.ndim == 2:
        if b.ndim != 0:
            raise ShapeError("conv1d: a single kernel takes a scalar bias")
        out = np.einsum("...tkl,lk->...t", windows, kernel) + b
    else:
        if b.shape != (kernel.shape[0],):
            raise ShapeError("conv1d: bank bias must have one entry per kernel")
        out = np.einsum("...tkl,nlk->...tn", windows, kernel) + b
    return out, (M, kernel, windows)


def conv1d_backward(dout, cache):
    M, kernel, windows = cache
    if M.ndim != 2:
        raise ShapeError("conv1d_backward supports a single (T x k) input")
    l = kernel.shape[-2]
    P = M.shape[0] - l + 1
    dM = np.zeros_like(M)
    if kernel.ndim == 2:
        dkernel = np.einsum("tkl,t->lk", windows, dout)
        db = np.array(dout.sum())
        for j in range(l):
            dM[j:j + P] += np.outer(dout, kernel[j])
    else:
        dkernel = np.einsum("tkl,tn->nlk", windows, dout)
        db = dout.sum(axis=0)
        for j in range(l):
            dM[j:j + P] += dout @ kernel[:, j, :]
    return dM, dkernel, db


def conv1d(M, kernel, b) -> np.ndarray:
    """Valid cross-correlation of M with kernel (or kernel bank) plus bias, before any nonlinearity."""
    return conv1d_forward(M, kernel, b)[0]


def max_over_time_forward(F):
    F = np.asarray(F, dtype=DTYPE)
    idx = F.argmax(axis=0)
    if F.ndim == 1:
        return F[idx], (F.shape, idx)
    return F[idx, np.arange(F.shape[1])], (F.shape, idx)


def max_over_time_backward(dout, cache):
    shape, idx = cache
    dF = np.zeros(shape, dtype=DTYPE)
    if len(shape) == 1:
        dF[idx] = dout
    else:
        dF[idx, np.arange(shape[1])] = dout
    return (dF,)


def max_over_time(F) -> np.ndarray:
    return max_over_time_forward(F)[0]


# ---------------------------------------------------------------------------
# table lookup and concatenation


def embed_forward(table, ids):
    table = np.asarray(table, dtype=DTYPE)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"embedding ids must lie in [0, {table.shape[0]})")
    return table[ids], (table.shape, ids)


def embed_backward(dout, cache):
    shape, ids = cache
    dtable = np.zeros(shape, dtype=DTYPE)
    np.add.at(dtable, ids, dout)
    return (dtable,)


def concat_forward(parts):
    parts = [np.asarray(p, dtype=DTYPE) for p in parts]
    return np.concatenate(parts), [p.shape[0] for p in parts]


def concat_backward(dout, cache):
    return tuple(np.split(dout, np.cumsum(cache)[:-1]))


# ---------------------------------------------------------------------------
# tape


class Var:
    """A value tracked by a Tape. `grad` stays None until a backward pass reaches it."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.name = name

    def __repr__(self):
        return f"Var({self.name or ''}, shape={self.value.shape})"


class _Record(NamedTuple):
    name: str
    inputs: tuple
    outputs: tuple
    backward: Callable


def _val(v):
    return v.value if isinstance(v, Var) else np.asarray(v, dtype=DTYPE)


class Tape:
    """
    Ordered record of primitive applications.
    records: one entry per primitive, in forward order, holding the input Vars
    (constants are allowed and receive no gradient), the output Vars and a
    closure over the forward cache.
    A Tape belongs to one logical training step and is never shared between threads.
    """

    def __init__(self):
        self.records = []

    def leaf(self, value, name=None) -> Var:
        return Var(value, name)

    def _push(self, name, inputs, outputs, backward):
        self.records.append(_Record(name, tuple(inputs), tuple(outputs), backward))
        return outputs[0] if len(outputs) == 1 else outputs

    def affine(self, x, W, b) -> Var:
        out, cache = affine_forward(_val(x), _val(W), _val(b))
        return self._push("affine", (x, W, b), (Var(out),), lambda d: affine_backward(d[0], cache))

    def sigmoid(self, z) -> Var:
        out, cache = sigmoid_forward(_val(z))
        return self._push("sigmoid", (z,), (Var(out),), lambda d: sigmoid_backward(d[0], cache))

    def tanh(self, z) -> Var:
        out, cache = tanh_forward(_val(z))
        return self._push("tanh", (z,), (Var(out),), lambda d: tanh_backward(d[0], cache))

    def relu(self, z) -> Var:
        out, cache = relu_forward(_val(z))
        return self._push("relu", (z,), (Var(out),), lambda d: relu_backward(d[0], cache))

    def softmax(self, z) -> Var:
        out, cache = softmax_forward(_val(z))
        return self._push("softmax", (z,), (Var(out),), lambda d: softmax_backward(d[0], cache))

    def log_softmax(self, z) -> Var:
        out, cache = log_softmax_forward(_val(z))
        return self._push("log_softmax", (z,), (Var(out),), lambda d: log_softmax_backward(d[0], cache))

    def lstm_cell(self, x, h_prev, c_prev, W, b) -> Tuple[Var, Var]:
        (h, c), cache = lstm_cell_forward(_val(x), _val(h_prev), _val(c_prev), _val(W), _val(b))
        return self._push(
            "lstm_cell", (x, h_prev, c_prev, W, b), (Var(h), Var(c)),
            lambda d: lstm_cell_backward(d[0], d[1], cache),
        )

    def conv1d(self, M, kernel, b) -> Var:
        out, cache = conv1d_forward(_val(M), _val(kernel), _val(b))
        return self._push("conv1d", (M, kernel, b), (Var(out),), lambda d: conv1d_backward(d[0], cache))

    def max_over_time(self, F) -> Var:
        out, cache = max_over_time_forward(_val(F))
        return self._push("max_over_time", (F,), (Var(out),), lambda d: max_over_time_backward(d[0], cache))

    def embed(self, table, ids) -> Var:
        out, cache = embed_forward(_val(table), ids)
        return self._push("embed", (table,), (Var(out),), lambda d: embed_backward(d[0], cache))

    def concat(self, parts: Sequence) -> Var:
        out, cache = concat_forward([_val(p) for p in parts])
        return self._push("concat", tuple(parts), (Var(out),), lambda d: concat_backward(d[0], cache))

    def pick(self, v, index) -> Var:
        """Selects one entry of a vector as a scalar Var."""
        value = _val(v)
        shape = value.shape

        def backward(d):
            dv = np.zeros(shape, dtype=DTYPE)
            dv[index] = d[0]
            return (dv,)

        return self._push("pick", (v,), (Var(value[index]),), backward)

    def backward(self, seeds: Iterable[Tuple[Var, object]]) -> list:
        """
        Seeds the given output Vars with upstream gradients and propagates them
        back to every Var reachable on the tape. Returns the names of the
        records visited, which is the forward order reversed.
        """
        for var, g in seeds:
            g = np.broadcast_to(np.asarray(g, dtype=DTYPE), var.value.shape)
            var.grad = g.copy() if var.grad is None else var.grad + g
        visited = []
        for rec in reversed(self.records):
            visited.append(rec.name)
            if all(out.grad is None for out in rec.outputs):
                continue
            douts = tuple(
                out.grad if out.grad is not None else np.zeros_like(out.value) for out in rec.outputs
            )
            grads = rec.backward(douts)
            for inp, g in zip(rec.inputs, grads):
                if isinstance(inp, Var) and g is not None:
                    inp.grad = np.array(g, dtype=DTYPE) if inp.grad is None else inp.grad + g
        return visited


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], theta0, eps: float = FD_EPS,
               floor: float = FD_FLOOR) -> float:
    """
    Compares the analytic gradient returned by f against central differences.
    f maps a parameter vector to (value, gradient). Returns the maximum over
    coordinates of |analytic - numeric| / max(floor, |analytic| + |numeric|).
    """
    theta0 = as_array(theta0, ndim=1, name="theta0")
    value, analytic = f(theta0.copy())
    analytic = np.asarray(analytic, dtype=DTYPE).ravel()
    if not np.isfinite(value) or analytic.shape != theta0.shape:
        raise NumericError("grad_check: f returned a non-finite value or a gradient of the wrong shape")
    worst = 0.0
    for i in range(theta0.size):
        tp = theta0.copy()
        tm = theta0.copy()
        tp[i] += eps
        tm[i] -= eps
        fp = f(tp)[0]
        fm = f(tm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"grad_check: non-finite value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(floor, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


def check_finite(arr, what="array") -> np.ndarray:
    """Raises NumericError unless every entry of arr is finite."""
    arr = np.asarray(arr, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")
    return arr
