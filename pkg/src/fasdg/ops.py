"""Differentiable operations over :class:`fasdg.tensor.Tensor`.

Every op computes its forward result eagerly and, when a tape is active and
some input requires grad, records a backward closure. Backward rules are the
standard ones (stated in each docstring where not obvious). Row-wise kernels
(softmax, layer norm, row normalization, gelu, logistic) dispatch to
:mod:`fasdg.kernels`, which selects numba or numpy at import time.

Shape or dtype mismatches raise :class:`ShapeError` naming both operands.
"""

from __future__ import annotations

import numpy as np

from fasdg import kernels
from fasdg.errors import ConfigError, ShapeError
from fasdg.tensor import GradTape, Tensor, active_tape, guard_finite


def _record(op, inputs, out, backward):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward)


def _result(op, data, inputs, backward):
    guard_finite(op, data)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    _record(op, inputs, out, backward)
    return out


def _same_dtype(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(
                f"{op}: mixed dtypes {dt} and {t.dtype}; cast operands explicitly"
            )
    return dt


def _rows2d(arr):
    """Collapse leading axes so kernels see a C-contiguous (rows, n) view."""
    a2 = arr.reshape(-1, arr.shape[-1])
    return np.ascontiguousarray(a2)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (m, k) @ (k, n). Backward: dA = dC.B^T, dB = A^T.dC."""
    _same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(dout):
        da = dout @ b.data.T if a.requires_grad else None
        db = a.data.T @ dout if b.requires_grad else None
        return da, db

    return _result("matmul", data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of (B, m, k) @ (B, k, n)."""
    _same_dtype("bmm", a, b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(dout):
        da = dout @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        db = a.data.transpose(0, 2, 1) @ dout if b.requires_grad else None
        return da, db

    return _result("bmm", data, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting; gradients are summed back."""
    _same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(dout):
        da = _unbroadcast(dout, a.shape) if a.requires_grad else None
        db = _unbroadcast(dout, b.shape) if b.requires_grad else None
        return da, db

    return _result("add", data, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    _same_dtype("multiply", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(dout):
        da = _unbroadcast(dout * b.data, a.shape) if a.requires_grad else None
        db = _unbroadcast(dout * a.data, b.shape) if b.requires_grad else None
        return da, db

    return _result("multiply", data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = x.dtype.type(c)
    data = x.data * c

    def backward(dout):
        return (dout * c,)

    return _result("scale", data, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    data = x.data + x.dtype.type(c)

    def backward(dout):
        return (dout,)

    return _result("add_scalar", data, (x,), backward)


def log(x: Tensor) -> Tensor:
    """Natural log; domain errors surface as non-finite values."""
    data = np.log(x.data)

    def backward(dout):
        return (dout / x.data,)

    return _result("log", data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(dout):
        return (dout.reshape(x.shape),)

    return _result("reshape", data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(dout):
        return (dout.transpose(inv),)

    return _result("transpose", data, (x,), backward)


def concat_last(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; backward slices the gradient apart."""
    _same_dtype("concat_last", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(dout):
        return tuple(
            dout[..., offsets[i] : offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _result("concat_last", data, tuple(tensors), backward)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (axis dropped). Backward spreads dout/n."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"mean_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.data.ndim
    n = x.shape[axis]
    data = x.data.mean(axis=axis)

    def backward(dout):
        expanded = np.expand_dims(dout, axis) / x.dtype.type(n)
        return (np.broadcast_to(expanded, x.shape).copy(),)

    return _result("mean_axis", data, (x,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of (V, d) by an int index vector; backward scatter-adds."""
    idx = np.asarray(indices)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(
            f"embedding_lookup: need (V, d) table and 1-d indices, got {table.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    data = table.data[idx]

    def backward(dout):
        dtab = np.zeros_like(table.data)
        np.add.at(dtab, idx, dout)
        return (dtab,)

    return _result("embedding_lookup", data, (table,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def logistic(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)); backward y(1-y)."""
    flat = np.ascontiguousarray(x.data.reshape(-1))
    data = kernels.logistic_fwd(flat).reshape(x.shape)

    def backward(dout):
        return (dout * data * (1.0 - data),)

    return _result("logistic", data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) gelu."""
    flat = np.ascontiguousarray(x.data.reshape(-1))
    data = kernels.gelu_fwd(flat).reshape(x.shape)

    def backward(dout):
        dflat = kernels.gelu_bwd(flat, np.ascontiguousarray(dout.reshape(-1)))
        return (dflat.reshape(x.shape),)

    return _result("gelu", data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    y2 = kernels.softmax_fwd(_rows2d(x.data))
    data = y2.reshape(x.shape)

    def backward(dout):
        dx2 = kernels.softmax_bwd(y2, _rows2d(dout))
        return (dx2.reshape(x.shape),)

    return _result("softmax_rows", data, (x,), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each last-axis row by its sum (idempotent on stochastic rows)."""
    y2, sums = kernels.normrows_fwd(_rows2d(x.data))
    data = y2.reshape(x.shape)

    def backward(dout):
        dx2 = kernels.normrows_bwd(y2, sums, _rows2d(dout))
        return (dx2.reshape(x.shape),)

    return _result("normalize_rows", data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    _same_dtype("layer_norm", x, gamma, beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    x2 = _rows2d(x.data)
    y2, mean, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, x.dtype.type(eps))
    data = y2.reshape(x.shape)

    def backward(dout):
        dx2, dg, db = kernels.layernorm_bwd(x2, gamma.data, mean, rstd, _rows2d(dout))
        return (
            dx2.reshape(x.shape) if x.requires_grad else None,
            dg if gamma.requires_grad else None,
            db if beta.requires_grad else None,
        )

    return _result("layer_norm", data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses and the gradient reversal layer


def mse(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Squared error, reduced to a scalar by mean (default) or sum."""
    _same_dtype("mse", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse: empty batch")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"mse: unknown reduction {reduction!r}")
    diff = pred.data - target.data
    total = np.float64(np.sum(diff.astype(np.float64) ** 2))
    denom = pred.size if reduction == "mean" else 1
    data = np.asarray(pred.dtype.type(total / denom))

    def backward(dout):
        g = (2.0 / denom) * diff * dout
        dp = g.astype(pred.dtype, copy=False) if pred.requires_grad else None
        dt = (-g).astype(pred.dtype, copy=False) if target.requires_grad else None
        return dp, dt

    return _result("mse", data, (pred, target), backward)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of (B, N) logits against int class labels."""
    idx = np.asarray(targets)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_logits: logits {logits.shape} vs targets {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise ShapeError(
            f"cross_entropy_logits: class index out of range for {logits.shape[1]} classes"
        )
    b = logits.shape[0]
    probs = kernels.softmax_fwd(_rows2d(logits.data))
    picked = probs[np.arange(b), idx]
    data = np.asarray(logits.dtype.type(-np.mean(np.log(picked.astype(np.float64)))))

    def backward(dout):
        g = probs.copy()
        g[np.arange(b), idx] -= 1.0
        g *= dout / logits.dtype.type(b)
        return (g,)

    return _result("cross_entropy_logits", data, (logits,), backward)


def grad_reverse(x: Tensor, lambda_grl: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lambda."""
    if lambda_grl < 0:
        raise ConfigError(f"grad_reverse: lambda must be >= 0, got {lambda_grl}")
    lam = x.dtype.type(lambda_grl)

    def backward(dout):
        return (dout * (-lam),)

    return _result("grad_reverse", x.data, (x,), backward)
