"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a row-major numpy array (float32 or float64) plus an
optional gradient buffer of the same shape. Operations in :mod:`fasdg.ops`
record onto the innermost active :class:`GradTape`; replaying the tape in
reverse after seeding the output with ones produces gradients for every
``requires_grad`` tensor reachable from that output. Gradient contributions
are accumulated additively, in tape order, so two backward passes over the
same tape are bitwise identical.

A tensor and its tape belong to one thread; nothing here is shared-mutable.
"""

from __future__ import annotations

import numpy as np

from fasdg.errors import NumericalError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_debug_checks = False


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf screening at op boundaries (slow; meant for gradient checks)."""
    global _debug_checks
    _debug_checks = bool(on)


def debug_checks_enabled() -> bool:
    return _debug_checks


def guard_finite(op_name: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in output of op '{op_name}'")


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tape_stack: list["GradTape"] = []


def active_tape() -> "GradTape | None":
    return _tape_stack[-1] if _tape_stack else None


class GradTape:
    """Ordered record of executed ops with their backward rules.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the tape's output tensor.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        """Append one op. ``backward(dout)`` must return one gradient array
        (or None) per input, aligned with ``inputs``."""
        self._entries.append(_TapeEntry(op, inputs, output, backward))

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Replay the tape in reverse from ``output``.

        Seeds the output gradient with ones (or ``seed``), accumulates
        contributions additively in reverse tape order, and assigns ``.grad``
        on every ``requires_grad`` tensor encountered. Previously assigned
        grads on those tensors are overwritten, so calling backward twice on
        one tape yields identical results.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=output.data.dtype)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"backward seed shape {seed.shape} does not match output shape {output.data.shape}"
                )
        grads: dict[int, np.ndarray] = {id(output): seed}
        tensors: dict[int, Tensor] = {id(output): output}
        for entry in reversed(self._entries):
            dout = grads.get(id(entry.output))
            if dout is None:
                continue
            contribs = entry.backward(dout)
            for tin, contrib in zip(entry.inputs, contribs):
                if contrib is None or not tin.requires_grad:
                    continue
                if contrib.shape != tin.data.shape:
                    raise ShapeError(
                        f"backward of op '{entry.op}' produced gradient shape "
                        f"{contrib.shape} for input shape {tin.data.shape}"
                    )
                key = id(tin)
                tensors[key] = tin
                prev = grads.get(key)
                grads[key] = contrib if prev is None else prev + contrib
        for key, t in tensors.items():
            if t.requires_grad:
                t.grad = grads[key]
