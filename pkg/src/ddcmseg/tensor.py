"""Dense rank-4 tensors with reverse-mode automatic differentiation.

The engine computes on (batch, channel, height, width) float32 arrays.
Every differentiable op records a backward closure on the active ``Tape``;
``Tape.backward`` replays the closures in exact reverse execution order and
accumulates (never overwrites) gradient buffers.  Gradients are allocated
lazily on first touch, so forward-only inference pays nothing.

Broadcasting is restricted to per-channel scale/shift: a (1, c, 1, 1)
operand may combine with an (n, c, h, w) one.  Any other mismatch raises
:class:`ShapeError` naming the offending axis.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

AXIS_NAMES = ("batch", "channel", "height", "width")

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward op (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor4:
    """A dense (n, c, h, w) float32 tensor with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 axes (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name: str | None = None) -> "Tensor4":
        return cls(np.zeros(shape, DTYPE), requires_grad=requires_grad, name=name)

    @classmethod
    def full(cls, shape, value: float, requires_grad: bool = False) -> "Tensor4":
        return cls(np.full(shape, value, DTYPE), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: float) -> "Tensor4":
        return cls(np.full((1, 1, 1, 1), value, DTYPE))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, delta: np.ndarray) -> None:
        """Add ``delta`` into the gradient buffer, allocating it on first touch."""
        d = np.asarray(delta, dtype=DTYPE)
        if d.shape != self.data.shape:
            raise ShapeError(f"gradient shape {d.shape} does not match value shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(d)
        else:
            self.grad += d

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar to every leaf."""
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor4(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops, replayed in reverse by ``backward``.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    A tape can be consumed exactly once; rebuilding the forward pass (after
    zeroing leaf gradients) is required before differentiating again.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, loss: Tensor4) -> None:
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
        if not self._records:
            raise RuntimeError("tape holds no recorded ops; run a forward pass under it first")
        if self._consumed:
            raise RuntimeError(
                "backward already ran on this tape; zero gradients and rebuild the forward pass"
            )
        self._consumed = True
        loss.accumulate_grad(np.ones((1, 1, 1, 1), DTYPE))
        for fn in reversed(self._records):
            fn()


def backward(loss: Tensor4) -> None:
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active Tape")
    tape.backward(loss)


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor4],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor4:
    """Wrap an op result and register ``backward_fn(out_grad)`` on the active tape.

    ``backward_fn`` must accumulate into the inputs' gradients; it is skipped
    when the output never received a gradient (dead branch).
    """
    out = Tensor4(out_data)
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in op output")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape

        def _replay():
            if out.grad is not None:
                backward_fn(out.grad)

        tape.record(_replay)
    return out


def _broadcast_role(a: Tensor4, b: Tensor4, op: str) -> str:
    """Classify operand shapes: equal, or one side is a (1, c, 1, 1) channel vector."""
    if a.shape == b.shape:
        return "equal"
    if b.shape == (1, a.c, 1, 1):
        return "b_vec"
    if a.shape == (1, b.c, 1, 1):
        return "a_vec"
    for axis in range(4):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"{op}: {AXIS_NAMES[axis]} axis mismatch: {a.shape} vs {b.shape}"
            )
    raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}")


def _reduce_to_channel_vec(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise sum; one operand may be a per-channel (1, c, 1, 1) shift."""
    role = _broadcast_role(a, b, "add")
    out_data = a.data + b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_channel_vec(g) if role == "a_vec" else g)
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_channel_vec(g) if role == "b_vec" else g)

    return record_op(out_data, (a, b), _backward)


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise product; one operand may be a per-channel (1, c, 1, 1) scale."""
    role = _broadcast_role(a, b, "mul")
    out_data = a.data * b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g * b.data
            a.accumulate_grad(_reduce_to_channel_vec(ga) if role == "a_vec" else ga)
        if b.requires_grad:
            gb = g * a.data
            b.accumulate_grad(_reduce_to_channel_vec(gb) if role == "b_vec" else gb)

    return record_op(out_data, (a, b), _backward)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack two tensors along the channel axis; n, h, w must agree."""
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {AXIS_NAMES[axis]} axis mismatch: {a.shape} vs {b.shape}"
            )
    ca = a.c
    out_data = np.concatenate((a.data, b.data), axis=1)

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    return record_op(out_data, (a, b), _backward)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    """Take channels [start, stop); inverse of ``concat_channels``."""
    if not (0 <= start < stop <= x.c):
        raise ShapeError(
            f"slice_channels: channel axis range [{start}, {stop}) invalid for {x.c} channels"
        )
    out_data = x.data[:, start:stop].copy()

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros(x.shape, DTYPE)
            full[:, start:stop] = g
            x.accumulate_grad(full)

    return record_op(out_data, (x,), _backward)


def sum_all(x: Tensor4) -> Tensor4:
    """Sum every element into a (1, 1, 1, 1) scalar."""
    out_data = np.array(x.data.sum(dtype=np.float64), DTYPE).reshape(1, 1, 1, 1)

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape))

    return record_op(out_data, (x,), _backward)
