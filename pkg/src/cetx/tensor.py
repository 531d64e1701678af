"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, and a Tape
records every differentiable operation in execution order. Because an
operation's inputs always exist before its output, the recording order is
already topological and the backward pass simply walks the node list in
reverse. Training runs in float32; gradient checking promotes to float64.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Tape", "Parameter", "backward", "active_tape", "no_grad"]

# Stack of recording tapes. Ops record onto the innermost one; an empty
# stack (or a no_grad frame, pushed as None) means plain numpy execution.
_TAPE_STACK: list["Tape | None"] = []


def active_tape() -> "Tape | None":
    if not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


class no_grad:
    """Context manager that suspends recording on any enclosing tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Node:
    """One recorded operation: output tensor, inputs, and a closure that
    maps the output gradient to per-input gradients (None for inputs that
    need no gradient)."""

    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, replayed in reverse on backward."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, out: "Tensor", inputs, backward_fn) -> None:
        out.tape = self
        out.tape_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(Node(op, out, tuple(inputs), backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A dense numeric array, optionally attached to a tape node.

    `data` is always a numpy array (float32 in training, float64 during
    gradient checks). `grad` is filled lazily during backward; leaf tensors
    created with `requires_grad=True` start with a zero gradient buffer so
    optimizers can rely on it existing.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same values with no gradient history."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.tape = None
        out.tape_id = None
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- arithmetic (only what the losses and penalties need) --------------

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _add(self, _mul(other, -1.0))
        return _add(self, -other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return _mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return _sum(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable tensor plus its bookkeeping.

    `weight_decay_eligible` marks conv/dense weights; biases, normalization
    affines and activation slopes stay out of the L2 penalty.
    """

    __slots__ = ("name", "value", "weight_decay_eligible")

    def __init__(self, name: str, data, weight_decay_eligible: bool = False):
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.weight_decay_eligible = bool(weight_decay_eligible)

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def record(op: str, out: Tensor, inputs, backward_fn) -> Tensor:
    """Attach `out` to the active tape when any input wants gradients."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs if isinstance(t, Tensor)):
        tape.record(op, out, [t for t in inputs if isinstance(t, Tensor)], backward_fn)
    return out


def accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = grad
    else:
        # Out-of-place: backward closures may hand back shared arrays.
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> None:
    """Populate gradients of everything `loss` depends on.

    Rejects non-scalar outputs; gradient contributions accumulate
    additively when a tensor is used more than once.
    """
    if loss.shape != ():
        raise ValueError(f"backward expects a scalar, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("backward expects a tensor recorded on a tape")
    tape = loss.tape
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is not None and tensor.requires_grad:
                accumulate(tensor, grad)
        # Intermediate grads are not needed once propagated.
        if node.out.tape is tape:
            node.out.grad = None


# -- primitive arithmetic ops ----------------------------------------------


def _add(a: Tensor, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)
        return record("add", out, (a, b), lambda g: (g, g))
    out = Tensor(a.data + a.data.dtype.type(b))
    return record("add_scalar", out, (a,), lambda g: (g,))


def _mul(a: Tensor, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        out = Tensor(a.data * b.data)
        a_data, b_data = a.data, b.data
        return record("mul", out, (a, b), lambda g: (g * b_data, g * a_data))
    scalar = a.data.dtype.type(b)
    out = Tensor(a.data * scalar)
    return record("mul_scalar", out, (a,), lambda g: (g * scalar,))


def _sum(a: Tensor):
    out = Tensor(a.data.sum(dtype=a.data.dtype))
    shape, dtype = a.shape, a.data.dtype
    return record(
        "sum", out, (a,), lambda g: (np.full(shape, g, dtype=dtype),)
    )
