"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations executed inside an active :class:`Tape` are recorded together with
a vector-Jacobian product closure; outside a tape they run as plain numpy
math and nothing is recorded, which is how inference avoids graph overhead.

Broadcasting is not supported except between a tensor and a scalar
(a Python number or a 0-d tensor). Every other shape mismatch raises
:class:`~duration_aligner.errors.ShapeError`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from duration_aligner.errors import ContractError, EmbeddingLookupError, ShapeError

Scalar = int | float | np.floating
Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_state = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense real array that can take part in a recorded computation."""

    # make numpy scalars defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return (
            f"<Tensor{label} shape={self.shape} dtype={self.dtype} "
            f"requires_grad={self.requires_grad}>"
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: Tensor | Scalar) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Tensor | Scalar) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> Tensor:
        return add(mul(self, -1.0), other)

    def __mul__(self, other: Tensor | Scalar) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return take_slice(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class Node:
    op: str
    output: Tensor
    parents: tuple[Tensor, ...]
    vjp: Vjp


@dataclass
class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ``backward`` walks the record in reverse.
    """

    nodes: list[Node] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _tape_stack().remove(self)

    def record(self, op: str, output: Tensor, parents: tuple[Tensor, ...], vjp: Vjp) -> None:
        self.nodes.append(Node(op=op, output=output, parents=parents, vjp=vjp))

    def backward(
        self, loss: Tensor, params: Mapping[str, Tensor]
    ) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to ``params``.

        Parameters that do not influence the loss get a zero gradient.
        Gradients of tensors used more than once are summed.
        """
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            self.visits += 1
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for parent, grad in zip(node.parents, node.vjp(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + grad if key in grads else grad
        return {
            name: grads.get(id(tensor), np.zeros_like(tensor.data))
            for name, tensor in params.items()
        }


def record_op(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Vjp) -> Tensor:
    """Wrap ``data`` as the output of ``op``, recording it on the active tape.

    ``vjp`` maps the upstream gradient to one gradient (or None) per parent.
    """
    tape = active_tape()
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        assert tape is not None
        tape.record(op, out, tuple(parents), vjp)
    return out


def _is_scalar(x: Any) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _unbroadcast_scalar(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(grad.sum()).reshape(shape) if shape == () else grad


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# --- elementwise ---


def add(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        return record_op("add", a.data + b, (a,), lambda g: (g,))
    assert isinstance(b, Tensor)
    _check_same_shape("add", a, b)
    return record_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        return record_op("sub", a.data - b, (a,), lambda g: (g,))
    assert isinstance(b, Tensor)
    _check_same_shape("sub", a, b)
    return record_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if _is_scalar(b):
        return record_op("mul", a.data * b, (a,), lambda g: (g * b,))
    assert isinstance(b, Tensor)
    _check_same_shape("mul", a, b)
    return record_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast_scalar(g * b.data, a.shape),
            _unbroadcast_scalar(g * a.data, b.shape),
        ),
    )


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record_op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype)
    return record_op("relu", out, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return record_op("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return record_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return record_op("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


# --- linear algebra and reductions ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return record_op(
        "matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return record_op("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from e
    return record_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record_op("sum", out, (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / count)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return record_op(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


# --- structural ---


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    for t in tensors:
        other_dims = [s for i, s in enumerate(t.shape) if i != axis % ndim]
        first_dims = [s for i, s in enumerate(tensors[0].shape) if i != axis % ndim]
        if t.ndim != ndim or other_dims != first_dims:
            raise ShapeError(
                f"concat along axis {axis}: shapes {[u.shape for u in tensors]} are incompatible"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis))
    )


def take_slice(x: Tensor, key: Any) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, (int, slice)) for k in key):
        raise ContractError("slice only supports integer and slice indices")
    out = x.data[key]

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return record_op("slice", np.array(out), (x,), vjp)


def embedding_lookup(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of ``table``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be a matrix, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise EmbeddingLookupError(
            f"indices must lie in [0, {table.shape[0]}), got range "
            f"[{idx.min()}, {idx.max()}]"
        )

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record_op("embedding_lookup", table.data[idx], (table,), vjp)


# --- optimization ---


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(
                f"Gradient for {name!r} has shape {grad.shape}, parameter has {param.shape}"
            )
        m = beta1 * state.m.get(name, np.zeros_like(grad)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(grad)) + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / (norm + 1e-12)
    return {name: g * scale for name, g in grads.items()}, norm
