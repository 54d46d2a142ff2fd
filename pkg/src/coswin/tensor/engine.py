"""Tensor value type and the reverse-mode tape.

Every differentiable operation builds its output through :func:`record`,
which checks precision and finiteness, then (when gradients are enabled and
some input requires them) attaches a :class:`TapeNode` holding the backward
rule. :func:`backward` walks the nodes in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ContractError, NonFiniteError, PrecisionError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _fault_scales() -> Dict[str, float]:
    if not hasattr(_state, "faults"):
        _state.faults = {}
    return _state.faults


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def inject_backward_fault(op: str, scale: float = 1.5) -> Iterator[None]:
    """Multiply the backward output of ``op`` by ``scale``.

    Used only as a negative control: a correct gradient checker must flag it.
    """
    faults = _fault_scales()
    prev = faults.get(op)
    faults[op] = scale
    try:
        yield
    finally:
        if prev is None:
            faults.pop(op, None)
        else:
            faults[op] = prev


class TapeNode:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense row-major array with an optional autodiff history."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
            if arr.dtype not in SUPPORTED_DTYPES:
                raise PrecisionError(f"unsupported precision {arr.dtype}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _common_dtype(inputs: Sequence[Tensor], op: str) -> np.dtype:
    dtype = inputs[0].dtype
    for t in inputs[1:]:
        if t.dtype != dtype:
            raise PrecisionError(f"{op}: mixed precision {dtype.name} and {t.dtype.name}")
    return dtype


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, put it on the tape."""
    dtype = _common_dtype(inputs, op)
    if out.dtype != dtype:
        out = out.astype(dtype)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out, dtype=dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = TapeNode(op, tuple(inputs), backward_fn)
    return result


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every leaf that requires a gradient.

    Returns a map from leaf tensor to its gradient. When ``accumulate`` is
    true the gradients are also summed into ``leaf.grad``.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    faults = _fault_scales()
    leaves: Dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            leaves[t] = g
            continue
        parent_grads = t.node.backward_fn(g)
        scale = faults.get(t.node.op)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if scale is not None:
                pg = pg * scale
            if pg.shape != p.shape:
                raise ContractError(
                    f"{t.node.op}: backward produced shape {pg.shape} for input {p.shape}"
                )
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if accumulate:
        for leaf, g in leaves.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves
