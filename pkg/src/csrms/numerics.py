"""Dense-tensor arithmetic with reverse-mode differentiation.

Tensors are plain ``numpy.float64`` arrays (shape plus a row-major buffer);
computation happens in 64-bit throughout, 32-bit is used only at I/O
boundaries. A :class:`Node` wraps a tensor value together with references to
its parents and the local-derivative closures needed for the backward pass.

Broadcasting is deliberately narrow: scalar-with-tensor, and row-vector-with-
matrix for :func:`add`. Everything else requires exact shape agreement, which
keeps the backward rules auditable.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

Array = np.ndarray


def as_tensor(x, *, allow_nonfinite: bool = False) -> Array:
    """Coerce ``x`` to a float64 array and validate finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN/Inf")
    return arr


class Node:
    """A value in a computation graph.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``value``. ``parents`` holds ``(parent, pull)`` pairs where ``pull`` maps
    the upstream gradient to this parent's contribution.
    """

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value: Array, parents: tuple = ()):
        self.value = value
        self.grad: Array | None = None
        self.parents: tuple[tuple[Node, Callable[[Array], Array]], ...] = parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def leaf(x) -> Node:
    """Wrap an array as a graph input (parameter or constant)."""
    return Node(as_tensor(x))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _check_finite(arr: Array, op: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{op} produced a non-finite value")
    return arr


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _check_finite(a.value @ b.value, "matmul")
    return Node(out, (
        (a, lambda g, bv=b.value: g @ bv.T),
        (b, lambda g, av=a.value: av.T @ g),
    ))


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; supports scalar+tensor and row-vector+matrix."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        reduce_a = reduce_b = None
    elif av.shape == () or bv.shape == ():
        reduce_a = "scalar" if av.shape == () else None
        reduce_b = "scalar" if bv.shape == () else None
    elif av.ndim == 2 and bv.ndim == 2 and av.shape[0] == 1 and av.shape[1] == bv.shape[1]:
        reduce_a, reduce_b = "row", None
    elif av.ndim == 2 and bv.ndim == 2 and bv.shape[0] == 1 and bv.shape[1] == av.shape[1]:
        reduce_a, reduce_b = None, "row"
    else:
        raise DimensionError(f"add cannot broadcast {av.shape} with {bv.shape}")

    def _pull(mode):
        if mode is None:
            return lambda g: g
        if mode == "scalar":
            return lambda g: np.sum(g)
        return lambda g: np.sum(g, axis=0, keepdims=True)

    out = _check_finite(av + bv, "add")
    return Node(out, ((a, _pull(reduce_a)), (b, _pull(reduce_b))))


def neg(a: Node) -> Node:
    a = _lift(a)
    return Node(-a.value, ((a, lambda g: -g),))


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of same-shape tensors."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul expects equal shapes, got {a.shape} * {b.shape}")
    out = _check_finite(a.value * b.value, "mul")
    return Node(out, (
        (a, lambda g, bv=b.value: g * bv),
        (b, lambda g, av=a.value: g * av),
    ))


def scale(a: Node, s) -> Node:
    """Scalar times tensor; ``s`` may be a float or a scalar Node."""
    a = _lift(a)
    if isinstance(s, Node):
        if s.value.shape != ():
            raise DimensionError(f"scale factor must be scalar, got shape {s.value.shape}")
        out = _check_finite(a.value * s.value, "scale")
        return Node(out, (
            (a, lambda g, sv=s.value: g * sv),
            (s, lambda g, av=a.value: np.asarray(np.sum(g * av))),
        ))
    s = float(s)
    out = _check_finite(a.value * s, "scale")
    return Node(out, ((a, lambda g: g * s),))


def relu(a: Node) -> Node:
    a = _lift(a)
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def log(a: Node) -> Node:
    a = _lift(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.value)
    return Node(out, ((a, lambda g, av=a.value: g / av),))


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def pull(g, y=y):
        return y * (g - np.sum(g * y, axis=1, keepdims=True))

    return Node(y, ((a, pull),))


def log_softmax_rows(a: Node) -> Node:
    """Numerically stable ``log(softmax_rows(a))``."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a 2-D tensor, got {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def pull(g, sm=sm):
        return g - sm * np.sum(g, axis=1, keepdims=True)

    return Node(out, ((a, pull),))


def concat_rows(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows expects matching column counts, got {a.shape}, {b.shape}")
    na = a.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)
    return Node(out, (
        (a, lambda g: g[:na]),
        (b, lambda g: g[na:]),
    ))


def mean_rows(a: Node) -> Node:
    """Mean over rows, returned as a single-row matrix."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise DimensionError(f"mean_rows expects a 2-D tensor, got {a.shape}")
    n = a.shape[0]
    out = a.value.mean(axis=0, keepdims=True)
    return Node(out, ((a, lambda g: np.repeat(g / n, n, axis=0)),))


def sum_all(a: Node) -> Node:
    a = _lift(a)
    out = np.asarray(np.sum(a.value))
    return Node(out, ((a, lambda g, shp=a.shape: np.broadcast_to(g, shp).copy()),))


def select_rows(a: Node, indices: Sequence[int]) -> Node:
    """Gather rows by index; repeated indices accumulate gradient."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise DimensionError(f"select_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError("select_rows index out of range")
    out = a.value[idx]

    def pull(g, idx=idx, shp=a.shape):
        acc = np.zeros(shp)
        np.add.at(acc, idx, g)
        return acc

    return Node(out, ((a, pull),))


def l2_distance(a: Node, b: Node) -> Node:
    """Euclidean distance between two same-shape tensors (scalar output).

    Non-differentiable at distance zero; the subgradient zero is used there.
    """
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance expects equal shapes, got {a.shape}, {b.shape}")
    diff = a.value - b.value
    dist = np.asarray(np.sqrt(np.sum(diff * diff)))

    def pull_a(g, diff=diff, dist=dist):
        if dist == 0.0:
            return np.zeros_like(diff)
        return g * diff / dist

    return Node(dist, ((a, pull_a), (b, lambda g: -pull_a(g))))


def rowwise_l2(a: Node, b: Node) -> Node:
    """Per-row Euclidean distance between two n-by-d tensors, as n-by-1."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape or a.value.ndim != 2:
        raise DimensionError(f"rowwise_l2 expects equal 2-D shapes, got {a.shape}, {b.shape}")
    diff = a.value - b.value
    dist = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))

    def pull_a(g, diff=diff, dist=dist):
        safe = np.where(dist == 0.0, 1.0, dist)
        out = g * diff / safe
        return np.where(dist == 0.0, 0.0, out)

    return Node(dist, ((a, pull_a), (b, lambda g: -pull_a(g))))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(out: Node) -> None:
    """Reverse-mode pass seeding ``d(out)/d(out) = 1``.

    Visits each node exactly once in reverse topological order; gradients of
    shared sub-expressions accumulate by summation.
    """
    if out.value.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {out.shape}")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.value)
    out.grad = np.ones_like(out.value)
    for node in reversed(topo):
        g = node.grad
        for parent, pull in node.parents:
            parent.grad += pull(g)


def value(node: Node) -> float:
    """Scalar value of a size-1 node."""
    if node.value.size != 1:
        raise ContractError("value() requires a scalar node")
    return float(node.value.reshape(()))


def grad_check(
    f: Callable[..., Node],
    inputs: Iterable[Array],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` consumes one leaf Node per input array and must return a scalar
    Node. The error at each coordinate is
    ``|analytic - central| / max(1, |central|)``.
    """
    if not (0.0 < eps <= 1e-3):
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    arrays = [as_tensor(x) for x in inputs]

    leaves = [leaf(x) for x in arrays]
    out = f(*leaves)
    if out.value.size != 1:
        raise ContractError("grad_check requires a scalar-valued computation")
    backward(out)
    analytic = [lf.grad.copy() for lf in leaves]

    worst = 0.0
    for which, base in enumerate(arrays):
        flat = base.reshape(-1)
        for coord in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[which].reshape(-1)[coord] = flat[coord] + eps
            hi = value(f(*[leaf(a) for a in bumped]))
            bumped[which].reshape(-1)[coord] = flat[coord] - eps
            lo = value(f(*[leaf(a) for a in bumped]))
            central = (hi - lo) / (2.0 * eps)
            a_val = analytic[which].reshape(-1)[coord]
            err = abs(a_val - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
