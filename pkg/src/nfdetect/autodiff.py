"""Dense float64 tensors with reverse-mode gradients and an Adam updater.

Only the handful of primitives needed by the flow are provided. Shapes must
match exactly; there is no implicit broadcasting. Row-vector broadcasting is
done explicitly with ``matmul`` against a column of ones, which keeps every
backward rule a plain matrix identity.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericOverflowError",
    "Node",
    "Tensor",
    "no_grad",
    "grad_enabled",
    "parameter",
    "constant",
    "apply_primitive",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "exp",
    "log",
    "tanh",
    "absolute",
    "sum_all",
    "slice_rows",
    "concat_rows",
    "scale",
    "reshape",
    "backward",
    "zero_grad",
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "gradient_check",
]


class ContractViolation(ValueError):
    """An operand violates the shape or domain rule of a primitive."""


class NumericOverflowError(FloatingPointError):
    """A forward evaluation produced NaN or Inf."""


# A Tensor is just a C-contiguous float64 ndarray; the alias documents intent.
Tensor = np.ndarray

Rule = Callable[[np.ndarray], np.ndarray]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording backward rules (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(parent, rule)`` pairs where ``rule`` maps the
    gradient w.r.t. this node to the gradient contribution for ``parent``.
    Leaves created by :func:`parameter` accumulate into ``grad``.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence[tuple["Node", Rule]] = (),
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractViolation(f"item() on non-scalar node of shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _result(kind: str, value: np.ndarray, edges: Sequence[tuple[Node, Rule]]) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(f"non-finite result in {kind}")
    if grad_enabled():
        live = [(p, r) for p, r in edges if p.requires_grad]
        if live:
            return Node(value, parents=live, requires_grad=True)
    return Node(value)


def _same_shape(kind: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _result(
        "matmul",
        av @ bv,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
    )


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _result("add", a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _result("sub", a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Node, b: Node) -> Node:
    _same_shape("elemwise_mul", a, b)
    av, bv = a.value, b.value
    return _result("elemwise_mul", av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def relu(x: Node) -> Node:
    # derivative at exactly 0 is taken as 0
    mask = x.value > 0.0
    return _result("relu", np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)])


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _result("exp", out, [(x, lambda g: g * out)])


def log(x: Node) -> Node:
    xv = x.value
    if np.any(xv <= 0.0):
        raise NumericOverflowError("log of a non-positive value")
    return _result("log", np.log(xv), [(x, lambda g: g / xv)])


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return _result("tanh", out, [(x, lambda g: g * (1.0 - out * out))])


def absolute(x: Node) -> Node:
    sign = np.sign(x.value)
    return _result("abs", np.abs(x.value), [(x, lambda g: g * sign)])


def sum_all(x: Node) -> Node:
    shape = x.shape
    return _result(
        "sum",
        np.asarray(x.value.sum()),
        [(x, lambda g: np.broadcast_to(g, shape).copy())],
    )


def slice_rows(x: Node, start: int, stop: int) -> Node:
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ContractViolation(f"slice_rows: bad range [{start}, {stop}) for {n} rows")

    def rule(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return full

    return _result("slice_rows", x.value[start:stop], [(x, rule)])


def concat_rows(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ContractViolation("concat_rows: no operands")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ContractViolation(f"concat_rows: trailing shapes differ {p.shape} vs {tail}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    edges = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        edges.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
    return _result("concat_rows", np.concatenate([p.value for p in parts], axis=0), edges)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _result("scale", x.value * c, [(x, lambda g: g * c)])


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    orig = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: {orig} -> {shape}") from exc
    return _result("reshape", out, [(x, lambda g: g.reshape(orig))])


_PRIMITIVES: dict[str, Callable[..., Node]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elemwise_mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "abs": absolute,
    "sum": sum_all,
    "slice_rows": slice_rows,
    "concat_rows": lambda *parts: concat_rows(parts),
    "scale": scale,
    "reshape": reshape,
}


def apply_primitive(kind: str, *operands, **attrs) -> Node:
    """Dispatch a primitive by name, e.g. ``apply_primitive("scale", x, 2.0)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive {kind!r}") from None
    return fn(*operands, **attrs)


def _topological(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Node) -> dict[Node, np.ndarray]:
    """Propagate d(output)/d(leaf) into every reachable parameter's ``grad``.

    Gradients accumulate: calling this twice without :func:`zero_grad`
    doubles them. Returns the contribution of this call per leaf.
    """
    if output.value.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    pending: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    contributions: dict[Node, np.ndarray] = {}
    for node in reversed(_topological(output)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            contributions[node] = g
            continue
        for parent, rule in node.parents:
            local = rule(g)
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + local
            else:
                pending[key] = local
    return contributions


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] | None = None
    second_moment: list[np.ndarray] | None = None

    @classmethod
    def for_params(cls, params: Sequence[Node], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.first_moment = [np.zeros_like(p.value) for p in params]
        state.second_moment = [np.zeros_like(p.value) for p in params]
        return state


def adam_step(params: Sequence[Node], state: AdamState) -> list[np.ndarray]:
    """Apply one bias-corrected Adam update in place and zero the grads.

    Returns the per-parameter increments that were added, so a caller can
    roll back or shrink an individual update.
    """
    if state.first_moment is None or state.second_moment is None:
        raise ContractViolation("AdamState moments are not initialised; use AdamState.for_params")
    if len(state.first_moment) != len(params):
        raise ContractViolation("AdamState was built for a different parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    deltas = []
    for i, p in enumerate(params):
        if p.grad is None or p.grad.shape != p.value.shape:
            raise ContractViolation(f"parameter {p.name or i} has no gradient of matching shape")
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * p.grad
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * p.grad**2
        delta = -state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.value = p.value + delta
        deltas.append(delta)
    zero_grad(params)
    return deltas


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tolerance)


def gradient_check(
    builder: Callable[[], Node],
    params: Sequence[Node],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps vanishing gradients from turning round-off into
    spurious failures. ``max_entries`` caps the entries probed per parameter.
    """
    zero_grad(params)
    out = builder()
    backward(out)
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    worst_rel, worst_abs, worst, count = 0.0, 0.0, "", 0
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        n = flat.size if max_entries is None else min(flat.size, max_entries)
        for j in range(n):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_plus = builder().item()
                flat[j] = orig - h
                f_minus = builder().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), floor)
            count += 1
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel = rel
                worst = f"{p.name or pi}[{j}]"
    return GradCheckReport(worst_rel, worst_abs, tolerance, count, worst)
