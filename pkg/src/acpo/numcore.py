"""Small dense-tensor engine with reverse-mode gradients.

Every network and loss in the package is composed from the primitives in
``PRIMITIVES``. Values are float64 numpy arrays; a ``Tensor`` remembers the
primitive that produced it so ``backward`` can push exact gradients to every
leaf that has ``requires_grad`` set.

Gradients accumulate: calling ``backward`` twice without ``zero_grad`` adds
the second gradient onto the first, the same convention as most frameworks.
"""

from __future__ import annotations

import contextlib
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError  # noqa: F401  (re-exported)

_GRAD_ENABLED = True
# Non-differentiable points hit during a forward pass (primitive, detail).
_KINKS: list[tuple[str, str]] | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def record_kinks():
    """Collect the non-differentiable points visited inside the block."""
    global _KINKS
    prev = _KINKS
    _KINKS = []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _note_kink(op: str, detail: str) -> None:
    if _KINKS is not None:
        _KINKS.append((op, detail))


class Tensor:
    """Dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # the sum is finite for all-finite data barring overflow; confirm before raising
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``.

    ``weight`` is ``[out, in]``; ``x`` may carry any number of leading axes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return grads

    return _make("affine", out, parents, bw)


def conv2d(x, kernels: np.ndarray) -> Tensor:
    """Cross-correlate the last two axes of ``x`` with a fixed kernel bank.

    ``kernels`` is ``[kh, kw]`` or ``[C, kh, kw]`` with odd sizes; zero
    padding keeps the spatial size. A bank yields a trailing channel axis
    (``[..., H, W, C]``); a single kernel yields ``[..., H, W]``.
    """
    x = as_tensor(x)
    k = np.asarray(kernels, dtype=np.float64)
    single = k.ndim == 2
    if single:
        k = k[None]
    if k.ndim != 3 or k.shape[1] % 2 == 0 or k.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernel bank must be [C, odd, odd], got {np.shape(kernels)}")
    if x.data.ndim < 2:
        raise ShapeError(f"conv2d: input needs two spatial axes, got {x.shape}")
    C, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    H, W = x.shape[-2:]
    lead = x.data.ndim - 2
    pad = [(0, 0)] * lead + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape + (C,))
    for i in range(kh):
        for j in range(kw):
            tap = k[:, i, j]
            if np.any(tap):
                out += xp[..., i:i + H, j:j + W, None] * tap
    if single:
        out = out[..., 0]

    def bw(g):
        if single:
            g = g[..., None]
        gp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                tap = k[:, i, j]
                if np.any(tap):
                    gp[..., i:i + H, j:j + W] += g @ tap
        return (gp[..., ph:ph + H, pw:pw + W],)

    return _make("conv2d", out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data == 0.0):
        _note_kink("relu", "input exactly zero")
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def _axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _axes(x.data.ndim, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x.data.ndim, axis)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=np.float64), (x,), bw)


def l2norm(x, axis=None, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """``sqrt(sum(x**2) + eps)`` along ``axis``.

    With ``eps == 0`` the norm has a kink at the origin; the gradient there is
    reported as zero and the point is logged for ``grad_check``.
    """
    x = as_tensor(x)
    axes = _axes(x.data.ndim, axis)
    n = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True) + eps)
    if eps == 0.0 and np.any(n == 0.0):
        _note_kink("l2norm", "norm evaluated at the zero vector")
    out = n if keepdims else np.squeeze(n, axis=axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    return _make("l2norm", np.asarray(out, dtype=np.float64), (x,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, ts, bw)


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make("stack", out, ts, bw)


def cosine(a, b, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Cosine similarity along ``axis``.

    With ``eps == 0`` a zero-norm operand is an error; otherwise each norm is
    ``sqrt(|v|^2 + eps)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("cosine", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True) + eps)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NonFiniteError("cosine: zero-norm operand")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("cosine", np.squeeze(c, axis=axis), (a, b), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.data.ndim for a in axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data == lo) or np.any(x.data == hi):
        _note_kink("clip", "input exactly on a clip boundary")
    inside = (x.data > lo) & (x.data < hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "affine": affine,
    "conv2d": conv2d,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "square": square,
    "sum": sum,
    "mean": mean,
    "l2norm": l2norm,
    "concat": concat,
    "stack": stack,
    "cosine": cosine,
    "reshape": reshape,
    "transpose": transpose,
    "clip": clip,
}

# Primitives whose first operand is a list of tensors.
_LIST_PRIMITIVES = {"concat", "stack"}


def forward_graph(inputs: Sequence, program) -> Tensor:
    """Run ``program`` on ``inputs`` and return its final value.

    ``program`` is either a callable taking the inputs positionally, or a
    sequence of steps ``(name, refs)`` / ``(name, refs, kwargs)``. ``refs``
    index into the running value list (inputs first, then one slot per
    executed step); the last step's output is returned.
    """
    inputs = [as_tensor(t) for t in inputs]
    if callable(program):
        return program(*inputs)
    values = list(inputs)
    for step in program:
        name, refs = step[0], step[1]
        kwargs = step[2] if len(step) > 2 else {}
        if name not in PRIMITIVES:
            raise ShapeError(f"forward_graph: unknown primitive {name!r}")
        args = [values[r] for r in refs]
        if name in _LIST_PRIMITIVES:
            out = PRIMITIVES[name](args, **kwargs)
        else:
            out = PRIMITIVES[name](*args, **kwargs)
        values.append(out)
    return values[-1]


def backward(output: Tensor) -> None:
    """Accumulate ``d output / d leaf`` into ``leaf.grad`` for every reachable leaf."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be a single element, got shape {output.shape}")
    if not output.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_leaf: dict[str, float]
    passed: bool
    excluded: bool = False
    reason: str = ""

    def leaf_passed(self, name: str, tolerance: float) -> bool:
        return self.per_leaf[name] <= tolerance


def grad_check(
    program,
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    names: Sequence[str] | None = None,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences on every grad leaf.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``. If the
    analytic pass touches a non-differentiable point (e.g. a norm at the
    origin) the report is marked ``excluded`` and not judged.
    ``max_elements`` checks a seeded random subset of each leaf.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    leaves = [t for t in inputs if isinstance(t, Tensor) and t.requires_grad]
    if names is None:
        names = [f"input{i}" for i, t in enumerate(inputs) if isinstance(t, Tensor) and t.requires_grad]

    def run() -> Tensor:
        return forward_graph(inputs, program)

    for leaf in leaves:
        leaf.zero_grad()
    with record_kinks() as kinks:
        out = run()
        backward(out)
    if kinks:
        op, detail = kinks[0]
        return GradCheckReport(float("nan"), {}, passed=False, excluded=True, reason=f"{op}: {detail}")

    rng = np.random.default_rng(seed)
    per_leaf: dict[str, float] = {}
    for name, leaf in zip(names, leaves):
        analytic = leaf.grad.copy()
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                fp = run().item()
                flat[i] = orig - epsilon
                fm = run().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        per_leaf[name] = worst
    max_err = max(per_leaf.values()) if per_leaf else 0.0
    return GradCheckReport(max_err, per_leaf, passed=max_err <= tolerance)


# --------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParamStore:
    """Named parameters with a frozen subset and Adam moment state."""

    entries: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    frozen_names: set[str] = field(default_factory=set)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self.entries:
            raise ConfigError(f"parameter {name!r} already exists")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = not frozen
        t.grad = None if frozen else np.zeros_like(t.data)
        self.entries[name] = t
        if frozen:
            self.frozen_names.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for name in list(self.entries) if names is None else names:
            t = self.entries[name]
            t.requires_grad = False
            t.grad = None
            self.frozen_names.add(name)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.entries.items() if n not in self.frozen_names]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def num_trainable(self) -> int:
        return int(np.sum([t.data.size for _, t in self.trainable()]))

    def checksum(self, frozen_only: bool = True) -> str:
        h = hashlib.sha256()
        for name in sorted(self.entries):
            if frozen_only and name not in self.frozen_names:
                continue
            t = self.entries[name]
            h.update(f"{name}{t.data.shape}".encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step_index: int = 1,
) -> None:
    """One bias-corrected Adam update on the non-frozen entries of ``store``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if step_index < 1:
        raise ConfigError(f"step_index starts at 1, got {step_index}")
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for name, t in store.trainable():
        g = grads[name] if grads is not None else t.grad
        if g is None:
            continue
        m, v = store.moments.get(name, (np.zeros_like(t.data), np.zeros_like(t.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.moments[name] = (m, v)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
