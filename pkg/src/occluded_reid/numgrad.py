"""Small reverse-mode differentiation tape over float64 numpy arrays.

Only the operators needed by the re-id model are supported. Every node carries
an ``op`` name; backward rules live in ``BACKWARD_RULES`` and a graph that
contains an op without a rule is rejected by :func:`gradients`.

Row-vector convention throughout: a linear map is ``x @ W + b`` with ``W`` of
shape ``(in, out)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping

import numpy as np

COSINE_EPS = 1e-12


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _arr(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Var:
    __slots__ = ("value", "parents", "op", "ctx", "requires_grad", "name")

    def __init__(self, value, parents=(), op="leaf", ctx=None, requires_grad=False, name=None):
        self.value = _arr(value)
        self.parents = tuple(parents)
        self.op = op
        self.ctx = ctx
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _arr(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Var(out, (a, b), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Var(out, (a, b), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Var(out, (a, b), "mul")


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")
    return Var(np.matmul(a.value, b.value), (a, b), "matmul")


def concat(xs: Iterable, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = [x.value.shape[axis] for x in xs]
    return Var(out, xs, "concat", ctx=(axis, sizes))


def relu(x) -> Var:
    x = as_var(x)
    return Var(np.maximum(x.value, 0.0), (x,), "relu")


def hinge(x) -> Var:
    """max(0, x); same rule as relu but kept separate so loss graphs read clearly."""
    x = as_var(x)
    return Var(np.maximum(x.value, 0.0), (x,), "hinge")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    mx = np.max(x, axis=axis, keepdims=True)
    z = x - mx
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    return Var(softmax_np(x.value, axis), (x,), "softmax", ctx=axis)


def log_softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    return Var(log_softmax_np(x.value, axis), (x,), "log_softmax", ctx=axis)


def cosine(a, b) -> Var:
    """Cosine along the last axis; 0 when either norm is below 1e-12."""
    a, b = as_var(a), as_var(b)
    if a.value.shape[-1] != b.value.shape[-1]:
        raise ShapeError(f"cosine: length mismatch {a.value.shape} vs {b.value.shape}")
    av, bv = np.broadcast_arrays(a.value, b.value)
    na = np.sqrt((av * av).sum(-1))
    nb = np.sqrt((bv * bv).sum(-1))
    ok = (na >= COSINE_EPS) & (nb >= COSINE_EPS)
    dot = (av * bv).sum(-1)
    denom = np.where(ok, na * nb, 1.0)
    out = np.where(ok, dot / denom, 0.0)
    return Var(out, (a, b), "cosine", ctx=(na, nb, ok, out))


def norm(x) -> Var:
    """Euclidean norm along the last axis; subgradient 0 at the origin."""
    x = as_var(x)
    n = np.sqrt((x.value * x.value).sum(-1))
    return Var(n, (x,), "norm")


def sum_(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    return Var(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), "sum", ctx=(axis, keepdims))


def mean(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    return Var(np.mean(x.value, axis=axis, keepdims=keepdims), (x,), "mean", ctx=(axis, keepdims))


def reshape(x, shape) -> Var:
    x = as_var(x)
    return Var(x.value.reshape(shape), (x,), "reshape")


def swapaxes(x, a1: int = -1, a2: int = -2) -> Var:
    x = as_var(x)
    return Var(np.swapaxes(x.value, a1, a2), (x,), "swapaxes", ctx=(a1, a2))


def getitem(x, idx) -> Var:
    x = as_var(x)
    return Var(x.value[idx], (x,), "getitem", ctx=idx)


# ---------------------------------------------------------------------------
# backward rules: rule(node, g) -> tuple of parent gradients (None = skip)

def _bw_add(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)


def _bw_sub(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)


def _bw_mul(n, g):
    a, b = n.parents
    return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)


def _bw_matmul(n, g):
    a, b = n.parents
    ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
    gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
    return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)


def _bw_concat(n, g):
    axis, sizes = n.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bw_relu(n, g):
    (x,) = n.parents
    return (g * (x.value > 0.0),)


def _bw_softmax(n, g):
    y = n.value
    axis = n.ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _bw_log_softmax(n, g):
    axis = n.ctx
    y = np.exp(n.value)
    return (g - y * g.sum(axis=axis, keepdims=True),)


def _bw_cosine(n, g):
    a, b = n.parents
    na, nb, ok, out = n.ctx
    av, bv = np.broadcast_arrays(a.value, b.value)
    safe_na = np.where(ok, na, 1.0)[..., None]
    safe_nb = np.where(ok, nb, 1.0)[..., None]
    c = out[..., None]
    gg = np.where(ok, g, 0.0)[..., None]
    ga = gg * (bv / (safe_na * safe_nb) - c * av / (safe_na * safe_na))
    gb = gg * (av / (safe_na * safe_nb) - c * bv / (safe_nb * safe_nb))
    return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)


def _bw_norm(n, g):
    (x,) = n.parents
    nv = n.value[..., None]
    safe = np.where(nv > 0.0, nv, 1.0)
    return (np.where(nv > 0.0, g[..., None] * x.value / safe, 0.0),)


def _expand_reduced(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(x_shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, x_shape)


def _bw_sum(n, g):
    (x,) = n.parents
    axis, keepdims = n.ctx
    return (np.array(_expand_reduced(g, x.value.shape, axis, keepdims)),)


def _bw_mean(n, g):
    (x,) = n.parents
    axis, keepdims = n.ctx
    count = x.value.size / max(n.value.size, 1)
    return (np.array(_expand_reduced(g, x.value.shape, axis, keepdims)) / count,)


def _bw_reshape(n, g):
    (x,) = n.parents
    return (g.reshape(x.value.shape),)


def _bw_swapaxes(n, g):
    a1, a2 = n.ctx
    return (np.swapaxes(g, a1, a2),)


def _bw_getitem(n, g):
    (x,) = n.parents
    out = np.zeros_like(x.value)
    np.add.at(out, n.ctx, g)
    return (out,)


BACKWARD_RULES: Dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "concat": _bw_concat,
    "relu": _bw_relu,
    "hinge": _bw_relu,
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "cosine": _bw_cosine,
    "norm": _bw_norm,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "reshape": _bw_reshape,
    "swapaxes": _bw_swapaxes,
    "getitem": _bw_getitem,
}


def backward(root: Var) -> Dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node that requires grad; keyed by id()."""
    if root.value.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {root.value.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        if node.op != "leaf" and node.op not in BACKWARD_RULES:
            raise ContractError(f"unsupported operator in graph: {node.op!r}")
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.op == "leaf":
            continue
        for parent, pg in zip(node.parents, BACKWARD_RULES[node.op](node, g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
    return grads


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Param:
    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise ValueError(f"param {self.name} has non-finite entries")


@dataclass
class ParamSet:
    """Named, ordered collection of parameters (the model's ModelParams)."""

    params: Dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value, trainable)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n in self.names(prefix):
            self.params[n].trainable = flag

    def subset(self, prefixes) -> "ParamSet":
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        out = ParamSet()
        for n, p in self.params.items():
            if any(n.startswith(pre) for pre in prefixes):
                out.params[n] = p
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, p in self.params.items():
            out.params[n] = Param(n, p.value.copy(), p.trainable)
        return out

    def update(self, other: "ParamSet") -> None:
        for n, p in other.params.items():
            self.params[n] = p

    def bitwise_equal(self, other: "ParamSet") -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes()
            for n in self.params
        )


def leaves(params: ParamSet) -> Dict[str, Var]:
    """Wrap parameters as graph leaves; frozen ones do not track gradients."""
    return {n: Var(p.value, requires_grad=p.trainable, name=n) for n, p in params.params.items()}


LossFn = Callable[[Mapping[str, Var]], Var]


def gradients(loss_fn: LossFn, params: ParamSet):
    """Evaluate ``loss_fn`` on leaves for ``params``; return (loss, {name: grad}).

    Frozen parameters receive all-zero gradients.
    """
    vs = leaves(params)
    loss = loss_fn(vs)
    if not isinstance(loss, Var):
        raise ContractError("loss_fn must return a Var")
    g = backward(loss)
    record = {}
    for n, v in vs.items():
        gi = g.get(id(v))
        record[n] = np.zeros_like(v.value) if gi is None else gi.reshape(v.value.shape)
    return float(loss.value), record


def evaluate(loss_fn: LossFn, params: ParamSet) -> float:
    vs = {n: Var(p.value) for n, p in params.params.items()}
    return float(loss_fn(vs).value)


def finite_diff_check(loss_fn: LossFn, params: ParamSet, h: float = 1e-4, names=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error for each scalar is ``|fd - g| / max(|g|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, grads = gradients(loss_fn, params)
    worst = 0.0
    for n, p in params.params.items():
        if not p.trainable or (names is not None and n not in names):
            continue
        flat = p.value.reshape(-1)
        g = grads[n].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = evaluate(loss_fn, params)
            flat[i] = orig - h
            lm = evaluate(loss_fn, params)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(fd - g[i]) / max(abs(g[i]), 1e-8)
            worst = max(worst, err)
    return worst
