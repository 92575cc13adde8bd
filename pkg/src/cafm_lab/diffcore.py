"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when any of its inputs requires a
gradient, remembers the primitive that produced it together with a
vector-Jacobian product rule.  The graph is rebuilt on every call (define by
run), so iterative solvers with a data-dependent number of steps can be
differentiated by simply running them on tensors.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "CompGraph", "ParamStore", "DiffError", "ShapeError", "NonFiniteError",
    "as_tensor", "no_grad", "grad", "vjp", "forward", "backward", "grad_check", "adam_step",
    "add", "sub", "mul", "div", "neg", "matmul", "einsum", "tanh", "sin", "cos", "exp", "log",
    "sqrt", "square", "relu", "sum", "mean", "reshape", "swapaxes", "concat", "where",
    "clip", "detach", "spd_solve", "custom",
]


class DiffError(RuntimeError):
    pass


class ShapeError(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class _Node:
    op: str
    parents: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_node", "_id")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return _unary(self, "pow", np.power(self.value, p), lambda g, x, y: g * p * np.power(x, p - 1))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by node '{op}'")


def _make(op: str, out: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, out)
    t = Tensor(out)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, parents, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, op: str, fn, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"node '{op}': {a.shape} vs {b.shape}: {exc}") from None
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(da(g, av, bv, out), av.shape) if a.requires_grad else None,
                _unbroadcast(db(g, av, bv, out), bv.shape) if b.requires_grad else None)

    return _make(op, out, (a, b), vjp)


def _unary(x, op: str, out: np.ndarray, d) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(op, out, (x,), lambda g: (d(g, xv, out),))


def add(a, b):
    return _binary(a, b, "add", np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b):
    return _binary(a, b, "sub", np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b):
    return _binary(a, b, "mul", np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(a, b, "div", np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(x):
    x = as_tensor(x)
    return _unary(x, "neg", -x.value, lambda g, *_: -g)


def tanh(x):
    x = as_tensor(x)
    return _unary(x, "tanh", np.tanh(x.value), lambda g, x, y: g * (1.0 - y * y))


def sin(x):
    x = as_tensor(x)
    return _unary(x, "sin", np.sin(x.value), lambda g, x, y: g * np.cos(x))


def cos(x):
    x = as_tensor(x)
    return _unary(x, "cos", np.cos(x.value), lambda g, x, y: -g * np.sin(x))


def exp(x):
    x = as_tensor(x)
    return _unary(x, "exp", np.exp(x.value), lambda g, x, y: g * y)


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return _unary(x, "log", out, lambda g, x, y: g / x)


def sqrt(x):
    # zero-derivative convention at 0 keeps Adam-style denominators finite
    x = as_tensor(x)
    out = np.sqrt(x.value)

    def d(g, x, y):
        safe = np.where(y > 0, y, 1.0)
        return np.where(y > 0, g / (2.0 * safe), 0.0)

    return _unary(x, "sqrt", out, d)


def square(x):
    x = as_tensor(x)
    return _unary(x, "square", x.value * x.value, lambda g, x, y: 2.0 * g * x)


def relu(x):
    x = as_tensor(x)
    return _unary(x, "relu", np.maximum(x.value, 0.0), lambda g, x, y: g * (x > 0))


def clip(x, lo, hi):
    """Clamp with pass-through gradient on the interior, zero on the clamped part."""
    x = as_tensor(x)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.clip(x.value, lo, hi)
    return _unary(x, "clip", out, lambda g, x, y: g * ((x >= lo) & (x <= hi)))


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    return _binary(a, b, "where", lambda x, y: np.where(mask, x, y),
                   lambda g, *_: np.where(mask, g, 0.0), lambda g, *_: np.where(mask, 0.0, g))


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).value)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"node 'matmul': needs >=2-D operands, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"node 'matmul': {a.shape} @ {b.shape}: {exc}") from None
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def einsum(spec: str, a, b):
    """Two-operand einsum; every index of an operand must also appear elsewhere."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out_sub), (sb, sa + out_sub)):
        if len(set(s)) != len(s) or any(c not in other for c in s):
            raise ShapeError(f"node 'einsum': unsupported subscripts {spec!r}")
    try:
        out = np.einsum(spec, a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"node 'einsum' {spec!r}: {a.shape}, {b.shape}: {exc}") from None
    av, bv = a.value, b.value

    def vjp(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bv) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, av) if b.requires_grad else None
        return ga, gb

    return _make("einsum", out, (a, b), vjp)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    shape = x.shape

    def d(g, *_):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary(x, "sum", np.asarray(out), d)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"node 'reshape': {x.shape} -> {shape}: {exc}") from None
    old = x.shape
    return _unary(x, "reshape", out, lambda g, *_: g.reshape(old))


def swapaxes(x, i: int, j: int):
    x = as_tensor(x)
    return _unary(x, "swapaxes", np.swapaxes(x.value, i, j), lambda g, *_: np.swapaxes(g, i, j))


def getitem(x, idx):
    x = as_tensor(x)
    shape = x.shape

    def d(g, *_):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _unary(x, "slice", np.asarray(x.value[idx]), d)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"node 'concat': {[x.shape for x in xs]}: {exc}") from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def _try_cholesky(M: np.ndarray) -> np.ndarray | None:
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None


def _chol_solve(L: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``L L^T x = r``; a shared ``(m, m)`` factor takes ``r`` as ``(m,)`` or ``(B, m)``."""
    if L.ndim == 2:
        return np.linalg.solve(L.T, np.linalg.solve(L, r.T)).T
    z = np.linalg.solve(L, r[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]


def spd_solve(M, r, damping: float = 0.0, retries: int = 6) -> Tensor:
    """Solve ``(M + damping*I) x = r`` for symmetric positive (semi)definite ``M``.

    ``M`` is ``(m, m)`` or ``(B, m, m)``; ``r`` is ``(B, m)`` or ``(m,)``.  If the
    Cholesky factorization fails the damping is multiplied by 10 (starting from
    1e-12 when it is zero) and the factorization retried, at most ``retries`` times.
    """
    M, r = as_tensor(M), as_tensor(r)
    m = M.shape[-1]
    eye = np.eye(m)
    eps = float(damping)
    Mv = M.value + eps * eye if eps else M.value
    L = _try_cholesky(Mv)
    for _ in range(retries):
        if L is not None:
            break
        eps = eps * 10.0 if eps > 0 else 1e-12
        Mv = M.value + eps * eye
        L = _try_cholesky(Mv)
    if L is None:
        raise np.linalg.LinAlgError(f"damped normal matrix not positive definite (final damping {eps:.3e})")
    rv = r.value
    x = _chol_solve(L, rv)

    def vjp(g):
        # M is symmetric, so the adjoint solve reuses the same factor
        gr = _chol_solve(L, g)
        gM = None
        if M.requires_grad:
            gM = _unbroadcast(-gr[..., :, None] * x[..., None, :], M.shape)
        return gM, (_unbroadcast(gr, rv.shape) if r.requires_grad else None)

    return _make("spd_solve", x, (M, r), vjp)


def custom(op: str, inputs: Sequence, value: np.ndarray, vjp_fn) -> Tensor:
    """Wrap an externally computed value with a user-supplied VJP rule."""
    inputs = tuple(as_tensor(x) for x in inputs)
    return _make(op, np.asarray(value, dtype=np.float64), inputs, vjp_fn)


def _toposort(out: Tensor) -> list[Tensor]:
    seen, order, stack = set(), [], [out]
    while stack:
        t = stack.pop()
        if t._id in seen or t._node is None:
            continue
        seen.add(t._id)
        order.append(t)
        stack.extend(t._node.parents)
    order.sort(key=lambda t: t._id, reverse=True)
    return order


def grad(out: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """VJP of ``out`` with cotangent ``seed`` (ones for scalars) against each of ``wrt``."""
    if seed is None:
        if out.value.size != 1:
            raise ShapeError("seed gradient required for non-scalar output")
        seed = np.ones_like(out.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {out.shape}")
    grads: dict[int, np.ndarray] = {out._id: seed}
    for t in _toposort(out):
        g = grads.pop(t._id, None)
        if g is None:
            continue
        for p, gp in zip(t._node.parents, t._node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            grads[p._id] = grads[p._id] + gp if p._id in grads else gp
    return [grads.get(w._id, np.zeros_like(w.value)) for w in wrt]


def vjp(fn: Callable[[Tensor], Tensor], x, u) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = fn(xt)
    return grad(out, [xt], u)[0]


class CompGraph:
    """A traced computation over named leaves.

    ``fn`` takes leaf tensors as keyword arguments and returns a tensor or a
    mapping of named tensors; the first output (or ``output``) is the one
    differentiated by :func:`backward`.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], leaves: Iterable[str],
                 output: str | None = None):
        self.fn = fn
        self.leaf_names = tuple(leaves)
        self.output = output
        self._leaves: dict[str, Tensor] | None = None
        self._out: Tensor | None = None

    def __repr__(self) -> str:
        return f"CompGraph(leaves={self.leaf_names})"


def forward(graph: CompGraph, leaves: Mapping[str, object]) -> dict[str, np.ndarray]:
    missing = set(graph.leaf_names) - set(leaves)
    if missing:
        raise DiffError(f"unbound leaves: {sorted(missing)}")
    ts = {k: Tensor(np.array(leaves[k], dtype=np.float64), requires_grad=True, name=k)
          for k in graph.leaf_names}
    res = graph.fn(**ts)
    outs = {"out": res} if isinstance(res, Tensor) else dict(res)
    key = graph.output or next(iter(outs))
    graph._leaves, graph._out = ts, as_tensor(outs[key])
    return {k: as_tensor(v).value.copy() for k, v in outs.items()}


def backward(graph: CompGraph, seed_grad) -> dict[str, np.ndarray]:
    if graph._out is None:
        raise DiffError("backward called before forward")
    names = list(graph.leaf_names)
    gs = grad(graph._out, [graph._leaves[n] for n in names], seed_grad)
    return dict(zip(names, gs))


def grad_check(fn: Callable[[Tensor], Tensor], point, fd_step: float = 1e-5) -> float:
    """Max relative error between the AD gradient and central differences."""
    x = np.array(point, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = fn(xt)
    if not np.isfinite(out.value).all():
        raise NonFiniteError("function value is not finite")
    g_ad = grad(out, [xt])[0]
    g_fd = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += fd_step
            xm[i] -= fd_step
            fp, fm = fn(Tensor(xp)).item(), fn(Tensor(xm)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"function value is not finite near coordinate {i}")
            g_fd[i] = (fp - fm) / (2.0 * fd_step)
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8)))


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def zero_grad(self) -> None:
        for k in self.grads:
            self.grads[k] = np.zeros_like(self.params[k])

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {self.params[k].shape}")
            self.grads[k] = self.grads[k] + g

    def copy(self) -> "ParamStore":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ParamStore(dup(self.params), dup(self.grads), dup(self.m), dup(self.v), self.step, self.seed)


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              clip_norm: float | None = 1.0, eps: float = 1e-8) -> ParamStore:
    """In-place Adam update (bias corrected) after global-norm gradient clipping."""
    for k, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in store.grads.values()])))
    scale = 1.0
    if clip_norm is not None and total > clip_norm:
        scale = clip_norm / total
    b1, b2 = betas
    store.step += 1
    c1, c2 = 1.0 - b1 ** store.step, 1.0 - b2 ** store.step
    for k, p in store.params.items():
        g = store.grads[k] * scale
        store.m[k] = b1 * store.m[k] + (1.0 - b1) * g
        store.v[k] = b2 * store.v[k] + (1.0 - b2) * g * g
        store.params[k] = p - lr * (store.m[k] / c1) / (np.sqrt(store.v[k] / c2) + eps)
    return store
