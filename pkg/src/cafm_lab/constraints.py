"""Constraint blocks, constraint sets, and the feasibility-violation metric.

Samples are flat vectors of length ``ambient_dim``; batched inputs have shape
``(B, ambient_dim)``.  Differentiable blocks work on :class:`~cafm_lab.diffcore.Tensor`
values so the projectors can be unrolled through them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

GRAYSCALE = (0.299, 0.587, 0.114)


class ConstraintError(ValueError):
    pass


class AffineEquality:
    """``A x - b = 0``.  ``b`` may be ``(m,)`` or one row per sample ``(B, m)``."""

    kind = "affine"

    def __init__(self, A, b, name: str = "affine"):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64)
        self.name = name
        if self.b.shape[-1] != self.A.shape[0]:
            raise ConstraintError(f"{name}: b has {self.b.shape[-1]} rows, A has {self.A.shape[0]}")

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def residual(self, x) -> Tensor:
        x = dc.as_tensor(x)
        spec = "md,bd->bm" if x.ndim == 2 else "md,d->m"
        return dc.sub(dc.einsum(spec, self.A, x), self.b)

    def jacobian(self, x) -> Tensor:
        return Tensor(self.A)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "A": self.A.tolist(), "b": self.b.tolist()}


class NonlinearEquality:
    """Generic ``h(x) = 0`` with a tensor residual and an optional analytic Jacobian.

    ``residual_fn`` maps ``(B, d) -> (B, m)``; ``jacobian_fn`` maps ``(B, d) -> (B, m, d)``.
    Without ``jacobian_fn`` the Jacobian is obtained by reverse mode and treated as a
    constant by projectors (no second-order terms in unrolled backward passes).
    """

    kind = "nonlinear"

    def __init__(self, residual_fn: Callable[[Tensor], Tensor], size: int, dim: int,
                 jacobian_fn: Callable[[Tensor], Tensor] | None = None, name: str = "nonlinear"):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.size = size
        self.dim = dim
        self.name = name

    def residual(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.ndim == 1:
            return dc.reshape(self.residual_fn(dc.reshape(x, (1, -1))), (-1,))
        return self.residual_fn(x)

    def jacobian(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.ndim == 1:
            return dc.reshape(self.jacobian(dc.reshape(x, (1, -1))), (self.size, self.dim))
        if self.jacobian_fn is not None:
            return self.jacobian_fn(x)
        return Tensor(ad_jacobian(self, x.value))

    def to_dict(self) -> dict:
        raise ConstraintError(f"{self.name}: generic nonlinear blocks are not serializable")


class QuadraticMass(NonlinearEquality):
    """``sum_i x_i^2 - c = 0``."""

    kind = "quadratic_mass"

    def __init__(self, c: float, dim: int, name: str = "quadratic_mass"):
        self.c = float(c)
        super().__init__(self._res, 1, dim, self._jac, name)

    def _res(self, x: Tensor) -> Tensor:
        return dc.sub(dc.sum(dc.square(x), axis=-1, keepdims=True), self.c)

    def _jac(self, x: Tensor) -> Tensor:
        return dc.reshape(dc.mul(x, 2.0), (x.shape[0], 1, x.shape[1]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "c": self.c, "dim": self.dim}


class BoxBounds:
    """``lower <= x <= upper`` written as ``g(x) = [x - upper, lower - x] <= 0``."""

    kind = "box"

    def __init__(self, lower, upper, dim: int, name: str = "box"):
        self.lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (dim,)).copy()
        if np.any(self.lower > self.upper):
            raise ConstraintError(f"{name}: lower bound exceeds upper bound")
        self.dim = dim
        self.name = name

    @property
    def size(self) -> int:
        return 2 * self.dim

    def residual(self, x) -> Tensor:
        return dc.concat([dc.sub(x, self.upper), dc.sub(self.lower, x)], axis=-1)

    def jacobian(self, x) -> Tensor:
        J = np.concatenate([np.eye(self.dim), -np.eye(self.dim)])
        return Tensor(J)

    def to_dict(self) -> dict:
        lo, hi = self.lower, self.upper
        lo = float(lo[0]) if np.all(lo == lo[0]) else lo.tolist()
        hi = float(hi[0]) if np.all(hi == hi[0]) else hi.tolist()
        return {"kind": self.kind, "name": self.name, "lower": lo, "upper": hi, "dim": self.dim}


class InequalityBlock:
    """Generic ``g(x) <= 0`` with tensor residual ``(B, d) -> (B, p)`` and Jacobian ``(B, p, d)``."""

    kind = "inequality"

    def __init__(self, residual_fn, size: int, dim: int, jacobian_fn, name: str = "inequality"):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.size = size
        self.dim = dim
        self.name = name

    def residual(self, x) -> Tensor:
        return self.residual_fn(dc.as_tensor(x))

    def jacobian(self, x) -> Tensor:
        return self.jacobian_fn(dc.as_tensor(x))

    def to_dict(self) -> dict:
        raise ConstraintError(f"{self.name}: generic inequality blocks are not serializable")


@dataclass(frozen=True)
class CountThreshold:
    """Exactly ``floor(k * n)`` reduced entries strictly below ``threshold``.

    Samples are laid out channel-last: ``x.reshape(n, C)`` with ``C = len(weights)``.
    """

    k: float
    dim: int
    threshold: float = 0.0
    weights: tuple[float, ...] = (1.0,)
    name: str = "count"
    kind = "count"

    def __post_init__(self):
        if not 0.0 < self.k < 1.0:
            raise ConstraintError(f"{self.name}: target fraction must lie in (0, 1)")
        if self.dim % len(self.weights):
            raise ConstraintError(f"{self.name}: dim {self.dim} not divisible by {len(self.weights)} channels")

    @property
    def n(self) -> int:
        return self.dim // len(self.weights)

    @property
    def target(self) -> int:
        return int(np.floor(self.k * self.n))

    def reduce(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        C = len(self.weights)
        return x.reshape(*x.shape[:-1], self.n, C) @ np.asarray(self.weights)

    def below(self, x: np.ndarray) -> np.ndarray:
        return np.sum(self.reduce(x) < self.threshold, axis=-1)

    def indicator(self, x: np.ndarray) -> np.ndarray:
        """1.0 where the sample misses the count target, else 0.0."""
        return (self.below(x) != self.target).astype(np.float64)

    def jacobian(self, x):
        raise ConstraintError(f"{self.name}: count constraints are not differentiable")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "k": self.k, "threshold": self.threshold,
                "weights": list(self.weights), "dim": self.dim}


EQUALITY_KINDS = (AffineEquality, NonlinearEquality)
INEQUALITY_KINDS = (BoxBounds, InequalityBlock)


class Residual(NamedTuple):
    h: np.ndarray
    g: np.ndarray
    count: np.ndarray


@dataclass(frozen=True)
class ConstraintSet:
    blocks: tuple = ()
    ambient_dim: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for b in self.blocks:
            if b.dim != self.ambient_dim:
                raise ConstraintError(f"block {b.name!r} has dim {b.dim}, set has {self.ambient_dim}")

    @property
    def equalities(self) -> list:
        return [b for b in self.blocks if isinstance(b, EQUALITY_KINDS)]

    @property
    def inequalities(self) -> list:
        return [b for b in self.blocks if isinstance(b, INEQUALITY_KINDS)]

    @property
    def counts(self) -> list[CountThreshold]:
        return [b for b in self.blocks if isinstance(b, CountThreshold)]

    @property
    def boxes(self) -> list[BoxBounds]:
        return [b for b in self.blocks if isinstance(b, BoxBounds)]

    @property
    def n_eq(self) -> int:
        return int(np.sum([b.size for b in self.equalities]))

    def is_empty(self) -> bool:
        return not self.blocks

    def all_affine(self) -> bool:
        return all(isinstance(b, AffineEquality) for b in self.equalities)

    # tensor-level access used by the projectors
    def eq_residual(self, x) -> Tensor:
        parts = [b.residual(x) for b in self.equalities]
        return parts[0] if len(parts) == 1 else dc.concat(parts, axis=-1)

    def eq_jacobian(self, x) -> Tensor:
        """``(m, d)`` when every block is affine (shared), otherwise ``(B, m, d)``."""
        x = dc.as_tensor(x)
        parts = [b.jacobian(x) for b in self.equalities]
        if self.all_affine() or x.ndim == 1:
            return parts[0] if len(parts) == 1 else dc.concat(parts, axis=-2)
        B = x.shape[0]
        parts = [p if p.ndim == 3 else dc.add(p, np.zeros((B,) + p.shape)) for p in parts]
        return parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)

    def ineq_residual(self, x) -> Tensor:
        parts = [b.residual(x) for b in self.inequalities]
        return parts[0] if len(parts) == 1 else dc.concat(parts, axis=-1)

    def with_blocks(self, blocks) -> "ConstraintSet":
        return ConstraintSet(tuple(blocks), self.ambient_dim, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "ambient_dim": self.ambient_dim,
                "blocks": [b.to_dict() for b in self.blocks]}

    def fingerprint(self) -> str:
        try:
            payload = json.dumps(self.to_dict(), sort_keys=True)
        except ConstraintError:
            payload = repr([(b.kind, b.name) for b in self.blocks]) + str(self.ambient_dim)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _check_dim(cset: ConstraintSet, x: np.ndarray) -> None:
    if x.shape[-1] != cset.ambient_dim:
        raise ConstraintError(f"sample has {x.shape[-1]} entries, constraint set expects {cset.ambient_dim}")


def residual(cset: ConstraintSet, x) -> Residual:
    """Equality residuals, inequality residuals and count-miss indicators, in declaration order."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(cset, x)
    lead = x.shape[:-1]
    with dc.no_grad():
        h = [b.residual(x).value for b in cset.equalities]
        g = [b.residual(x).value for b in cset.inequalities]
    c = [b.indicator(x)[..., None] for b in cset.counts]
    cat = lambda parts: np.concatenate(parts, axis=-1) if parts else np.zeros(lead + (0,))  # noqa: E731
    return Residual(cat(h), cat(g), cat(c))


def violation(cset: ConstraintSet, x):
    """Per-sample constraint violation (CV).

    Mean squared equality residual plus mean squared positive part of the
    inequality residuals plus one per missed count target.  Returns a float for a
    single sample and an array for a batch.
    """
    r = residual(cset, x)
    cv = np.zeros(r.h.shape[:-1])
    if r.h.shape[-1]:
        cv = cv + np.mean(r.h * r.h, axis=-1)
    if r.g.shape[-1]:
        gp = np.maximum(r.g, 0.0)
        cv = cv + np.mean(gp * gp, axis=-1)
    if r.count.shape[-1]:
        cv = cv + np.sum(r.count, axis=-1)
    return float(cv) if cv.ndim == 0 else cv


def violation_by_block(cset: ConstraintSet, x) -> dict[str, np.ndarray]:
    return {b.name: violation(cset.with_blocks([b]), x) for b in cset.blocks}


def subset(cset: ConstraintSet, idx) -> ConstraintSet:
    """Restrict per-sample affine right-hand sides (``b`` of shape ``(B, m)``) to rows ``idx``."""
    if not any(isinstance(b, AffineEquality) and b.b.ndim == 2 for b in cset.blocks):
        return cset
    blocks = [AffineEquality(b.A, b.b[idx], name=b.name)
              if isinstance(b, AffineEquality) and b.b.ndim == 2 else b for b in cset.blocks]
    return cset.with_blocks(blocks)


def jacobian(cset: ConstraintSet, x) -> np.ndarray:
    """Stacked equality Jacobian, ``(m, d)`` for one sample or ``(B, m, d)`` for a batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(cset, x)
    if not cset.equalities:
        raise ConstraintError("constraint set has no differentiable equality blocks")
    with dc.no_grad():
        J = cset.eq_jacobian(x).value
    if x.ndim == 2 and J.ndim == 2:
        J = np.broadcast_to(J, (x.shape[0],) + J.shape).copy()
    return J


def ad_jacobian(block, x: np.ndarray) -> np.ndarray:
    """Jacobian of a block's residual by reverse mode, one VJP per residual row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xt = Tensor(x, requires_grad=True)
    out = block.residual_fn(xt) if hasattr(block, "residual_fn") else block.residual(xt)
    rows = []
    for i in range(out.shape[-1]):
        seed = np.zeros(out.shape)
        seed[:, i] = 1.0
        rows.append(dc.grad(out, [xt], seed)[0])
    return np.stack(rows, axis=1)


def block_from_dict(spec: dict, dim: int, base_dir: Path | None = None):
    spec = dict(spec)
    kind = spec.pop("kind")

    def load(key):
        if key in spec:
            return np.asarray(spec[key], dtype=np.float64)
        path = Path(spec[f"{key}_path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return np.load(path)

    name = spec.get("name", kind)
    if kind == "affine":
        return AffineEquality(load("A"), load("b"), name=name)
    if kind == "quadratic_mass":
        return QuadraticMass(spec["c"], dim, name=name)
    if kind == "box":
        return BoxBounds(spec.get("lower", -1.0), spec.get("upper", 1.0), dim, name=name)
    if kind == "count":
        return CountThreshold(float(spec["k"]), dim, float(spec.get("threshold", 0.0)),
                              tuple(spec.get("weights", (1.0,))), name=name)
    raise ConstraintError(f"unknown constraint kind {kind!r}")


def set_from_dict(spec: dict, base_dir: Path | None = None) -> ConstraintSet:
    dim = int(spec["ambient_dim"])
    blocks = [block_from_dict(b, dim, base_dir) for b in spec.get("blocks", [])]
    return ConstraintSet(tuple(blocks), dim, spec.get("name", ""))


def affine_line(a: Sequence[float], c: float, name: str = "line") -> AffineEquality:
    return AffineEquality(np.asarray(a, dtype=np.float64)[None, :], [c], name=name)
