"""Small synthetic datasets, each paired with the constraint family it exercises."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..constraints import (AffineEquality, BoxBounds, ConstraintSet, CountThreshold, QuadraticMass,
                           affine_line, set_from_dict, subset, violation)
from ..projection import count_project

DATASETS = ("gauss2d", "heat1d", "quadmass", "micromini")

HEAT_NX = 32
HEAT_LEVELS = 16
HEAT_ALPHA = 0.1
QUAD_DIM = 16
QUAD_MASS = 4.0
MICRO_SIDE = 16
MICRO_POROSITY = 0.6251


@dataclass
class SyntheticDataset:
    name: str
    samples: np.ndarray
    constraint: ConstraintSet
    holdout: np.ndarray
    holdout_constraint: ConstraintSet
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def constraint_for(self, idx) -> ConstraintSet:
        return subset(self.constraint, idx)

    def feasibility(self) -> tuple[float, float]:
        """Worst training and holdout violation."""
        return (float(np.max(violation(self.constraint, self.samples))),
                float(np.max(violation(self.holdout_constraint, self.holdout))))

    def save(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "samples.npy", self.samples)
        np.save(out / "holdout.npy", self.holdout)
        (out / "constraint.json").write_text(json.dumps(self.constraint.to_dict()))
        (out / "holdout_constraint.json").write_text(json.dumps(self.holdout_constraint.to_dict()))
        (out / "meta.json").write_text(json.dumps({"name": self.name, **self.meta}, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticDataset":
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        name = meta.pop("name")
        return cls(name, np.load(path / "samples.npy"),
                   set_from_dict(json.loads((path / "constraint.json").read_text())),
                   np.load(path / "holdout.npy"),
                   set_from_dict(json.loads((path / "holdout_constraint.json").read_text())), meta)


def _gauss2d(rng: np.random.Generator, n: int) -> np.ndarray:
    means = np.array([[-1.0, 2.0], [2.0, -1.0]])
    comp = rng.integers(0, 2, size=n)
    y = means[comp] + 0.35 * rng.standard_normal((n, 2))
    a = np.array([1.0, 1.0])
    return y - np.outer(y @ a - 1.0, a) / 2.0


def heat_rollout(u0: np.ndarray, levels: int = HEAT_LEVELS, alpha: float = HEAT_ALPHA) -> np.ndarray:
    """Explicit periodic finite differences; returns ``(B, levels * nx)`` with level 0 the IC."""
    u = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    out = [u]
    for _ in range(levels - 1):
        u = u + alpha * (np.roll(u, 1, axis=1) - 2.0 * u + np.roll(u, -1, axis=1))
        out.append(u)
    return np.concatenate(out, axis=1)


def heat_constraint_matrix(nx: int = HEAT_NX, levels: int = HEAT_LEVELS) -> np.ndarray:
    """IC pin rows, then one mass row per later level (level 0's mass follows from the pins)."""
    A = np.zeros((nx + levels - 1, nx * levels))
    A[:nx, :nx] = np.eye(nx)
    for lev in range(1, levels):
        A[nx + lev - 1, lev * nx:(lev + 1) * nx] = 1.0
    return A


def heat_rhs(u0: np.ndarray, levels: int = HEAT_LEVELS) -> np.ndarray:
    u0 = np.atleast_2d(u0)
    mass = u0.sum(axis=1, keepdims=True)
    return np.concatenate([u0, np.repeat(mass, levels - 1, axis=1)], axis=1)


def _heat_ics(rng: np.random.Generator, n: int, nx: int = HEAT_NX) -> np.ndarray:
    x = np.arange(nx) / nx
    k = np.arange(1, 4)
    a = rng.standard_normal((n, 3)) / k
    b = rng.standard_normal((n, 3)) / k
    c = 0.5 * rng.standard_normal((n, 1))
    phase = 2.0 * np.pi * np.outer(k, x)
    return c + a @ np.cos(phase) + b @ np.sin(phase)


def _ic_hash(u0: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(u0).tobytes()).hexdigest()


def _quadmass(rng: np.random.Generator, n: int) -> np.ndarray:
    mu = 1.5 * np.sin(np.linspace(0.0, 2.0 * np.pi, QUAD_DIM, endpoint=False)) + 0.5
    y = mu + 0.4 * rng.standard_normal((n, QUAD_DIM))
    return np.sqrt(QUAD_MASS) * y / np.linalg.norm(y, axis=1, keepdims=True)


def _micromini(rng: np.random.Generator, n: int, ct: CountThreshold, box: BoxBounds) -> np.ndarray:
    noise = rng.standard_normal((n, MICRO_SIDE, MICRO_SIDE))
    f = gaussian_filter(noise, sigma=(0, 2.0, 2.0), mode="wrap")
    f = f / np.max(np.abs(f), axis=(1, 2), keepdims=True)
    x = f.reshape(n, -1)
    return count_project(ct, x, hard=True, bounds=box).x_proj


def generate_dataset(name: str, size: int, seed: int = 0, holdout_size: int = 256) -> SyntheticDataset:
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if size < 2 or holdout_size < 2:
        raise ValueError("size and holdout_size must be >= 2")
    train_rng = np.random.default_rng([seed, 0])
    hold_rng = np.random.default_rng([seed, 1])
    meta = {"size": size, "holdout_size": holdout_size, "seed": seed}
    if name == "gauss2d":
        cset = ConstraintSet((affine_line([1.0, 1.0], 1.0),), 2, "gauss2d")
        return SyntheticDataset(name, _gauss2d(train_rng, size), cset, _gauss2d(hold_rng, holdout_size), cset, meta)
    if name == "quadmass":
        cset = ConstraintSet((QuadraticMass(QUAD_MASS, QUAD_DIM),), QUAD_DIM, "quadmass")
        return SyntheticDataset(name, _quadmass(train_rng, size), cset, _quadmass(hold_rng, holdout_size),
                                cset, meta)
    if name == "micromini":
        d = MICRO_SIDE * MICRO_SIDE
        ct = CountThreshold(MICRO_POROSITY, d, name="porosity")
        box = BoxBounds(-1.0, 1.0, d)
        cset = ConstraintSet((ct, box), d, "micromini")
        return SyntheticDataset(name, _micromini(train_rng, size, ct, box), cset,
                                _micromini(hold_rng, holdout_size, ct, box), cset, meta)
    # heat1d: holdout ICs are redrawn until none collides with a training IC
    A = heat_constraint_matrix()
    u_train = _heat_ics(train_rng, size)
    seen = {_ic_hash(u) for u in u_train}
    u_hold = _heat_ics(hold_rng, holdout_size)
    for i, u in enumerate(u_hold):
        while _ic_hash(u) in seen:
            u = _heat_ics(hold_rng, 1)[0]
        u_hold[i] = u
    d = A.shape[1]
    mk = lambda u: ConstraintSet((AffineEquality(A, heat_rhs(u), name="ic_mass"),), d, "heat1d")  # noqa: E731
    meta.update(nx=HEAT_NX, levels=HEAT_LEVELS, alpha=HEAT_ALPHA)
    return SyntheticDataset(name, heat_rollout(u_train), mk(u_train), heat_rollout(u_hold), mk(u_hold), meta)
