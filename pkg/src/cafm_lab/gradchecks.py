"""Finite-difference checks of the reverse-mode gradients used in training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .constraints import AffineEquality, ConstraintSet, QuadraticMass
from .diffcore import Tensor
from .flow import TrainConfig, VelocityField, loss_for, make_path_sample
from .projection import ProjectionConfig, project

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)


def flat_params(vf: VelocityField) -> tuple[np.ndarray, Callable[[Tensor], dict[str, Tensor]]]:
    """Concatenate a field's parameters; the returned function splits a flat tensor back."""
    names = sorted(vf.store.params)
    shapes = [vf.store.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([vf.store.params[n].ravel() for n in names])

    def split(theta: Tensor) -> dict[str, Tensor]:
        out, i = {}, 0
        for n, s, k in zip(names, shapes, sizes):
            out[n] = dc.reshape(theta[i:i + k], s)
            i += k
        return out

    return flat, split


def cafm_theta_check(seed: int = 0, dim: int = 4, width: int = 8, depth: int = 2, batch: int = 6,
                     loss_kind: str = "cafm_endpoint", fd_step: float = 1e-6) -> float:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2, dim))
    cset = ConstraintSet((AffineEquality(A, rng.standard_normal(2)),), dim)
    vf = VelocityField(dim, width, depth, n_freq=4, seed=seed)
    ps = make_path_sample(rng.standard_normal((batch, dim)), rng.standard_normal((batch, dim)), rng)
    cfg = TrainConfig(loss_kind=loss_kind, projection=ProjectionConfig(damping=1e-8))
    flat, split = flat_params(vf)
    return dc.grad_check(lambda th: loss_for(vf, ps, cset, cfg, split(th)), flat, fd_step)


def default_suite(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((5, 4))
    x4 = rng.standard_normal(4)
    B = rng.standard_normal((4, 4))
    r = rng.standard_normal(4)
    u = rng.standard_normal((3, 6))
    y = rng.standard_normal((3, 6))
    A = rng.standard_normal((2, 6))
    affine = ConstraintSet((AffineEquality(A, rng.standard_normal(2)),), 6)
    quad = ConstraintSet((QuadraticMass(4.0, 6),), 6)
    y_quad = 2.0 * y / np.linalg.norm(y, axis=1, keepdims=True) + 0.1 * rng.standard_normal((3, 6))

    def proj_fn(cset, cfg):
        return lambda yt: dc.sum(dc.mul(project(cset, yt, cfg)[0], u))

    def spd(xt):
        M = dc.add(dc.matmul(dc.reshape(xt, (4, 1)), dc.reshape(xt, (1, 4))), B @ B.T + np.eye(4))
        return dc.sum(dc.spd_solve(M, r))

    return [
        ("mlp_tanh", lambda: dc.grad_check(
            lambda xt: dc.sum(dc.square(dc.tanh(dc.matmul(W, dc.reshape(xt, (4, 1)))))), x4)),
        ("einsum_sin", lambda: dc.grad_check(
            lambda xt: dc.sum(dc.sin(dc.einsum("ij,j->i", W, xt))), x4)),
        ("spd_solve", lambda: dc.grad_check(spd, x4)),
        ("affine_projection", lambda: dc.grad_check(proj_fn(affine, ProjectionConfig()), y)),
        ("sqp_quadmass_unrolled", lambda: dc.grad_check(
            proj_fn(quad, ProjectionConfig(max_iter=3, feas_tol=0.0)), y_quad)),
        ("sqp_quadmass_implicit", lambda: dc.grad_check(
            proj_fn(quad, ProjectionConfig(max_iter=60, damping=1e-12, feas_tol=1e-13,
                                           backward_mode="implicit")), y_quad)),
        ("cafm_endpoint_theta", lambda: cafm_theta_check(seed)),
        ("cafm_velocity_theta", lambda: cafm_theta_check(seed, loss_kind="cafm_velocity")),
    ]


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    out = []
    for name, check in default_suite(seed):
        try:
            err = check()
        except Exception:  # a crash counts as a failed check
            err = float("inf")
        out.append(CheckResult(name, err, tol))
    return out
