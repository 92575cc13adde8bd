"""Euler integration and the unconstrained / terminal-projection / intermediate-projection samplers."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .constraints import ConstraintSet, subset, violation
from .projection import ProjectionConfig, hard_project, project_values

SAMPLER_KINDS = ("ffm", "pcfm", "pdm")
ANCHORS = ("origin", "current")
CHUNK = 64
THREADS_ENV = "CAFM_LAB_THREADS"


class SamplingError(RuntimeError):
    pass


def _velocity_fn(v) -> Callable[[np.ndarray, float], np.ndarray]:
    return v.velocity if hasattr(v, "velocity") else v


def euler_integrate(v, z0, t_from: float, t_to: float, steps: int) -> np.ndarray:
    """Fixed-step explicit Euler from ``t_from`` to ``t_to`` (either direction)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = _velocity_fn(v)
    z = np.array(z0, dtype=np.float64)
    h = (t_to - t_from) / steps
    for k in range(steps):
        z = z + h * np.asarray(f(z, t_from + k * h))
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite state after Euler step {k}")
    return z


@dataclass
class TrajectoryState:
    z: np.ndarray
    t: float
    z0_origin: np.ndarray


@dataclass
class SamplerConfig:
    kind: str = "pcfm"
    steps: int = 12
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    project_every: int = 1
    save_time_project: bool = False
    inner_steps: int = 1
    reverse_anchor: str = "origin"

    def __post_init__(self):
        if isinstance(self.projection, dict):
            self.projection = ProjectionConfig(**self.projection)
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"kind must be one of {SAMPLER_KINDS}")
        if self.steps < 1 or self.project_every < 1 or self.inner_steps < 1:
            raise ValueError("steps, project_every and inner_steps must be >= 1")
        if self.steps % self.project_every:
            raise ValueError("project_every must divide steps")
        if self.reverse_anchor not in ANCHORS:
            raise ValueError(f"reverse_anchor must be one of {ANCHORS}")

    def to_dict(self) -> dict:
        return asdict(self)


def pcfm_step(v, state: TrajectoryState, delta: float, cset: ConstraintSet,
              cfg: ProjectionConfig | None = None, inner_steps: int = 1,
              anchor: str = "origin") -> TrajectoryState:
    """Forward solve to t=1, project the endpoint, then move back along the straight path to s.

    With ``anchor='origin'`` the path runs from the trajectory's initial noise draw to
    the projected endpoint.  ``anchor='current'`` uses the noise point on the line
    through the current state instead, which reduces to an Euler step when nothing
    is projected.
    """
    s = state.t + delta
    if s > 1.0 + 1e-12:
        raise ValueError(f"step overshoots t=1 (t={state.t}, delta={delta})")
    s = min(s, 1.0)
    zhat = euler_integrate(v, state.z, state.t, 1.0, inner_steps)
    z1 = project_values(cset, zhat, cfg, hard=True)
    if anchor == "origin":
        z0 = state.z0_origin
    else:
        z0 = (state.z - state.t * zhat) / (1.0 - state.t)
    zs = z1 - (1.0 - s) * (z1 - z0)
    return TrajectoryState(zs, s, state.z0_origin)


def base_noise(seed: int, n: int, dim: int) -> np.ndarray:
    """One independent stream per sample index, so batching never changes a draw."""
    return np.stack([np.random.default_rng([seed, i]).standard_normal(dim) for i in range(n)])


def _rollout(v, z0: np.ndarray, sampler: SamplerConfig, cset: ConstraintSet) -> np.ndarray:
    N = sampler.steps
    f = _velocity_fn(v)
    cfg = sampler.projection
    z = z0.copy()
    for k in range(N):
        t = k / N
        last = k == N - 1
        project_now = (k % sampler.project_every == 0) or last
        if sampler.kind == "pcfm" and project_now:
            z = pcfm_step(v, TrajectoryState(z, t, z0), 1.0 / N, cset, cfg,
                          sampler.inner_steps, sampler.reverse_anchor).z
            continue
        z = z + (1.0 / N) * f(z, t)
        if sampler.kind == "pdm" and project_now:
            z = project_values(cset, z, cfg, hard=True)
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite state at step {k}")
    return z


@dataclass
class SampleBatch:
    z: np.ndarray
    cv_before: np.ndarray
    cv_after: np.ndarray
    seed: int
    kind: str
    constraint_fingerprint: str

    def save(self, path: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
        path = Path(path).with_suffix(".npy")
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, self.z)
        side = path.with_suffix(".json")
        meta = {"shape": list(self.z.shape), "seed": self.seed, "sampler_kind": self.kind,
                "constraint_fingerprint": self.constraint_fingerprint,
                "cv_before": self.cv_before.tolist(), "cv_after": self.cv_after.tolist(),
                **(extra or {})}
        side.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path, side


def load_samples(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path).with_suffix(".npy")
    meta = json.loads(path.with_suffix(".json").read_text()) if path.with_suffix(".json").exists() else {}
    return np.load(path), meta


def sample(v, sampler: SamplerConfig, cset: ConstraintSet, n_samples: int, seed: int = 0,
           dim: int | None = None, threads: int | None = None) -> SampleBatch:
    """Generate ``n_samples`` endpoints with the configured sampler.

    Samples are processed in fixed chunks of 64, so the output does not depend on
    the number of worker threads (``CAFM_LAB_THREADS``, default 1).
    """
    dim = dim or cset.ambient_dim or v.dim
    z0 = base_noise(seed, n_samples, dim)
    kind_set = cset if sampler.kind != "ffm" else ConstraintSet((), dim)
    starts = range(0, n_samples, CHUNK)
    threads = threads or int(os.environ.get(THREADS_ENV, "1"))

    def run(i: int) -> np.ndarray:
        sl = slice(i, min(i + CHUNK, n_samples))
        return _rollout(v, z0[sl], sampler, subset(kind_set, sl))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, starts))
    else:
        outs = [run(i) for i in starts]
    z = np.concatenate(outs) if outs else np.zeros((0, dim))
    cv_before = _cv(cset, z)
    if sampler.save_time_project:
        z = hard_project(cset, z, sampler.projection)
    return SampleBatch(z, cv_before, _cv(cset, z), seed, sampler.kind, cset.fingerprint())


def _cv(cset: ConstraintSet, z: np.ndarray) -> np.ndarray:
    if cset.is_empty():
        return np.zeros(z.shape[0])
    return np.atleast_1d(violation(cset, z))


def sampler_fingerprint(sampler: SamplerConfig) -> str:
    return hashlib.sha256(json.dumps(sampler.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
