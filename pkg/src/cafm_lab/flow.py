"""Velocity network, reference paths, flow-matching losses and the trainer."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .constraints import ConstraintSet
from .diffcore import ParamStore, Tensor
from .projection import ProjectionConfig, project

log = logging.getLogger(__name__)

LOSS_KINDS = ("fm", "cafm_endpoint", "cafm_velocity")
MIN_REMAINING_TIME = 1e-3
CLAMP_CORRECTION = 1e-3
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, msg: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class VelocityField:
    """Tanh MLP ``v(z, t)`` on ``[z, sin(f t), cos(f t)]`` with 16 time frequencies."""

    def __init__(self, dim: int, width: int = 64, depth: int = 3, n_freq: int = 16, seed: int = 0):
        self.dim, self.width, self.depth, self.n_freq = dim, width, depth, n_freq
        self.freqs = np.pi * 2.0 ** np.linspace(-2.0, 2.0, n_freq)
        self.store = ParamStore(seed=seed)
        rng = np.random.default_rng(seed)
        sizes = [dim + 2 * n_freq] + [width] * depth + [dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.store.add(f"W{i}", rng.standard_normal((a, b)) / np.sqrt(a))
            self.store.add(f"b{i}", np.zeros(b))

    @property
    def n_layers(self) -> int:
        return self.depth + 1

    def arch(self) -> dict:
        return {"dim": self.dim, "width": self.width, "depth": self.depth, "n_freq": self.n_freq}

    def embed(self, t, batch: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        ft = t[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ft), np.cos(ft)], axis=1)

    def __call__(self, z, t, params: dict[str, Tensor] | None = None) -> Tensor:
        z = dc.as_tensor(z)
        single = z.ndim == 1
        if single:
            z = dc.reshape(z, (1, -1))
        p = params if params is not None else {k: Tensor(v) for k, v in self.store.params.items()}
        h = dc.concat([z, self.embed(t, z.shape[0])], axis=1)
        for i in range(self.n_layers):
            h = dc.add(dc.matmul(h, p[f"W{i}"]), p[f"b{i}"])
            if i < self.depth:
                h = dc.tanh(h)
        return dc.reshape(h, (-1,)) if single else h

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        with dc.no_grad():
            return self(z, t).value


@dataclass
class PathSample:
    """Points on the straight path ``z_t = (1 - t) z0 + t z1``; arrays may be batched."""

    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    zt: np.ndarray
    target_velocity: np.ndarray

    def __len__(self) -> int:
        return self.z0.shape[0] if self.z0.ndim > 1 else 1


def make_path_sample(z0, z1, rng: np.random.Generator | None = None, t_max: float = 0.95,
                     t=None) -> PathSample:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"z0 shape {z0.shape} does not match z1 shape {z1.shape}")
    lead = z0.shape[:-1] if z0.ndim > 1 else ()
    if t is None:
        t = rng.uniform(0.0, t_max, size=lead)
    t = np.asarray(t, dtype=np.float64)
    tb = t[..., None] if z0.ndim > 1 else t
    return PathSample(z0, z1, t, (1.0 - tb) * z0 + tb * z1, z1 - z0)


def _as_batch(ps: PathSample) -> PathSample:
    if ps.z0.ndim > 1:
        return ps
    return PathSample(ps.z0[None], ps.z1[None], np.atleast_1d(ps.t), ps.zt[None], ps.target_velocity[None])


def _sqnorm_mean(x: Tensor) -> Tensor:
    return dc.mean(dc.sum(dc.square(x), axis=1))


def fm_loss(v: VelocityField, batch: PathSample, params=None) -> Tensor:
    """Mean over the batch of ``|v(z_t, t) - (z1 - z0)|^2``."""
    b = _as_batch(batch)
    return _sqnorm_mean(dc.sub(v(b.zt, b.t, params), b.target_velocity))


def predict_endpoint(v: VelocityField, batch: PathSample | np.ndarray, mode: str = "train", t=None,
                     params=None) -> Tensor:
    """``z0 + v`` in train mode, ``z_t + (1 - t) v`` in sample mode.

    In sample mode ``batch`` may be a raw state array with ``t`` given separately.
    """
    if mode == "train":
        b = _as_batch(batch)
        return dc.add(b.z0, v(b.zt, b.t, params))
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(batch, PathSample):
        b = _as_batch(batch)
        z, t = b.zt, b.t
    else:
        z = np.atleast_2d(batch)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
    if np.any(t > 1.0):
        raise ValueError("sample-mode endpoint prediction needs t <= 1")
    out = dc.add(z, dc.mul(v(z, t, params), (1.0 - t)[:, None]))
    return out if isinstance(batch, PathSample) or np.ndim(batch) > 1 else dc.reshape(out, (-1,))


@dataclass
class TrainConfig:
    loss_kind: str = "fm"
    steps: int = 1000
    batch: int = 64
    lr: float = 1e-3
    t_max: float = 0.95
    residual_reg_weight: float = 1e-3
    clamp_correction: bool = False
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    seed: int = 0
    warm_start_checkpoint: str | None = None
    width: int = 64
    depth: int = 3
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    log_every: int = 50
    val_every: int = 0
    val_batch: int = 256

    def __post_init__(self):
        if isinstance(self.projection, dict):
            self.projection = ProjectionConfig(**self.projection)
        self.betas = tuple(self.betas)
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if not 0.0 < self.t_max < 1.0:
            raise ValueError("t_max must lie in (0, 1)")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def projection_for_training(self) -> ProjectionConfig:
        if not self.clamp_correction:
            return self.projection
        return ProjectionConfig(**{**asdict(self.projection), "correction_clamp": CLAMP_CORRECTION})


def residual_penalty(cset: ConstraintSet, x: Tensor) -> Tensor:
    if not cset.equalities:
        return Tensor(0.0)
    return _sqnorm_mean(cset.eq_residual(x))


def cafm_loss(v: VelocityField, batch: PathSample, cset: ConstraintSet, cfg: TrainConfig,
              params=None) -> Tensor:
    """Constraint-aware loss: the projected endpoint is regressed onto the data endpoint.

    ``cafm_endpoint``: ``|P(z0 + v) - z1|^2 + w |h(z0 + v)|^2``.
    ``cafm_velocity``: ``|(P(z_hat) - z_t) / max(1 - t, 1e-3) - (z1 - z0)|^2 + w |h(z_hat)|^2``
    with ``z_hat = z_t + (1 - t) v``; both differentiate through the projector.
    """
    b = _as_batch(batch)
    pcfg = cfg.projection_for_training()
    if cfg.loss_kind == "cafm_velocity":
        zhat = predict_endpoint(v, b, "sample", params=params)
    else:
        zhat = predict_endpoint(v, b, "train", params=params)
    try:
        zp, _ = project(cset, zhat, pcfg)
    except Exception as exc:
        raise TrainingError(f"projection failed on batch of {len(b)}: {exc}") from exc
    if cfg.loss_kind == "cafm_velocity":
        denom = np.maximum(1.0 - b.t, MIN_REMAINING_TIME)[:, None]
        err = dc.sub(dc.div(dc.sub(zp, b.zt), denom), b.target_velocity)
    else:
        err = dc.sub(zp, b.z1)
    loss = _sqnorm_mean(err)
    if cfg.residual_reg_weight and cset.equalities:
        loss = dc.add(loss, dc.mul(residual_penalty(cset, zhat), cfg.residual_reg_weight))
    return loss


def loss_for(v: VelocityField, batch: PathSample, cset: ConstraintSet, cfg: TrainConfig, params=None) -> Tensor:
    if cfg.loss_kind == "fm":
        return fm_loss(v, batch, params)
    return cafm_loss(v, batch, cset, cfg, params)


@dataclass
class Checkpoint:
    """Parameters, Adam moments and bookkeeping; saved as ``.npz``.

    Layout: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` float64 arrays
    and ``meta``, a JSON string with ``version``, ``arch``, ``step``, ``seed``,
    ``config_fingerprint`` and ``config``.
    """

    arch: dict
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    seed: int
    config_fingerprint: str
    config: dict = field(default_factory=dict)

    @classmethod
    def from_field(cls, vf: VelocityField, cfg: TrainConfig | None = None) -> "Checkpoint":
        s = vf.store.copy()
        return cls(vf.arch(), s.params, s.m, s.v, s.step, s.seed,
                   cfg.fingerprint() if cfg else "", cfg.to_dict() if cfg else {})

    def to_field(self, with_moments: bool = True) -> VelocityField:
        vf = VelocityField(**self.arch, seed=self.seed)
        load_params(vf, self.params)
        if with_moments:
            vf.store.m = {k: a.copy() for k, a in self.m.items()}
            vf.store.v = {k: a.copy() for k, a in self.v.items()}
            vf.store.step = self.step
        return vf

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"version": CHECKPOINT_VERSION, "arch": self.arch, "step": self.step, "seed": self.seed,
                "config_fingerprint": self.config_fingerprint, "config": self.config}
        arrays = {f"param/{k}": a for k, a in self.params.items()}
        arrays.update({f"adam_m/{k}": a for k, a in self.m.items()})
        arrays.update({f"adam_v/{k}": a for k, a in self.v.items()})
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            pick = lambda pre: {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith(pre)}  # noqa: E731
            return cls(meta["arch"], pick("param/"), pick("adam_m/"), pick("adam_v/"), meta["step"],
                       meta["seed"], meta["config_fingerprint"], meta.get("config", {}))


def load_params(vf: VelocityField, params: dict[str, np.ndarray]) -> None:
    for k, p in vf.store.params.items():
        if k not in params or params[k].shape != p.shape:
            raise ValueError(f"checkpoint parameter {k!r} missing or shape-incompatible")
        vf.store.params[k] = params[k].copy()


def gaussian_base(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    val_losses: list[tuple[int, float]]
    fwd_ms: float
    bwd_ms: float

    @property
    def total_ms(self) -> float:
        return self.fwd_ms + self.bwd_ms


def _dataset_parts(dataset) -> tuple[np.ndarray, Callable[[np.ndarray], ConstraintSet]]:
    if isinstance(dataset, np.ndarray):
        empty = ConstraintSet((), dataset.shape[1])
        return dataset, lambda idx: empty
    if hasattr(dataset, "constraint_for"):
        return dataset.samples, dataset.constraint_for
    samples, cset = dataset
    return samples, lambda idx: cset


def _draw_batch(data: np.ndarray, cfg: TrainConfig, rng: np.random.Generator, base, n: int):
    idx = rng.integers(0, data.shape[0], size=n)
    z1 = data[idx]
    z0 = base(rng, z1.shape)
    return idx, make_path_sample(z0, z1, rng, cfg.t_max)


def train(config: TrainConfig, dataset, base_sampler: Callable | None = None,
          field_: VelocityField | None = None) -> TrainResult:
    """Run ``config.steps`` Adam steps on the configured loss.

    ``dataset`` is a sample array (unconstrained), a ``(samples, ConstraintSet)``
    pair, or an object with ``samples`` and ``constraint_for(indices)``.  Batches
    at step ``k`` come from ``default_rng([seed, k])`` so a resumed run replays the
    same data as an uninterrupted one.
    """
    base = base_sampler or gaussian_base
    data, cset_for = _dataset_parts(dataset)
    if data.shape[0] < 1:
        raise ValueError("dataset is empty")
    if field_ is not None:
        vf = field_
    elif config.warm_start_checkpoint:
        ck = Checkpoint.load(config.warm_start_checkpoint)
        vf = VelocityField(data.shape[1], config.width, config.depth, seed=config.seed)
        load_params(vf, ck.params)
    else:
        vf = VelocityField(data.shape[1], config.width, config.depth, seed=config.seed)
    store = vf.store

    val = None
    if config.val_every:
        vidx, vbatch = _draw_batch(data, config, np.random.default_rng([config.seed, 2**31 - 1]), base,
                                   config.val_batch)
        val = (vbatch, cset_for(vidx))

    def val_loss() -> float:
        with dc.no_grad():
            return loss_for(vf, val[0], val[1], config).item()

    losses: list[float] = []
    vals: list[tuple[int, float]] = []
    fwd = bwd = 0.0
    start = store.step
    prev = store.copy()
    if val is not None and start == 0:
        vals.append((0, val_loss()))
    for k in range(start, start + config.steps):
        rng = np.random.default_rng([config.seed, k])
        idx, batch = _draw_batch(data, config, rng, base, config.batch)
        try:
            t0 = time.perf_counter()
            leaves = store.leaves()
            loss = loss_for(vf, batch, cset_for(idx), config, leaves)
            t1 = time.perf_counter()
            names = list(leaves)
            grads = dc.grad(loss, [leaves[n] for n in names])
            snapshot = store.copy()
            store.zero_grad()
            store.accumulate(dict(zip(names, grads)))
            dc.adam_step(store, config.lr, config.betas, config.clip_norm)
            t2 = time.perf_counter()
        except dc.NonFiniteError as exc:
            vf.store = prev
            raise TrainingError(f"non-finite loss or gradient at step {k}: {exc}",
                                Checkpoint.from_field(vf, config)) from exc
        prev = snapshot
        fwd += t1 - t0
        bwd += t2 - t1
        losses.append(loss.item())
        if config.log_every and (k + 1) % config.log_every == 0:
            log.info("step %d loss %.6e", k + 1, losses[-1])
        if val is not None and (k + 1) % config.val_every == 0:
            vals.append((k + 1, val_loss()))
    n = max(config.steps, 1)
    return TrainResult(Checkpoint.from_field(vf, config), losses, vals, 1e3 * fwd / n, 1e3 * bwd / n)
