"""Train, sample and evaluate one configuration; the unrolling and warm-start ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..constraints import subset
from ..flow import Checkpoint, TrainConfig, train
from ..sampling import SamplerConfig, sample
from .datasets import SyntheticDataset, generate_dataset
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)

FINAL_WINDOW = 3
CSV_FIELDS = ("dataset", "loss_kind", "sampler", "seed", "K", "mmse", "smse", "variance_mse", "mse",
              "nnmse", "cv", "fwd_ms", "bwd_ms", "total_ms")


@dataclass
class ExperimentConfig:
    """One table row.  ``seed`` drives training batches, network init and sampling noise."""

    dataset: str = "gauss2d"
    data_size: int = 512
    data_seed: int = 0
    holdout_size: int = 256
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_samples: int = 256
    seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    fingerprint: str
    dataset: str
    loss_kind: str
    sampler: str
    seed: int
    projection: dict
    K: int
    metrics: MetricsReport | None
    fwd_ms: float = 0.0
    bwd_ms: float = 0.0
    total_ms: float = 0.0
    artifacts: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> dict:
        m = self.metrics.to_dict() if self.metrics else {}
        row = {"dataset": self.dataset, "loss_kind": self.loss_kind, "sampler": self.sampler,
               "seed": self.seed, "K": self.K, "fwd_ms": self.fwd_ms, "bwd_ms": self.bwd_ms,
               "total_ms": self.total_ms}
        for k in ("mmse", "smse", "variance_mse", "mse", "nnmse", "cv"):
            row[k] = m.get(k, float("nan"))
        return row

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str))
        return path


def write_csv(records, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.csv_row())
    return path


def _dataset(cfg: ExperimentConfig, dataset: SyntheticDataset | None) -> SyntheticDataset:
    if dataset is not None:
        return dataset
    return generate_dataset(cfg.dataset, cfg.data_size, cfg.data_seed, cfg.holdout_size)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   dataset: SyntheticDataset | None = None) -> RunRecord:
    """Train (or load), sample against the holdout constraints, evaluate on the holdout split.

    When ``out_dir`` is given the record, checkpoint and samples are written there
    under the config fingerprint; a failed run still writes its record with
    ``status='failed'`` before the error propagates.
    """
    fp = cfg.fingerprint()
    tcfg = replace(cfg.train, seed=cfg.seed)
    rec = RunRecord(fp, cfg.dataset, tcfg.loss_kind, cfg.sampler.kind, cfg.seed,
                    cfg.sampler.projection.to_dict(), tcfg.projection.max_iter, None)
    out = Path(out_dir) / fp if out_dir is not None else None
    try:
        ds = _dataset(cfg, dataset)
        if cfg.checkpoint:
            vf = Checkpoint.load(cfg.checkpoint).to_field()
        else:
            res = train(tcfg, ds)
            vf = res.checkpoint.to_field()
            rec.fwd_ms, rec.bwd_ms, rec.total_ms = res.fwd_ms, res.bwd_ms, res.total_ms
            rec.extra["final_loss"] = float(np.mean(res.losses[-20:])) if res.losses else None
            if out is not None:
                rec.artifacts["checkpoint"] = str(res.checkpoint.save(out / "checkpoint.npz"))
        n = min(cfg.n_samples, ds.holdout.shape[0]) if _per_sample(ds) else cfg.n_samples
        ref = ds.holdout[:n] if _per_sample(ds) else ds.holdout
        cset = ds.holdout_constraint
        batch = sample(vf, cfg.sampler, _head(cset, n), n, seed=cfg.seed, dim=ds.dim)
        rec.metrics = evaluate(batch.z, ref, _head(cset, n), seed=cfg.seed)
        if out is not None:
            p, side = batch.save(out / "samples", {"fingerprint": fp})
            rec.artifacts.update(samples=str(p), sidecar=str(side))
    except Exception as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        if out is not None:
            rec.save(out / "record.json")
        raise
    if out is not None:
        rec.artifacts["record"] = str(rec.save(out / "record.json"))
    return rec


def _per_sample(ds: SyntheticDataset) -> bool:
    return any(getattr(b, "b", np.zeros(0)).ndim == 2 for b in ds.holdout_constraint.blocks)


def _head(cset, n):
    return subset(cset, slice(0, n))


def ablate_unroll(Ks, base: ExperimentConfig, inference_K: int = 1, seeds=(0,),
                  dataset: SyntheticDataset | None = None) -> list[RunRecord]:
    """One model per training-time unroll depth K, all sampled with the same ``inference_K`` projector."""
    Ks = list(Ks)
    if not Ks or Ks != sorted(Ks):
        raise ValueError("Ks must be nonempty and ascending")
    ds = _dataset(base, dataset)
    sampler = replace(base.sampler, projection=replace(base.sampler.projection, max_iter=inference_K))
    rows = []
    for K in Ks:
        tcfg = replace(base.train, projection=replace(base.train.projection, max_iter=K))
        for s in seeds:
            rows.append(run_experiment(replace(base, train=tcfg, sampler=sampler, seed=s), dataset=ds))
    return rows


@dataclass
class WarmstartRow:
    switch: int
    seed: int
    steps_to_threshold: int | None
    final_val: float
    curve: list


@dataclass
class WarmstartResult:
    rows: list[WarmstartRow]
    fm_step_ms: float
    cafm_step_ms: float

    @property
    def time_ratio(self) -> float:
        return self.cafm_step_ms / self.fm_step_ms

    def median_steps(self) -> dict[int, float]:
        out = {}
        for sw in sorted({r.switch for r in self.rows}):
            vals = [np.inf if r.steps_to_threshold is None else r.steps_to_threshold
                    for r in self.rows if r.switch == sw]
            out[sw] = float(np.median(vals))
        return out

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "fm_step_ms": self.fm_step_ms,
                "cafm_step_ms": self.cafm_step_ms, "time_ratio": self.time_ratio,
                "median_steps": {str(k): v for k, v in self.median_steps().items()}}


def _steps_to(curve, threshold: float) -> int | None:
    for step, val in curve:
        if val <= threshold:
            return step
    return None


def ablate_warmstart(switch_points, base: ExperimentConfig, fm_steps: int, cafm_steps: int,
                     seeds=(0,), dataset: SyntheticDataset | None = None) -> WarmstartResult:
    """CAFM fine-tuning from FM checkpoints taken at each switch point.

    The threshold is the cold start's (switch 0) final validation loss, averaged
    over its last few evaluations and taken per seed; each row reports the first
    validation step at or below it.
    """
    switch_points = sorted(int(s) for s in switch_points)
    if any(s < 0 or s > fm_steps for s in switch_points):
        raise ValueError("switch points must lie within the FM step budget")
    ds = _dataset(base, dataset)
    val_every = base.train.val_every or max(cafm_steps // 20, 1)
    cafm_cfg = replace(base.train, steps=cafm_steps, val_every=val_every)
    if cafm_cfg.loss_kind == "fm":
        cafm_cfg = replace(cafm_cfg, loss_kind="cafm_endpoint")
    rows: list[WarmstartRow] = []
    fm_ms, cafm_ms = [], []
    for s in seeds:
        runs = {}
        for sw in ([0] if 0 not in switch_points else []) + switch_points:
            field_ = None
            if sw > 0:
                fm = train(replace(base.train, loss_kind="fm", steps=sw, seed=s, val_every=0), ds)
                fm_ms.append(fm.total_ms)
                field_ = fm.checkpoint.to_field(with_moments=False)
            t0 = time.perf_counter()
            res = train(replace(cafm_cfg, seed=s), ds, field_=field_)
            log.info("switch %d seed %d: %.1fs", sw, s, time.perf_counter() - t0)
            cafm_ms.append(res.total_ms)
            runs[sw] = res
        threshold = float(np.mean([v for _, v in runs[0].val_losses[-FINAL_WINDOW:]]))
        for sw in switch_points:
            curve = runs[sw].val_losses
            rows.append(WarmstartRow(sw, s, _steps_to(curve, threshold), curve[-1][1], curve))
    if not fm_ms:
        fm = train(replace(base.train, loss_kind="fm", steps=max(cafm_steps // 4, 1), seed=seeds[0]), ds)
        fm_ms.append(fm.total_ms)
    return WarmstartResult(rows, float(np.median(fm_ms)), float(np.median(cafm_ms)))
