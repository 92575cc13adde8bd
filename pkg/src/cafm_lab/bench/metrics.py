"""Distribution-level error metrics and constraint violation for generated batches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..constraints import ConstraintSet, violation, violation_by_block

NN_CHUNK = 256


@dataclass
class MetricsReport:
    mmse: float
    smse: float
    variance_mse: float
    mse: float
    nnmse: float
    cv: float
    cv_blocks: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    seed: int | None = None
    std_convention: str = "population"

    def to_dict(self) -> dict:
        return asdict(self)


def nearest_neighbor_mse(gen: np.ndarray, ref: np.ndarray) -> float:
    """Mean over ``gen`` of the smallest per-coordinate mean squared distance to ``ref``."""
    best = []
    for i in range(0, gen.shape[0], NN_CHUNK):
        g = gen[i:i + NN_CHUNK]
        d2 = np.mean((g[:, None, :] - ref[None, :, :]) ** 2, axis=-1)
        best.append(d2.min(axis=1))
    return float(np.mean(np.concatenate(best)))


def evaluate(gen, ref, cset: ConstraintSet | None = None, seed: int | None = None) -> MetricsReport:
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if gen.ndim != 2 or ref.ndim != 2 or gen.shape[1] != ref.shape[1]:
        raise ValueError(f"batch shapes differ or are not 2-D: {gen.shape} vs {ref.shape}")
    if gen.shape[0] == 0 or ref.shape[0] == 0:
        raise ValueError("batches must be nonempty")
    mu_g, mu_r = gen.mean(axis=0), ref.mean(axis=0)
    var_g, var_r = gen.var(axis=0), ref.var(axis=0)
    blocks: dict[str, float] = {}
    cv = 0.0
    if cset is not None and not cset.is_empty():
        blocks = {k: float(np.mean(v)) for k, v in violation_by_block(cset, gen).items()}
        cv = float(np.mean(violation(cset, gen)))
    return MetricsReport(
        mmse=float(np.mean((mu_g - mu_r) ** 2)),
        smse=float(np.mean((np.sqrt(var_g) - np.sqrt(var_r)) ** 2)),
        variance_mse=float(np.mean((var_g - var_r) ** 2)),
        mse=float(np.mean((gen - mu_r) ** 2)),
        nnmse=nearest_neighbor_mse(gen, ref),
        cv=cv, cv_blocks=blocks, n_samples=gen.shape[0], seed=seed,
    )
