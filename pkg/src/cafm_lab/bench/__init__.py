"""Synthetic datasets, metrics, experiment orchestration and ablations."""

from .datasets import DATASETS, SyntheticDataset, generate_dataset, heat_constraint_matrix, heat_rollout
from .experiments import (CSV_FIELDS, ExperimentConfig, RunRecord, WarmstartResult, ablate_unroll,
                          ablate_warmstart, run_experiment, write_csv)
from .metrics import MetricsReport, evaluate, nearest_neighbor_mse

__all__ = [
    "CSV_FIELDS", "DATASETS", "ExperimentConfig", "MetricsReport", "RunRecord", "SyntheticDataset",
    "WarmstartResult", "ablate_unroll", "ablate_warmstart", "evaluate", "generate_dataset",
    "heat_constraint_matrix", "heat_rollout", "nearest_neighbor_mse", "run_experiment", "write_csv",
]
