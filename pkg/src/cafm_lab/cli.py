"""Command-line entry point: ``cafm-lab <command> --config run.json``.

Every command reads one flat JSON file.  Unknown keys are rejected, the fully
resolved config is written next to the outputs, and outputs land in
``<out>/<command>-<fingerprint>/`` so a rerun never touches earlier artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .bench.datasets import SyntheticDataset
from .constraints import subset
from .flow import Checkpoint, TrainConfig, train
from .gradchecks import DEFAULT_TOL, run_suite
from .sampling import SamplerConfig, load_samples, sample

log = logging.getLogger("cafm_lab")


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    dataset: str = "gauss2d"
    size: int = 512
    holdout_size: int = 256
    seed: int = 0
    out: str = "runs"


@dataclass
class TrainCmdConfig:
    dataset_dir: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: str = "runs"


@dataclass
class SampleCmdConfig:
    checkpoint: str = ""
    dataset_dir: str = ""
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_samples: int = 256
    seed: int = 0
    out: str = "runs"


@dataclass
class EvalCmdConfig:
    samples: str = ""
    dataset_dir: str = ""
    seed: int = 0
    out: str = "runs"


@dataclass
class GradcheckCmdConfig:
    tolerance: float = DEFAULT_TOL
    seed: int = 0
    out: str = "runs"


@dataclass
class AblateUnrollCmdConfig:
    experiment: bench.ExperimentConfig = field(default_factory=bench.ExperimentConfig)
    Ks: list = field(default_factory=lambda: [1, 2, 4])
    inference_K: int = 1
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0
    out: str = "runs"


@dataclass
class AblateWarmstartCmdConfig:
    experiment: bench.ExperimentConfig = field(default_factory=bench.ExperimentConfig)
    switch_points: list = field(default_factory=lambda: [0, 250, 500])
    fm_steps: int = 1000
    cafm_steps: int = 1000
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0
    out: str = "runs"


@dataclass
class ReportCmdConfig:
    experiments: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    seed: int = 0
    out: str = "runs"


COMMANDS = {
    "gen": (GenConfig, "Generate a synthetic dataset with its constraint declaration and holdout split."),
    "train": (TrainCmdConfig, "Train a velocity field on a generated dataset."),
    "sample": (SampleCmdConfig, "Draw samples from a checkpoint with the configured sampler."),
    "eval": (EvalCmdConfig, "Compute metrics of a sample batch against a dataset's holdout split."),
    "gradcheck": (GradcheckCmdConfig, "Compare reverse-mode gradients with central differences."),
    "ablate-unroll": (AblateUnrollCmdConfig, "Train one model per unroll depth K; evaluate with a fixed projector."),
    "ablate-warmstart": (AblateWarmstartCmdConfig, "CAFM fine-tuning from FM checkpoints at several switch points."),
    "report": (ReportCmdConfig, "Run a list of experiments over seeds and write a metrics CSV."),
}

# fields holding lists of nested configs
LIST_ITEMS = {"experiments": bench.ExperimentConfig}


def build(cls, data: dict, where: str = ""):
    """Construct dataclass ``cls`` from ``data``, rejecting unknown keys at any depth."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for k, v in data.items():
        cur = getattr(default, k)
        if dataclasses.is_dataclass(cur):
            kw[k] = build(type(cur), v, f"{where}{k}.")
        elif k in LIST_ITEMS and isinstance(v, list):
            kw[k] = [build(LIST_ITEMS[k], item, f"{where}{k}[{i}].") for i, item in enumerate(v)]
        else:
            kw[k] = tuple(v) if isinstance(cur, tuple) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def describe(cls, prefix: str = "") -> list[str]:
    lines = []
    for f in dataclasses.fields(cls):
        cur = getattr(cls(), f.name)
        if dataclasses.is_dataclass(cur):
            lines += describe(type(cur), f"{prefix}{f.name}.")
        elif f.name in LIST_ITEMS:
            lines.append(f"  {prefix}{f.name}: list of objects with keys:")
            lines += ["  " + s for s in describe(LIST_ITEMS[f.name], "")]
        else:
            lines.append(f"  {prefix}{f.name} (default {json.dumps(cur)})")
    return lines


def fingerprint(cfg) -> str:
    d = {k: v for k, v in asdict(cfg).items() if k != "out"}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _emit(payload: dict, quiet: bool) -> None:
    if not quiet:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _dataset(path: str) -> SyntheticDataset:
    if not path:
        raise ConfigError("dataset_dir is required")
    return SyntheticDataset.load(path)


def cmd_gen(cfg: GenConfig, out: Path) -> dict:
    ds = bench.generate_dataset(cfg.dataset, cfg.size, cfg.seed, cfg.holdout_size)
    ds.save(out / "dataset")
    tr, ho = ds.feasibility()
    return {"dataset_dir": str(out / "dataset"), "n_train": int(ds.samples.shape[0]),
            "n_holdout": int(ds.holdout.shape[0]), "max_cv_train": tr, "max_cv_holdout": ho}


def cmd_train(cfg: TrainCmdConfig, out: Path) -> dict:
    ds = _dataset(cfg.dataset_dir)
    res = train(dataclasses.replace(cfg.train, seed=cfg.seed), ds)
    ck = res.checkpoint.save(out / "checkpoint.npz")
    (out / "losses.json").write_text(json.dumps({"losses": res.losses, "val": res.val_losses}))
    return {"checkpoint": str(ck), "final_loss": res.losses[-1] if res.losses else None,
            "fwd_ms": res.fwd_ms, "bwd_ms": res.bwd_ms, "total_ms": res.total_ms}


def cmd_sample(cfg: SampleCmdConfig, out: Path) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint is required")
    vf = Checkpoint.load(cfg.checkpoint).to_field()
    ds = _dataset(cfg.dataset_dir)
    cset = subset(ds.holdout_constraint, slice(0, cfg.n_samples))
    batch = sample(vf, cfg.sampler, cset, cfg.n_samples, seed=cfg.seed, dim=ds.dim)
    p, side = batch.save(out / "samples")
    cv = batch.cv_after
    return {"samples": str(p), "sidecar": str(side), "cv_max": float(np.max(cv)),
            "cv_median": float(np.median(cv)), "cv_mean": float(np.mean(cv))}


def cmd_eval(cfg: EvalCmdConfig, out: Path) -> dict:
    if not cfg.samples:
        raise ConfigError("samples is required")
    z, _ = load_samples(cfg.samples)
    ds = _dataset(cfg.dataset_dir)
    per_sample = any(getattr(b, "b", np.zeros(0)).ndim == 2 for b in ds.holdout_constraint.blocks)
    ref = ds.holdout[:z.shape[0]] if per_sample else ds.holdout
    rep = bench.evaluate(z, ref, subset(ds.holdout_constraint, slice(0, z.shape[0])), seed=cfg.seed)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return rep.to_dict()


def cmd_gradcheck(cfg: GradcheckCmdConfig, out: Path) -> dict:
    results = run_suite(cfg.seed, cfg.tolerance)
    payload = {"checks": [{"name": r.name, "error": r.error, "tol": r.tol, "ok": r.ok} for r in results],
               "all_ok": all(r.ok for r in results)}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2))
    return payload


def cmd_ablate_unroll(cfg: AblateUnrollCmdConfig, out: Path) -> dict:
    rows = bench.ablate_unroll(cfg.Ks, cfg.experiment, cfg.inference_K, tuple(cfg.seeds))
    bench.write_csv(rows, out / "unroll.csv")
    med = {K: float(np.median([r.metrics.cv for r in rows if r.K == K])) for K in cfg.Ks}
    (out / "unroll.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2, default=str))
    return {"csv": str(out / "unroll.csv"), "median_cv": med}


def cmd_ablate_warmstart(cfg: AblateWarmstartCmdConfig, out: Path) -> dict:
    res = bench.ablate_warmstart(cfg.switch_points, cfg.experiment, cfg.fm_steps, cfg.cafm_steps,
                                 tuple(cfg.seeds))
    (out / "warmstart.json").write_text(json.dumps(res.to_dict(), indent=2, default=str))
    return {"median_steps_to_threshold": res.median_steps(), "time_ratio": res.time_ratio,
            "fm_step_ms": res.fm_step_ms, "cafm_step_ms": res.cafm_step_ms}


def cmd_report(cfg: ReportCmdConfig, out: Path) -> dict:
    if not cfg.experiments:
        raise ConfigError("experiments must list at least one experiment")
    rows = [bench.run_experiment(dataclasses.replace(e, seed=s), out_dir=out / "runs")
            for e in cfg.experiments for s in cfg.seeds]
    bench.write_csv(rows, out / "report.csv")
    return {"csv": str(out / "report.csv"), "rows": [r.csv_row() for r in rows]}


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate-unroll": cmd_ablate_unroll,
            "ablate-warmstart": cmd_ablate_warmstart, "report": cmd_report}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafm-lab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (cls, text) in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text,
                            epilog="config keys:\n" + "\n".join(describe(cls)),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", help="output root (overrides config 'out')")
        sp.add_argument("--seed", type=int, help="seed (overrides config 'seed')")
        sp.add_argument("--quiet", action="store_true", help="suppress the JSON summary on stdout")
    return p


def _error_record(command: str, exc: BaseException, out: Path | None) -> dict:
    rec = {"status": "error", "command": command, "error_type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps({**rec, "traceback": traceback.format_exc()}, indent=2))
        except OSError:
            pass
    return rec


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    cls, _ = COMMANDS[args.command]
    out = None
    try:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if args.out is not None:
            raw["out"] = args.out
        if args.seed is not None:
            raw["seed"] = args.seed
        cfg = build(cls, raw)
        out = Path(cfg.out) / f"{args.command}-{fingerprint(cfg)}"
        resolved = out / "resolved_config.json"
        if resolved.exists():
            _emit({"status": "exists", "out": str(out)}, args.quiet)
            return 0
        out.mkdir(parents=True, exist_ok=True)
        payload = HANDLERS[args.command](cfg, out)
        resolved.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True, default=str))
        _emit({"status": "ok", "out": str(out), **payload}, args.quiet)
        if args.command == "gradcheck" and not payload["all_ok"]:
            return 1
        return 0
    except ConfigError as exc:
        _error_record(args.command, exc, out)
        return 2
    except Exception as exc:
        _error_record(args.command, exc, out)
        return 1


if __name__ == "__main__":
    sys.exit(main())
