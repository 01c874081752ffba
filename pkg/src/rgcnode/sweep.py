"""Random-search hyperparameter sweep and repeated-run summaries."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .config import ConfigError, PRESET_DIR, TrainConfig, dump_config
from .data import RecordingSet
from .evaluate import evaluate_model, write_json, write_table
from .stats import ci95
from .train import train

SWEEP_HEADER = ["rank", "run", "model", "N", "batch_size", "latent", "hidden", "encoder_lr", "predictor_lr",
                "val_rho", "best_epoch", "seconds", "seed"]
CATEGORICAL_DEFAULTS = {"N": [20, 30, 40], "batch_size": [2048, 4096, 8192], "latent": [16, 32, 64],
                        "hidden": [12, 14, 16, 20], "model": ["ltc", "cfc"]}
CONTINUOUS_DEFAULTS = {"encoder_lr": (1e-5, 0.1), "predictor_lr": (1e-4, 0.3)}


@dataclass
class SweepSpec:
    categorical: dict = field(default_factory=lambda: {k: list(v) for k, v in CATEGORICAL_DEFAULTS.items()})
    continuous: dict = field(default_factory=lambda: dict(CONTINUOUS_DEFAULTS))
    budget_runs: int | None = 20
    budget_seconds: float | None = None
    epochs_per_run: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.budget_runs is None and self.budget_seconds is None:
            raise ConfigError("sweep needs a run or time budget")
        if (self.budget_runs is not None and self.budget_runs <= 0) or \
                (self.budget_seconds is not None and self.budget_seconds <= 0):
            raise ConfigError("sweep budget must be positive")
        for k, (lo, hi) in self.continuous.items():
            if not lo < hi:
                raise ConfigError(f"continuous axis {k} needs lo < hi, got ({lo}, {hi})")
        for k, v in self.categorical.items():
            if not v:
                raise ConfigError(f"categorical axis {k} is empty")

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for k in sorted(self.categorical):
            choices = self.categorical[k]
            out[k] = choices[int(rng.integers(len(choices)))]
        for k in sorted(self.continuous):
            lo, hi = self.continuous[k]
            out[k] = float(rng.uniform(lo, hi))
        return out

    def contains(self, params: dict) -> bool:
        for k, choices in self.categorical.items():
            if params.get(k) not in choices:
                return False
        for k, (lo, hi) in self.continuous.items():
            if not lo <= params.get(k, np.nan) <= hi:
                return False
        return True


def load_sweep_spec(path=None) -> SweepSpec:
    path = Path(path) if path else PRESET_DIR / "sweep_space.yaml"
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    known_cat = set(CATEGORICAL_DEFAULTS)
    known_cont = set(CONTINUOUS_DEFAULTS)
    meta = {"budget_runs", "budget_seconds", "epochs_per_run", "seed"}
    unknown = sorted(set(data) - known_cat - known_cont - meta)
    if unknown:
        raise ConfigError(f"unknown sweep keys: {', '.join(unknown)}")
    cat = {k: list(data[k]) for k in known_cat if k in data}
    cont = {k: tuple(float(x) for x in data[k]) for k in known_cont if k in data}
    return SweepSpec({**{k: list(v) for k, v in CATEGORICAL_DEFAULTS.items()}, **cat},
                     {**CONTINUOUS_DEFAULTS, **cont},
                     data.get("budget_runs", 20), data.get("budget_seconds"),
                     int(data.get("epochs_per_run", 5)), int(data.get("seed", 0)))


def _one_run(args) -> dict:
    run, cfg, rec = args
    t0 = time.perf_counter()
    result = train(cfg, rec)
    return {"run": run, "model": cfg.model, "N": cfg.N, "batch_size": cfg.batch_size, "latent": cfg.latent,
            "hidden": cfg.hidden, "encoder_lr": cfg.encoder_lr, "predictor_lr": cfg.predictor_lr,
            "val_rho": max(result.best.val_rho, result.last.val_rho) if result.history else float("nan"),
            "best_epoch": result.best_epoch, "seconds": time.perf_counter() - t0, "seed": cfg.seed,
            "config": cfg.to_dict()}


def run_sweep(spec: SweepSpec, rec: RecordingSet, base: TrainConfig, out_dir=None,
              log: Callable[[str], None] | None = None, workers: int = 1) -> list[dict]:
    """Sample configurations until the budget is spent; rows come back ranked by validation rho.

    A run that has started always finishes, even when it overruns the time budget.
    """
    log = log or (lambda msg: None)
    rng = np.random.default_rng(spec.seed)
    seeds = np.random.SeedSequence(spec.seed).spawn(1)[0]
    t0 = time.perf_counter()

    def make(run: int) -> TrainConfig:
        params = spec.sample(rng)
        run_seed = int(seeds.spawn(1)[0].generate_state(1)[0] % (2 ** 31))
        return base.replace(**params, max_epochs=spec.epochs_per_run, seed=run_seed,
                            name=f"sweep-{run:03d}")

    rows = []
    if workers > 1:
        if spec.budget_runs is None:
            raise ConfigError("parallel sweeps need a run budget")
        jobs = [(i, make(i), rec) for i in range(spec.budget_runs)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_one_run, jobs))
    else:
        run = 0
        while True:
            if spec.budget_runs is not None and run >= spec.budget_runs:
                break
            if spec.budget_seconds is not None and time.perf_counter() - t0 >= spec.budget_seconds:
                break
            row = _one_run((run, make(run), rec))
            log(f"run {run}: {row['model']} N={row['N']} val rho {row['val_rho']:.4f}")
            rows.append(row)
            run += 1
    rows.sort(key=lambda r: (-(r["val_rho"] if np.isfinite(r["val_rho"]) else -np.inf), r["run"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    if out_dir is not None and rows:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "sweep.csv", SWEEP_HEADER, rows)
        write_json(out / "sweep.json", rows)
        best = rows[0]["config"]
        dump_config(TrainConfig(**{**best, "name": None}), out / "best_config.yaml")
    return rows


def repeat_runs(cfg: TrainConfig, rec: RecordingSet, runs: int = 5) -> dict:
    """Retrain with seeds cfg.seed .. cfg.seed+runs-1 and summarize test rho as mean (+- CI half-width)."""
    rhos = []
    for i in range(runs):
        result = train(cfg.replace(seed=cfg.seed + i), rec)
        sel = result.selected
        rhos.append(evaluate_model(sel.build(), rec, sel.normalizer, name=cfg.run_name, run_id=str(i)).rho)
    mean = float(np.mean(rhos))
    lo, hi = ci95(rhos) if runs > 1 else (mean, mean)
    half = (hi - lo) / 2
    return {"rhos": rhos, "mean": mean, "ci_low": lo, "ci_high": hi, "label": f"rho = {mean:.2f} (±{half:.2f})"}


__all__ = ["SweepSpec", "load_sweep_spec", "run_sweep", "repeat_runs", "SWEEP_HEADER"]
