"""Evaluation reports, run-group summaries, noise study, multi-scale table and inference timing."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ChannelNormalizer, RecordingSet, gather, perturb_noise, window_starts
from .layers import Module, count_params
from .stats import anova_oneway, channel_pearson, ci95, jarque_bera, levene, mae, relative_diff
from .tensor import no_grad
from .train import predict

TABLE1_HEADER = ["dataset", "model", "rho", "rho_std", "ci_low", "ci_high", "mae", "mae_std", "params",
                 "time_s", "time_std", "anova_p"]
MULTISCALE_HEADER = ["dataset", "model", "M", "N", "W", "frames", "rho", "rho_std", "mae", "mae_std", "params",
                     "time_s", "time_std"]
TIMING_HEADER = ["model", "split", "samples", "batch_size", "mean_s", "std_s"]
TABLE6_HEADER = ["model", "testing_time_s", "training_time_s", "testing_size", "training_size", "batch_size"]
DEFAULT_SIGMAS = (0.0, 25.0, 50.0)


@dataclass
class EvalReport:
    model: str
    dataset: str
    run_id: str
    rho_per_channel: list
    mae_per_channel: list
    rho: float
    mae: float
    samples: int
    split: str = "test"
    constant_channels: list = field(default_factory=list)
    params: int | None = None
    train_seconds: float | None = None
    sigma: float | None = None
    timing: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        row = {"model": self.model, "dataset": self.dataset, "run_id": self.run_id, "split": self.split,
               "sigma": "" if self.sigma is None else self.sigma, "rho": self.rho, "mae": self.mae,
               "samples": self.samples, "params": self.params if self.params is not None else "",
               "train_seconds": "" if self.train_seconds is None else self.train_seconds}
        for i, (r, m) in enumerate(zip(self.rho_per_channel, self.mae_per_channel)):
            row[f"rho_ch{i}"] = r
            row[f"mae_ch{i}"] = m
        return row


def report_from_predictions(pred: np.ndarray, target: np.ndarray, *, model: str, dataset: str, run_id: str,
                            split: str = "test", **extra) -> EvalReport:
    rhos, constant = channel_pearson(pred, target)
    maes = [mae(pred[:, c], target[:, c]) for c in range(pred.shape[1])]
    return EvalReport(model, dataset, run_id, [float(r) for r in rhos], maes, float(np.mean(rhos)),
                      float(np.mean(np.abs(pred - target))), int(pred.shape[0]), split, constant, **extra)


def evaluate_model(model: Module, rec: RecordingSet, normalizer: ChannelNormalizer, *, name: str,
                   run_id: str = "0", split: str = "test", frames: np.ndarray | None = None,
                   batch_size: int = 256, sigma: float | None = None, train_seconds: float | None = None) -> EvalReport:
    """Metrics on denormalized predictions over every window of ``split``."""
    pred, target = predict(model, rec, split, normalizer, batch_size, frames)
    return report_from_predictions(pred, target, model=name, dataset=rec.meta.get("name", "synthetic"),
                                   run_id=run_id, split=split, params=count_params(model),
                                   train_seconds=train_seconds, sigma=sigma)


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    rows = [r.csv_row() for r in reports]
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    write_table(path, keys, rows)


def write_table(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore")
        out.writeheader()
        for row in rows:
            out.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- run groups ---------------------------------------------------------------
@dataclass
class GroupSummary:
    rows: list
    anova_f: float
    anova_p: float
    levene_w: float
    levene_p: float
    jb: float
    jb_p: float


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize_runs(runs: dict, dataset: str = "synthetic") -> GroupSummary:
    """Table-1 style summary; ``runs`` maps model name to a list of per-run EvalReports.

    The interval and the tests are computed across runs of the aggregate rho.
    """
    if len(runs) < 2:
        raise ValueError("need at least two model groups")
    groups = {name: [r.rho for r in reps] for name, reps in runs.items()}
    anova = anova_oneway(*groups.values())
    lev = levene(*groups.values())
    residuals = np.concatenate([np.asarray(v) - np.mean(v) for v in groups.values()])
    jb = jarque_bera(residuals)
    rows = []
    for name, reps in runs.items():
        rho, rho_sd = _mean_std([r.rho for r in reps])
        lo, hi = ci95([r.rho for r in reps])
        m, m_sd = _mean_std([r.mae for r in reps])
        secs = [r.train_seconds for r in reps if r.train_seconds is not None]
        t, t_sd = _mean_std(secs) if secs else (float("nan"), float("nan"))
        rows.append({"dataset": dataset, "model": name, "rho": rho, "rho_std": rho_sd, "ci_low": lo, "ci_high": hi,
                     "mae": m, "mae_std": m_sd, "params": reps[0].params, "time_s": t, "time_std": t_sd,
                     "anova_p": anova.p})
    return GroupSummary(rows, anova.statistic, anova.p, lev.statistic, lev.p, jb.statistic, jb.p)


def multiscale_rows(runs: dict, plans: dict, dataset: str = "synthetic") -> list[dict]:
    """Multi-scale table rows; ``plans`` maps model name to its SequencePlan."""
    rows = []
    for name, reps in runs.items():
        plan = plans[name]
        rho, rho_sd = _mean_std([r.rho for r in reps])
        m, m_sd = _mean_std([r.mae for r in reps])
        secs = [r.train_seconds for r in reps if r.train_seconds is not None]
        t, t_sd = _mean_std(secs) if secs else (float("nan"), float("nan"))
        rows.append({"dataset": dataset, "model": name, "M": plan.M, "N": plan.N, "W": plan.W,
                     "frames": plan.total_frames, "rho": rho, "rho_std": rho_sd, "mae": m, "mae_std": m_sd,
                     "params": reps[0].params, "time_s": t, "time_std": t_sd})
    return rows


# -- noise study ---------------------------------------------------------------
def noise_header(sigmas: Sequence[float]) -> list[str]:
    cols = ["model", "non_perturbed"]
    for s in sigmas:
        if s == 0:
            continue
        tag = f"{s:g}"
        cols += [f"sigma_{tag}", f"rel_diff_{tag}"]
    return cols


def noise_row(model: str, rho_by_sigma: dict) -> dict:
    """One row in the noise-table layout: clean rho, then each sigma with its relative difference.

    The difference is NaN when the clean score is 0.
    """
    if 0 not in rho_by_sigma and 0.0 not in rho_by_sigma:
        raise ValueError("noise row needs the non-perturbed (sigma=0) score")
    clean = rho_by_sigma[0.0]
    row = {"model": model, "non_perturbed": clean}
    for s, rho in sorted(rho_by_sigma.items()):
        if s == 0:
            continue
        tag = f"{s:g}"
        row[f"sigma_{tag}"] = rho
        row[f"rel_diff_{tag}"] = relative_diff(clean, rho) if clean != 0 else math.nan
    return row


def noise_eval(model: Module, rec: RecordingSet, normalizer: ChannelNormalizer, *, name: str,
               sigmas: Sequence[float] = DEFAULT_SIGMAS, seed: int = 0, split: str = "test",
               batch_size: int = 256) -> tuple[list[EvalReport], dict]:
    """Evaluate on the split with its frames perturbed at each sigma; returns reports and a table row."""
    a, b = rec.split(split)
    reports = []
    for i, sigma in enumerate(sigmas):
        frames = rec.frames
        if sigma > 0:
            frames = rec.frames.copy()
            frames[a:b] = perturb_noise(rec.frames[a:b], sigma, seed + i)
        reports.append(evaluate_model(model, rec, normalizer, name=name, split=split, frames=frames,
                                      batch_size=batch_size, sigma=float(sigma)))
    row = noise_row(name, {float(r.sigma): r.rho for r in reports})
    return reports, row


def noise_monotone(rhos: Sequence[float], tolerance: float = 0.01) -> bool:
    """Non-increasing in sigma, allowing a single inversion no larger than ``tolerance``."""
    inversions = [rhos[i + 1] - rhos[i] for i in range(len(rhos) - 1) if rhos[i + 1] > rhos[i]]
    return len(inversions) == 0 or (len(inversions) == 1 and inversions[0] <= tolerance)


# -- timing --------------------------------------------------------------------
@dataclass
class Timing:
    model: str
    split: str
    samples: int
    batch_size: int
    mean_s: float
    std_s: float


def bench_inference(model: Module, rec: RecordingSet, *, name: str, split: str = "test", batch_size: int = 1,
                    repetitions: int = 3, max_samples: int | None = None, warmup: int = 1) -> Timing:
    """Per-sample forward latency over the split; input gathering is excluded from the clock."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    starts = window_starts(rec, model.plan, split)
    if max_samples is not None:
        starts = starts[:max_samples]
    batches = [gather(rec, model.plan, starts[i:i + batch_size])[0] for i in range(0, len(starts), batch_size)]
    per_sample = []
    with no_grad():
        for x in batches[:warmup]:
            model(x, training=False)
        for _ in range(repetitions):
            total = 0.0
            for x in batches:
                t0 = time.perf_counter()
                model(x, training=False)
                total += time.perf_counter() - t0
            per_sample.append(total / len(starts))
    v = np.asarray(per_sample)
    return Timing(name, split, len(starts), batch_size, float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0)


def timing_table(timings: Sequence[Timing], split_sizes: dict) -> list[dict]:
    """Rows in the inference-time layout: per-sample seconds on the test and training splits."""
    rows = {}
    for t in timings:
        key = (t.model, t.batch_size)
        row = rows.setdefault(key, {"model": t.model, "batch_size": t.batch_size,
                                    "testing_size": split_sizes.get("test"),
                                    "training_size": split_sizes.get("train"),
                                    "testing_time_s": math.nan, "training_time_s": math.nan})
        if t.split == "test":
            row["testing_time_s"] = t.mean_s
        elif t.split == "train":
            row["training_time_s"] = t.mean_s
    return list(rows.values())


__all__ = ["EvalReport", "evaluate_model", "report_from_predictions", "write_reports_csv", "write_table",
           "write_json", "GroupSummary", "summarize_runs", "multiscale_rows", "noise_header", "noise_row",
           "noise_eval", "noise_monotone", "Timing", "bench_inference", "timing_table", "TABLE1_HEADER",
           "MULTISCALE_HEADER", "TIMING_HEADER", "TABLE6_HEADER", "DEFAULT_SIGMAS"]
