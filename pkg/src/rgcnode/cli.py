"""Command-line entry point: synth, train, eval, bench, noise-eval, sweep."""
from __future__ import annotations

import argparse
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import yaml

from .config import ConfigError, TrainConfig, dump_config, load_config
from .data import SynthConfig, export_responses_csv, generate_synthetic, load_recording, save_recording
from .evaluate import (DEFAULT_SIGMAS, MULTISCALE_HEADER, TABLE1_HEADER, TABLE6_HEADER, TIMING_HEADER,
                       bench_inference, evaluate_model, multiscale_rows, noise_eval, noise_header, summarize_runs,
                       timing_table, write_json, write_reports_csv, write_table)
from .layers import count_params
from .models import MODEL_KINDS
from .sweep import load_sweep_spec, run_sweep
from .train import DivergenceError, load_checkpoint, make_model, train

log = logging.getLogger("rgcnode")


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _train_config(args, **extra) -> TrainConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update(extra)
    return load_config(args.config, overrides)


def _out(args, *parts) -> Path:
    path = Path(args.out_dir, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_name(path) -> str:
    return Path(path).stem


# -- subcommands -------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = SynthConfig(T=args.t, n=args.n, seed=args.seed if args.seed is not None else 0,
                      lag_range=(args.lag_min, args.lag_max), sparsity_target=args.sparsity)
    rec = generate_synthetic(cfg)
    out = Path(args.output) if args.output else _out(args) / f"synthetic_T{args.t}_n{args.n}.rgcd"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_recording(rec, out)
    if args.csv:
        export_responses_csv(rec, out.with_suffix(".csv"))
    log.info("wrote %s (T=%d, n=%d, zero fraction %.3f)", out, rec.T, rec.n, float((rec.responses == 0).mean()))
    print(out)
    return 0


def cmd_train(args) -> int:
    rec = load_recording(args.data)
    rec.meta.setdefault("name", _dataset_name(args.data))
    base = _train_config(args)
    reports = []
    for i in range(args.runs):
        cfg = base.replace(seed=base.seed + i)
        run_dir = _out(args, cfg.run_name, f"run{i}") if args.runs > 1 else _out(args, cfg.run_name)
        dump_config(cfg, run_dir / "config.yaml")
        try:
            result = train(cfg, rec, run_dir, log=log.info)
        except DivergenceError as exc:
            log.error("%s: %s (partial curves in %s)", cfg.run_name, exc, run_dir)
            return 1
        sel = result.selected
        report = evaluate_model(sel.build(), rec, sel.normalizer, name=cfg.run_name, run_id=str(i),
                                train_seconds=result.seconds)
        write_json(run_dir / "report.json", report.to_dict())
        write_reports_csv([report], run_dir / "report.csv")
        log.info("%s run %d: test rho %.4f, MAE %.4f (best epoch %d)", cfg.run_name, i, report.rho, report.mae,
                 result.best_epoch)
        reports.append(report)
    if args.runs > 1:
        write_reports_csv(reports, _out(args, base.run_name) / "runs.csv")
    return 0


def _load_models(paths):
    for p in paths:
        ckpt = load_checkpoint(p)
        yield p, ckpt, ckpt.build()


def cmd_eval(args) -> int:
    rec = load_recording(args.data)
    rec.meta.setdefault("name", _dataset_name(args.data))
    groups: "OrderedDict[str, list]" = OrderedDict()
    plans = {}
    for path, ckpt, model in _load_models(args.checkpoint):
        cfg = ckpt.train_config
        report = evaluate_model(model, rec, ckpt.normalizer, name=cfg.run_name, run_id=Path(path).parent.name,
                                split=args.split)
        groups.setdefault(cfg.run_name, []).append(report)
        plans[cfg.run_name] = cfg.plan
        log.info("%s: rho %.4f MAE %.4f", path, report.rho, report.mae)
    out = _out(args)
    reports = [r for reps in groups.values() for r in reps]
    write_reports_csv(reports, out / "eval.csv")
    payload = {"reports": [r.to_dict() for r in reports]}
    write_table(out / "multiscale.csv", MULTISCALE_HEADER, multiscale_rows(groups, plans, rec.meta["name"]))
    if len(groups) >= 2 and all(len(v) >= 2 for v in groups.values()):
        summary = summarize_runs(groups, rec.meta["name"])
        write_table(out / "table1.csv", TABLE1_HEADER, summary.rows)
        payload["summary"] = {"rows": summary.rows, "anova_f": summary.anova_f, "anova_p": summary.anova_p,
                              "levene_w": summary.levene_w, "levene_p": summary.levene_p,
                              "jarque_bera": summary.jb, "jarque_bera_p": summary.jb_p}
    write_json(out / "eval.json", payload)
    return 0


def cmd_bench(args) -> int:
    rec = load_recording(args.data)
    entries = []
    for path, ckpt, model in _load_models(args.checkpoint or []):
        entries.append((ckpt.train_config, model))
    for kind in args.models.split(",") if args.models else []:
        cfg = _train_config(args, model=kind)
        entries.append((cfg, make_model(cfg, rec.n)))
    if not entries:
        raise ConfigError("bench needs --checkpoint or --models")
    timings = []
    for cfg, model in entries:
        batch = args.batch_size or cfg.batch_size
        for split in args.splits.split(","):
            for bs in sorted({1, batch}):
                t = bench_inference(model, rec, name=cfg.run_name, split=split, batch_size=bs,
                                    repetitions=args.repetitions, max_samples=args.max_samples)
                timings.append(t)
                log.info("%s %s batch %d: %.3e s/sample", cfg.run_name, split, bs, t.mean_s)
    sizes = {name: (b - a) for name, (a, b) in rec.splits.items()}
    rows = [t.__dict__ for t in timings]
    out = _out(args)
    write_table(out / "timing.csv", TIMING_HEADER, rows)
    write_table(out / "timing_table.csv", TABLE6_HEADER, timing_table(timings, sizes))
    write_json(out / "timing.json", {"timings": rows, "split_sizes": sizes,
                                     "params": {cfg.run_name: count_params(m) for cfg, m in entries}})
    return 0


def cmd_noise_eval(args) -> int:
    rec = load_recording(args.data)
    rec.meta.setdefault("name", _dataset_name(args.data))
    sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else list(DEFAULT_SIGMAS)
    if 0.0 not in sigmas:
        sigmas = [0.0] + sigmas
    seed = args.seed if args.seed is not None else 0
    rows, reports = [], []
    for path, ckpt, model in _load_models(args.checkpoint):
        name = ckpt.train_config.run_name
        reps, row = noise_eval(model, rec, ckpt.normalizer, name=name, sigmas=sigmas, seed=seed)
        reports += reps
        rows.append(row)
        log.info("%s: %s", name, row)
    out = _out(args)
    write_table(out / "noise.csv", noise_header(sigmas), rows)
    write_reports_csv(reports, out / "noise_reports.csv")
    write_json(out / "noise.json", {"rows": rows, "sigmas": sigmas, "reports": [r.to_dict() for r in reports]})
    return 0


def cmd_sweep(args) -> int:
    rec = load_recording(args.data)
    spec = load_sweep_spec(args.spec)
    if args.budget_runs is not None:
        spec.budget_runs = args.budget_runs
    if args.budget_seconds is not None:
        spec.budget_seconds = args.budget_seconds
        if args.budget_runs is None:
            spec.budget_runs = None
    if args.epochs is not None:
        spec.epochs_per_run = args.epochs
    if args.seed is not None:
        spec.seed = args.seed
    spec.__post_init__()
    base = _train_config(args)
    rows = run_sweep(spec, rec, base, _out(args), log=log.info, workers=args.workers)
    return 0 if rows else 1


# -- parser ------------------------------------------------------------------
def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    """Global flags are accepted before or after the subcommand."""
    def d(value):
        return argparse.SUPPRESS if suppress else value
    parser.add_argument("--config", default=d(None), help="YAML config file or preset name")
    parser.add_argument("--seed", type=int, default=d(None), help="override the random seed")
    parser.add_argument("--out-dir", default=d("runs"), help="directory for artifacts (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="rgcnode", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic recording")
    s.add_argument("--t", type=int, required=True, help="number of frames")
    s.add_argument("--n", type=int, required=True, help="number of response channels")
    s.add_argument("--lag-min", type=int, default=8)
    s.add_argument("--lag-max", type=int, default=12)
    s.add_argument("--sparsity", type=float, default=0.8)
    s.add_argument("--output", help="container path (default: <out-dir>/synthetic_T<t>_n<n>.rgcd)")
    s.add_argument("--csv", action="store_true", help="also export responses as CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True, help=".rgcd recording")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--runs", type=int, default=1, help="independent runs with consecutive seeds")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="per-sample inference timing")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", nargs="+")
    s.add_argument("--models", help=f"comma list of freshly initialized kinds from {MODEL_KINDS}")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--batch-size", type=int, help="configured batch size (default: from config)")
    s.add_argument("--splits", default="test,train")
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--max-samples", type=int, help="time only the first windows of each split")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("noise-eval", parents=[common], help="test-split robustness to Gaussian pixel noise")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--sigmas", help="comma list (default: 0,25,50)")
    s.set_defaults(func=cmd_noise_eval)

    s = sub.add_parser("sweep", parents=[common], help="random-search hyperparameter sweep")
    s.add_argument("--data", required=True)
    s.add_argument("--spec", help="sweep space YAML (default: shipped space)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base config key")
    s.add_argument("--budget-runs", type=int)
    s.add_argument("--budget-seconds", type=float)
    s.add_argument("--epochs", type=int, help="epochs per sampled run")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
