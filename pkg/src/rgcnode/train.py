"""Losses, Adam, plateau scheduling, early stopping, checkpoints and the training loop."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig, config_from_dict
from .data import ChannelNormalizer, RecordingSet, fit_normalizer, gather, window_starts
from .layers import Module
from .models import build_model
from .stats import channel_pearson
from .tensor import ShapeError, Tensor, backward, deserialize_array, no_grad, serialize_array

POISSON_EPS = 1e-8
CKPT_MAGIC = b"RGCK"
CKPT_VERSION = 1
CURVE_HEADER = ["epoch", "split", "loss", "rho"]


# -- losses ------------------------------------------------------------------
def _check_pair(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return target


def loss_mse(pred: Tensor, target) -> Tensor:
    target = _check_pair(pred, target)
    d = pred - target
    return (d * d).mean()


def loss_mae(pred: Tensor, target) -> Tensor:
    target = _check_pair(pred, target)
    return (pred - target).abs().mean()


def loss_poisson(pred: Tensor, target, eps: float = POISSON_EPS) -> Tensor:
    """Per sample sum over channels of yhat - y*log(yhat), averaged over the batch."""
    target = _check_pair(pred, target)
    p = pred.clampmin(eps)
    per = p - target * p.log()
    return per.sum() * (1.0 / pred.shape[0])


LOSSES: dict[str, Callable] = {"mse": loss_mse, "mae": loss_mae, "poisson": loss_poisson}


# -- optimizer ---------------------------------------------------------------
class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam over parameter groups, each with its own learning rate."""

    def __init__(self, groups: list[dict], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"]),
                        "name": g.get("name", f"group{i}")} for i, g in enumerate(groups)]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]

    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def step(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteGradientError(f"non-finite gradient in group {g['name']!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for gi, g in enumerate(self.groups):
            for pi, p in enumerate(g["params"]):
                if p.grad is None:
                    continue
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                p.data = p.data - g["lr"] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    @property
    def lrs(self) -> list[float]:
        return [g["lr"] for g in self.groups]


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class PlateauScheduler:
    """Multiply every group's lr by ``factor`` after ``patience`` validations without improvement."""

    optimizer: Adam
    factor: float = 0.5
    patience: int = 3
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = -math.inf
    num_bad: int = 0

    def step(self, monitored: float) -> bool:
        if math.isfinite(monitored) and monitored > self.best + self.min_delta:
            self.best = monitored
            self.num_bad = 0
            return False
        self.num_bad += 1
        if self.num_bad < self.patience:
            return False
        self.num_bad = 0
        reduced = False
        for g in self.optimizer.groups:
            new = max(g["lr"] * self.factor, self.min_lr)
            reduced |= new < g["lr"]
            g["lr"] = new
        return reduced


def best_index(history: list[float]) -> int:
    """Index of the first maximum among finite values; -1 if none is finite."""
    best, idx = -math.inf, -1
    for i, v in enumerate(history):
        if v is not None and math.isfinite(v) and v > best:
            best, idx = v, i
    return idx


def early_stop(history: list[float], patience: int = 7) -> bool:
    """True once the best value is ``patience`` or more validations old."""
    if not history:
        raise ValueError("history is empty")
    return len(history) - 1 - best_index(history) >= patience


# -- checkpoints -------------------------------------------------------------
@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    normalizer: ChannelNormalizer
    n_out: int
    tag: str = "last"
    epoch: int = 0
    val_rho: float = float("nan")
    optimizer: dict = field(default_factory=dict)

    def build(self) -> Module:
        cfg = config_from_dict(self.config)
        model = make_model(cfg, self.n_out)
        model.load_state_dict(self.model_state)
        return model

    @property
    def train_config(self) -> TrainConfig:
        return config_from_dict(self.config)


def _optimizer_snapshot(opt: Adam) -> dict:
    return {"t": opt.t, "lrs": opt.lrs,
            "m": [[a.copy() for a in grp] for grp in opt.m],
            "v": [[a.copy() for a in grp] for grp in opt.v]}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.model_state)
    opt = ckpt.optimizer or {"t": 0, "lrs": [], "m": [], "v": []}
    header = {
        "config": ckpt.config, "normalizer": ckpt.normalizer.to_dict(), "n_out": ckpt.n_out,
        "tag": ckpt.tag, "epoch": ckpt.epoch,
        "val_rho": None if not math.isfinite(ckpt.val_rho) else ckpt.val_rho,
        "params": names, "opt_t": opt["t"], "opt_lrs": opt["lrs"],
        "opt_groups": [len(g) for g in opt["m"]],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(blob)), blob]
    parts += [serialize_array(ckpt.model_state[k]) for k in names]
    for grp in opt["m"] + opt["v"]:
        parts += [serialize_array(a) for a in grp]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at offset 0")
    if len(buf) < 16:
        raise ValueError(f"unexpected end of stream at offset {len(buf)}")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} at offset 4")
    if 16 + hlen > len(buf):
        raise ValueError(f"unexpected end of stream at offset {len(buf)}")
    header = json.loads(buf[16:16 + hlen].decode())
    off = 16 + hlen
    state = {}
    for name in header["params"]:
        state[name], off = deserialize_array(buf, off)
    groups = header["opt_groups"]
    moments = []
    for _ in range(2):
        block = []
        for size in groups:
            grp = []
            for _ in range(size):
                arr, off = deserialize_array(buf, off)
                grp.append(arr)
            block.append(grp)
        moments.append(block)
    if off != len(buf):
        raise ValueError(f"trailing bytes at offset {off}")
    rho = header["val_rho"]
    return Checkpoint(state, header["config"], ChannelNormalizer.from_dict(header["normalizer"]),
                      header["n_out"], header["tag"], header["epoch"],
                      float("nan") if rho is None else rho,
                      {"t": header["opt_t"], "lrs": header["opt_lrs"], "m": moments[0], "v": moments[1]})


# -- model helpers -----------------------------------------------------------
def make_model(cfg: TrainConfig, n_out: int) -> Module:
    return build_model(cfg.model, n_out, cfg.plan, hidden=cfg.hidden, latent=cfg.latent,
                       encoder_channels=tuple(cfg.encoder_channels), seed=cfg.seed,
                       unfold_steps=cfg.unfold_steps)


def predict(model: Module, rec: RecordingSet, span, normalizer: ChannelNormalizer,
            batch_size: int = 256, frames: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized inference predictions and raw targets over every window of ``span``."""
    starts = window_starts(rec, model.plan, span)
    preds, targets = [], []
    with no_grad():
        for i in range(0, len(starts), batch_size):
            x, y = gather(rec, model.plan, starts[i:i + batch_size], frames)
            preds.append(model(x, training=False).data)
            targets.append(y)
    return normalizer.denormalize(np.concatenate(preds)), np.concatenate(targets)


def aggregate_rho(pred: np.ndarray, target: np.ndarray) -> float:
    return float(channel_pearson(pred, target)[0].mean())


# -- training loop -----------------------------------------------------------
class DivergenceError(RuntimeError):
    def __init__(self, message: str, curves: list):
        super().__init__(message)
        self.curves = curves


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    curves: list
    history: list
    seconds: float

    @property
    def selected(self) -> Checkpoint:
        """The better of best and last by validation rho."""
        if math.isfinite(self.last.val_rho) and not self.last.val_rho < self.best.val_rho:
            return self.last
        return self.best

    @property
    def best_epoch(self) -> int:
        return best_index(self.history) + 1


def write_curves(curves: list, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CURVE_HEADER)
        for row in curves:
            out.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])


def _snapshot(model, cfg, normalizer, opt, tag, epoch, rho) -> Checkpoint:
    return Checkpoint(model.state_dict(), cfg.to_dict(), normalizer, model.n_out, tag, epoch, rho,
                      _optimizer_snapshot(opt))


def train(cfg: TrainConfig, rec: RecordingSet, out_dir=None, log: Callable[[str], None] | None = None,
          eval_batch: int = 256) -> TrainResult:
    """Fit ``cfg.model`` on the train split, validating on the validation split.

    With ``validate_every`` set to a sample count, each such period counts as one epoch.
    """
    t0 = time.perf_counter()
    log = log or (lambda msg: None)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    normalizer = fit_normalizer(rec, "train")
    model = make_model(cfg, rec.n)
    plan = model.plan
    wiring = getattr(getattr(model, "predictor", None), "_wiring", None)
    if out is not None and wiring is not None:
        (out / "wiring.json").write_text(wiring.to_json())
    train_starts = window_starts(rec, plan, "train")
    loss_fn = LOSSES[cfg.loss]
    opt = Adam([{"params": model.encoder_parameters(), "lr": cfg.encoder_lr, "name": "encoder"},
                {"params": model.predictor_parameters(), "lr": cfg.predictor_lr, "name": "predictor"}])
    sched = PlateauScheduler(opt, cfg.scheduler_factor, cfg.scheduler_patience, cfg.scheduler_min_delta,
                             cfg.min_lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    period = len(train_starts) if cfg.validate_every == "epoch" else int(cfg.validate_every)
    order, cursor = shuffle_rng.permutation(train_starts), 0
    clip = cfg.clip_norm
    params = opt.params()

    curves, history = [], []
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        seen, loss_sum, tr_pred, tr_true = 0, 0.0, [], []
        while seen < period:
            if cursor >= len(order):
                order, cursor = shuffle_rng.permutation(train_starts), 0
            take = min(cfg.batch_size, period - seen, len(order) - cursor)
            idx = order[cursor:cursor + take]
            cursor += take
            seen += take
            x, y = gather(rec, plan, idx)
            opt.zero_grad()
            pred = model(x, training=True)
            loss = loss_fn(pred, normalizer.normalize(y))
            value = loss.item()
            if not math.isfinite(value):
                curves.append((epoch, "train", float("nan"), float("nan")))
                if out is not None:
                    write_curves(curves, out / "curves.csv")
                raise DivergenceError(f"loss became {value} in epoch {epoch}", curves)
            backward(loss)
            if clip:
                clip_grad_norm(params, clip)
            opt.step()
            loss_sum += value * take
            tr_pred.append(normalizer.denormalize(np.maximum(pred.data, 0.0)))
            tr_true.append(y)
        tr_rho = aggregate_rho(np.concatenate(tr_pred), np.concatenate(tr_true))
        curves.append((epoch, "train", loss_sum / seen, tr_rho))

        vp, vt = predict(model, rec, "validation", normalizer, eval_batch)
        with no_grad():
            v_loss = loss_fn(Tensor(normalizer.normalize(vp)), normalizer.normalize(vt)).item()
        v_rho = aggregate_rho(vp, vt)
        curves.append((epoch, "validation", v_loss, v_rho))
        history.append(v_rho)
        log(f"epoch {epoch}: train loss {loss_sum / seen:.5f} rho {tr_rho:.4f} | "
            f"val loss {v_loss:.5f} rho {v_rho:.4f} | lr {opt.lrs}")
        if best is None or (math.isfinite(v_rho) and not v_rho <= best.val_rho):
            best = _snapshot(model, cfg, normalizer, opt, "best", epoch, v_rho)
        sched.step(v_rho)
        if early_stop(history, cfg.patience):
            log(f"early stop after epoch {epoch} (best epoch {best_index(history) + 1})")
            break

    last = _snapshot(model, cfg, normalizer, opt, "last", epoch, history[-1])
    result = TrainResult(best, last, curves, history, time.perf_counter() - t0)
    if out is not None:
        save_checkpoint(best, out / "best.ckpt")
        save_checkpoint(last, out / "last.ckpt")
        write_curves(curves, out / "curves.csv")
    return result


__all__ = ["loss_mse", "loss_mae", "loss_poisson", "LOSSES", "Adam", "clip_grad_norm", "PlateauScheduler",
           "early_stop", "best_index", "Checkpoint", "save_checkpoint", "load_checkpoint", "checkpoint_bytes",
           "make_model", "predict", "aggregate_rho", "train", "TrainResult", "DivergenceError",
           "NonFiniteGradientError", "write_curves"]
