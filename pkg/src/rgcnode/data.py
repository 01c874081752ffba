"""Recording container, window slicing, target normalization, synthetic data and input noise."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .models import SequencePlan

MAGIC = b"RGCD"
VERSION = 1
FRAME_SIZE = 50
HEADER = struct.Struct("<4sIQIIII")  # magic, version, T, H, W, n, footer length
NORM_EPS = 1e-8
SPLITS = ("train", "validation", "test")


class FormatError(ValueError):
    pass


@dataclass
class RecordingSet:
    """Frames [T,50,50] u8, responses [T,n] f32, split name -> (start, stop)."""

    frames: np.ndarray
    responses: np.ndarray
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        self.responses = np.ascontiguousarray(self.responses, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be [T,H,W], got {self.frames.shape}")
        if self.responses.ndim != 2 or self.responses.shape[0] != self.frames.shape[0]:
            raise ValueError(f"responses {self.responses.shape} do not match {self.frames.shape[0]} frames")
        if np.any(self.responses < 0):
            raise ValueError("responses must be non-negative")
        if not self.splits:
            self.splits = default_splits(self.T)
        self.splits = {k: (int(a), int(b)) for k, (a, b) in self.splits.items()}
        for name, (a, b) in self.splits.items():
            if not 0 <= a < b <= self.T:
                raise ValueError(f"split {name!r} range ({a}, {b}) outside [0, {self.T}]")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n(self) -> int:
        return self.responses.shape[1]

    def split(self, name: str) -> tuple[int, int]:
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


def default_splits(T: int, test_fraction: float = 0.15, validation_fraction: float = 0.2) -> dict:
    """Leading block for training, trailing block for test; validation is the tail of training."""
    train_end = T - int(round(test_fraction * T))
    val_start = train_end - int(round(validation_fraction * train_end))
    return {"train": (0, val_start), "validation": (val_start, train_end), "test": (train_end, T)}


# -- container ---------------------------------------------------------------
def save_recording(rec: RecordingSet, path) -> None:
    footer = json.dumps({"splits": rec.splits, "meta": rec.meta}, sort_keys=True).encode()
    t, h, w = rec.frames.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, t, h, w, rec.n, len(footer)))
        fh.write(rec.frames.tobytes())
        fh.write(rec.responses.astype("<f4").tobytes())
        fh.write(footer)


def read_header(buf: bytes) -> tuple[int, int, int, int, int]:
    """Return (T, H, W, n, footer_len) after validating magic and version."""
    if len(buf) < HEADER.size:
        raise FormatError(f"unexpected end of stream at offset {len(buf)} (header needs {HEADER.size} bytes)")
    magic, version, t, h, w, n, flen = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if h != FRAME_SIZE or w != FRAME_SIZE:
        raise FormatError(f"frame size {h}x{w} at offset 16, expected {FRAME_SIZE}x{FRAME_SIZE}")
    if n < 1:
        raise FormatError(f"channel count {n} at offset 24 must be positive")
    return t, h, w, n, flen


def load_recording(path) -> RecordingSet:
    buf = Path(path).read_bytes()
    t, h, w, n, flen = read_header(buf)
    off = HEADER.size
    sizes = [("frames", t * h * w), ("responses", t * n * 4), ("footer", flen)]
    spans = {}
    for name, size in sizes:
        if off + size > len(buf):
            raise FormatError(f"unexpected end of stream at offset {len(buf)} while reading {name} "
                              f"(needs bytes {off}..{off + size})")
        spans[name] = (off, off + size)
        off += size
    if off != len(buf):
        raise FormatError(f"trailing bytes at offset {off}")
    a, b = spans["frames"]
    frames = np.frombuffer(buf[a:b], dtype=np.uint8).reshape(t, h, w).copy()
    a, b = spans["responses"]
    responses = np.frombuffer(buf[a:b], dtype="<f4").reshape(t, n).astype(np.float32)
    a, b = spans["footer"]
    try:
        footer = json.loads(buf[a:b].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt footer at offset {a}: {exc}") from None
    return RecordingSet(frames, responses, footer.get("splits", {}), footer.get("meta", {}))


def export_responses_csv(rec: RecordingSet, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t"] + [f"ch{i}" for i in range(rec.n)])
        for t, row in enumerate(rec.responses):
            out.writerow([t] + [repr(float(v)) for v in row])


# -- windows -----------------------------------------------------------------
def window_count(span: tuple[int, int], plan: SequencePlan) -> int:
    length = span[1] - span[0]
    frames = plan.total_frames
    if length < frames + 1:
        raise ValueError(f"range of {length} frames is shorter than one window ({frames} input frames + 1 target)")
    return length - frames


def make_windows(rec: RecordingSet, plan: SequencePlan, span):
    """Yield (frames [F,50,50] u8, target [n] f32, target index) with stride 1."""
    if isinstance(span, str):
        span = rec.split(span)
    count = window_count(span, plan)
    f = plan.total_frames
    for i in range(count):
        s = span[0] + i
        yield rec.frames[s:s + f], rec.responses[s + f], s + f


def window_starts(rec: RecordingSet, plan: SequencePlan, span) -> np.ndarray:
    if isinstance(span, str):
        span = rec.split(span)
    return span[0] + np.arange(window_count(span, plan))


def preprocess(frames: np.ndarray) -> np.ndarray:
    """u8 pixels to float64 centered around zero."""
    return frames.astype(np.float64) / 255.0 - 0.5


def gather(rec: RecordingSet, plan: SequencePlan, starts: np.ndarray, frames: np.ndarray | None = None):
    """Batch of preprocessed inputs [B,F,50,50] and raw targets [B,n]."""
    src = rec.frames if frames is None else frames
    f = plan.total_frames
    idx = np.asarray(starts)[:, None] + np.arange(f)
    return preprocess(src[idx]), rec.responses[np.asarray(starts) + f].astype(np.float64)


# -- normalization -----------------------------------------------------------
@dataclass
class ChannelNormalizer:
    lo: np.ndarray
    hi: np.ndarray
    eps: float = NORM_EPS

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(self.hi - self.lo, self.eps)

    def normalize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.lo) / self.scale

    def denormalize(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.scale + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelNormalizer":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64), float(d["eps"]))


def fit_normalizer(rec: RecordingSet, train_range="train") -> ChannelNormalizer:
    a, b = rec.split(train_range) if isinstance(train_range, str) else train_range
    if b <= a:
        raise ValueError("training range is empty")
    y = rec.responses[a:b].astype(np.float64)
    return ChannelNormalizer(y.min(axis=0), y.max(axis=0))


# -- synthetic generator -----------------------------------------------------
@dataclass
class SynthConfig:
    T: int = 20000
    n: int = 9
    seed: int = 0
    lag_range: tuple[int, int] = (8, 12)
    sparsity_target: float = 0.8
    saccade_period: int = 100
    jitter_sigma: float = 0.5
    texture_size: int = 96
    response_noise: float = 0.25
    splits: dict | None = None


@dataclass
class SynthTruth:
    """Ground truth the generator used: per-channel lag, pre-lag drive, spatial filters."""

    lags: np.ndarray
    drive: np.ndarray
    filters: np.ndarray


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Grayscale 1/f texture scaled to [0, 1]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0
    spectrum = (rng.standard_normal(radius.shape) + 1j * rng.standard_normal(radius.shape)) / radius
    spectrum[0, 0] = 0.0
    img = np.fft.irfft2(spectrum, s=(size, size))
    img -= img.min()
    return img / max(img.max(), 1e-12)


def _stimulus(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    size, margin = cfg.texture_size, (cfg.texture_size - FRAME_SIZE) / 2.0
    limit = margin - 2.0
    frames = np.empty((cfg.T, FRAME_SIZE, FRAME_SIZE), dtype=np.uint8)
    grid = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    for start in range(0, cfg.T, cfg.saccade_period):
        stop = min(start + cfg.saccade_period, cfg.T)
        tex = _texture(rng, size)
        contrast = rng.uniform(0.6, 1.0)
        pos = np.zeros(2)
        for t in range(start, stop):
            pos = np.clip(pos + rng.normal(0.0, cfg.jitter_sigma, 2), -limit, limit)
            coords = grid + (margin + pos)[:, None, None]
            patch = ndimage.map_coordinates(tex, coords, order=1, mode="reflect")
            frames[t] = np.clip(np.rint(255.0 * (0.5 + contrast * (patch - 0.5))), 0, 255)
    return frames


def _dog_filters(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    out = np.empty((cfg.n, FRAME_SIZE, FRAME_SIZE))
    for c in range(cfg.n):
        cy, cx = rng.uniform(15, 35, 2)
        sc = rng.uniform(2.0, 4.0)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        center = np.exp(-d2 / (2 * sc ** 2)) / (2 * np.pi * sc ** 2)
        surround = np.exp(-d2 / (2 * (2 * sc) ** 2)) / (2 * np.pi * (2 * sc) ** 2)
        out[c] = rng.choice([-1.0, 1.0]) * (center - 0.8 * surround)
    return out


def generate_synthetic(cfg: SynthConfig | None = None, return_truth: bool = False, **overrides):
    """Linear-nonlinear responses to jittered natural-like textures with periodic saccades."""
    cfg = cfg or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    lo, hi = cfg.lag_range
    if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))) or lo < 0 or hi < lo:
        raise ValueError(f"invalid lag_range {cfg.lag_range}: need integers 0 <= lo <= hi")
    if cfg.T <= 60 or cfg.n < 1:
        raise ValueError(f"need T > 60 and n >= 1, got T={cfg.T}, n={cfg.n}")
    if hi >= cfg.T:
        raise ValueError(f"lag {hi} does not fit in {cfg.T} frames")
    if not 0.0 < cfg.sparsity_target < 1.0:
        raise ValueError("sparsity_target must lie in (0, 1)")
    stim_seq, filt_seq, resp_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    frames = _stimulus(cfg, np.random.default_rng(stim_seq))
    rng = np.random.default_rng(filt_seq)
    filters = _dog_filters(cfg, rng)
    lags = rng.integers(lo, hi + 1, size=cfg.n)
    transient = rng.uniform(0.0, 0.5, size=cfg.n)

    x = preprocess(frames).reshape(cfg.T, -1)
    s = x @ filters.reshape(cfg.n, -1).T
    s = (s - s.mean(axis=0)) / np.maximum(s.std(axis=0), 1e-12)
    # sustained intensity plus a share of its deviation from a short running mean
    ema = np.empty_like(s)
    ema[0] = s[0]
    for t in range(1, cfg.T):
        ema[t] = 0.7 * ema[t - 1] + 0.3 * s[t]
    drive = s + transient * (s - ema)
    drive = (drive - drive.mean(axis=0)) / np.maximum(drive.std(axis=0), 1e-12)

    rng = np.random.default_rng(resp_seq)
    responses = np.zeros((cfg.T, cfg.n))
    for c in range(cfg.n):
        lagged = np.full(cfg.T, drive[:, c].min())
        lagged[lags[c]:] = drive[: cfg.T - lags[c], c]
        rate = np.logaddexp(0.0, 2.0 * lagged)
        thr = np.quantile(rate, cfg.sparsity_target)
        r = np.maximum(rate - thr, 0.0) * rng.uniform(2.0, 6.0)
        active = r > 0
        r[active] *= rng.lognormal(0.0, cfg.response_noise, active.sum())
        responses[:, c] = r
    meta = {"generator": "synthetic", "T": cfg.T, "n": cfg.n, "seed": cfg.seed,
            "lag_range": [int(lo), int(hi)], "sparsity_target": cfg.sparsity_target}
    rec = RecordingSet(frames, responses.astype(np.float32), cfg.splits or default_splits(cfg.T), meta)
    if return_truth:
        return rec, SynthTruth(lags, drive, filters)
    return rec


# -- noise -------------------------------------------------------------------
def apply_noise(frames: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Add a noise field, round, and clip to valid u8 pixels."""
    return np.clip(np.rint(frames.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def perturb_noise(frames: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return frames.copy()
    rng = np.random.default_rng(seed)
    return apply_noise(frames, rng.normal(0.0, sigma, frames.shape))


__all__ = ["RecordingSet", "ChannelNormalizer", "SynthConfig", "SynthTruth", "FormatError",
           "default_splits", "save_recording", "load_recording", "read_header", "export_responses_csv",
           "make_windows", "window_count", "window_starts", "gather", "preprocess", "fit_normalizer",
           "generate_synthetic", "perturb_noise", "apply_noise"]
