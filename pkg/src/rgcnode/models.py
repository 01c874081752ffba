"""The four architectures: ConvNet baseline, and encoder + {LSTM, LTC, CfC}."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cells import LtcCell, WiredCfcCell
from .layers import Conv2d, Dense, Encoder, LstmCell, Module, count_params
from .tensor import ShapeError, Tensor
from .wiring import WiringSpec, build_ncp

MODEL_KINDS = ("convnet", "lstm", "ltc", "cfc")
DISPLAY_NAMES = {"convnet": "ConvNet", "lstm": "LSTM", "ltc": "LTC", "cfc": "CfC"}


@dataclass(frozen=True)
class SequencePlan:
    """M subsequences of N stacked frames, adjacent ones sharing W frames."""

    M: int = 1
    N: int = 40
    W: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError(f"M and N must be positive, got M={self.M}, N={self.N}")
        if not 0 <= self.W <= self.N - 1:
            raise ValueError(f"overlap W={self.W} must lie in [0, N-1={self.N - 1}]")

    @property
    def total_frames(self) -> int:
        return self.M * self.N - (self.M - 1) * self.W

    def starts(self) -> list[int]:
        step = self.N - self.W
        return [m * step for m in range(self.M)]

    @property
    def label(self) -> str:
        return f"{self.M}x{self.N}"


def _as_input(frames) -> Tensor:
    return frames if isinstance(frames, Tensor) else Tensor(frames)


class ConvNet(Module):
    """Two wide convolutions and a dense readout over an N-channel frame stack."""

    def __init__(self, n_frames: int, n_out: int, rng: np.random.Generator | None = None,
                 image_size: int = 50, filters: Sequence[int] = (8, 8), kernels: Sequence[int] = (15, 11)):
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(n_frames, filters[0], kernels[0], rng=rng)
        self.conv2 = Conv2d(filters[0], filters[1], kernels[1], rng=rng)
        side = self.conv2.output_size(self.conv1.output_size(image_size))
        if side < 1:
            raise ValueError(f"image size {image_size} too small for kernels {tuple(kernels)}")
        self.head = Dense(filters[1] * side * side, n_out, rng=rng)
        self.plan = SequencePlan(1, n_frames, 0)
        self.kind = "convnet"
        self.n_out = n_out

    def encoder_parameters(self) -> list[Tensor]:
        return self.conv1.parameters() + self.conv2.parameters()

    def predictor_parameters(self) -> list[Tensor]:
        return self.head.parameters()

    def forward(self, frames, training: bool = False) -> Tensor:
        x = _as_input(frames)
        if x.ndim != 4 or x.shape[1] != self.plan.N:
            raise ShapeError(f"convnet expects [B,{self.plan.N},H,W] frames, got {x.shape}")
        h = self.conv2(self.conv1(x).relu()).relu()
        out = self.head(h.reshape(h.shape[0], -1))
        return out if training else out.relu()

    __call__ = forward


class LstmPredictor(Module):
    """LSTM cell followed by a residual dense layer and a linear readout."""

    def __init__(self, latent: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.cell = LstmCell(latent, hidden, rng)
        self.dense1 = Dense(hidden, hidden, "relu", rng)
        self.dense2 = Dense(hidden, n_out, rng=rng)
        self.hidden = hidden
        self.n_out = n_out

    def initial_state(self, batch: int):
        z = Tensor(np.zeros((batch, self.hidden)))
        return (z, z)

    def step(self, state, u: Tensor, elapsed: float = 1.0):
        return self.cell(u, *state)

    def readout(self, state) -> Tensor:
        h = state[0]
        return self.dense2(h + self.dense1(h))


class RecurrentModel(Module):
    """Shared conv encoder feeding a recurrent predictor over M subsequences."""

    def __init__(self, kind: str, plan: SequencePlan, encoder: Encoder, predictor: Module):
        self.encoder = encoder
        self.predictor = predictor
        self.plan = plan
        self.kind = kind
        self.n_out = predictor.n_out

    def encoder_parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def predictor_parameters(self) -> list[Tensor]:
        return self.predictor.parameters()

    def forward(self, frames, training: bool = False) -> Tensor:
        return run_sequence(self, self.plan, frames, self.encoder, training)

    __call__ = forward


def run_sequence(model: RecurrentModel, plan: SequencePlan, frames, encoder: Encoder,
                 training: bool = False) -> Tensor:
    """Slice [B,T,H,W] frames into M stacks, encode, and unroll the recurrent predictor.

    Inference applies ReLU to the readout; training leaves it linear.
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if data.ndim != 4:
        raise ShapeError(f"frames must be [B,T,H,W], got {data.shape}")
    if data.shape[1] != plan.total_frames:
        raise ShapeError(
            f"plan {plan.label} (W={plan.W}) expects {plan.total_frames} frames per sample, got {data.shape[1]}")
    bsz = data.shape[0]
    stacks = [data[:, s:s + plan.N] for s in plan.starts()]
    if plan.M == 1:
        latents = [encoder(Tensor(stacks[0]))]
    else:
        # one encoder pass over all stacks; per-sample ops keep this equal to M separate passes
        z = encoder(Tensor(np.concatenate(stacks, axis=0)))
        latents = [z[m * bsz:(m + 1) * bsz] for m in range(plan.M)]
    cell = model.predictor
    state = cell.initial_state(bsz)
    for u in latents:
        state = cell.step(state, u, 1.0)
    out = cell.readout(state)
    return out if training else out.relu()


def default_hidden(n_out: int) -> int:
    """Hidden size used for 9, 14 and 27 outputs; other counts interpolate."""
    table = {9: 16, 14: 24, 27: 32}
    if n_out in table:
        return table[n_out]
    return 16 if n_out < 9 else (24 if n_out < 14 else 32)


def build_model(kind: str, n_out: int, plan: SequencePlan = SequencePlan(), *, hidden: int | None = None,
                latent: int = 32, encoder_channels: Sequence[int] = (16, 32, 48, 64), seed: int = 0,
                unfold_steps: int = 6, image_size: int = 50) -> Module:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    init_seq, wiring_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(init_seq)
    if kind == "convnet":
        if plan.M != 1:
            raise ValueError("convnet takes a single frame stack (M=1)")
        return ConvNet(plan.N, n_out, rng, image_size)
    hidden = hidden or default_hidden(n_out)
    encoder = Encoder(plan.N, latent, encoder_channels, image_size, rng)
    if kind == "lstm":
        predictor = LstmPredictor(latent, hidden, n_out, rng)
    else:
        spec = WiringSpec.for_hidden(latent, hidden, n_out)
        wiring = build_ncp(spec, int(wiring_seq.generate_state(1)[0]))
        predictor = LtcCell(wiring, rng, unfold_steps=unfold_steps) if kind == "ltc" else WiredCfcCell(wiring, rng)
    return RecurrentModel(kind, plan, encoder, predictor)


__all__ = ["SequencePlan", "ConvNet", "RecurrentModel", "LstmPredictor", "run_sequence", "build_model",
           "default_hidden", "count_params", "MODEL_KINDS", "DISPLAY_NAMES"]
