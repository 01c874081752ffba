"""Neural building blocks: dense, conv2d, layer norm, pooling, encoder, LSTM cell."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Sequence

import numpy as np
import scipy.fft as sfft

from .tensor import ShapeError, Tensor, record

# Kernels at least this wide use the FFT path.
FFT_MIN_KERNEL = 7
# Samples processed per im2col chunk; bounds peak memory of the column buffer.
IM2COL_CHUNK = 16


class Module:
    """Container that discovers parameters from its attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


def count_params(model: Module) -> int:
    """Number of scalar learnables."""
    return int(sum(p.size for p in model.parameters()))


# -- initializers ------------------------------------------------------------
def xavier_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


# -- dense -------------------------------------------------------------------
class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str = "none", rng: np.random.Generator | None = None):
        if activation not in ("none", "relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.weight = param(xavier_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = param(np.zeros(n_out))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"dense expects {self.weight.shape[0]} input features, got {x.shape}")
        y = x @ self.weight + self.bias
        if self.activation == "relu":
            return y.relu()
        if self.activation == "tanh":
            return y.tanh()
        return y


# -- convolution ---------------------------------------------------------------
def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B, C*k*k, oh*ow], filled one kernel offset at a time."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * k * k, oh * ow)


def _conv_direct(x: Tensor, w: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    xd, wd = x.data, w.data
    bsz, cin, h, wdt = xd.shape
    cout, _, k, _ = wd.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wdt + 2 * padding - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    w2 = wd.reshape(cout, cin * k * k)
    out = np.empty((bsz, cout, oh * ow))
    for s in range(0, bsz, IM2COL_CHUNK):
        cols = _im2col(xp[s:s + IM2COL_CHUNK], k, stride, oh, ow)
        # per-sample GEMM keeps each sample's result independent of the batch
        np.matmul(w2, cols, out=out[s:s + IM2COL_CHUNK])
    out += bias.data[None, :, None]
    out = out.reshape(bsz, cout, oh, ow)

    def fn(g):
        g3 = g.reshape(bsz, cout, oh * ow)
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        gw = np.zeros_like(w2) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for s in range(0, bsz, IM2COL_CHUNK):
            gs = g3[s:s + IM2COL_CHUNK]
            if gw is not None:
                cols = _im2col(xp[s:s + IM2COL_CHUNK], k, stride, oh, ow)
                gw += np.matmul(gs, cols.transpose(0, 2, 1)).sum(axis=0)
            if x.requires_grad:
                gcols = np.matmul(w2.T, gs).reshape(-1, cin, k, k, oh, ow)
                blk = gxp[s:s + IM2COL_CHUNK]
                for i in range(k):
                    for j in range(k):
                        blk[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
        if x.requires_grad:
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return gx, (gw.reshape(wd.shape) if gw is not None else None), gb

    return record(out, (x, w, bias), fn, "conv2d")


def _shift_buffer(xd: np.ndarray, padding: int, k: int) -> tuple[np.ndarray, int, int]:
    """Zero-padded images flattened per channel, with k-1 trailing slack."""
    b, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    buf = np.zeros((b, c, hp * wp + k - 1))
    buf[:, :, : hp * wp].reshape(b, c, hp, wp)[:, :, padding : padding + h, padding : padding + w] = xd
    return buf, hp, wp


def _conv_shift(x: Tensor, w: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 correlation as k*k GEMMs over shifted flat views.

    With images flattened row-major over the padded width, the window offset
    (i, j) is a contiguous slice starting at i*Wp + j; output columns past the
    valid width are discarded.  One GEMM per sample and offset keeps results
    independent of the batch.
    """
    xd, wd = x.data, w.data
    bsz, cin, h, wdt = xd.shape
    cout, _, k, _ = wd.shape
    buf, hp, wp = _shift_buffer(xd, padding, k)
    oh, ow = hp - k + 1, wp - k + 1
    span = oh * wp
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    taps = [np.ascontiguousarray(wd[:, :, i, j]) for i in range(k) for j in range(k)]
    full = np.zeros((bsz, cout, span))
    tmp = np.empty((cout, span))
    for b in range(bsz):
        acc = full[b]
        for tap, off in zip(taps, offsets):
            np.matmul(tap, buf[b, :, off : off + span], out=tmp)
            acc += tmp
    out = full.reshape(bsz, cout, oh, wp)[:, :, :, :ow] + bias.data[None, :, None, None]
    del buf, full

    def fn(g):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gfull = np.zeros((bsz, cout, oh, wp))
        gfull[:, :, :, :ow] = g
        gfull = gfull.reshape(bsz, cout, span)
        gw = gx = None
        bufb, _, _ = _shift_buffer(xd, padding, k)
        if w.requires_grad:
            gtaps = np.zeros((k * k, cout, cin))
            for b in range(bsz):
                gb_ = gfull[b]
                for t, off in enumerate(offsets):
                    gtaps[t] += gb_ @ bufb[b, :, off : off + span].T
            gw = gtaps.reshape(k, k, cout, cin).transpose(2, 3, 0, 1)
        if x.requires_grad:
            gbuf = np.zeros_like(bufb)
            tmp_x = np.empty((cin, span))
            taps_t = [np.ascontiguousarray(t.T) for t in taps]
            for b in range(bsz):
                gb_ = gfull[b]
                dst = gbuf[b]
                for tap_t, off in zip(taps_t, offsets):
                    np.matmul(tap_t, gb_, out=tmp_x)
                    dst[:, off : off + span] += tmp_x
            gxp = gbuf[:, :, : hp * wp].reshape(bsz, cin, hp, wp)
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt]
        return gx, gw, gb

    return record(out, (x, w, bias), fn, "conv2d_shift")


def _conv_fft(x: Tensor, w: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 cross-correlation through the frequency domain.

    Transform size equals the padded input size: every valid output, weight
    gradient and input gradient index stays clear of circular wrap-around.
    """
    xd, wd = x.data, w.data
    bsz, cin, h, wdt = xd.shape
    cout, _, k, _ = wd.shape
    hp, wp = h + 2 * padding, wdt + 2 * padding
    oh, ow = hp - k + 1, wp - k + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    size = (hp, wp)
    xf = sfft.rfft2(xp, s=size)  # [B,Cin,hp,F2]
    wf = sfft.rfft2(wd, s=size)  # [Cout,Cin,hp,F2]
    nf = xf.shape[2] * xf.shape[3]
    xt = xf.reshape(bsz, cin, nf).transpose(2, 0, 1)  # [F,B,Cin]
    wt = wf.reshape(cout, cin, nf).transpose(2, 1, 0)  # [F,Cin,Cout]
    yt = np.matmul(xt, np.conj(wt))  # [F,B,Cout]
    yf = yt.transpose(1, 2, 0).reshape(bsz, cout, xf.shape[2], xf.shape[3])
    out = sfft.irfft2(yf, s=size)[:, :, :oh, :ow] + bias.data[None, :, None, None]

    def fn(g):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gf = sfft.rfft2(g, s=size)
        gt = gf.reshape(bsz, cout, nf).transpose(2, 0, 1)  # [F,B,Cout]
        gw = gx = None
        if w.requires_grad:
            # corr(g, x): conj(G) X summed over the batch
            gwt = np.matmul(np.conj(gt).transpose(0, 2, 1), xt)  # [F,Cout,Cin]
            gwf = gwt.transpose(1, 2, 0).reshape(cout, cin, xf.shape[2], xf.shape[3])
            gw = sfft.irfft2(gwf, s=size)[:, :, :k, :k]
        if x.requires_grad:
            # full convolution of g with w
            gxt = np.matmul(gt, wt.transpose(0, 2, 1))  # [F,B,Cin]
            gxf = gxt.transpose(1, 2, 0).reshape(bsz, cin, xf.shape[2], xf.shape[3])
            gxp = sfft.irfft2(gxf, s=size)
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return gx, gw, gb

    return record(out, (x, w, bias), fn, "conv2d_fft")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, method: str = "auto") -> Tensor:
    """Cross-correlation (no kernel flip) of ``x`` [B,C,H,W] with ``w`` [O,C,k,k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] input, got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape}")
    if method == "auto":
        if stride != 1:
            method = "direct"
        else:
            method = "fft" if k >= FFT_MIN_KERNEL else "shift"
    if method in ("fft", "shift") and stride != 1:
        raise ValueError(f"{method} convolution supports stride 1 only")
    if method == "fft":
        return _conv_fft(x, w, bias, padding)
    if method == "shift":
        return _conv_shift(x, w, bias, padding)
    if method != "direct":
        raise ValueError(f"unknown convolution method {method!r}")
    return _conv_direct(x, w, bias, stride, padding)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, method: str = "auto"):
        if stride < 1 or padding < 0:
            raise ValueError("stride must be positive and padding non-negative")
        rng = rng or np.random.default_rng(0)
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        self.kernels = param(xavier_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out))
        self.bias = param(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding
        self.method = method

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernels.shape[2]) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    return conv2d(x, layer.kernels, layer.bias, layer.stride, layer.padding, layer.method)


# -- normalization and pooling -------------------------------------------------
class LayerNorm(Module):
    """Normalizes each sample over (C,H,W); per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    axes = tuple(range(1, xd.ndim))
    n = int(np.prod(xd.shape[1:]))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, -1) + (1,) * (xd.ndim - 2)
    gd = gamma.data.reshape(shape)
    out = xhat * gd + beta.data.reshape(shape)
    red = (0,) + tuple(range(2, xd.ndim))

    def fn(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv / n * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gbeta

    return record(out, (x, gamma, beta), fn, "layer_norm")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    xd = x.data
    b, c, h, w = xd.shape
    oh, ow = h // size, w // size
    win = xd[:, :, : oh * size, : ow * size].reshape(b, c, oh, size, ow, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros((b, c, oh, ow, size * size))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * size, ow * size)
        gx = np.zeros_like(xd)
        gx[:, :, : oh * size, : ow * size] = gw
        return (gx,)

    return record(out, (x,), fn, "max_pool2d")


# -- encoder -------------------------------------------------------------------
class EncodingBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, pool: bool, rng: np.random.Generator):
        self.conv = Conv2d(in_ch, out_ch, 3, stride=1, padding=1, rng=rng)
        self.norm = LayerNorm(out_ch)
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x)).relu()
        return max_pool2d(y, 2) if self.pool else y


class Encoder(Module):
    """Four conv blocks, flatten, dense projection to the latent size."""

    def __init__(self, in_frames: int, latent: int = 32, channels: Sequence[int] = (16, 32, 48, 64),
                 image_size: int = 50, rng: np.random.Generator | None = None):
        if len(channels) != 4:
            raise ValueError("encoder needs exactly four block widths")
        rng = rng or np.random.default_rng(0)
        self.in_frames = in_frames
        self.image_size = image_size
        self.blocks = []
        prev, size = in_frames, image_size
        for i, ch in enumerate(channels):
            pool = i < 3
            self.blocks.append(EncodingBlock(prev, ch, pool, rng))
            prev = ch
            if pool:
                size //= 2
        self.head = Dense(prev * size * size, latent, rng=rng)
        self.latent = latent

    def __call__(self, frames: Tensor) -> Tensor:
        return encoder_forward(self, frames)


def encoder_forward(enc: Encoder, frames: Tensor) -> Tensor:
    if frames.ndim != 4 or frames.shape[2:] != (enc.image_size, enc.image_size):
        raise ShapeError(f"encoder expects [B,{enc.in_frames},{enc.image_size},{enc.image_size}], got {frames.shape}")
    if frames.shape[1] != enc.in_frames:
        raise ShapeError(f"encoder configured for {enc.in_frames} frames, got {frames.shape[1]}")
    h = frames
    for block in enc.blocks:
        h = block(h)
    return enc.head(h.reshape(h.shape[0], -1))


# -- LSTM ----------------------------------------------------------------------
class LstmCell(Module):
    """Gate order i, f, g, o over [input | hidden]."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.w_input = param(xavier_uniform(rng, (n_in, 4 * hidden), n_in, 4 * hidden))
        self.w_hidden = param(np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1))
        self.bias = param(np.zeros(4 * hidden))
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, h, c)


def lstm_step(cell: LstmCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    hs = cell.hidden
    if x.shape[-1] != cell.w_input.shape[0] or h.shape[-1] != hs or c.shape != h.shape:
        raise ShapeError(f"lstm_step shapes inconsistent: x={x.shape} h={h.shape} c={c.shape}")
    z = x @ cell.w_input + h @ cell.w_hidden + cell.bias
    i = z[:, :hs].sigmoid()
    f = z[:, hs:2 * hs].sigmoid()
    g = z[:, 2 * hs:3 * hs].tanh()
    o = z[:, 3 * hs:].sigmoid()
    c_new = f * c + i * g
    h_new = o * c_new.tanh()
    return h_new, c_new


__all__ = [
    "Module", "Dense", "Conv2d", "LayerNorm", "Encoder", "EncodingBlock", "LstmCell",
    "conv2d", "conv2d_forward", "encoder_forward", "layer_norm", "lstm_step", "max_pool2d",
    "count_params", "xavier_uniform", "orthogonal",
]
