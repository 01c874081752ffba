"""Liquid time-constant (LTC) and closed-form continuous-time (CfC) cells."""
from __future__ import annotations

import numpy as np

from .layers import Module, orthogonal, param, xavier_uniform
from .tensor import ShapeError, Tensor, concat
from .wiring import Wiring

# initial synaptic conductance range
CONDUCTANCE_INIT = (1.0, 3.0)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class LtcCell(Module):
    """LTC neurons over an NCP wiring, integrated with the fused semi-implicit step.

    Each neuron j follows

        dx_j/dt = -(x_j - bias_j) / tau_j + sum_i s_ij * w_ij * (A_ij - x_j)

    with s_ij = sigmoid(slope_ij * (pre_i - offset_ij)) over sensory inputs and
    presynaptic neurons.  Conductances w are kept non-negative through a
    softplus; tau through an exponential.
    """

    def __init__(self, wiring: Wiring, rng: np.random.Generator | None = None,
                 unfold_steps: int = 6, dt: float = 1.0):
        if unfold_steps < 1:
            raise ValueError("unfold_steps must be >= 1")
        if dt <= 0:
            raise ValueError("dt must be positive")
        rng = rng or np.random.default_rng(0)
        self._wiring = wiring
        s_cnt, units = wiring.sensory_adjacency.shape
        self._sensory_mask = (wiring.sensory_adjacency != 0).astype(np.float64)
        self._mask = (wiring.adjacency != 0).astype(np.float64)
        self.unfold_steps = unfold_steps
        self.dt = float(dt)
        self.n_out = wiring.spec.motor_count

        self.input_w = param(np.ones(s_cnt))
        self.input_b = param(np.zeros(s_cnt))
        self.sensory_w = param(_inv_softplus(rng.uniform(*CONDUCTANCE_INIT, (s_cnt, units))))
        self.sensory_mu = param(rng.uniform(-0.5, 0.5, (s_cnt, units)))
        self.sensory_slope = param(rng.uniform(0.5, 1.5, (s_cnt, units)))
        self.sensory_erev = param(wiring.sensory_adjacency.astype(np.float64))
        self.w = param(_inv_softplus(rng.uniform(*CONDUCTANCE_INIT, (units, units))))
        self.mu = param(rng.uniform(0.3, 0.8, (units, units)))
        self.slope = param(rng.uniform(3.0, 8.0, (units, units)))
        self.erev = param(wiring.adjacency.astype(np.float64))
        self.log_tau = param(np.log(rng.uniform(0.5, 2.0, units)))
        self.bias = param(rng.uniform(-0.2, 0.2, units))
        self.output_w = param(np.ones(self.n_out))
        self.output_b = param(np.zeros(self.n_out))

    @classmethod
    def from_arrays(cls, wiring: Wiring, *, tau, bias, w, mu, slope, erev,
                    sensory_w, sensory_mu, sensory_slope, sensory_erev,
                    unfold_steps: int = 1, dt: float = 1.0) -> "LtcCell":
        """Build a cell from explicit (positive-domain) parameter values."""
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau <= 0):
            raise ValueError("time constants must be strictly positive")
        if np.any(np.asarray(w) < 0) or np.any(np.asarray(sensory_w) < 0):
            raise ValueError("synaptic weights must be non-negative")
        cell = cls(wiring, unfold_steps=unfold_steps, dt=dt)
        cell.log_tau.data = np.log(tau)
        cell.bias.data = np.asarray(bias, dtype=np.float64).copy()
        cell.w.data = _inv_softplus(np.maximum(w, 1e-300))
        cell.mu.data = np.asarray(mu, dtype=np.float64).copy()
        cell.slope.data = np.asarray(slope, dtype=np.float64).copy()
        cell.erev.data = np.asarray(erev, dtype=np.float64).copy()
        cell.sensory_w.data = _inv_softplus(np.maximum(sensory_w, 1e-300))
        cell.sensory_mu.data = np.asarray(sensory_mu, dtype=np.float64).copy()
        cell.sensory_slope.data = np.asarray(sensory_slope, dtype=np.float64).copy()
        cell.sensory_erev.data = np.asarray(sensory_erev, dtype=np.float64).copy()
        return cell

    @property
    def units(self) -> int:
        return self._mask.shape[0]

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.units)))

    def tau(self) -> np.ndarray:
        return np.exp(self.log_tau.data)

    def _synapses(self, pre: Tensor, mu, slope, w_eff, erev) -> tuple[Tensor, Tensor]:
        b, p = pre.shape
        act = (slope * (pre.reshape(b, p, 1) - mu)).sigmoid()
        drive = act * w_eff
        return (drive * erev).sum(axis=1), drive.sum(axis=1)

    def sensory_terms(self, u: Tensor) -> tuple[Tensor, Tensor]:
        """Input-dependent numerator/denominator terms, constant across unfolds."""
        mapped = u * self.input_w + self.input_b
        w_eff = self.sensory_w.softplus() * self._sensory_mask
        return self._synapses(mapped, self.sensory_mu, self.sensory_slope, w_eff, self.sensory_erev)

    def step(self, x: Tensor, u: Tensor, elapsed: float = 1.0) -> Tensor:
        """Advance the state across one input frame (``unfold_steps`` fused updates)."""
        if x.shape[-1] != self.units or u.shape[-1] != self._sensory_mask.shape[0]:
            raise ShapeError(f"ltc step shapes: state {x.shape}, input {u.shape}")
        sens = self.sensory_terms(u)
        h = self.dt * elapsed / self.unfold_steps
        w_eff = self.w.softplus() * self._mask
        inv_tau = (-self.log_tau).exp()
        for _ in range(self.unfold_steps):
            x = ltc_fused_step(self, x, sens, h, w_eff, inv_tau)
        return x

    def readout(self, x: Tensor) -> Tensor:
        return x[:, self.units - self.n_out:] * self.output_w + self.output_b


def ltc_fused_step(cell: LtcCell, x: Tensor, sensory, h: float,
                   w_eff: Tensor | None = None, inv_tau: Tensor | None = None) -> Tensor:
    """One semi-implicit update of size ``h``.

    x' = (x + h*sum(s*w*A) + h*bias/tau) / (1 + h*(1/tau + sum(s*w)))

    ``sensory`` is either the raw input tensor or the precomputed
    ``sensory_terms`` pair.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if isinstance(sensory, Tensor):
        sensory = cell.sensory_terms(sensory)
    s_num, s_den = sensory
    if w_eff is None:
        w_eff = cell.w.softplus() * cell._mask
    if inv_tau is None:
        inv_tau = (-cell.log_tau).exp()
    n_num, n_den = cell._synapses(x, cell.mu, cell.slope, w_eff, cell.erev)
    num = x + (s_num + n_num + cell.bias * inv_tau) * h
    den = (inv_tau + s_den + n_den) * h + 1.0
    return num / den


class CfcLayer(Module):
    """Closed-form continuous-time update for one group of neurons.

    x' = gate * g + (1 - gate) * h, gate = sigmoid(-f * scale * t), where f is
    affine and g, h are tanh-affine in [input | state].  Optional masks keep
    only wired synapses.
    """

    def __init__(self, n_in: int, units: int, rng: np.random.Generator | None = None,
                 input_mask: np.ndarray | None = None, recurrent_mask: np.ndarray | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_in = n_in
        self.units = units
        in_mask = np.ones((n_in, units)) if input_mask is None else (np.asarray(input_mask) != 0).astype(np.float64)
        rec_mask = np.ones((units, units)) if recurrent_mask is None else (np.asarray(recurrent_mask) != 0).astype(np.float64)
        self._recurrent = bool(rec_mask.any())
        self._mask = np.concatenate([in_mask, rec_mask], axis=0) if self._recurrent else in_mask

        def head():
            w = xavier_uniform(rng, (n_in, units), n_in, units)
            if self._recurrent:
                w = np.concatenate([w, orthogonal(rng, units, units)], axis=0)
            return param(w), param(np.zeros(units))

        self.w_f, self.b_f = head()
        self.w_g, self.b_g = head()
        self.w_h, self.b_h = head()
        self.time_scale = param(np.ones(units))

    def heads(self, x: Tensor, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if u.shape[-1] != self.n_in or x.shape[-1] != self.units:
            raise ShapeError(f"cfc layer expects input {self.n_in} and state {self.units}, got {u.shape}, {x.shape}")
        z = concat([u, x], axis=1) if self._recurrent else u
        f = z @ (self.w_f * self._mask) + self.b_f
        g = (z @ (self.w_g * self._mask) + self.b_g).tanh()
        hh = (z @ (self.w_h * self._mask) + self.b_h).tanh()
        return f, g, hh

    def step(self, x: Tensor, u: Tensor, t: float = 1.0, return_heads: bool = False):
        return cfc_step(self, x, u, t, return_heads)


def cfc_step(layer: CfcLayer, x: Tensor, u: Tensor, t: float = 1.0, return_heads: bool = False):
    if t < 0:
        raise ValueError("elapsed time must be non-negative")
    f, g, hh = layer.heads(x, u)
    gate = (f * layer.time_scale * (-float(t))).sigmoid()
    out = gate * g + (1.0 - gate) * hh
    return (out, g, hh) if return_heads else out


class WiredCfcCell(Module):
    """CfC layers chained inter -> command -> motor inside every step."""

    def __init__(self, wiring: Wiring, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self._wiring = wiring
        inter, cmd, motor = wiring.layer_slices()
        self._slices = [inter, cmd, motor]
        adj = wiring.adjacency
        s_cnt = wiring.sensory_adjacency.shape[0]
        self.layers = [
            CfcLayer(s_cnt, inter.stop - inter.start, rng, wiring.sensory_adjacency[:, inter], adj[inter, inter]),
            CfcLayer(inter.stop - inter.start, cmd.stop - cmd.start, rng, adj[inter, cmd], adj[cmd, cmd]),
            CfcLayer(cmd.stop - cmd.start, motor.stop - motor.start, rng, adj[cmd, motor], adj[motor, motor]),
        ]
        self.n_out = wiring.spec.motor_count
        self.output_w = param(np.ones(self.n_out))
        self.output_b = param(np.zeros(self.n_out))

    @property
    def units(self) -> int:
        return self._wiring.units

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.units)))

    def step(self, x: Tensor, u: Tensor, elapsed: float = 1.0) -> Tensor:
        inp = u
        parts = []
        for layer, sl in zip(self.layers, self._slices):
            inp = layer.step(x[:, sl], inp, elapsed)
            parts.append(inp)
        return concat(parts, axis=1)

    def readout(self, x: Tensor) -> Tensor:
        return x[:, self.units - self.n_out:] * self.output_w + self.output_b
