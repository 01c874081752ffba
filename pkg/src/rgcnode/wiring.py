"""Sparse four-layer NCP wiring: sensory -> inter -> command (recurrent) -> motor."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


class WiringError(ValueError):
    pass


@dataclass(frozen=True)
class WiringSpec:
    sensory_count: int
    inter_count: int
    command_count: int
    motor_count: int
    sensory_fanout: int | None = None
    inter_fanout: int | None = None
    recurrent_command_synapses: int | None = None
    motor_fanin: int | None = None

    @classmethod
    def for_hidden(cls, sensory: int, hidden: int, motor: int, **kw) -> "WiringSpec":
        """Split ``hidden`` into inter = ceil(0.6*hidden) and command = the rest."""
        inter = math.ceil(0.6 * hidden)
        command = hidden - inter
        if command < 1:
            raise WiringError(f"hidden size {hidden} too small for an inter/command split")
        return cls(sensory, inter, command, motor, **kw)

    def resolved(self) -> "WiringSpec":
        """Fill unset fanouts with defaults: about half of the target layer."""
        return WiringSpec(
            self.sensory_count, self.inter_count, self.command_count, self.motor_count,
            self.sensory_fanout or max(1, math.ceil(0.5 * self.inter_count)),
            self.inter_fanout or max(1, math.ceil(0.5 * self.command_count)),
            self.recurrent_command_synapses if self.recurrent_command_synapses is not None
            else max(1, self.command_count),
            self.motor_fanin or max(1, math.ceil(0.5 * self.command_count)),
        )


@dataclass
class Wiring:
    """Neuron ids: inter first, then command, then motor (the last ``motor_count``)."""

    spec: WiringSpec
    adjacency: np.ndarray          # [units, units], entries in {-1, 0, +1}
    sensory_adjacency: np.ndarray  # [sensory, units]

    @property
    def units(self) -> int:
        return self.adjacency.shape[0]

    def layer_slices(self) -> list[slice]:
        s = self.spec
        a, b = s.inter_count, s.inter_count + s.command_count
        return [slice(0, a), slice(a, b), slice(b, b + s.motor_count)]

    def synapses(self) -> list[tuple[str, int, int, int]]:
        """(source kind, source id, target id, polarity) for every edge."""
        out = []
        for i, j in zip(*np.nonzero(self.sensory_adjacency)):
            out.append(("sensory", int(i), int(j), int(self.sensory_adjacency[i, j])))
        for i, j in zip(*np.nonzero(self.adjacency)):
            out.append(("neuron", int(i), int(j), int(self.adjacency[i, j])))
        return out

    @property
    def synapse_count(self) -> int:
        return int(np.count_nonzero(self.adjacency) + np.count_nonzero(self.sensory_adjacency))

    def to_dict(self) -> dict:
        s = self.spec
        inter, cmd, motor = self.layer_slices()
        neurons = [{"id": f"s{i}", "layer": "sensory"} for i in range(s.sensory_count)]
        for name, sl in (("inter", inter), ("command", cmd), ("motor", motor)):
            neurons += [{"id": f"n{i}", "layer": name} for i in range(sl.start, sl.stop)]
        edges = [{"source": ("s" if kind == "sensory" else "n") + str(src), "target": f"n{dst}", "polarity": pol}
                 for kind, src, dst, pol in self.synapses()]
        return {"spec": asdict(s), "neurons": neurons, "edges": edges}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Wiring":
        spec = WiringSpec(**data["spec"])
        units = spec.inter_count + spec.command_count + spec.motor_count
        adj = np.zeros((units, units), dtype=np.int64)
        sens = np.zeros((spec.sensory_count, units), dtype=np.int64)
        for e in data["edges"]:
            dst = int(e["target"][1:])
            if e["source"].startswith("s"):
                sens[int(e["source"][1:]), dst] = e["polarity"]
            else:
                adj[int(e["source"][1:]), dst] = e["polarity"]
        return cls(spec, adj, sens)


def _connect(rng: np.random.Generator, n_src: int, n_dst: int, fanout: int) -> list[tuple[int, int]]:
    """Each source gets exactly ``fanout`` distinct targets; every target is hit at least once.

    Uncovered targets are handed out first, so coverage is guaranteed whenever
    ``n_src * fanout >= n_dst``.
    """
    if fanout > n_dst:
        raise WiringError(f"fanout {fanout} exceeds target layer size {n_dst}")
    if n_src * fanout < n_dst:
        raise WiringError(f"{n_src} sources with fanout {fanout} cannot cover {n_dst} targets")
    uncovered = list(rng.permutation(n_dst))
    edges = []
    for src in rng.permutation(n_src):
        take = uncovered[:fanout]
        del uncovered[:fanout]
        rest = np.setdiff1d(np.arange(n_dst), take)
        extra = rng.choice(rest, size=fanout - len(take), replace=False) if fanout > len(take) else []
        for dst in list(take) + list(extra):
            edges.append((int(src), int(dst)))
    return edges


def build_ncp(spec: WiringSpec, seed: int = 0) -> Wiring:
    """Draw a random NCP wiring; deterministic given ``seed``."""
    s = spec.resolved()
    for name in ("sensory_count", "inter_count", "command_count", "motor_count"):
        if getattr(s, name) < 1:
            raise WiringError(f"{name} must be positive")
    rng = np.random.default_rng(seed)
    inter0, cmd0 = 0, s.inter_count
    motor0 = s.inter_count + s.command_count
    units = motor0 + s.motor_count
    adj = np.zeros((units, units), dtype=np.int64)
    sens = np.zeros((s.sensory_count, units), dtype=np.int64)

    def polarity() -> int:
        return int(rng.choice([-1, 1]))

    for src, dst in _connect(rng, s.sensory_count, s.inter_count, s.sensory_fanout):
        sens[src, inter0 + dst] = polarity()
    for src, dst in _connect(rng, s.inter_count, s.command_count, s.inter_fanout):
        adj[inter0 + src, cmd0 + dst] = polarity()
    if s.recurrent_command_synapses > s.command_count ** 2:
        raise WiringError("more recurrent command synapses than command pairs")
    pairs = rng.choice(s.command_count ** 2, size=s.recurrent_command_synapses, replace=False)
    for p in sorted(int(p) for p in pairs):
        adj[cmd0 + p // s.command_count, cmd0 + p % s.command_count] = polarity()
    if s.motor_fanin > s.command_count:
        raise WiringError(f"motor fanin {s.motor_fanin} exceeds command layer size {s.command_count}")
    # fan-in per motor; commands without an outgoing edge are preferred
    unused = list(rng.permutation(s.command_count))
    for m in range(s.motor_count):
        take = unused[: s.motor_fanin]
        del unused[: s.motor_fanin]
        rest = np.setdiff1d(np.arange(s.command_count), take)
        extra = rng.choice(rest, size=s.motor_fanin - len(take), replace=False) if s.motor_fanin > len(take) else []
        for c in list(take) + list(extra):
            adj[cmd0 + int(c), motor0 + m] = polarity()
    return Wiring(s, adj, sens)


def check_wiring(w: Wiring) -> None:
    """Raise if the wiring breaks the layered-flow or reachability rules."""
    inter, cmd, motor = w.layer_slices()
    allowed = np.zeros_like(w.adjacency, dtype=bool)
    allowed[inter, cmd] = True
    allowed[cmd, cmd] = True
    allowed[cmd, motor] = True
    if np.any((w.adjacency != 0) & ~allowed):
        raise WiringError("edge outside inter->command, command->command, command->motor")
    if np.any(w.sensory_adjacency[:, cmd.start:] != 0):
        raise WiringError("sensory edge into a non-inter neuron")
    incoming = (w.adjacency != 0).sum(axis=0) + (w.sensory_adjacency != 0).sum(axis=0)
    if np.any(incoming == 0):
        raise WiringError("neuron without incoming synapse")
    reach = (w.sensory_adjacency != 0).any(axis=0)
    for _ in range(w.units):
        new = reach | ((w.adjacency[reach] != 0).any(axis=0) if reach.any() else reach)
        if np.array_equal(new, reach):
            break
        reach = new
    if not reach[motor].all():
        raise WiringError("motor neuron unreachable from sensory layer")
