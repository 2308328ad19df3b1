"""Discrete-time integrate-and-fire simulation with threshold subtraction.

Each quantum (1 ms), every neuron updates as::

    u <- u * (1 - 1/tau) + sum of weights of synapses receiving a spike
    if u >= u_thr: u <- u - u_thr, fire

Every synapse has a delay of one quantum, except that spikes of externally
driven nodes (inputs, clocks) reach their targets in the quantum they are
emitted. Neurons in a shared WTA group are mutually exclusive within one
quantum: only the most depolarized candidate (lowest id on ties) fires.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .preprocess import PATCH_SIDE, ImageError, as_gray, round_half_away

PRESENTATION_MS = 10
SILENCE_MS = 10
PERIOD_MS = PRESENTATION_MS + SILENCE_MS
MAX_SPIKES = 10

# Roles whose spikes come from outside the membrane dynamics.
EXTERNAL_ROLES = frozenset({"input", "clock"})


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronSpec:
    u_thr: float = 1.0
    tau: float = 10.0
    role: str = "neuron"

    def __post_init__(self):
        if not self.tau >= 1:
            raise NetworkError(f"tau must be >= 1, got {self.tau}")
        if not self.u_thr > 0:
            raise NetworkError(f"u_thr must be > 0, got {self.u_thr}")


def step_neuron(u: float, spec: NeuronSpec, input_sum: float) -> tuple[float, bool]:
    """Scalar form of the update rule; returns (new u, fired)."""
    u = u * (1.0 - 1.0 / spec.tau) + input_sum
    if u >= spec.u_thr:
        return u - spec.u_thr, True
    return u, False


# -- spike schedules ---------------------------------------------------------

@dataclass
class SpikeSchedule:
    """Timestamped input events ``(time_ms, node)`` sorted by time then node."""

    events: list[tuple[int, int]] = field(default_factory=list)
    n_nodes: int = PATCH_SIDE * PATCH_SIDE
    presentation_ms: int = PRESENTATION_MS
    silence_ms: int = SILENCE_MS

    def counts(self) -> np.ndarray:
        out = np.zeros(self.n_nodes, dtype=np.int64)
        for _, node in self.events:
            out[node] += 1
        return out

    def raster(self, duration: int) -> np.ndarray:
        r = np.zeros((duration, self.n_nodes), dtype=bool)
        for t, node in self.events:
            if not 0 <= t < duration:
                raise NetworkError(f"event at t={t} outside duration {duration}")
            r[t, node] = True
        return r


def spike_counts(patch, levels: int = MAX_SPIKES) -> np.ndarray:
    """Linear projection of intensities [0, 255] onto spike counts [0, levels]."""
    p = np.asarray(patch, dtype=np.float64)
    return round_half_away(p * levels / 255.0).astype(np.int64)


def spike_offsets(n: int, window: int = PRESENTATION_MS) -> list[int]:
    """Quanta used by ``n`` evenly spaced spikes in a window."""
    return [(m * window) // n for m in range(n)]


def _offset_table(window: int = PRESENTATION_MS) -> np.ndarray:
    tab = np.zeros((MAX_SPIKES + 1, window), dtype=bool)
    for n in range(1, MAX_SPIKES + 1):
        tab[n, spike_offsets(n, window)] = True
    return tab


_OFFSETS = _offset_table()


def _check_patch(patch) -> np.ndarray:
    p = as_gray(patch)
    if p.shape != (PATCH_SIDE, PATCH_SIDE):
        raise ImageError(f"patch must be {PATCH_SIDE}x{PATCH_SIDE}, got {p.shape}")
    return p


def encode_rate(patch) -> SpikeSchedule:
    p = _check_patch(patch)
    counts = spike_counts(p).ravel()
    events = [(t, node) for t in range(PRESENTATION_MS)
              for node in np.flatnonzero(_OFFSETS[counts, t]).tolist()]
    return SpikeSchedule(events, n_nodes=counts.size)


def encode_batch(patches, periods: int = 1) -> np.ndarray:
    """Rate-code a stack of patches into a ``(time, node, batch)`` boolean raster.

    The raster spans one 20 ms period (presentation followed by silence).
    """
    arr = np.asarray(patches)
    if arr.ndim == 2:
        arr = arr[None]
    for p in arr:
        _check_patch(p)
    counts = spike_counts(arr).reshape(arr.shape[0], -1)  # (B, N)
    r = np.zeros((PERIOD_MS * periods, counts.shape[1], counts.shape[0]), dtype=bool)
    r[:PRESENTATION_MS] = np.transpose(_OFFSETS[counts], (2, 1, 0))
    return r


# -- network -----------------------------------------------------------------

class NetworkBuilder:
    """Accumulates neuron groups and synapses; :meth:`build` freezes them."""

    def __init__(self):
        self.roles: list[str] = []
        self.u_thr: list[float] = []
        self.tau: list[float] = []
        self.group: list[int] = []
        self.clock_phase: list[int] = []
        self._pre: list[np.ndarray] = []
        self._post: list[np.ndarray] = []
        self._w: list[np.ndarray] = []
        self._kind: list[np.ndarray] = []
        self._self_loops_ok: set[int] = set()
        self._n_groups = 0

    @property
    def n(self) -> int:
        return len(self.roles)

    def add_neurons(self, count: int, spec: NeuronSpec = NeuronSpec(), *, group: int = -1,
                    clock_phase: int = -1) -> np.ndarray:
        start = self.n
        self.roles += [spec.role] * count
        self.u_thr += [spec.u_thr] * count
        self.tau += [spec.tau] * count
        self.group += [group] * count
        self.clock_phase += [clock_phase] * count
        return np.arange(start, start + count)

    def add_inputs(self, count: int, role: str = "input") -> np.ndarray:
        return self.add_neurons(count, NeuronSpec(1.0, 1.0, role))

    def add_clock(self, phase: int, role: str = "clock") -> int:
        """A node firing once per period at ``phase``."""
        return int(self.add_neurons(1, NeuronSpec(1.0, 1.0, "clock"), clock_phase=phase)[0])

    def new_group(self) -> int:
        self._n_groups += 1
        return self._n_groups - 1

    def connect(self, pre, post, weight, kind: str = "static", *, allow_self: bool = False) -> None:
        pre = np.atleast_1d(np.asarray(pre, dtype=np.int64))
        post = np.atleast_1d(np.asarray(post, dtype=np.int64))
        pre, post = np.broadcast_arrays(pre, post)
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), pre.shape)
        if allow_self:
            self._self_loops_ok.update(post[pre == post].tolist())
        self._pre.append(pre.ravel().copy())
        self._post.append(post.ravel().copy())
        self._w.append(w.ravel().copy())
        self._kind.append(np.full(pre.size, kind, dtype=object))

    def build(self) -> "Network":
        n = self.n
        pre = np.concatenate(self._pre) if self._pre else np.zeros(0, np.int64)
        post = np.concatenate(self._post) if self._post else np.zeros(0, np.int64)
        w = np.concatenate(self._w) if self._w else np.zeros(0)
        kind = np.concatenate(self._kind) if self._kind else np.zeros(0, dtype=object)
        bad = (pre < 0) | (pre >= n) | (post < 0) | (post >= n)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NetworkError(f"synapse {i} references missing neuron ({pre[i]} -> {post[i]})")
        roles = np.array(self.roles, dtype=object)
        ext = np.isin(roles, list(EXTERNAL_ROLES))
        if ext[post].any():
            i = int(np.flatnonzero(ext[post])[0])
            raise NetworkError(f"synapse {i} targets externally driven node {post[i]}")
        loops = pre == post
        if loops.any() and not set(pre[loops].tolist()) <= self._self_loops_ok:
            raise NetworkError("undeclared self-loop synapse")
        return Network(roles, np.array(self.u_thr), np.array(self.tau), np.array(self.group),
                       np.array(self.clock_phase), pre, post, w, kind)


@dataclass
class Network:
    roles: np.ndarray
    u_thr: np.ndarray
    tau: np.ndarray
    group: np.ndarray
    clock_phase: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    weight: np.ndarray
    kind: np.ndarray

    def __post_init__(self):
        self.external = np.isin(self.roles, list(EXTERNAL_ROLES))
        self.inputs = np.flatnonzero(self.roles == "input")
        self.clocks = np.flatnonzero(self.roles == "clock")
        # rows sum their synapses in ascending presynaptic id
        self.matrix = sp.csr_matrix((self.weight, (self.post, self.pre)), shape=(self.n, self.n))
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()

    @property
    def n(self) -> int:
        return len(self.roles)

    @property
    def n_synapses(self) -> int:
        return len(self.pre)

    def count(self, role: str) -> int:
        return int(np.sum(self.roles == role))

    def with_weights(self, weight: np.ndarray) -> "Network":
        return Network(self.roles, self.u_thr, self.tau, self.group, self.clock_phase,
                       self.pre, self.post, np.asarray(weight, dtype=np.float64), self.kind)

    def scaled(self, mask: np.ndarray, factor: float) -> "Network":
        w = self.weight.copy()
        w[mask] = w[mask] * factor
        return self.with_weights(w)

    def dump(self) -> str:
        """Versioned text description of neurons and synapses."""
        out = [f"SNN 1 {self.n} {self.n_synapses}"]
        for i in range(self.n):
            out.append(f"N {i} {self.roles[i]} {float(self.u_thr[i])!r} {float(self.tau[i])!r} "
                       f"{self.group[i]} {self.clock_phase[i]}")
        for s in range(self.n_synapses):
            out.append(f"S {self.pre[s]} {self.post[s]} {float(self.weight[s])!r} {self.kind[s]}")
        return "\n".join(out) + "\n"


class Simulator:
    """Stepwise, batched simulation of a :class:`Network`.

    State arrays have shape ``(n_nodes, batch)``; all batch columns are
    independent copies of the network.
    """

    def __init__(self, net: Network, batch: int = 1, matrix: sp.csr_matrix | None = None):
        self.net = net
        self.batch = batch
        self.matrix = net.matrix if matrix is None else matrix
        self.t = 0
        self.u = np.zeros((net.n, batch))
        self.fired = np.zeros((net.n, batch), dtype=bool)
        self.decay = (1.0 - 1.0 / net.tau)[:, None]
        self.thr = net.u_thr[:, None]
        self.internal = ~net.external
        self._groups = [np.flatnonzero(net.group == g) for g in np.unique(net.group) if g >= 0]

    def step(self, input_spikes: np.ndarray | None = None) -> np.ndarray:
        """Advance one quantum. ``input_spikes`` is ``(n_inputs, batch)`` bool."""
        net = self.net
        src = self.fired.astype(np.float64)
        src[net.external] = 0.0
        if input_spikes is not None and len(net.inputs):
            src[net.inputs] = input_spikes
        if len(net.clocks):
            src[net.clocks] = (self.t % PERIOD_MS == net.clock_phase[net.clocks])[:, None]
        drive = self.matrix @ src
        u = self.u * self.decay + drive
        fire = (u >= self.thr) & self.internal[:, None]
        for members in self._groups:
            cand = fire[members]
            if cand.sum() <= 0:
                continue
            multi = cand.sum(axis=0) > 1
            if multi.any():
                uu = np.where(cand, u[members], -np.inf)
                winner = np.argmax(uu, axis=0)  # first max = lowest id
                keep = np.zeros_like(cand)
                keep[winner, np.arange(self.batch)] = True
                cand = np.where(multi[None, :], keep & cand, cand)
                fire[members] = cand
        u = np.where(fire, u - self.thr, u)
        u[net.external] = 0.0
        fire = fire | (src.astype(bool) & net.external[:, None])
        self.u = u
        self.fired = fire
        self.t += 1
        return fire


@dataclass
class SpikeTrace:
    """Per-neuron spike times, as a sorted list of ``(time_ms, neuron_id)``."""

    events: list[tuple[int, int]]
    n_nodes: int
    duration: int
    potentials: np.ndarray | None = None

    def counts(self) -> np.ndarray:
        out = np.zeros(self.n_nodes, dtype=np.int64)
        for _, i in self.events:
            out[i] += 1
        return out

    def times(self, neuron: int) -> list[int]:
        return [t for t, i in self.events if i == neuron]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_ms", "neuron_id"])
            w.writerows(self.events)


def run_raster(net: Network, raster: np.ndarray, record: Sequence[int] | np.ndarray | None = None,
               record_potential: bool = False):
    """Simulate a batch. ``raster`` is ``(time, n_inputs, batch)`` bool.

    Returns a ``(time, len(record), batch)`` spike raster for the recorded
    nodes (all nodes by default), plus potentials if requested.
    """
    raster = np.asarray(raster, dtype=bool)
    if raster.ndim == 2:
        raster = raster[:, :, None]
    T, n_in, B = raster.shape
    if n_in != len(net.inputs):
        raise NetworkError(f"raster has {n_in} inputs, network has {len(net.inputs)}")
    idx = np.arange(net.n) if record is None else np.asarray(record)
    sim = Simulator(net, B)
    out = np.zeros((T, len(idx), B), dtype=bool)
    pots = np.zeros((T, len(idx), B)) if record_potential else None
    for t in range(T):
        f = sim.step(raster[t])
        out[t] = f[idx]
        if pots is not None:
            pots[t] = sim.u[idx]
    return (out, pots) if record_potential else out


def simulate(net: Network, schedule: SpikeSchedule, duration: int,
             record_potential: bool = False) -> SpikeTrace:
    """Run one network instance over ``duration`` quanta and return its spike trace."""
    if schedule.n_nodes != len(net.inputs):
        raise NetworkError(f"schedule has {schedule.n_nodes} nodes, network has {len(net.inputs)} inputs")
    raster = schedule.raster(duration)[:, :, None]
    res = run_raster(net, raster, record_potential=record_potential)
    spikes, pots = res if record_potential else (res, None)
    t_idx, n_idx = np.nonzero(spikes[:, :, 0])
    events = list(zip(t_idx.tolist(), n_idx.tolist()))
    return SpikeTrace(events, net.n, duration, None if pots is None else pots[:, :, 0])


def schedule_from_trains(trains: Iterable[Iterable[int]]) -> SpikeSchedule:
    """Build a schedule from per-node lists of spike times."""
    trains = [list(t) for t in trains]
    events = sorted((int(t), node) for node, ts in enumerate(trains) for t in ts)
    return SpikeSchedule(events, n_nodes=len(trains))
