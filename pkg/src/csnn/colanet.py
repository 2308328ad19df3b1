"""Columnar layered classifier head with anti-Hebbian and dopamine plasticity.

A simplified reading of the columnar classifier: one column per class, each
column holding several microcolumns. Per microcolumn there is a learning
neuron L (plastic inputs), a WTA neuron and a reward gate REWGATE; per
column there is a BIASGATE and an OUT neuron.

Dynamics per image (one 20 ms period, simulated from rest):

* L neurons form a WTA group, so at most one fires per quantum; its WTA
  neuron blocks every other WTA neuron, so only one microcolumn's spike
  reaches the OUT layer per quantum.
* Every L fire depresses the synapses active so far in the window by
  ``learning_rate`` (anti-Hebbian).
* During training, the true class's reward node fires near the end of the
  window; REWGATE relays it as a dopamine spike to the column's L neurons.
  Each one that fired potentiates its eligible synapses by
  ``2 * learning_rate`` (``reward_mode="once"``), or by that amount per
  depression taken (``"per_fire"``). L neurons that did not fire are
  unaffected.
* If none of the true column's L neurons fired, that column's bias current
  grows by ``bias_increment``; any fire in the column resets it.
* OUT neurons count WTA spikes per column; the class is the argmax.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .snn import PERIOD_MS, PRESENTATION_MS, SILENCE_MS, NetworkBuilder, NetworkError, NeuronSpec, Simulator

BLOCK = -10.0
PASS = 1.01


@dataclass(frozen=True)
class ColanetParams:
    num_classes: int = 5
    microcolumns: int = 22
    learning_rate: float = 0.0035
    weight_min: float = -0.0628
    weight_max: float = 0.152
    n_inputs: int = 1008
    presentation_ms: int = PRESENTATION_MS
    silence_ms: int = SILENCE_MS
    init_fraction: float = 0.1
    reward_factor: float = 2.0
    bias_increment: float = 0.3
    wta_inhibition: float = 0.0
    reward_ms: int = PERIOD_MS - 2
    tau: float = 10.0
    u_thr: float = 1.0
    eligibility: str = "window"
    bias_reset: str = "fire"
    reward_mode: str = "once"
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.num_classes < 1 or self.microcolumns < 1 or self.n_inputs < 1:
            problems.append("counts >= 1")
        if not self.weight_min < 0 < self.weight_max:
            problems.append("weight_min < 0 < weight_max")
        if not self.learning_rate > 0:
            problems.append("learning_rate > 0")
        if not 0 <= self.reward_ms < self.period - 1:
            problems.append("reward_ms inside the period, leaving one quantum for delivery")
        if self.eligibility not in ("window", "since"):
            problems.append("eligibility in {window, since}")
        if self.bias_reset not in ("fire", "win"):
            problems.append("bias_reset in {fire, win}")
        if self.reward_mode not in ("once", "per_fire"):
            problems.append("reward_mode in {once, per_fire}")
        if self.bias_increment < 0 or self.wta_inhibition < 0:
            problems.append("bias_increment, wta_inhibition >= 0")
        if problems:
            raise ValueError("invalid colanet params, violated: " + "; ".join(problems))

    @property
    def period(self) -> int:
        return self.presentation_ms + self.silence_ms

    @property
    def n_micro(self) -> int:
        return self.num_classes * self.microcolumns


def _positions(matrix, post, pre) -> np.ndarray:
    """Index into ``matrix.data`` of each (post, pre) entry of a sorted CSR matrix."""
    post, pre = np.broadcast_arrays(np.asarray(post), np.asarray(pre))
    n = matrix.shape[1]
    rows = np.repeat(np.arange(matrix.shape[0]), np.diff(matrix.indptr))
    keys = rows * n + matrix.indices
    want = post.astype(np.int64) * n + pre
    pos = np.searchsorted(keys, want)
    if np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != want):
        raise NetworkError("requested synapse missing from matrix")
    return pos


@dataclass
class Decision:
    label: int
    counts: np.ndarray
    no_decision: bool = False
    tie: bool = False


@dataclass
class StepResult:
    decision: Decision
    l_spikes: np.ndarray  # total fires per L neuron in the window
    rewarded: np.ndarray  # L neurons potentiated by dopamine
    reward_spikes: int


class ColaNet:
    """Built classifier fragment plus its plastic state."""

    def __init__(self, params: ColanetParams):
        self.params = pr = params
        C, m, M = pr.num_classes, pr.microcolumns, pr.n_micro
        b = NetworkBuilder()
        self.inputs = b.add_inputs(pr.n_inputs)
        self.reward_in = b.add_inputs(C, role="input")
        self.bias_in = b.add_inputs(C, role="input")
        grp = b.new_group()
        self.L = b.add_neurons(M, NeuronSpec(pr.u_thr, pr.tau, "L"), group=grp)
        self.WTA = b.add_neurons(M, NeuronSpec(1.0, 1.0, "WTA"))
        self.REWGATE = b.add_neurons(M, NeuronSpec(1.0, 1.0, "REWGATE"))
        self.BIASGATE = b.add_neurons(C, NeuronSpec(1.0, 1.0, "BIASGATE"))
        self.OUT = b.add_neurons(C, NeuronSpec(1.0, 1.0, "OUT"))
        self.column_of = np.repeat(np.arange(C), m)

        rng = np.random.default_rng([pr.seed, 0xC01A])
        w0 = rng.uniform(0.0, pr.init_fraction * pr.weight_max, size=(M, pr.n_inputs))
        b.connect(self.inputs[None, :], self.L[:, None], w0, kind="plastic")
        b.connect(self.L, self.WTA, PASS)
        others = ~np.eye(M, dtype=bool)
        src, dst = np.nonzero(others)
        b.connect(self.WTA[src], self.WTA[dst], BLOCK, kind="wta")
        if pr.wta_inhibition > 0:
            b.connect(self.WTA[src], self.L[dst], -pr.wta_inhibition, kind="wta_l")
        b.connect(self.WTA, self.OUT[self.column_of], PASS, kind="out")
        b.connect(self.reward_in[self.column_of], self.REWGATE, PASS)
        b.connect(self.REWGATE, self.L, 0.0, kind="dopamine")
        b.connect(self.bias_in, self.BIASGATE, PASS)
        b.connect(self.BIASGATE[self.column_of], self.L, 0.0, kind="bias")
        self.network = b.build()
        self.matrix = self.network.matrix.copy()
        self._plastic = _positions(self.matrix, self.L[:, None], self.inputs[None, :])
        self._bias = _positions(self.matrix, self.L, self.BIASGATE[self.column_of])
        self.bias_level = np.zeros(C)
        self._n_ext = len(self.network.inputs)
        # input-node order inside the simulator's input vector
        self._slot = {int(nid): k for k, nid in enumerate(self.network.inputs)}

    # -- weights -------------------------------------------------------------

    @property
    def weights(self) -> np.ndarray:
        """Plastic weights, shape ``(L neurons, inputs)`` (a copy)."""
        return self.matrix.data[self._plastic].copy()

    def set_weights(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != self._plastic.shape:
            raise ValueError(f"expected weights of shape {self._plastic.shape}, got {w.shape}")
        self.matrix.data[self._plastic] = w

    def _add(self, k: int, mask: np.ndarray, delta) -> None:
        pr = self.params
        pos = self._plastic[k][mask]
        self.matrix.data[pos] = np.clip(self.matrix.data[pos] + delta, pr.weight_min, pr.weight_max)

    # -- dynamics ------------------------------------------------------------

    def _external(self, stream_t: np.ndarray, reward: int | None, bias_col: int | None) -> np.ndarray:
        x = np.zeros((self._n_ext, 1), dtype=bool)
        x[:len(self.inputs), 0] = stream_t
        if reward is not None:
            x[self._slot[int(self.reward_in[reward])], 0] = True
        if bias_col is not None:
            x[self._slot[int(self.bias_in[bias_col])], 0] = True
        return x

    def _window(self, stream: np.ndarray, label: int | None, learn: bool) -> StepResult:
        pr = self.params
        stream = np.asarray(stream, dtype=bool)
        if stream.ndim != 2 or stream.shape[1] != pr.n_inputs:
            raise ValueError(f"stream must be (time, {pr.n_inputs}), got {stream.shape}")
        T = max(stream.shape[0], pr.period)
        M = pr.n_micro
        bias_col = None
        if learn and self.bias_level[label] > 0:
            self.matrix.data[self._bias] = np.where(self.column_of == label, self.bias_level[label], 0.0)
            bias_col = label
        else:
            self.matrix.data[self._bias] = 0.0
        sim = Simulator(self.network, 1, matrix=self.matrix)
        seen = np.zeros(pr.n_inputs, dtype=bool)
        since = np.zeros((M, pr.n_inputs), dtype=bool)
        depressions = np.zeros((M, pr.n_inputs), dtype=np.int64)
        l_spikes = np.zeros(M, dtype=np.int64)
        out_counts = np.zeros(pr.num_classes, dtype=np.int64)
        rewarded = np.zeros(M, dtype=bool)
        reward_spikes = 0
        rew_prev = np.zeros(M, dtype=bool)
        for t in range(T):
            s_t = stream[t] if t < stream.shape[0] else np.zeros(pr.n_inputs, dtype=bool)
            reward = label if (learn and t == pr.reward_ms) else None
            bias = bias_col if t < pr.presentation_ms else None
            fired = sim.step(self._external(s_t, reward, bias))[:, 0]
            seen |= s_t
            since |= s_t
            if learn and rew_prev.any():
                # dopamine spikes emitted last quantum arrive now
                for k in np.flatnonzero(rew_prev):
                    if l_spikes[k]:
                        mask = depressions[k] > 0
                        scale = depressions[k][mask] if pr.reward_mode == "per_fire" else 1.0
                        self._add(k, mask, pr.reward_factor * pr.learning_rate * scale)
                        rewarded[k] = True
                        depressions[k] = 0
            fl = fired[self.L]
            l_spikes += fl
            if learn:
                for k in np.flatnonzero(fl):
                    elig = seen if pr.eligibility == "window" else since[k].copy()
                    self._add(k, elig, -pr.learning_rate)
                    depressions[k] += elig
            since[fl] = False
            rew_now = fired[self.REWGATE]
            reward_spikes += int(rew_now.sum())
            rew_prev = rew_now
            out_counts += fired[self.OUT]
        if learn:
            col_fired = l_spikes[self.column_of == label].sum() > 0
            if pr.bias_reset == "win":
                d = decide(out_counts)
                col_fired = d.label == label and not d.no_decision
            self.bias_level[label] = 0.0 if col_fired else self.bias_level[label] + pr.bias_increment
            self.matrix.data[self._bias] = 0.0
        return StepResult(decide(out_counts), l_spikes, rewarded, reward_spikes)

    def train_step(self, stream: np.ndarray, label: int) -> StepResult:
        if not 0 <= label < self.params.num_classes:
            raise ValueError(f"label {label} out of range 0..{self.params.num_classes - 1}")
        return self._window(stream, int(label), learn=True)

    def classify(self, stream: np.ndarray) -> Decision:
        return self._window(stream, None, learn=False).decision

    def train_epoch(self, streams: Iterable[np.ndarray], labels: Iterable[int]) -> "EpochStats":
        stats = EpochStats()
        correct = 0
        for i, (s, y) in enumerate(zip(streams, labels)):
            res = self.train_step(s, int(y))
            correct += int(res.decision.label == y and not res.decision.no_decision)
            stats.rows.append((i, int(y), res.decision.label, res.reward_spikes, correct / (i + 1)))
        if not stats.rows:
            raise ValueError("empty training stream")
        return stats

    # -- file format ---------------------------------------------------------

    def dump(self) -> str:
        pr = self.params
        lines = [f"COLANET 1 {pr.num_classes} {pr.microcolumns}"]
        for row in self.weights:
            lines.append(" ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())

    @classmethod
    def parse(cls, text: str, **param_overrides) -> "ColaNet":
        lines = text.splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[0] != "COLANET" or head[1] != "1":
            raise ValueError("line 1: expected 'COLANET 1 <classes> <microcolumns>'")
        C, m = int(head[2]), int(head[3])
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if line.strip():
                try:
                    rows.append([float(v) for v in line.split()])
                except ValueError:
                    raise ValueError(f"line {lineno}: non-numeric value") from None
        if len(rows) != C * m or len({len(r) for r in rows}) != 1:
            raise ValueError(f"expected {C * m} rows of equal length")
        params = ColanetParams(num_classes=C, microcolumns=m, n_inputs=len(rows[0]), **param_overrides)
        net = cls(params)
        net.set_weights(np.array(rows))
        return net


def decide(out_counts: np.ndarray) -> Decision:
    counts = np.asarray(out_counts)
    top = counts.max()
    if top <= 0:
        return Decision(0, counts, no_decision=True)
    winners = np.flatnonzero(counts == top)
    return Decision(int(winners[0]), counts, tie=len(winners) > 1)


@dataclass
class EpochStats:
    rows: list[tuple[int, int, int, int, float]] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.rows[-1][4] if self.rows else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_index", "true_label", "predicted", "reward_spikes", "running_accuracy"])
            for i, y, p, r, acc in self.rows:
                w.writerow([i, y, p, r, repr(acc)])


def build_colanet(params: ColanetParams) -> ColaNet:
    return ColaNet(params)
