"""Porting a kernel bank into a fixed-weight convolution + pooling spiking network."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelBank
from .preprocess import PATCH_SIDE
from .snn import (PERIOD_MS, Network, NetworkBuilder, NetworkError, NeuronSpec, encode_batch,
                  run_raster)

AVERAGE, MAX_WTA = "average", "max_wta"
BLOCK = -10.0  # inhibitory weight that overrides any excitatory input here


@dataclass(frozen=True)
class ConvLayerPlan:
    maps: int
    K: int = 9
    stride: int = 2
    in_side: int = PATCH_SIDE
    scale: float = 1.0
    tau: float = 10.0
    u_thr: float = 1.0

    @property
    def out_side(self) -> int:
        if self.in_side < self.K:
            raise NetworkError(f"input side {self.in_side} smaller than kernel {self.K}")
        return (self.in_side - self.K) // self.stride + 1

    @classmethod
    def for_bank(cls, bank: KernelBank, **kw) -> "ConvLayerPlan":
        return cls(maps=bank.n_kernels, K=bank.K, stride=bank.params.stride, **kw)


@dataclass(frozen=True)
class PoolLayerPlan:
    mode: str = AVERAGE
    window: int = 2
    tau: float = 1.0
    u_thr: float = 1.0
    pass_weight: float = 1.01

    def __post_init__(self):
        if self.mode not in (AVERAGE, MAX_WTA):
            raise NetworkError(f"unknown pooling mode {self.mode!r}")
        if not self.u_thr < self.pass_weight < 2 * self.u_thr:
            raise NetworkError("pass-through weight must lie in (u_thr, 2*u_thr)")


def build_conv_layer(builder: NetworkBuilder, inputs: np.ndarray, bank: KernelBank,
                     plan: ConvLayerPlan) -> np.ndarray:
    """Add ``maps x out x out`` conv neurons; returns their ids in that shape.

    ``inputs`` are the ids of the ``in_side x in_side`` input nodes, row-major.
    """
    if bank.K != plan.K or bank.n_kernels != plan.maps:
        raise NetworkError(f"bank ({bank.n_kernels}x{bank.K}) does not match plan ({plan.maps}x{plan.K})")
    side, K, s = plan.in_side, plan.K, plan.stride
    if len(inputs) != side * side:
        raise NetworkError(f"expected {side * side} input nodes, got {len(inputs)}")
    n_out = plan.out_side
    conv = builder.add_neurons(plan.maps * n_out * n_out, NeuronSpec(plan.u_thr, plan.tau, "conv"))
    conv = conv.reshape(plan.maps, n_out, n_out)
    grid = np.asarray(inputs).reshape(side, side)
    ii, jj = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    for a in range(plan.maps):
        wa = plan.scale * bank.w[a]
        for p in range(n_out):
            for q in range(n_out):
                pre = grid[p * s + ii, q * s + jj]
                builder.connect(pre.ravel(), conv[a, p, q], wa.ravel(), kind="conv")
    return conv


def _check_pool_shape(conv: np.ndarray, plan: PoolLayerPlan) -> int:
    side = conv.shape[1]
    if conv.shape[1] != conv.shape[2] or side % plan.window:
        raise NetworkError(f"conv maps of side {side} cannot be split into {plan.window}x{plan.window} windows")
    return side // plan.window


def _windows(conv: np.ndarray, win: int):
    """Yield (map, row, col, children ids in row-major window order)."""
    n_pool = conv.shape[1] // win
    for a in range(conv.shape[0]):
        for r in range(n_pool):
            for c in range(n_pool):
                yield a, r, c, conv[a, r * win:(r + 1) * win, c * win:(c + 1) * win].ravel()


def build_avg_pool(builder: NetworkBuilder, conv: np.ndarray, plan: PoolLayerPlan = PoolLayerPlan()) -> np.ndarray:
    """One pass-through neuron per window; returns pool ids ``(maps, n, n)``."""
    n_pool = _check_pool_shape(conv, plan)
    pool = builder.add_neurons(conv.shape[0] * n_pool * n_pool, NeuronSpec(plan.u_thr, plan.tau, "pool_avg"))
    pool = pool.reshape(conv.shape[0], n_pool, n_pool)
    for a, r, c, kids in _windows(conv, plan.window):
        builder.connect(kids, pool[a, r, c], plan.pass_weight, kind="pool")
    return pool


def build_max_pool_wta(builder: NetworkBuilder, conv: np.ndarray,
                       plan: PoolLayerPlan = PoolLayerPlan(mode=MAX_WTA)) -> np.ndarray:
    """First-spike winner-take-all pooling; returns output ids ``(maps, n, n)``.

    Per window and child ``e``: a gate G_e relays the child toward the output,
    a relay R_e announces the child's spikes to siblings, a block latch B_e
    (self-sustaining) closes G_e once a sibling has fired first, and a win
    latch V_e (self-sustaining) shields B_e once G_e has passed a spike. The
    gates of one window form a WTA group, so simultaneous first spikes go to
    the lowest child index. A clock at the last quantum of every period clears
    the latches, so each presentation starts a fresh competition; a clear at
    phase 0 would come too late, since a latch firing in the previous quantum
    still blocks its gate then.
    """
    n_pool = _check_pool_shape(conv, plan)
    spec = NeuronSpec(plan.u_thr, 1.0, "pool_wta")
    pw = plan.pass_weight
    clock = builder.add_clock(PERIOD_MS - 1)
    out = builder.add_neurons(conv.shape[0] * n_pool * n_pool, NeuronSpec(plan.u_thr, plan.tau, "pool_max"))
    out = out.reshape(conv.shape[0], n_pool, n_pool)
    for a, r, c, kids in _windows(conv, plan.window):
        m = len(kids)
        gate = builder.add_neurons(m, NeuronSpec(plan.u_thr, 1.0, "pool_gate"), group=builder.new_group())
        relay = builder.add_neurons(m, spec)
        block = builder.add_neurons(m, spec)
        win = builder.add_neurons(m, spec)
        builder.connect(kids, gate, pw)
        builder.connect(kids, relay, pw)
        builder.connect(gate, out[a, r, c], pw, kind="pool")
        builder.connect(gate, win, pw)
        builder.connect(win, win, pw, allow_self=True)
        builder.connect(block, block, pw, allow_self=True)
        builder.connect(block, gate, BLOCK)
        builder.connect(gate, block, BLOCK)
        builder.connect(win, block, BLOCK)
        builder.connect(clock, np.r_[block, win], BLOCK)
        for d in range(m):
            for e in range(m):
                if d != e:
                    builder.connect(gate[d], gate[e], BLOCK)
                    builder.connect(relay[d], block[e], pw)
    return out


@dataclass
class ConvPoolNet:
    """A built input -> conv -> pool network with handles to each layer."""

    network: Network
    inputs: np.ndarray
    conv: np.ndarray
    pool: np.ndarray
    conv_plan: ConvLayerPlan
    pool_plan: PoolLayerPlan

    @property
    def conv_mask(self) -> np.ndarray:
        return self.network.kind == "conv"

    @property
    def pool_flat(self) -> np.ndarray:
        """Pool ids flattened map-major, then row, then column."""
        return self.pool.reshape(-1)

    def with_scale(self, scale: float) -> "ConvPoolNet":
        factor = scale / self.conv_plan.scale
        net = self.network.scaled(self.conv_mask, factor)
        plan = ConvLayerPlan(**{**self.conv_plan.__dict__, "scale": scale})
        return ConvPoolNet(net, self.inputs, self.conv, self.pool, plan, self.pool_plan)

    def pool_raster(self, patches, batch: int = 256) -> np.ndarray:
        """Pool-layer spikes for each patch over one 20 ms period: ``(N, time, n_pool)``."""
        patches = np.asarray(patches)
        if patches.ndim == 2:
            patches = patches[None]
        n = len(patches)
        out = np.zeros((n, PERIOD_MS, self.pool.size), dtype=bool)
        for start in range(0, n, batch):
            chunk = patches[start:start + batch]
            spikes = run_raster(self.network, encode_batch(chunk), record=self.pool_flat)
            out[start:start + len(chunk)] = np.transpose(spikes, (2, 0, 1))
        return out

    def pool_rate_hz(self, patches) -> float:
        """Mean pool firing frequency: spikes per pool neuron per second, 20 ms per image."""
        r = self.pool_raster(patches)
        if r.shape[0] == 0:
            return 0.0
        return float(r.sum()) / (r.shape[0] * self.pool.size * PERIOD_MS * 1e-3)


def build_network(bank: KernelBank, conv_plan: ConvLayerPlan | None = None,
                  pool_plan: PoolLayerPlan = PoolLayerPlan()) -> ConvPoolNet:
    conv_plan = conv_plan or ConvLayerPlan.for_bank(bank)
    b = NetworkBuilder()
    inputs = b.add_inputs(conv_plan.in_side ** 2)
    conv = build_conv_layer(b, inputs, bank, conv_plan)
    if pool_plan.mode == AVERAGE:
        pool = build_avg_pool(b, conv, pool_plan)
    else:
        pool = build_max_pool_wta(b, conv, pool_plan)
    return ConvPoolNet(b.build(), inputs, conv, pool, conv_plan, pool_plan)


# -- calibration -------------------------------------------------------------

class CalibrationError(RuntimeError):
    def __init__(self, msg: str, report: "CalibrationReport"):
        super().__init__(msg)
        self.report = report


@dataclass
class CalibrationReport:
    target_hz: float
    tol: float
    history: list[tuple[float, float]] = field(default_factory=list)
    scale: float | None = None
    achieved_hz: float | None = None
    converged: bool = False

    @property
    def evaluations(self) -> int:
        return len(self.history)

    def text(self) -> str:
        lines = [f"target_hz {self.target_hz!r}", f"tolerance {self.tol!r}",
                 f"evaluations {self.evaluations}"]
        lines += [f"eval {i} scale {s!r} rate_hz {r!r}" for i, (s, r) in enumerate(self.history)]
        lines.append(f"converged {self.converged}")
        lines.append(f"scale {self.scale!r}")
        lines.append(f"achieved_hz {self.achieved_hz!r}")
        return "\n".join(lines) + "\n"


SCALE_MIN, SCALE_MAX = 2.0 ** -20, 2.0 ** 20


def calibrate(net: ConvPoolNet, sample, target_hz: float = 50.0, tol: float = 0.1,
              start: float = 1.0, max_bisect: int = 40) -> tuple[float, CalibrationReport]:
    """Find a conv weight scale giving a mean pool rate within ``tol`` of ``target_hz``.

    Doubles or halves the scale until the target is bracketed, then bisects
    in log-scale. Raises :class:`CalibrationError` when the bracket
    ``[2^-20, 2^20]`` does not contain the target.
    """
    sample = np.asarray(sample)
    if sample.ndim == 2:
        sample = sample[None]
    if len(sample) == 0:
        raise ValueError("calibration sample is empty")
    rep = CalibrationReport(target_hz, tol)

    def rate(scale: float) -> float:
        r = net.with_scale(scale).pool_rate_hz(sample)
        rep.history.append((scale, r))
        return r

    def done(scale: float, r: float) -> bool:
        if abs(r - target_hz) <= tol * target_hz:
            rep.scale, rep.achieved_hz, rep.converged = scale, r, True
            return True
        return False

    s = start
    r = rate(s)
    if done(s, r):
        return s, rep
    if r < target_hz:
        lo, hi = s, None
        while hi is None:
            s *= 2.0
            if s > SCALE_MAX:
                break
            r = rate(s)
            if done(s, r):
                return s, rep
            if r > target_hz:
                hi = s
            else:
                lo = s
    else:
        lo, hi = None, s
        while lo is None:
            s /= 2.0
            if s < SCALE_MIN:
                break
            r = rate(s)
            if done(s, r):
                return s, rep
            if r < target_hz:
                lo = s
            else:
                hi = s
    if lo is None or hi is None:
        best = min(rep.history, key=lambda h: abs(h[1] - target_hz))
        rep.scale, rep.achieved_hz = best
        raise CalibrationError(f"target {target_hz} Hz unreachable in scale range "
                               f"[2^-20, 2^20]; best rate {best[1]:.4g} Hz at scale {best[0]:.4g}", rep)
    for _ in range(max_bisect):
        s = math.sqrt(lo * hi)
        r = rate(s)
        if done(s, r):
            return s, rep
        if r < target_hz:
            lo = s
        else:
            hi = s
    best = min(rep.history, key=lambda h: abs(h[1] - target_hz))
    rep.scale, rep.achieved_hz = best
    raise CalibrationError(f"bisection did not reach {target_hz} Hz within tolerance; "
                           f"best {best[1]:.4g} Hz at scale {best[0]:.4g}", rep)
