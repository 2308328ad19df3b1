"""Construction of domain-level convolution kernels by resource-conserving competition.

Each kernel ``a`` owns a synaptic resource matrix ``W[a]``; its weights are a
saturating function of the resource (:func:`resource_to_weight`). One
iteration per image: kernels compete for image positions (winner-take-all
over both kernel index and position), and winners move resource toward the
bright pixels of their receptive field while keeping the kernel's total
resource constant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

LOW, HIGH, SKIPPED = "low", "high", "skipped"


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerParams:
    K: int = 9
    n_kernels: int = 28
    stride: int = 2
    brightness: float = 26.0
    w_min: float = -5.0 / 3.0 / 255.0
    w_max: float = 5.0 / 255.0
    learning_rate: float | None = None
    seed: int = 0
    corpus_size: int | None = None
    # A fresh bank has all weights 0, so every stimulation is 0 and the
    # strict "max(c) > 0" loop never admits a winner. With recruit_at_zero the
    # loop also accepts zero-stimulation elements (after all positive ones).
    recruit_at_zero: bool = True

    def __post_init__(self):
        problems = []
        if self.K < 1:
            problems.append("K >= 1")
        if self.n_kernels < 1:
            problems.append("n_kernels >= 1")
        if self.stride < 1:
            problems.append("stride >= 1")
        if not 0 <= self.brightness <= 255:
            problems.append("0 <= brightness <= 255")
        if not (self.w_min <= 0 < self.w_max):
            problems.append("w_min <= 0 < w_max")
        if self.learning_rate is None:
            if self.corpus_size is None or self.corpus_size < 1:
                problems.append("learning_rate > 0 or corpus_size >= 1 to derive it")
        elif not self.learning_rate > 0:
            problems.append("learning_rate > 0")
        if problems:
            raise ParamError("invalid learner params, violated: " + "; ".join(problems))

    @property
    def rate(self) -> float:
        """Effective learning rate; defaults to 100/255/N_E."""
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return 100.0 / 255.0 / self.corpus_size

    @property
    def initial_resource(self) -> float:
        return -self.w_min * (self.w_max - self.w_min) / self.w_max


def resource_to_weight(W, w_min: float, w_max: float):
    """Saturating resource-to-weight map; ``w_min`` for W <= 0, tends to ``w_max``."""
    span = w_max - w_min
    pos = np.maximum(W, 0.0)
    return w_min + span * pos / (span + pos)


@dataclass
class KernelBank:
    W: np.ndarray
    w: np.ndarray
    params: LearnerParams

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def n_kernels(self) -> int:
        return self.W.shape[0]

    def refresh(self, a=slice(None)) -> None:
        self.w[a] = resource_to_weight(self.W[a], self.params.w_min, self.params.w_max)

    def copy(self) -> "KernelBank":
        return KernelBank(self.W.copy(), self.w.copy(), self.params)

    def resource_sums(self) -> np.ndarray:
        return self.W.reshape(self.n_kernels, -1).sum(axis=1)


def init_bank(params: LearnerParams) -> KernelBank:
    shape = (params.n_kernels, params.K, params.K)
    W = np.full(shape, params.initial_resource, dtype=np.float64)
    bank = KernelBank(W, np.zeros(shape), params)
    bank.refresh()
    return bank


def out_side(side: int, K: int, stride: int) -> int:
    if side < K:
        raise ValueError(f"image side {side} smaller than kernel size {K}")
    return (side - K) // stride + 1


def convolve_weights(g, w: np.ndarray, stride: int) -> np.ndarray:
    """Strided valid correlation of image ``g`` with every kernel in ``w``.

    Products are accumulated in row-major (i, j) kernel order starting from
    0.0, so each element is bit-identical to a scalar nested-loop sum.
    """
    g = np.asarray(g, dtype=np.float64)
    n, K, _ = w.shape
    H = out_side(g.shape[0], K, stride)
    Wo = out_side(g.shape[1], K, stride)
    c = np.zeros((n, H, Wo))
    span_r = stride * (H - 1) + 1
    span_c = stride * (Wo - 1) + 1
    for i in range(K):
        for j in range(K):
            tile = g[i:i + span_r:stride, j:j + span_c:stride]
            c += w[:, i, j, None, None] * tile[None]
    return c


def convolve(g, bank: KernelBank) -> np.ndarray:
    return convolve_weights(g, bank.w, bank.params.stride)


@dataclass(frozen=True)
class Winner:
    kernel: int
    p: int
    q: int
    stimulation: float
    branch: str
    n_strengthened: int = 0


@dataclass
class IterationReport:
    winners: list[Winner] = field(default_factory=list)
    repeats: int = 0  # argmax picks whose kernel had already won this iteration

    @property
    def updates(self) -> int:
        return sum(1 for w in self.winners if w.branch != SKIPPED)


def _low_branch(bank: KernelBank, a: int, tile: np.ndarray) -> int:
    """Push resource toward pixels brighter than B. Returns n_b, or -1 if skipped."""
    pr = bank.params
    K2 = tile.size
    bright = tile > pr.brightness
    nb = int(bright.sum())
    if not 0 < nb < K2:
        return -1
    l = pr.rate
    bank.W[a] += np.where(bright, l, -l * nb / (K2 - nb))
    bank.refresh(a)
    return nb


def select_strengthened(tile: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Smallest set of brightest pixels whose stimulation reaches 1.

    Pixels are taken by whole brightness levels in decreasing order; the
    running sum uses the weights as they were before the update.
    """
    chosen = np.zeros(tile.shape, dtype=bool)
    acc = 0.0
    for level in np.unique(tile)[::-1]:
        if acc >= 1.0:
            break
        at = tile == level
        # same element order as a row-major scan of the tile
        for v in (level * weights[at]):
            acc += v
        chosen |= at
    return chosen


def _high_branch(bank: KernelBank, a: int, tile: np.ndarray) -> int:
    pr = bank.params
    chosen = select_strengthened(tile, bank.w[a])
    nb = int(chosen.sum())
    rest = tile.size - nb
    if rest == 0:
        return -1
    l = pr.rate
    bank.W[a] += np.where(chosen, l, -l * nb / rest)
    bank.refresh(a)
    return nb


def learn_iteration(bank: KernelBank, g, rng: np.random.Generator) -> tuple[KernelBank, IterationReport]:
    """One competitive learning step on image ``g``. Mutates and returns ``bank``."""
    pr = bank.params
    g = np.asarray(g)
    c = convolve(g, bank)
    n, H, Wo = c.shape
    K, s = pr.K, pr.stride
    alive = np.ones((H, Wo), dtype=bool)
    used: set[int] = set()
    report = IterationReport()
    while len(used) < n and alive.any():
        masked = np.where(alive[None], c, -np.inf)
        top = masked.max()
        if top < 0 or (top == 0 and not pr.recruit_at_zero):
            break
        ties = np.flatnonzero(masked.ravel() == top)
        pick = ties[0] if len(ties) == 1 else ties[rng.integers(len(ties))]
        a, p, q = np.unravel_index(pick, c.shape)
        a, p, q = int(a), int(p), int(q)
        if a in used:
            report.repeats += 1
        else:
            used.add(a)
            tile = g[p * s:p * s + K, q * s:q * s + K].astype(np.float64)
            if top < 1.0:
                nb = _low_branch(bank, a, tile)
                branch = LOW
            else:
                nb = _high_branch(bank, a, tile)
                branch = HIGH
            if nb < 0:
                branch, nb = SKIPPED, 0
            report.winners.append(Winner(a, p, q, float(top), branch, nb))
        alive[p, q] = False
    return bank, report


def learn_bank(corpus: Sequence, params: LearnerParams) -> tuple[KernelBank, list[IterationReport]]:
    """Run one learning iteration per image, in corpus order."""
    for idx, g in enumerate(corpus):
        shape = np.shape(g)
        if len(shape) != 2 or min(shape) < params.K:
            raise ValueError(f"corpus image {idx} has shape {shape}, needs >= {params.K}x{params.K}")
    bank = init_bank(params)
    rng = np.random.default_rng([params.seed, 0x7E5])
    reports = []
    for g in corpus:
        _, rep = learn_iteration(bank, g, rng)
        reports.append(rep)
    return bank, reports


def cosine_matrix(bank: KernelBank) -> np.ndarray:
    flat = bank.w.reshape(bank.n_kernels, -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    return unit @ unit.T


# -- file formats ------------------------------------------------------------

class BankFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def dump_bank(bank: KernelBank) -> str:
    pr = bank.params
    lines = [f"KBANK 1 {bank.n_kernels} {bank.K} {pr.w_min!r} {pr.w_max!r}"]
    for a in range(bank.n_kernels):
        for row in bank.W[a]:
            lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def save_bank(path, bank: KernelBank) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_bank(bank))


def parse_bank(text: str, **param_overrides) -> KernelBank:
    lines = text.splitlines()
    if not lines:
        raise BankFormatError(1, "empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "KBANK":
        raise BankFormatError(1, "expected 'KBANK 1 <N_C> <K> <w_min> <w_max>'")
    if head[1] != "1":
        raise BankFormatError(1, f"unsupported version {head[1]}")
    try:
        n, K = int(head[2]), int(head[3])
        w_min, w_max = float(head[4]), float(head[5])
    except ValueError as exc:
        raise BankFormatError(1, str(exc)) from None
    if n < 1 or K < 1:
        raise BankFormatError(1, "kernel count and size must be positive")
    body = lines[1:]
    if len(body) < n * K:
        raise BankFormatError(len(lines) + 1, f"expected {n * K} rows of values, found {len(body)}")
    W = np.empty((n, K, K))
    for r in range(n * K):
        lineno = r + 2
        parts = body[r].split()
        if len(parts) != K:
            raise BankFormatError(lineno, f"expected {K} values, found {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise BankFormatError(lineno, "non-numeric value") from None
        if not all(math.isfinite(v) for v in vals):
            raise BankFormatError(lineno, "non-finite value")
        W[r // K, r % K] = vals
    for extra, line in enumerate(body[n * K:], start=n * K + 2):
        if line.strip():
            raise BankFormatError(extra, "trailing data after last kernel")
    opts = dict(K=K, n_kernels=n, w_min=w_min, w_max=w_max, learning_rate=1.0)
    opts.update(param_overrides)
    try:
        params = LearnerParams(**opts)
    except ParamError as exc:
        raise BankFormatError(1, str(exc)) from None
    bank = KernelBank(W, np.empty_like(W), params)
    bank.refresh()
    return bank


def load_bank(path, **param_overrides) -> KernelBank:
    with open(path, encoding="utf-8") as fh:
        return parse_bank(fh.read(), **param_overrides)


def write_learning_log(path, reports: Sequence[IterationReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_index", "winner_rank", "kernel", "p", "q", "stimulation", "branch"])
        for idx, rep in enumerate(reports):
            for rank, win in enumerate(rep.winners):
                w.writerow([idx, rank, win.kernel, win.p, win.q, repr(win.stimulation), win.branch])


def with_params(bank: KernelBank, **changes) -> KernelBank:
    """Copy of ``bank`` with some params replaced (weights rederived)."""
    out = KernelBank(bank.W.copy(), np.empty_like(bank.W), replace(bank.params, **changes))
    out.refresh()
    return out
