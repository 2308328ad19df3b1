"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in a summary
section at the end of the pytest run.
"""
import time

import numpy as np
import pytest

from csnn import colanet as cn
from csnn import kernels as kn
from csnn import netbuild as nb
from csnn import pipeline as pl
from csnn import snn
from csnn.cli import main as cli_main
from csnn.synthetic import patch_corpus
from oracles import replay_neuron


def naive_convolve(g, w, s):
    n, K, _ = w.shape
    H = (g.shape[0] - K) // s + 1
    Wd = (g.shape[1] - K) // s + 1
    out = np.zeros((n, H, Wd))
    for a in range(n):
        for p in range(H):
            for q in range(Wd):
                acc = 0.0
                for i in range(K):
                    for j in range(K):
                        acc += float(w[a, i, j]) * float(g[p * s + i, q * s + j])
                out[a, p, q] = acc
    return out


def random_learner(rng, corpus_hint=1):
    K = int(rng.choice([3, 5, 9]))
    w_max = float(rng.uniform(0.005, 0.5))
    return kn.LearnerParams(K=K, n_kernels=int(rng.integers(1, 9)), stride=int(rng.integers(1, 4)),
                            brightness=float(rng.uniform(0, 200)),
                            w_min=-float(rng.uniform(0.0, 1.0)) * w_max, w_max=w_max,
                            learning_rate=float(10 ** rng.uniform(-4, 0)), seed=int(rng.integers(1 << 30)),
                            recruit_at_zero=bool(rng.random() < 0.8), corpus_size=corpus_hint)


# -- shared desk-scale run (criteria 9 and 10) ------------------------------------

DESK_SEED = 0


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    patches, labels = patch_corpus(450, seed=DESK_SEED)
    train_x, train_y = patches[:300], labels[:300]
    test_x, test_y = patches[300:], labels[300:]
    cfg = pl.PipelineConfig(seed=DESK_SEED, kernels=8, kernel_size=9, stride=2)
    bank, _, _ = pl.learn_from_patches(train_x, cfg)
    res = pl.fit_and_score(bank, train_x, train_y, test_x, test_y, 3, cfg)
    return bank, res, time.perf_counter() - t0


# -- 1 ------------------------------------------------------------------------------

def test_criterion_01_resource_conservation(record):
    rng = np.random.default_rng(101)
    calls, worst = 0, 0.0
    while calls < 10_000:
        params = random_learner(rng)
        bank = kn.init_bank(params)
        # perturb so banks are not all uniform; conservation is relative to this start
        bank.W += rng.normal(0, params.initial_resource, bank.W.shape)
        bank.W -= bank.W.mean(axis=(1, 2), keepdims=True) - params.initial_resource
        bank.refresh()
        start = bank.resource_sums().copy()
        side = int(rng.integers(params.K, 32))
        lrng = np.random.default_rng(params.seed)
        for _ in range(50):
            kind = rng.integers(3)
            if kind == 0:
                g = rng.integers(0, 256, (side, side))
            elif kind == 1:
                g = np.where(rng.random((side, side)) < 0.1, 255, 0)
            else:
                g = np.round(rng.uniform(0, 255) * rng.random((side, side)) ** 3)
            kn.learn_iteration(bank, g.astype(np.uint8), lrng)
            calls += 1
            dev = np.abs(bank.resource_sums() - start) / np.abs(start)
            worst = max(worst, float(dev.max()))
    record(1, worst < 1e-9, f"{calls} learn_iteration calls, max relative resource drift {worst:.3g} (< 1e-9)")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_02_resource_map_algebra(record):
    problems = []
    rng = np.random.default_rng(202)
    cases = [(-5 / 3 / 255, 5 / 255)] + [(-float(rng.uniform(0.01, 1)), float(rng.uniform(0.01, 1)))
                                        for _ in range(5)]
    for w_min, w_max in cases:
        W0 = kn.LearnerParams(w_min=w_min, w_max=w_max, corpus_size=1).initial_resource
        neg = np.r_[0.0, -1e-300, -np.logspace(-12, 6, 1000)]
        if not np.all(kn.resource_to_weight(neg, w_min, w_max) == w_min):
            problems.append(f"W<=0 not exactly w_min for {w_min},{w_max}")
        z = float(kn.resource_to_weight(W0, w_min, w_max))
        if abs(z) > 1e-12:
            problems.append(f"w(W0)={z!r}")
        sweep = np.linspace(-1.0, 1e3 * W0, 10 ** 6)
        out = kn.resource_to_weight(sweep, w_min, w_max)
        huge = kn.resource_to_weight(np.array([1e6, 1e12]), w_min, w_max)
        if out.min() < w_min or out.max() >= w_max or np.any(huge >= w_max):
            problems.append("range")
        if np.any(np.diff(out) < 0):
            problems.append("not monotone")
    record(2, not problems, f"{len(cases)} (w_min, w_max) pairs, 10^6-point sweeps"
           + (": " + "; ".join(problems) if problems else ": exact w_min, |w(W0)| <= 1e-12, range, monotone"))


# -- 3 ------------------------------------------------------------------------------

def test_criterion_03_convolution_oracle(record):
    rng = np.random.default_rng(303)
    bad = 0
    for _ in range(100):
        K = int(rng.choice([3, 5, 9]))
        s = int(rng.integers(1, 4))
        side = int(rng.integers(K, 32))
        g = rng.integers(0, 256, (side, side)).astype(np.uint8)
        w = rng.normal(0, 0.05, (int(rng.integers(1, 5)), K, K))
        got = kn.convolve_weights(g, w, s)
        expect = naive_convolve(g, w, s)
        n_out = (side - K) // s + 1
        if got.shape != (len(w), n_out, n_out) or not np.array_equal(got, expect):
            bad += 1
    full = kn.convolve_weights(np.zeros((31, 31)), np.zeros((1, 9, 9)), 2).shape[1:]
    ok = bad == 0 and full == (12, 12) and kn.out_side(31, 9, 2) == 12
    record(3, ok, f"100 random instances, {bad} mismatches (exact); 31/9/2 -> {full[0]}x{full[1]}")


# -- 4 ------------------------------------------------------------------------------

def test_criterion_04_pass_through(record):
    b = snn.NetworkBuilder()
    kids = b.add_inputs(4).reshape(1, 2, 2)
    out = int(nb.build_avg_pool(b, kids).ravel()[0])
    net = b.build()
    rng = np.random.default_rng(404)
    bad = 0
    for _ in range(1000):
        T = int(rng.integers(1, 200))
        src = int(rng.integers(4))
        times = np.flatnonzero(rng.random(T) < rng.uniform(0, 1)).tolist()
        trains = [times if c == src else [] for c in range(4)]
        tr = snn.simulate(net, snn.schedule_from_trains(trains), T + 1)
        bad += len(tr.times(out)) != len(times)
    record(4, bad == 0, f"1000 random single-source trains through tau=1 pass-through, {bad} count mismatches")


# -- 5 ------------------------------------------------------------------------------

def test_criterion_05_neuron_replay(record):
    rng = np.random.default_rng(505)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        tau = float(rng.choice([1.0, 2.0, 10.0, rng.uniform(1, 100)]))
        u_thr = float(rng.uniform(0.2, 3.0))
        w = rng.uniform(-1.0, 2.0, n) * u_thr
        T = int(rng.integers(1, 60))
        active = [np.flatnonzero(rng.random(n) < 0.35) for _ in range(T)]
        b = snn.NetworkBuilder()
        inp = b.add_inputs(n)
        cell = int(b.add_neurons(1, snn.NeuronSpec(u_thr, tau))[0])
        b.connect(inp, cell, w)
        trains = [[t for t in range(T) if i in active[t]] for i in range(n)]
        tr = snn.simulate(b.build(), snn.schedule_from_trains(trains), T, record_potential=True)
        pots, fires = replay_neuron(w, active, tau, u_thr)
        if not (np.array_equal(tr.potentials[:, cell], pots) and tr.times(cell) == np.flatnonzero(fires).tolist()):
            bad += 1
    record(5, bad == 0, f"1000 random sequences, {bad} not state-exact against scalar replay")


# -- 6 ------------------------------------------------------------------------------

def test_criterion_06_shape_chain(record):
    bank = kn.init_bank(kn.LearnerParams(corpus_size=1))
    net = nb.build_network(bank)
    ok = net.conv.size == 4032 and net.pool.size == 1008 and len(net.inputs) == 961
    record(6, ok, f"full-size config (28 kernels): {net.conv.size} conv neurons, {net.pool.size} pool outputs")


# -- 7 ------------------------------------------------------------------------------

def test_criterion_07_calibration(record):
    patches, _ = patch_corpus(200, seed=7)
    results = []
    for n_kernels in (8, 28):
        params = kn.LearnerParams(n_kernels=n_kernels, brightness=float(patches.mean()),
                                  corpus_size=len(patches), seed=7)
        bank, _ = kn.learn_bank(patches, params)
        _, rep = nb.calibrate(nb.build_network(bank), patches[:64], target_hz=50.0, tol=0.1)
        hist = sorted(rep.history)
        mono = all(r1 <= r2 for (_, r1), (_, r2) in zip(hist, hist[1:]))
        ok = rep.converged and abs(rep.achieved_hz - 50.0) <= 5.0 and rep.evaluations <= 60 and mono
        results.append((ok, f"N_C={n_kernels} {rep.achieved_hz:.2f} Hz in {rep.evaluations} evals, "
                            f"monotone={mono}"))
    record(7, all(ok for ok, _ in results), "; ".join(d for _, d in results))


# -- 8 ------------------------------------------------------------------------------

def _full_run(root, data):
    root.mkdir()
    cfg = root / "run.cfg"
    cfg.write_text(f"raw_dir = {data}\nwork_dir = {root / 'work'}\nkernels = 8\nseed = 11\n")
    for stage in ("prep", "learn", "eval"):
        assert cli_main([stage, "--config", str(cfg)]) == 0
    work = root / "work"
    return {p.relative_to(work).as_posix(): p.read_bytes() for p in sorted(work.rglob("*")) if p.is_file()}


def test_criterion_08_determinism(record, tmp_path):
    a_data, b_data = tmp_path / "a_data", tmp_path / "b_data"
    assert cli_main(["synth", "--out", str(a_data), "--count", "150", "--seed", "5"]) == 0
    assert cli_main(["synth", "--out", str(b_data), "--count", "150", "--seed", "5"]) == 0
    a = _full_run(tmp_path / "a", a_data)
    b = _full_run(tmp_path / "b", b_data)
    needed = {"kernels.txt", "eval_summary.txt", "eval_folds.csv", "eval_confusion.csv"}
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = needed <= a.keys() and not differ
    record(8, ok, f"two eval runs, {len(a)} output files compared byte-for-byte, "
           f"{len(differ)} differ" + (f" ({', '.join(differ[:5])})" if differ else ""))


# -- 9 ------------------------------------------------------------------------------

def test_criterion_09_desk_scale_accuracy(record, desk):
    _, res, secs = desk
    ok = res.status == "ok" and res.accuracy >= 0.85 and secs < 300
    record(9, ok, f"300 train / 150 test, N_C=8: test accuracy {res.accuracy:.3f} (>= 0.85) "
           f"in {secs:.1f} s (< 300 s), pool rate {res.pool_rate_hz:.1f} Hz")


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_kernel_distinctness(record, desk):
    bank = desk[0]
    cos = kn.cosine_matrix(bank)
    iu = np.triu_indices(bank.n_kernels, 1)
    below = int((cos[iu] < 0.9).sum())
    record(10, below * 2 >= len(iu[0]), f"{below} of {len(iu[0])} kernel pairs with cosine < 0.9")


# -- 11 -----------------------------------------------------------------------------

def test_criterion_11_classifier_weight_bounds(record):
    rng = np.random.default_rng(1111)
    lo, hi = -0.0628, 0.152
    epochs, outside = 0, 0
    for e in range(6):
        p = cn.ColanetParams(seed=e)  # defaults: 5 x 22, 1008 inputs
        head = cn.ColaNet(p)
        if e % 2:
            # start on and near the bounds to exercise clipping in both directions
            head.set_weights(rng.choice([lo, hi, lo + 1e-4, hi - 1e-4], size=head.weights.shape))
        density = [0.02, 0.1, 0.3][e % 3]
        streams = [rng.random((snn.PERIOD_MS, p.n_inputs)) < density for _ in range(30)]
        for t in streams:
            t[snn.PRESENTATION_MS:] = False
        head.train_epoch(streams, rng.integers(0, p.num_classes, len(streams)))
        w = head.weights
        outside += int(((w < lo) | (w > hi)).sum())
        epochs += 1
    record(11, outside == 0, f"{epochs} train_epoch runs at default params, {outside} plastic weights "
           f"outside [-0.0628, 0.152]")
