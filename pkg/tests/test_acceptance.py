"""Acceptance suite: one test, and one PASS/FAIL line, per criterion.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``; the verdict lines are repeated in the
"acceptance criteria" section of the pytest summary.
"""

import sys
import time

import numpy as np
import pytest
from scipy import stats

from rclnet.datapipe import (
    FrameSequence,
    LevelWeights,
    SynthSpec,
    WindowPool,
    sequence_bytes,
    sequence_from_bytes,
    synth_generate,
    weighted_batch,
)
from rclnet.errors import FormatError
from rclnet.evaluation import compare_static_baseline, loso_crossval, measure_throughput, mse_metric, pcc_metric
from rclnet.evaluation import predict_sequence
from rclnet.gradcheck import network_gradient_check
from rclnet.layers import rcl_backward, rcl_forward
from rclnet.network import NetworkConfig, build_network, checkpoint_bytes, network_from_bytes
from rclnet.tensor import PoolSpec
from rclnet.training import OptimState, TrainConfig, maybe_anneal, train
from test_layers import UnrolledStack, random_rcl

# tolerances and budgets, fixed by the acceptance criteria
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120
UNFOLD_FWD_TOL = 1e-12
UNFOLD_GRAD_TOL = 1e-10
OVERFIT_MSE = 0.05
OVERFIT_EPOCHS = 500
OVERFIT_BUDGET_S = 600
TEMPORAL_MIN_GAIN = 0.30
CONTROL_MAX_DIFF = 0.15
METRIC_TOL = 1e-10
CHI2_ALPHA = 0.001
MIN_FPS = 100
REFERENCE_FPS = 25

# comparison experiment shared by the temporal benchmark and its control
BENCH_NET = NetworkConfig(
    input_w=64,
    input_h=30,
    maps=8,
    rcl_count=2,
    iterations=2,
    pool_specs=(PoolSpec(4, 1, 4, 1), PoolSpec(4, 1, 4, 1), PoolSpec(1, 1, 1, 1)),
    dropout_rate=0.0,
)
BENCH_TRAIN = TrainConfig(
    learning_rate=0.01, batch_size=32, steps_per_epoch=20, max_epochs=30, patience=5, level_weights="natural"
)
CONTROL_SPEC = SynthSpec(label_mode="per_frame")


@pytest.mark.criterion(1, "gradient correctness")
def test_ac01_gradient_check(verdict):
    t0 = time.perf_counter()
    report = network_gradient_check(NetworkConfig.reduced(input_w=32, input_h=8, maps=8, rcl_count=2, iterations=2))
    elapsed = time.perf_counter() - t0
    worst_name = max(report, key=report.get)
    ok = report[worst_name] < GRAD_TOL and elapsed < GRAD_BUDGET_S
    verdict(ok, f"{len(report)} tensors, max rel err {report[worst_name]:.2e} ({worst_name}) "
                f"< {GRAD_TOL:g}; {elapsed:.1f}s < {GRAD_BUDGET_S}s")
    assert ok


@pytest.mark.criterion(2, "unfold equivalence")
def test_ac02_unfold_equivalence(verdict):
    rng = np.random.default_rng(2024)
    fwd_err = grad_err = 0.0
    for trial in range(100):
        T = int(rng.integers(0, 5))
        params = random_rcl(rng, c=int(rng.integers(1, 4)), k=int(rng.integers(1, 4)), T=T)
        u = rng.standard_normal((2, params.ff_kernels.shape[1], int(rng.integers(2, 6)), int(rng.integers(2, 7))))
        out, cache = rcl_forward(u, params)
        stack = UnrolledStack(params)
        fwd_err = max(fwd_err, float(np.abs(out - stack.forward(u)).max()))
        g = rng.standard_normal(out.shape)
        _, grads = rcl_backward(g, cache, params)
        _, _, _, per_copy = stack.backward(g)
        summed = sum(per_copy) if per_copy else np.zeros_like(params.rec_kernels)
        grad_err = max(grad_err, float(np.abs(grads["rec_kernels"] - summed).max()))
    ok = fwd_err <= UNFOLD_FWD_TOL and grad_err <= UNFOLD_GRAD_TOL
    verdict(ok, f"100 parameterizations, forward max diff {fwd_err:.1e} <= {UNFOLD_FWD_TOL:g}, "
                f"shared-weight gradient vs per-copy sum {grad_err:.1e} <= {UNFOLD_GRAD_TOL:g}")
    assert ok


def table_shape_oracle(w, h):
    """Independent trace: 3x3/1x1 convolutions keep extents; pools are
    (pool_w, pool_h, stride_w, stride_h) with floor semantics."""
    pools = [(4, 1, 4, 1), (4, 1, 4, 1), (4, 4, 4, 4), (2, 2, 2, 2), (1, 1, 1, 1)]
    trace = [(w, h)]
    for pw, ph, sw, sh in pools:
        w, h = (w - pw) // sw + 1, (h - ph) // sh + 1
        trace.append((w, h))
    return trace


@pytest.mark.criterion(3, "shape trace")
def test_ac03_shape_trace(verdict):
    cfg = NetworkConfig.full()
    oracle = table_shape_oracle(713, 30)
    features = 256 * oracle[-1][0] * oracle[-1][1]
    net = build_network(cfg)
    out = net.forward(np.random.default_rng(3).standard_normal((3, 30, 713)))
    ok = (
        cfg.shape_trace() == oracle
        and cfg.flat_features == features
        and net.out_weights.shape == (30, features)
        and out.shape == (30,)
    )
    verdict(ok, f"trace {oracle}, {cfg.flat_features} flat features (oracle {features}), {out.shape[0]} outputs")
    assert ok


@pytest.mark.criterion(4, "overfit sanity")
def test_ac04_overfit(verdict):
    spec = SynthSpec(W=32, n_subjects=1, sequences_per_subject=4, frames_per_sequence=48, closure_min_duration=8,
                     closure_max_duration=12, gap_min=4, gap_max=12, rng_seed=1, label_mode="per_frame")
    seqs = synth_generate(spec)
    net = build_network(NetworkConfig.reduced(dropout_rate=0.0), 0)
    cfg = TrainConfig(learning_rate=0.01, batch_size=16, steps_per_epoch=5, max_epochs=OVERFIT_EPOCHS,
                      patience=30, weight_decay=0.0)
    t0 = time.perf_counter()
    run = train(net, seqs, None, cfg)
    elapsed = time.perf_counter() - t0
    ok = run.best_val < OVERFIT_MSE and run.epochs <= OVERFIT_EPOCHS and elapsed < OVERFIT_BUDGET_S
    verdict(ok, f"4 sequences, training MSE {run.best_val:.4f} < {OVERFIT_MSE} after {run.epochs} epochs "
                f"({run.stop_reason}); {elapsed:.0f}s < {OVERFIT_BUDGET_S}s")
    assert ok


@pytest.mark.criterion(5, "temporal advantage")
def test_ac05_temporal_advantage(verdict):
    bench = compare_static_baseline(synth_generate(SynthSpec()), BENCH_NET, BENCH_TRAIN)
    control = compare_static_baseline(synth_generate(CONTROL_SPEC), BENCH_NET, BENCH_TRAIN)
    gain = bench.relative_improvement
    t, s = control.temporal.pooled_mse, control.static.pooled_mse
    diff = abs(t - s) / min(t, s)
    ok = gain >= TEMPORAL_MIN_GAIN and diff < CONTROL_MAX_DIFF
    verdict(ok, f"benchmark temporal {bench.temporal.pooled_mse:.3f} vs static {bench.static.pooled_mse:.3f} "
                f"({gain:.1%} >= {TEMPORAL_MIN_GAIN:.0%}); control temporal {t:.3f} vs static {s:.3f} "
                f"(differ {diff:.1%} < {CONTROL_MAX_DIFF:.0%}); held-out subjects {bench.test_subjects}")
    assert ok


def brute_mse(p, y):
    return sum((a - b) ** 2 for a, b in zip(p, y)) / len(p)


def brute_pcc(p, y):
    n = len(p)
    mp, my = sum(p) / n, sum(y) / n
    num = sum((a - mp) * (b - my) for a, b in zip(p, y))
    den = (sum((a - mp) ** 2 for a in p) * sum((b - my) ** 2 for b in y)) ** 0.5
    return num / den


@pytest.mark.criterion(6, "metric oracles")
def test_ac06_metrics(verdict):
    rng = np.random.default_rng(6)
    mse_err = pcc_err = affine_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 64))
        p = rng.standard_normal(n) * rng.uniform(0.1, 5)
        y = rng.uniform(0, 15, n)
        mse_err = max(mse_err, abs(mse_metric(p, y) - brute_mse(p.tolist(), y.tolist())))
        r = pcc_metric(p, y)
        pcc_err = max(pcc_err, abs(r - brute_pcc(p.tolist(), y.tolist())))
        a, b = rng.uniform(0.1, 10) * rng.choice([-1, 1]), rng.uniform(-10, 10)
        affine_err = max(affine_err, abs(pcc_metric(a * p + b, y) - np.sign(a) * r))
    ok = max(mse_err, pcc_err, affine_err) <= METRIC_TOL
    verdict(ok, f"1000 pairs: MSE diff {mse_err:.1e}, PCC diff {pcc_err:.1e}, affine diff {affine_err:.1e} "
                f"<= {METRIC_TOL:g}")
    assert ok


@pytest.mark.criterion(7, "sampler fidelity")
def test_ac07_sampler(verdict):
    rng = np.random.default_rng(7)
    seqs = []
    for s in range(4):
        labels = rng.integers(0, 16, 300)
        seqs.append(FrameSequence(s, np.zeros((300, 3, 2)), labels))
    pool = WindowPool(seqs, 1)
    weights = np.arange(1, 17, dtype=float) ** 1.5
    idx = weighted_batch(pool, LevelWeights(weights), 100_000, rng)
    observed = np.bincount(pool.levels[idx], minlength=16)
    expected = 100_000 * weights / weights.sum()
    chi2, pvalue = stats.chisquare(observed, expected)
    ok = pvalue > CHI2_ALPHA
    verdict(ok, f"100000 draws over 16 levels, chi2 {chi2:.1f}, p = {pvalue:.3f} > {CHI2_ALPHA}")
    assert ok


@pytest.mark.criterion(8, "annealing contract")
def test_ac08_annealing(verdict):
    checks = []
    for initial in (0.01, 0.1, 0.003, 0.05):
        state = OptimState.create(initial, patience=3)
        history, decreases, prev = [], 0, initial
        for _ in range(200):
            history.append(1.0)
            maybe_anneal(state, history)
            decreases += state.learning_rate < prev
            prev = state.learning_rate
        checks.append(decreases == 3 and state.anneal_count == 3 and state.learning_rate == initial / 1000)
    # the same contract through the real training loop
    net = build_network(NetworkConfig.reduced(input_w=16, input_h=4, maps=4, rcl_count=1, iterations=1), 0)
    data = synth_generate(SynthSpec(W=16, n_subjects=1, sequences_per_subject=1, frames_per_sequence=30,
                                    closure_min_duration=5, closure_max_duration=6, gap_min=3, gap_max=6))
    run = train(net, data, None, TrainConfig(learning_rate=1e-9, max_epochs=200, steps_per_epoch=1, batch_size=4,
                                             patience=2))
    lrs = [h["lr"] for h in run.history]
    loop_ok = (
        sorted(set(lrs), reverse=True) == [1e-9, 1e-9 / 10, 1e-9 / 100, 1e-9 / 1000]
        and all(b <= a for a, b in zip(lrs, lrs[1:]))
        and lrs[-1] == 1e-9 / 1000
    )
    ok = all(checks) and loop_ok
    verdict(ok, f"3 decreases then none over 200 plateau epochs for 4 initial rates; final lr == initial/1000 "
                f"exactly; training loop rates {sorted(set(lrs), reverse=True)}")
    assert ok


@pytest.mark.criterion(9, "causality")
def test_ac09_causality(verdict):
    rng = np.random.default_rng(9)
    cfg = NetworkConfig.reduced()
    net = build_network(cfg, 1)
    net.forward(rng.standard_normal((8, 3, cfg.input_h, cfg.input_w)), training=True)  # non-trivial BN stats
    failures = 0
    for _ in range(50):
        n_frames = int(rng.integers(2, 80))
        seq = FrameSequence(0, rng.standard_normal((n_frames, 3, cfg.input_w)), rng.integers(0, 16, n_frames))
        n = int(rng.integers(1, n_frames))
        before = predict_sequence(net, seq).prediction
        seq.frames[n:] = rng.standard_normal(seq.frames[n:].shape) * rng.uniform(0.1, 100)
        after = predict_sequence(net, seq).prediction
        failures += before[:n].tobytes() != after[:n].tobytes()
    ok = failures == 0
    verdict(ok, f"50 sequences, {failures} with any bitwise change to predictions for frames <= n")
    assert ok


@pytest.mark.criterion(10, "LOSO partition")
def test_ac10_loso(verdict):
    spec = SynthSpec(W=32, n_subjects=5, sequences_per_subject=2, frames_per_sequence=40, closure_min_duration=6,
                     closure_max_duration=8, gap_min=3, gap_max=8)
    seqs = synth_generate(spec)
    cfg = NetworkConfig.reduced()
    calls = {}

    def fit(train_seqs, subject):
        calls[subject] = {s.subject_id for s in train_seqs}
        net = build_network(cfg, 0)
        train(net, train_seqs, None, TrainConfig(max_epochs=1, steps_per_epoch=2, batch_size=8))
        return net

    rep = loso_crossval(seqs, fit, threads=2)
    tested = [name for names in rep.fold_sequences for name in names]
    ok = (
        len(rep.fold_subjects) == 5
        and sorted(tested) == sorted(s.name for s in seqs)
        and len(tested) == len(set(tested))
        and all(sub not in calls[sub] and calls[sub] == set(range(5)) - {sub} for sub in rep.fold_subjects)
        and all(
            {s.subject_id for s in seqs if s.name in names} == {sub}
            for sub, names in zip(rep.fold_subjects, rep.fold_sequences)
        )
    )
    verdict(ok, f"{len(rep.fold_subjects)} folds, {len(tested)}/{len(seqs)} sequences tested once each, "
                f"train/test subjects disjoint in every fold")
    assert ok


def fuzz(blob, parse, rng, count):
    crashes = []
    for k in range(count):
        data = bytearray(blob)
        if k % 2 == 0:
            data = data[: int(rng.integers(0, len(data)))]
        else:
            pos = int(rng.integers(0, len(data)))
            data[pos] ^= 1 << int(rng.integers(0, 8))
        try:
            parse(bytes(data))
        except FormatError:
            pass
        except Exception as e:  # anything else is a crash
            crashes.append(f"{type(e).__name__}: {e}")
    return crashes


@pytest.mark.criterion(11, "serialization")
def test_ac11_serialization(verdict):
    rng = np.random.default_rng(11)
    seq = FrameSequence(4, rng.standard_normal((7, 3, 10)), rng.uniform(0, 15, 7))
    seq_ok = sequence_from_bytes(sequence_bytes(seq)) == seq
    net = build_network(NetworkConfig.reduced(input_w=16, input_h=4, maps=4, rcl_count=1, iterations=1), 3)
    net.forward(rng.standard_normal((4, 3, 4, 16)), training=True)
    blob = checkpoint_bytes(net)
    loaded = network_from_bytes(blob)
    net_ok = checkpoint_bytes(loaded) == blob and all(
        np.array_equal(a, b) for a, b in zip(net.state_tensors().values(), loaded.state_tensors().values())
    )
    crashes = fuzz(sequence_bytes(seq), sequence_from_bytes, rng, 1000) + fuzz(blob, network_from_bytes, rng, 1000)
    ok = seq_ok and net_ok and not crashes
    verdict(ok, f"sequence round trip {'identical' if seq_ok else 'DIFFERS'}, checkpoint round trip "
                f"{'identical' if net_ok else 'DIFFERS'}; 2000 truncations/bit flips, {len(crashes)} non-format errors"
                + (f" (first: {crashes[0]})" if crashes else ""))
    assert ok


@pytest.mark.criterion(12, "throughput")
def test_ac12_throughput(verdict):
    rng = np.random.default_rng(12)
    cfg = NetworkConfig.reduced()
    seq = FrameSequence(0, rng.standard_normal((300, 3, cfg.input_w)), np.zeros(300))
    fps = measure_throughput(build_network(cfg, 0), seq, repetitions=3)
    full_cfg = NetworkConfig.full()
    full_seq = FrameSequence(0, rng.standard_normal((4, 3, full_cfg.input_w)), np.zeros(4))
    full_fps = measure_throughput(build_network(full_cfg, 0), full_seq, repetitions=1, warmup=0)
    ok = fps >= MIN_FPS
    verdict(ok, f"reduced config {fps:.0f} frames/s >= {MIN_FPS}; full config {full_fps:.2f} frames/s "
                f"(reported only; reference figure {REFERENCE_FPS} frames/s)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", *sys.argv[1:]]))
