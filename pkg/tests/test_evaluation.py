import json
from dataclasses import replace

import numpy as np
import pytest

from rclnet.datapipe import FrameSequence
from rclnet.errors import ConfigurationError, DimensionError, UndefinedCorrelation
from rclnet.evaluation import (
    EvalReport,
    loso_crossval,
    measure_throughput,
    mse_metric,
    pcc_metric,
    predict_sequence,
    split_subjects,
)
from rclnet.network import NetworkConfig, build_network

CFG = NetworkConfig.reduced(input_w=8, input_h=5, maps=4, rcl_count=1, iterations=1)


def brute_mse(p, y):
    return sum((a - b) ** 2 for a, b in zip(p, y)) / len(p)


def brute_pcc(p, y):
    n = len(p)
    mp, my = sum(p) / n, sum(y) / n
    num = sum((a - mp) * (b - my) for a, b in zip(p, y))
    den = (sum((a - mp) ** 2 for a in p) * sum((b - my) ** 2 for b in y)) ** 0.5
    return num / den


def test_mse_examples():
    assert mse_metric([1, 2, 3], [1, 2, 3]) == 0.0
    assert mse_metric([0, 0], [1, 3]) == 5.0
    with pytest.raises(DimensionError):
        mse_metric([1, 2], [1, 2, 3])


def test_pcc_examples():
    assert pcc_metric([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
    assert pcc_metric([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    # deviations (-1, 0, 1) and (-4/3, -1/3, 5/3): r = 3 / sqrt(2 * 42/9) = 9 / sqrt(84)
    assert pcc_metric([1, 2, 3], [1, 2, 4]) == pytest.approx(9 / np.sqrt(84), abs=1e-12)
    assert round(pcc_metric([1, 2, 3], [1, 2, 4]), 4) == 0.9820


def test_metrics_match_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(2, 40))
        p, y = rng.standard_normal(n), rng.standard_normal(n)
        assert mse_metric(p, y) == pytest.approx(brute_mse(p, y), abs=1e-10)
        assert pcc_metric(p, y) == pytest.approx(brute_pcc(p, y), abs=1e-10)


def test_pcc_affine_invariance(rng):
    p, y = rng.standard_normal(50), rng.standard_normal(50)
    base = pcc_metric(p, y)
    assert pcc_metric(3.5 * p - 2.0, y) == pytest.approx(base, abs=1e-10)
    assert pcc_metric(p, 0.1 * y + 7) == pytest.approx(base, abs=1e-10)
    assert pcc_metric(-p, y) == pytest.approx(-base, abs=1e-10)


def test_pcc_constant_is_undefined():
    with pytest.raises(UndefinedCorrelation):
        pcc_metric([1.0, 1.0, 1.0], [1, 2, 3])
    with pytest.raises(DimensionError):
        pcc_metric([1.0], [2.0])


def seq(rng, subject, n=12, name=None):
    return FrameSequence(subject, rng.standard_normal((n, 3, 8)), rng.integers(0, 16, n), name or f"s{subject}_{n}")


def test_predict_sequence_one_per_frame(rng):
    net = build_network(CFG, 0)
    s = seq(rng, 0, n=17)
    tl = predict_sequence(net, s, batch_size=4)
    assert len(tl.prediction) == 17
    np.testing.assert_array_equal(tl.frames, np.arange(1, 18))
    np.testing.assert_array_equal(tl.truth, s.labels)


def test_prediction_is_causal(rng):
    net = build_network(CFG, 0)
    s = seq(rng, 0, n=20)
    a = predict_sequence(net, s).prediction
    s.frames[10:] = rng.standard_normal(s.frames[10:].shape)
    b = predict_sequence(net, s).prediction
    np.testing.assert_array_equal(a[:10], b[:10])


def test_clamp(rng):
    net = build_network(replace(CFG, clamp_predictions=True), 0)
    net.out_bias[:] = 100.0
    assert np.all(predict_sequence(net, seq(rng, 0)).prediction == 15.0)
    assert np.all(predict_sequence(net, seq(rng, 0), clamp=False).prediction > 15.0)


def test_width_mismatch(rng):
    net = build_network(CFG, 0)
    with pytest.raises(DimensionError):
        predict_sequence(net, FrameSequence(0, np.zeros((4, 3, 9)), np.zeros(4)))


def constant_trainer(value):
    def fit(train_seqs, subject):
        net = build_network(CFG, 0)
        net.out_weights[:] = 0
        net.out_bias[:] = value
        fit.calls.append((subject, sorted({s.subject_id for s in train_seqs})))
        return net

    fit.calls = []
    return fit


def test_loso_two_subjects(rng):
    seqs = [seq(rng, 0), seq(rng, 1)]
    fit = constant_trainer(2.0)
    rep = loso_crossval(seqs, fit)
    assert rep.fold_subjects == [0, 1]
    assert fit.calls == [(0, [1]), (1, [0])]
    for k, s in enumerate(seqs):
        assert rep.fold_mse[k] == pytest.approx(mse_metric(np.full(12, 2.0), s.labels))
    assert rep.fold_pcc == [None, None]  # constant predictions


def test_loso_five_subjects_partition(rng):
    seqs = [seq(rng, sub, n=8 + k, name=f"s{sub}q{k}") for sub in range(5) for k in range(2)]
    fit = constant_trainer(1.0)
    rep = loso_crossval(seqs, fit, threads=3)
    assert rep.fold_subjects == [0, 1, 2, 3, 4]
    tested = [name for names in rep.fold_sequences for name in names]
    assert sorted(tested) == sorted(s.name for s in seqs)
    for subject, train_subjects in fit.calls:
        assert subject not in train_subjects and len(train_subjects) == 4
    d = rep.to_dict()
    assert d["folds"] == 5 and d["mean_pcc"] == "undefined"
    json.dumps(d)


def test_loso_needs_two_subjects(rng):
    with pytest.raises(ConfigurationError):
        loso_crossval([seq(rng, 0), seq(rng, 0)], constant_trainer(0.0))


def test_report_mean_and_pooled():
    class T:
        def __init__(self, p, y):
            self.prediction, self.truth, self.sequence = np.array(p, float), np.array(y, float), "x"

    rep = EvalReport.from_folds([(1, [T([0, 0], [1, 1])]), (0, [T([0, 0, 0, 0], [0, 0, 0, 2])])])
    assert rep.fold_subjects == [0, 1]
    assert rep.fold_mse == [1.0, 1.0]
    assert rep.mean_mse == 1.0 and rep.pooled_mse == 1.0


def test_split_subjects(rng):
    seqs = [seq(rng, s) for s in range(6)]
    assert split_subjects(seqs) == ([0, 1, 2, 3], [4, 5])


def test_throughput_positive(rng):
    fps = measure_throughput(build_network(CFG, 0), seq(rng, 0, n=40), repetitions=2)
    assert fps > 0
