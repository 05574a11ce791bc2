"""
Per-frame prediction over stride-1 causal windows, MSE/PCC metrics,
leave-one-subject-out cross-validation, the static-baseline comparison
and throughput measurement.
"""

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .datapipe import sequence_windows
from .errors import ConfigurationError, DimensionError, UndefinedCorrelation
from .network import build_network

MAX_LEVEL = 15.0


def mse_metric(pred, truth):
    """Mean squared error ``(1/N) sum (p - y)^2``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DimensionError(f"need equal-length vectors, got {pred.shape} and {truth.shape}")
    if pred.size < 1:
        raise DimensionError("MSE of empty vectors")
    return float(np.mean((pred - truth) ** 2))


def pcc_metric(pred, truth):
    """Pearson correlation; raises :class:`UndefinedCorrelation` when either
    vector is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DimensionError(f"need equal-length vectors, got {pred.shape} and {truth.shape}")
    if pred.size < 2:
        raise DimensionError("PCC needs at least 2 points")
    p = pred - pred.mean()
    t = truth - truth.mean()
    norm = np.sqrt((p**2).sum()) * np.sqrt((t**2).sum())
    if norm == 0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    return float(np.clip((p @ t) / norm, -1.0, 1.0))


def _pcc_or_none(pred, truth):
    try:
        return pcc_metric(pred, truth)
    except (UndefinedCorrelation, DimensionError):
        return None


@dataclass
class Timeline:
    sequence: str
    frames: np.ndarray  # 1..n
    truth: np.ndarray
    prediction: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "truth", "prediction"])
            for f, t, p in zip(self.frames, self.truth, self.prediction):
                w.writerow([int(f), repr(float(t)), repr(float(p))])


def predict_sequence(net, seq, clamp=None, batch_size=256):
    """Estimate every frame of ``seq`` from the causal window ending at it.

    The estimate for frame ``n`` is the last-row output of that window
    (the expected level under the classification head). ``clamp``
    defaults to the network config's ``clamp_predictions``.
    """
    cfg = net.config
    if seq.width != cfg.input_w:
        raise DimensionError(f"sequence width {seq.width} != network input width {cfg.input_w}")
    clamp = cfg.clamp_predictions if clamp is None else clamp
    preds = np.empty(seq.n_frames, dtype=np.float64)
    for start in range(0, seq.n_frames, batch_size):
        ends = np.arange(start + 1, min(start + batch_size, seq.n_frames) + 1)
        data, _, _ = sequence_windows(seq, cfg.input_h, ends)
        out = net.forward(data)
        if cfg.head == "classification":
            preds[start : start + len(ends)] = out @ np.arange(out.shape[1])
        else:
            preds[start : start + len(ends)] = out[:, -1]
    if clamp:
        np.clip(preds, 0.0, MAX_LEVEL, out=preds)
    return Timeline(seq.name, np.arange(1, seq.n_frames + 1), seq.labels.astype(np.float64), preds)


def evaluate_sequences(net, sequences):
    """Pooled-frame MSE/PCC over ``sequences`` plus their timelines."""
    timelines = [predict_sequence(net, s) for s in sequences]
    pred = np.concatenate([t.prediction for t in timelines])
    truth = np.concatenate([t.truth for t in timelines])
    return {"mse": mse_metric(pred, truth), "pcc": _pcc_or_none(pred, truth), "timelines": timelines}


@dataclass
class EvalReport:
    """Per-fold and aggregate metrics. A PCC of ``None`` means undefined
    (constant predictions or truth) and is written as ``"undefined"``."""

    fold_subjects: list = field(default_factory=list)
    fold_sequences: list = field(default_factory=list)
    fold_mse: list = field(default_factory=list)
    fold_pcc: list = field(default_factory=list)
    mean_mse: float = None
    mean_pcc: float = None
    pooled_mse: float = None
    pooled_pcc: float = None
    fps: float = None
    timelines: list = field(default_factory=list, repr=False)

    @classmethod
    def from_folds(cls, folds):
        """``folds``: list of (subject, timelines) in any order."""
        folds = sorted(folds, key=lambda f: f[0])
        rep = cls()
        for subject, timelines in folds:
            pred = np.concatenate([t.prediction for t in timelines])
            truth = np.concatenate([t.truth for t in timelines])
            rep.fold_subjects.append(int(subject))
            rep.fold_sequences.append([t.sequence for t in timelines])
            rep.fold_mse.append(mse_metric(pred, truth))
            rep.fold_pcc.append(_pcc_or_none(pred, truth))
            rep.timelines.extend(timelines)
        rep.mean_mse = float(np.mean(rep.fold_mse))
        defined = [p for p in rep.fold_pcc if p is not None]
        rep.mean_pcc = float(np.mean(defined)) if defined else None
        pred = np.concatenate([t.prediction for t in rep.timelines])
        truth = np.concatenate([t.truth for t in rep.timelines])
        rep.pooled_mse = mse_metric(pred, truth)
        rep.pooled_pcc = _pcc_or_none(pred, truth)
        return rep

    def to_dict(self):
        d = asdict(self)
        d.pop("timelines")
        d["fold_pcc"] = ["undefined" if p is None else p for p in self.fold_pcc]
        for key in ("mean_pcc", "pooled_pcc"):
            if d[key] is None:
                d[key] = "undefined"
        d["folds"] = len(self.fold_subjects)
        return d

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _by_subject(sequences):
    groups = {}
    for s in sequences:
        groups.setdefault(int(s.subject_id), []).append(s)
    return groups


def holdout_report(net, test_sequences):
    """Evaluate one trained network on held-out sequences, one fold per subject."""
    folds = [(sub, [predict_sequence(net, s) for s in seqs]) for sub, seqs in _by_subject(test_sequences).items()]
    return EvalReport.from_folds(folds)


def loso_crossval(sequences, train_fn, threads=1):
    """Leave-one-subject-out cross-validation.

    ``train_fn(train_sequences, test_subject)`` returns a trained network.
    Fold ``k`` trains on every other subject and tests on all of subject
    ``k``'s sequences. Folds may run on ``threads`` worker threads; the
    report is merged in subject order either way.
    """
    groups = _by_subject(sequences)
    if len(groups) < 2:
        raise ConfigurationError(f"leave-one-subject-out needs >= 2 subjects, got {len(groups)}")

    def run_fold(subject):
        train_seqs = [s for s in sequences if int(s.subject_id) != subject]
        net = train_fn(train_seqs, subject)
        return subject, [predict_sequence(net, s) for s in groups[subject]]

    subjects = sorted(groups)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(run_fold, subjects))
    else:
        folds = [run_fold(s) for s in subjects]
    return EvalReport.from_folds(folds)


@dataclass
class Comparison:
    temporal: EvalReport
    static: EvalReport
    test_subjects: list

    @property
    def relative_improvement(self):
        """Fraction by which the temporal model's MSE undercuts the static one."""
        return 1.0 - self.temporal.pooled_mse / self.static.pooled_mse

    def to_dict(self):
        return {
            "test_subjects": self.test_subjects,
            "temporal": self.temporal.to_dict(),
            "static": self.static.to_dict(),
            "relative_improvement": self.relative_improvement,
        }


def split_subjects(sequences, test_fraction=1 / 3):
    subjects = sorted(_by_subject(sequences))
    if len(subjects) < 2:
        raise ConfigurationError("need at least 2 subjects to hold some out")
    n_test = min(len(subjects) - 1, max(1, round(len(subjects) * test_fraction)))
    return subjects[:-n_test], subjects[-n_test:]


def compare_static_baseline(sequences, net_config, train_config, test_subjects=None, seed=0):
    """Train the temporal model (window height ``net_config.input_h``) and
    the single-frame baseline (same architecture, height 1) with identical
    training settings; evaluate both on held-out subjects."""
    from .training import train

    if test_subjects is None:
        _, test_subjects = split_subjects(sequences)
    test_subjects = sorted(int(s) for s in test_subjects)
    train_seqs = [s for s in sequences if int(s.subject_id) not in test_subjects]
    test_seqs = [s for s in sequences if int(s.subject_id) in test_subjects]
    if not train_seqs or not test_seqs:
        raise ConfigurationError("held-out split leaves no training or no test sequences")
    reports = []
    for cfg in (net_config, net_config.static_variant()):
        net = build_network(cfg, seed)
        train(net, train_seqs, None, train_config)
        reports.append(holdout_report(net, test_seqs))
    return Comparison(reports[0], reports[1], test_subjects)


def measure_throughput(net, seq, repetitions=5, warmup=1):
    """Median frames per second of :func:`predict_sequence` over ``repetitions`` runs."""
    for _ in range(warmup):
        predict_sequence(net, seq)
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict_sequence(net, seq)
        rates.append(seq.n_frames / (time.perf_counter() - t0))
    return float(np.median(rates))
