"""
Sequences, causal windows, weighted level sampling and the synthetic
blink/closure generator.

Frame indices exposed to callers are 1-based: frame ``n`` of a sequence is
``seq.frames[n - 1]``. A window ending at frame ``n`` with height ``H``
stacks frames ``n-H+1 .. n`` top to bottom, zero rows standing in for
frames before the start of the sequence.
"""

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, FormatError

LEVELS = 16
CHANNELS = 3


@dataclass
class FrameSequence:
    subject_id: int
    frames: np.ndarray  # n x 3 x W
    labels: np.ndarray  # n
    name: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1] != CHANNELS:
            raise DimensionError(f"frames must be n x {CHANNELS} x W, got {self.frames.shape}")
        if len(self.frames) < 1 or len(self.frames) != len(self.labels):
            raise DimensionError(f"{len(self.frames)} frames vs {len(self.labels)} labels")

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def width(self):
        return self.frames.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )


def flatten_frame(frame):
    """Flatten an ``h x w x 3`` image into 3 row-major channel vectors (``3 x h*w``)."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[..., None]
    if frame.ndim != 3 or frame.size == 0:
        raise DimensionError(f"expected a non-empty h x w x channels frame, got shape {frame.shape}")
    return frame.transpose(2, 0, 1).reshape(frame.shape[2], -1)


# ---------------------------------------------------------------------------
# Windows


@dataclass
class WindowSample:
    data: np.ndarray  # 3 x H x W
    targets: np.ndarray  # H
    mask: np.ndarray  # H, 0 on padded rows
    end_frame: int
    pad_rows: int


def build_window(seq, n, H):
    """Causal window of height ``H`` ending at 1-based frame ``n``."""
    if not 1 <= n <= seq.n_frames:
        raise IndexError(f"frame {n} out of range 1..{seq.n_frames}")
    pad = max(0, H - n)
    data = np.zeros((CHANNELS, H, seq.width), dtype=np.float32)
    targets = np.zeros(H, dtype=np.float32)
    mask = np.zeros(H, dtype=np.float32)
    first = n - H + pad  # 0-based index of the first real frame
    data[:, pad:, :] = seq.frames[first:n].transpose(1, 0, 2)
    targets[pad:] = seq.labels[first:n]
    mask[pad:] = 1
    return WindowSample(data, targets, mask, n, pad)


def sequence_windows(seq, H, ends=None):
    """All windows of a sequence at once.

    Returns ``(data, targets, mask)`` with shapes ``N x 3 x H x W``,
    ``N x H`` and ``N x H`` for 1-based end frames ``ends`` (default: every
    frame).
    """
    frames = np.concatenate([np.zeros((H - 1, CHANNELS, seq.width), np.float32), seq.frames])
    labels = np.concatenate([np.zeros(H - 1, np.float32), seq.labels])
    valid = np.concatenate([np.zeros(H - 1, np.float32), np.ones(seq.n_frames, np.float32)])
    idx = np.arange(seq.n_frames) if ends is None else np.asarray(ends) - 1
    win = sliding_window_view(frames, H, axis=0)[idx]  # N x 3 x W x H
    data = np.ascontiguousarray(win.transpose(0, 1, 3, 2))
    targets = sliding_window_view(labels, H)[idx]
    mask = sliding_window_view(valid, H)[idx]
    return data, np.array(targets), np.array(mask)


def label_level(label):
    """Integer intensity level(s) 0..15 of scalar or array labels."""
    lv = np.clip(np.rint(label), 0, LEVELS - 1).astype(np.int64)
    return int(lv) if lv.ndim == 0 else lv


class WindowPool:
    """Every (sequence, end frame) pair of a training set, keyed by the
    intensity level of the end frame."""

    def __init__(self, sequences, H):
        if not sequences:
            raise ConfigurationError("window pool needs at least one sequence")
        self.sequences = list(sequences)
        self.H = H
        seq_idx, ends = [], []
        for i, s in enumerate(self.sequences):
            seq_idx.append(np.full(s.n_frames, i))
            ends.append(np.arange(1, s.n_frames + 1))
        self.seq_index = np.concatenate(seq_idx)
        self.end_frame = np.concatenate(ends)
        self.levels = label_level(np.concatenate([s.labels for s in self.sequences]))
        self.by_level = {lv: np.flatnonzero(self.levels == lv) for lv in np.unique(self.levels)}

    def __len__(self):
        return len(self.seq_index)

    @property
    def present_levels(self):
        return sorted(int(k) for k in self.by_level)

    def gather(self, indices):
        """Stack windows for pool indices: ``(data, targets, mask)``."""
        indices = np.asarray(indices)
        data = np.empty((len(indices), CHANNELS, self.H, self.sequences[0].width), np.float32)
        targets = np.empty((len(indices), self.H), np.float32)
        mask = np.empty((len(indices), self.H), np.float32)
        for s in np.unique(self.seq_index[indices]):
            rows = np.flatnonzero(self.seq_index[indices] == s)
            d, t, m = sequence_windows(self.sequences[s], self.H, self.end_frame[indices[rows]])
            data[rows], targets[rows], mask[rows] = d, t, m
        return data, targets, mask


@dataclass
class LevelWeights:
    weights: np.ndarray = field(default_factory=lambda: np.ones(LEVELS))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (LEVELS,):
            raise DimensionError(f"need {LEVELS} level weights, got shape {self.weights.shape}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("level weights must be finite and non-negative")

    def normalized(self):
        total = self.weights.sum()
        if total <= 0:
            raise ConfigurationError("level weights are all zero")
        return self.weights / total

    def restricted(self, present):
        """Weights renormalized over the present levels only."""
        w = np.zeros(LEVELS)
        w[present] = self.weights[present]
        total = w.sum()
        if total <= 0:
            raise ConfigurationError(f"all level weights are zero on the levels present in the pool {present}")
        if self.weights.sum() - total > 1e-12 * self.weights.sum():
            missing = [int(lv) for lv in np.flatnonzero(self.weights) if lv not in present]
            warnings.warn(f"weight on absent levels {missing} renormalized over present levels", stacklevel=3)
        return w / total


def weighted_batch(pool, weights, batch_size, rng):
    """Draw ``batch_size`` pool indices: level ~ weights (restricted to the
    levels present), then uniform within the level, with replacement."""
    if len(pool) == 0:
        raise ConfigurationError("empty window pool")
    present = pool.present_levels
    probs = weights.restricted(present)
    levels = rng.choice(LEVELS, size=batch_size, p=probs)
    out = np.empty(batch_size, dtype=np.intp)
    for lv in np.unique(levels):
        slots = np.flatnonzero(levels == lv)
        members = pool.by_level[lv]
        out[slots] = members[rng.integers(0, len(members), size=len(slots))]
    return out


# ---------------------------------------------------------------------------
# Sequence files
#
#   b"RCLSEQ1" 0x01
#   u32 subject_id, u32 n_frames, u32 channels (=3), u32 W
#   per frame: 3*W float32 (channel-major), float32 label     (all little-endian)

SEQ_MAGIC = b"RCLSEQ1"
SEQ_VERSION = 1
_HEADER = struct.Struct("<4I")


def sequence_bytes(seq):
    head = SEQ_MAGIC + bytes([SEQ_VERSION]) + _HEADER.pack(seq.subject_id, seq.n_frames, CHANNELS, seq.width)
    body = np.concatenate([seq.frames.reshape(seq.n_frames, -1), seq.labels[:, None]], axis=1)
    return head + body.astype("<f4").tobytes()


def sequence_from_bytes(data, name=""):
    magic_len = len(SEQ_MAGIC)
    if len(data) < magic_len or data[:magic_len] != SEQ_MAGIC:
        raise FormatError(f"bad magic {bytes(data[:magic_len])!r}, expected {SEQ_MAGIC.decode()!r}", 0)
    if len(data) < magic_len + 1:
        raise FormatError("truncated before version byte", magic_len)
    if data[magic_len] != SEQ_VERSION:
        raise FormatError(f"unsupported version {data[magic_len]}", magic_len)
    pos = magic_len + 1
    if len(data) < pos + _HEADER.size:
        raise FormatError("truncated header", len(data))
    subject_id, n, channels, width = _HEADER.unpack_from(data, pos)
    if channels != CHANNELS:
        raise FormatError(f"channel count {channels}, expected {CHANNELS}", pos + 8)
    if n < 1 or width < 1:
        raise FormatError(f"empty sequence (frames={n}, W={width})", pos + 4)
    pos += _HEADER.size
    record = (CHANNELS * width + 1) * 4
    expected = pos + n * record
    if len(data) < expected:
        full = (len(data) - pos) // record
        raise FormatError(f"truncated in frame {full + 1} of {n}", pos + full * record)
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes", expected)
    body = np.frombuffer(data, dtype="<f4", count=n * (CHANNELS * width + 1), offset=pos)
    body = body.reshape(n, CHANNELS * width + 1)
    frames = body[:, :-1].reshape(n, CHANNELS, width)
    return FrameSequence(subject_id, frames.astype(np.float32), body[:, -1].astype(np.float32), name)


def write_sequence(seq, path):
    with open(path, "wb") as fh:
        fh.write(sequence_bytes(seq))


def read_sequence(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return sequence_from_bytes(data, name=os.path.splitext(os.path.basename(path))[0])


def write_manifest(paths, manifest_path):
    with open(manifest_path, "w") as fh:
        for p in paths:
            fh.write(f"{p}\n")


def read_manifest(manifest_path):
    """Load every sequence listed in a manifest (relative paths resolve
    against the manifest's directory)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    return [read_sequence(p if os.path.isabs(p) else os.path.join(base, p)) for p in lines]


# ---------------------------------------------------------------------------
# Synthetic blink / closure data


@dataclass
class SynthSpec:
    """Parameters of the synthetic temporal-ambiguity dataset.

    Events are eye "closures" rendered identically frame by frame. Short
    ones (blinks, at most ``blink_duration_max`` frames) carry label 0;
    long ones (at least ``closure_min_duration`` frames) carry a label
    that ramps up to ``ramp_height``. With ``label_mode="per_frame"``
    every closed frame is labelled ``ramp_height`` instead, which makes
    the label a function of the single frame. ``label_mode="independent"``
    goes further: each frame is closed with probability ``closed_prob``
    independently of its neighbours and labelled as in ``per_frame``, so
    earlier frames carry no information about the current label.
    """

    W: int = 64
    n_subjects: int = 6
    sequences_per_subject: int = 4
    frames_per_sequence: int = 240
    blink_duration_max: int = 3
    closure_min_duration: int = 12
    closure_max_duration: int = 24
    blink_fraction: float = 0.6
    gap_min: int = 8
    gap_max: int = 40
    noise_std: float = 0.3
    ramp_height: float = 10.0
    label_mode: str = "duration"
    closed_prob: float = 0.3
    rng_seed: int = 42

    def validate(self):
        if not self.closure_min_duration > self.blink_duration_max >= 1:
            raise ConfigurationError("need closure_min_duration > blink_duration_max >= 1")
        if self.closure_max_duration < self.closure_min_duration:
            raise ConfigurationError("closure_max_duration must be >= closure_min_duration")
        if self.closure_min_duration > self.frames_per_sequence:
            raise ConfigurationError(
                f"closure_min_duration {self.closure_min_duration} does not fit in "
                f"{self.frames_per_sequence} frames per sequence"
            )
        if not 0 < self.ramp_height <= 15:
            raise ConfigurationError("ramp_height must lie in (0, 15]")
        if min(self.W, self.n_subjects, self.sequences_per_subject) < 1 or self.gap_min < 1:
            raise ConfigurationError("W, n_subjects, sequences_per_subject and gap_min must be >= 1")
        if self.gap_max < self.gap_min:
            raise ConfigurationError("gap_max must be >= gap_min")
        if self.noise_std < 0 or not 0 <= self.blink_fraction <= 1:
            raise ConfigurationError("noise_std must be >= 0 and blink_fraction in [0, 1]")
        if not 0 <= self.closed_prob <= 1:
            raise ConfigurationError("closed_prob must lie in [0, 1]")
        if self.label_mode not in ("duration", "per_frame", "independent"):
            raise ConfigurationError(f"unknown label_mode {self.label_mode!r}")


def _bump(W, centre, width):
    x = np.arange(W)
    return np.exp(-0.5 * ((x - centre) / width) ** 2)


def synth_events(spec, n, rng):
    """Event list ``[(start, duration, is_long)]`` (0-based starts) for one sequence."""
    events = []
    t = int(rng.integers(spec.gap_min, spec.gap_max + 1))
    while True:
        is_long = rng.random() >= spec.blink_fraction
        if is_long:
            d = int(rng.integers(spec.closure_min_duration, spec.closure_max_duration + 1))
        else:
            d = int(rng.integers(1, spec.blink_duration_max + 1))
        if t + d > n:
            break
        events.append((t, d, is_long))
        t += d + int(rng.integers(spec.gap_min, spec.gap_max + 1))
    return events


def event_labels(spec, events, n):
    labels = np.zeros(n, dtype=np.float32)
    for start, d, is_long in events:
        if spec.label_mode == "per_frame":
            labels[start : start + d] = spec.ramp_height
        elif is_long:
            k = np.arange(d)
            ramp = spec.ramp_height * np.minimum(1.0, (k + 1) / spec.closure_min_duration)
            labels[start : start + d] = np.rint(ramp)
    return labels


def synth_generate(spec=None):
    """Generate ``n_subjects * sequences_per_subject`` sequences."""
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    W = spec.W
    eye = -1.5 * _bump(W, 0.3 * W, 0.06 * W)
    pose = _bump(W, 0.7 * W, 0.1 * W)
    eye = np.stack([eye, 0.8 * eye, 0.6 * eye])
    pose = np.stack([pose, -pose, 0.5 * pose])
    n = spec.frames_per_sequence
    out = []
    for subject in range(spec.n_subjects):
        base = 0.5 * rng.standard_normal((CHANNELS, W))
        for k in range(spec.sequences_per_subject):
            if spec.label_mode == "independent":
                closed = (rng.random(n) < spec.closed_prob).astype(float)
                labels = (spec.ramp_height * closed).astype(np.float32)
            else:
                events = synth_events(spec, n, rng)
                closed = np.zeros(n)
                for start, d, _ in events:
                    closed[start : start + d] = 1
                labels = event_labels(spec, events, n)
            period = rng.uniform(40, 160)
            phase = rng.uniform(0, 2 * np.pi)
            pose_t = np.sin(2 * np.pi * np.arange(n) / period + phase)
            frames = (
                base[None]
                + closed[:, None, None] * eye[None]
                + pose_t[:, None, None] * pose[None]
                + spec.noise_std * rng.standard_normal((n, CHANNELS, W))
            )
            out.append(
                FrameSequence(subject, frames, labels, name=f"s{subject:02d}_q{k:02d}")
            )
    return out


def label_histogram(sequences):
    """Counts of frames per intensity level 0..15."""
    levels = label_level(np.concatenate([s.labels for s in sequences]))
    return np.bincount(levels, minlength=LEVELS)
