"""Command-line entry point: ``rclnet {synth,train,eval,gradcheck,compare}``.

Configuration precedence is flags > JSON config file > built-in defaults.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .datapipe import SynthSpec, label_histogram, read_manifest, synth_generate, write_manifest, write_sequence
from .errors import ConfigurationError, FormatError, RclNetError, TrainingDiverged
from .evaluation import (
    compare_static_baseline,
    holdout_report,
    loso_crossval,
    measure_throughput,
)
from .gradcheck import network_gradient_check
from .network import NetworkConfig, build_network, read_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("rclnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    manifest: str = "data/manifest.txt"
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    protocol: str = "holdout"  # eval: "holdout" (given checkpoint) or "loso"

    def to_dict(self):
        return {
            "network": self.network.to_dict(),
            "training": asdict(self.training),
            "manifest": self.manifest,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "threads": self.threads,
            "protocol": self.protocol,
        }

    @classmethod
    def from_dict(cls, d):
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        network = NetworkConfig.from_dict({**base.network.to_dict(), **d.get("network", {})})
        train_d = d.get("training", {})
        bad = set(train_d) - {f.name for f in fields(TrainConfig)}
        if bad:
            raise ConfigurationError(f"unknown training config keys: {sorted(bad)}")
        training = TrainConfig(**{**asdict(base.training), **train_d})
        scalars = {k: d[k] for k in top - {"network", "training"} if k in d}
        cfg = cls(network=network, training=training, **scalars)
        if cfg.protocol not in ("holdout", "loso"):
            raise ConfigurationError(f"protocol must be 'holdout' or 'loso', got {cfg.protocol!r}")
        if cfg.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        return cfg


# flag -> (section, key, type, help); section None means a top-level key
RUN_FLAGS = {
    "--manifest": (None, "manifest", str, "sequence manifest"),
    "--out-dir": (None, "out_dir", str, "directory for every output file"),
    "--seed": (None, "seed", int, "network initialization and sampling seed"),
    "--threads": (None, "threads", int, "maximum cross-validation folds run at once"),
    "--protocol": (None, "protocol", str, "evaluation protocol: holdout or loso"),
    "--input-w": ("network", "input_w", int, "frame vector width W"),
    "--input-h": ("network", "input_h", int, "window height H"),
    "--maps": ("network", "maps", int, "feature maps per layer"),
    "--rcl-count": ("network", "rcl_count", int, "number of recurrent layers"),
    "--iterations": ("network", "iterations", int, "recurrent iterations T"),
    "--dropout": ("network", "dropout_rate", float, "dropout rate before the output layer"),
    "--head": ("network", "head", str, "regression or classification"),
    "--lr": ("training", "learning_rate", float, "initial learning rate"),
    "--momentum": ("training", "momentum", float, "SGD momentum"),
    "--weight-decay": ("training", "weight_decay", float, "L2 weight decay"),
    "--batch-size": ("training", "batch_size", int, "windows per SGD step"),
    "--epochs": ("training", "max_epochs", int, "maximum epochs"),
    "--steps-per-epoch": ("training", "steps_per_epoch", int, "SGD steps per epoch"),
    "--patience": ("training", "patience", int, "plateau window in epochs"),
}


def _default_for(section, key):
    base = RunConfig()
    return getattr(base, key) if section is None else getattr(getattr(base, section), key)


def _add_run_flags(p):
    p.add_argument("--config", default=None, help="JSON run config (default: none, built-in defaults)")
    for flag, (section, key, typ, text) in RUN_FLAGS.items():
        p.add_argument(flag, type=typ, default=None, dest=key, help=f"{text} (default: {_default_for(section, key)})")


def load_run_config(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for flag, (section, key, _, _) in RUN_FLAGS.items():
        value = getattr(args, key)
        if value is None:
            continue
        if section is None:
            data[key] = value
        else:
            data.setdefault(section, {})[key] = value
    cfg = RunConfig.from_dict(data)
    if "seed" in data and "seed" not in data.get("training", {}):
        cfg = replace(cfg, training=replace(cfg.training, seed=cfg.seed))
    return cfg


def _echo_config(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    text = json.dumps(cfg.to_dict(), indent=2)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        fh.write(text + "\n")
    print(text)


def _load_sequences(cfg):
    if not os.path.isfile(cfg.manifest):
        raise UsageError(f"manifest not found: {cfg.manifest}")
    try:
        seqs = read_manifest(cfg.manifest)
    except FileNotFoundError as e:
        raise UsageError(f"sequence listed in manifest not found: {e.filename}") from e
    if not seqs:
        raise UsageError(f"manifest {cfg.manifest} lists no sequences")
    widths = {s.width for s in seqs}
    if widths != {cfg.network.input_w}:
        raise UsageError(f"sequence widths {sorted(widths)} do not match network input_w {cfg.network.input_w}")
    return seqs


# ---------------------------------------------------------------------------
# commands


SYNTH_FLAGS = {
    "--width": ("W", int),
    "--subjects": ("n_subjects", int),
    "--sequences": ("sequences_per_subject", int),
    "--frames": ("frames_per_sequence", int),
    "--blink-max": ("blink_duration_max", int),
    "--closure-min": ("closure_min_duration", int),
    "--closure-max": ("closure_max_duration", int),
    "--blink-fraction": ("blink_fraction", float),
    "--gap-min": ("gap_min", int),
    "--gap-max": ("gap_max", int),
    "--noise": ("noise_std", float),
    "--ramp-height": ("ramp_height", float),
    "--label-mode": ("label_mode", str),
    "--seed": ("rng_seed", int),
}


def cmd_synth(args):
    spec = SynthSpec(**{key: getattr(args, key) for key, _ in SYNTH_FLAGS.values()})
    seqs = synth_generate(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    names = []
    for s in seqs:
        name = f"{s.name}.seq"
        write_sequence(s, os.path.join(args.out_dir, name))
        names.append(name)
    write_manifest(names, os.path.join(args.out_dir, "manifest.txt"))
    hist = label_histogram(seqs)
    print(f"wrote {len(seqs)} sequences to {args.out_dir}")
    print("level count")
    for lv, c in enumerate(hist):
        print(f"{lv:5d} {int(c)}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args)
    seqs = _load_sequences(cfg)
    _echo_config(cfg)
    net = build_network(cfg.network, cfg.seed)
    ckpt = os.path.join(cfg.out_dir, "model.bin")
    run = train(net, seqs, None, cfg.training, checkpoint_path=ckpt,
                history_path=os.path.join(cfg.out_dir, "history.csv"))
    print(f"{run.stop_reason}: best mse {run.best_val:.6g} at epoch {run.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def _check_compatible(cfg_net, ckpt_net):
    if cfg_net == ckpt_net:
        return
    a, b = cfg_net.to_dict(), ckpt_net.to_dict()
    diffs = [f"{k}: config {a[k]!r} vs checkpoint {b[k]!r}" for k in a if a[k] != b[k]]
    raise UsageError(
        "checkpoint does not match config network: " + "; ".join(diffs)
        + f"; config shape trace {cfg_net.shape_trace()} vs checkpoint {ckpt_net.shape_trace()}"
    )


def cmd_eval(args):
    cfg = load_run_config(args)
    seqs = _load_sequences(cfg)
    _echo_config(cfg)
    if cfg.protocol == "loso":
        def fit(train_seqs, subject):
            net = build_network(cfg.network, cfg.seed)
            train(net, train_seqs, None, cfg.training)
            return net

        report = loso_crossval(seqs, fit, threads=cfg.threads)
    else:
        ckpt = args.checkpoint or os.path.join(cfg.out_dir, "model.bin")
        if not os.path.isfile(ckpt):
            raise UsageError(f"checkpoint not found: {ckpt}")
        net = read_checkpoint(ckpt)
        _check_compatible(cfg.network, net.config)
        report = holdout_report(net, seqs)
        report.fps = measure_throughput(net, max(seqs, key=lambda s: s.n_frames), repetitions=3)
    tl_dir = os.path.join(cfg.out_dir, "timelines")
    os.makedirs(tl_dir, exist_ok=True)
    for k, t in enumerate(report.timelines):
        t.write_csv(os.path.join(tl_dir, f"{t.sequence or f'seq{k:03d}'}.csv"))
    report.write_json(os.path.join(cfg.out_dir, "report.json"))
    pcc = "undefined" if report.pooled_pcc is None else f"{report.pooled_pcc:.4f}"
    print(f"{len(report.fold_subjects)} folds: mean mse {report.mean_mse:.4f}, pooled mse {report.pooled_mse:.4f}, "
          f"pooled pcc {pcc}" + (f", {report.fps:.1f} frames/s" if report.fps else ""))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = NetworkConfig.reduced(
        input_w=args.input_w, input_h=args.input_h, maps=args.maps, rcl_count=args.rcl_count, iterations=args.iterations
    )
    report = network_gradient_check(cfg, batch=args.batch, seed=args.seed, corrupt=args.corrupt)
    worst = 0.0
    for name, err in report.items():
        flag = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} {err:.3e} {flag}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'fail'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_compare(args):
    cfg = load_run_config(args)
    seqs = _load_sequences(cfg)
    _echo_config(cfg)
    subjects = args.test_subjects
    result = compare_static_baseline(seqs, cfg.network, cfg.training, subjects, seed=cfg.seed)
    with open(os.path.join(cfg.out_dir, "compare.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    print(f"temporal mse {result.temporal.pooled_mse:.4f}, static mse {result.static.pooled_mse:.4f}, "
          f"relative improvement {result.relative_improvement:.1%} on subjects {result.test_subjects}")
    return EXIT_OK


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rclnet", description="Recurrent convolutional frame-sequence regression.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic blink/closure dataset", formatter_class=fmt)
    p.add_argument("--out-dir", default="data", help="output directory")
    defaults = SynthSpec()
    for flag, (key, typ) in SYNTH_FLAGS.items():
        p.add_argument(flag, dest=key, type=typ, default=getattr(defaults, key), help=key.replace("_", " "))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network and write checkpoint + history")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or run LOSO) and write report + timelines")
    _add_run_flags(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: <out-dir>/model.bin)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient", formatter_class=fmt)
    p.add_argument("--input-w", type=int, default=32, help="frame vector width")
    p.add_argument("--input-h", type=int, default=8, help="window height")
    p.add_argument("--maps", type=int, default=8, help="feature maps")
    p.add_argument("--rcl-count", type=int, default=2, help="recurrent layers")
    p.add_argument("--iterations", type=int, default=2, help="recurrent iterations")
    p.add_argument("--batch", type=int, default=3, help="windows in the probe batch")
    p.add_argument("--seed", type=int, default=0, help="weights and probe data seed")
    p.add_argument("--corrupt", default=None, help="test hook: scale this tensor's gradient by 1.5")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="temporal model vs single-frame baseline on held-out subjects")
    _add_run_flags(p)
    p.add_argument("--test-subjects", type=int, nargs="+", default=None,
                   help="held-out subject ids (default: last third of subjects)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        where = f"; last good weights in {e.checkpoint}" if e.checkpoint else ""
        print(f"error: training diverged: {e}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, RclNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
