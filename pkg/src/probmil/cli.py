"""Command-line entry point: ``probmil {generate,train,eval,inspect,compare}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import collections
import json
import logging
import sys

from . import archive
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import SyntheticSpec, generate_synthetic, split
from .metrics import EvaluationError
from .model import ConfigError
from .training import ExperimentConfig, NumericError, evaluate_network, train

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("probmil")


class DataError(Exception):
    pass


def _on_off(s):
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def _int_list(s):
    try:
        return [int(t) for t in s.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _print_counts(ds):
    for k, c in enumerate(ds.class_counts()):
        print(f"class {k}: {int(c)} bags")


# --------------------------------------------------------------------------


def cmd_generate(args):
    counts = args.bags_per_class
    if args.skew_ratio > 1:
        counts = [counts * args.skew_ratio] + [counts] * (args.classes - 1)
    spec = SyntheticSpec(num_classes=args.classes, feature_dim=args.features,
                         bag_size=args.bag_size, bags_per_class=counts,
                         positives=tuple(args.positives), separation=args.separation,
                         noise=args.noise, extra_label_prob=args.extra_label_prob,
                         seed=args.seed)
    ds = generate_synthetic(spec)
    archive.write_archive(ds, args.out)
    print(f"wrote {args.out}: N={len(ds)} K={ds.num_classes} M={ds.feature_dim}")
    _print_counts(ds)
    return 0


_TRAIN_FLAGS = ("data", "eval_data", "eval_fraction", "strategy", "phi", "hidden", "dropout",
                "lr", "batch_size", "steps", "balanced", "seed", "eval_every", "deterministic")


def _train_config(args) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if args.config:
        with open(args.config) as fh:
            base.update(ExperimentConfig.from_dict(json.load(fh)).to_dict())
    for name in _TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    base["checkpoint"] = args.out
    return ExperimentConfig.from_dict(base)


def _read(path):
    try:
        return archive.read_archive(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except archive.ArchiveError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_train(args):
    cfg = _train_config(args)
    if not cfg.data:
        raise ConfigError("--data is required (on the command line or in --config)")
    ds = _read(cfg.data)
    if cfg.eval_data:
        train_ds, eval_ds = ds, _read(cfg.eval_data)
        if (eval_ds.feature_dim, eval_ds.num_classes) != (ds.feature_dim, ds.num_classes):
            raise DataError(
                f"eval archive has M={eval_ds.feature_dim}, K={eval_ds.num_classes}; "
                f"training archive has M={ds.feature_dim}, K={ds.num_classes}"
            )
    else:
        train_ds, eval_ds = split(ds, (1.0 - cfg.eval_fraction, cfg.eval_fraction), cfg.seed)
    best, _, runlog = train(train_ds, eval_ds, cfg)
    save_checkpoint(cfg.checkpoint, best, cfg.strategy)
    log_path = args.log or f"{cfg.checkpoint}.runlog"
    with open(log_path, "w") as fh:
        fh.write(runlog.to_keyvalue(include_wall_time=not cfg.deterministic))
    for r in runlog.records:
        print(f"step {r.step:6d}  loss {r.train_loss:.5f}  mAP {r.mAP:.4f}  "
              f"AUC {r.AUC:.4f}  d' {r.d_prime:.3f}  ({r.wall_time:.1f}s)")
    print(f"best step {runlog.best_step}; checkpoint {cfg.checkpoint}; log {log_path}")
    return 0


def cmd_eval(args):
    try:
        net, strategy = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read {args.checkpoint}: {exc}") from exc
    except CheckpointError as exc:
        raise DataError(f"{args.checkpoint}: {exc}") from exc
    if args.strategy:
        strategy = args.strategy
    ds = _read(args.data)
    if (net.feature_dim, net.num_classes) != (ds.feature_dim, ds.num_classes):
        raise DataError(
            f"checkpoint expects M={net.feature_dim}, K={net.num_classes} "
            f"but archive has M={ds.feature_dim}, K={ds.num_classes}"
        )
    try:
        report = evaluate_network(net, strategy, ds)
    except EvaluationError as exc:
        raise DataError(str(exc)) from exc
    print(report.to_table())
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_keyvalue())
    return 0


def cmd_inspect(args):
    ds = _read(args.path)
    print(f"magic=MILB version={archive.VERSION}")
    print(f"N={len(ds)} K={ds.num_classes} M={ds.feature_dim}")
    _print_counts(ds)
    sizes = collections.Counter(int(s) for s in ds.bag_sizes())
    dist = ", ".join(f"L={L}: {n}" for L, n in sorted(sizes.items()))
    print(f"bag sizes: {dist if dist else 'none'}")
    return 0


def cmd_compare(args):
    from . import experiments

    cfg = {"steps": args.steps, "lr": args.lr}
    if args.hidden:
        cfg["hidden"] = tuple(args.hidden)
    comp = experiments.EXPERIMENTS[args.experiment](seeds=tuple(args.seeds), **cfg)
    print(comp.table())
    if args.experiment == "balancing":
        for label, runs in comp.results.items():
            vals = ", ".join(f"{experiments.minority_ap(r):.3f}" for r in runs)
            print(f"minority-class AP, {label}: {vals}")
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="probmil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic bag archive")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--features", type=int, default=16)
    g.add_argument("--bag-size", type=int, default=10)
    g.add_argument("--bags-per-class", type=int, default=500)
    g.add_argument("--skew-ratio", type=int, default=1,
                   help="make class 0 this many times more frequent")
    g.add_argument("--positives", type=int, nargs=2, default=(1, 2), metavar=("MIN", "MAX"))
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--extra-label-prob", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network on a bag archive")
    t.add_argument("--data")
    t.add_argument("--eval-data")
    t.add_argument("--eval-fraction", type=float)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="run log path (default: <out>.runlog)")
    t.add_argument("--config", help="JSON config file; flags override it")
    t.add_argument("--strategy", choices=["collective", "max", "attention", "weighted"])
    t.add_argument("--phi", choices=["relu", "sigmoid", "softmax"])
    t.add_argument("--hidden", type=_int_list)
    t.add_argument("--dropout", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--balanced", type=_on_off)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--deterministic", type=_on_off)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a bag archive")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--strategy", choices=["collective", "max", "attention", "weighted"],
                   help="override the pooling stored in the checkpoint")
    e.add_argument("--report", help="write key=value report here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print an archive's header and class counts")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("compare", help="desk-scale pooling / phi / balancing comparison")
    c.add_argument("--experiment", choices=["pooling", "phi", "balancing"], default="pooling")
    c.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    c.add_argument("--steps", type=int, default=10000)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--hidden", type=_int_list)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, archive.ArchiveError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
