"""Command-line entry points: generate, train, probe, matrix, audit, config.

Every command reads an optional TOML config (``--config``); any config key
can then be overridden with ``--set section.key=value`` or with the
dedicated flags below.  Relative output paths are resolved under
``$CTXPAIRS_OUTPUT_ROOT`` when it is set.  Logs go to stderr; stdout only
carries short summaries and tables.
"""

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .data import read_csv, write_csv
from .errors import ConfigError, CtxPairsError, IngestionError
from .evaluation import evaluate, retrieval_purity
from .experiment import ExperimentConfig, run_matrix
from .io_utils import atomic_write_text
from .model import load_checkpoint, save_checkpoint, train, write_trace
from .pairing import Strategy, build_epoch_plan, find_violations, select_positives
from .synthcam import generate_world, label_subset, split_train_test

log = logging.getLogger("ctxpairs")

OUTPUT_ROOT_ENV = "CTXPAIRS_OUTPUT_ROOT"


class MatrixIncomplete(CtxPairsError):
    exit_code = 7


class AuditFailed(CtxPairsError):
    exit_code = 8


# shorthand flag -> config key
FLAGS = {
    "strategy": "strategy.kind",
    "lam": "strategy.lam",
    "tau_c": "strategy.tau_c",
    "window": "strategy.window_seconds",
    "loss": "loss.loss",
    "distance": "loss.distance",
    "margin": "loss.margin",
    "temperature": "loss.temperature",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "seed": "train.seed",
    "world_seed": "world.seed",
    "percents": "percents",
    "seeds": "seeds",
    "dataset": "dataset",
}


def output_path(path):
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_generate(args):
    cfg = load_config(args)
    world = generate_world(cfg.world)
    train_ds, _ = split_train_test(world, cfg.world.held_out_fraction, cfg.world.seed,
                                   train_size=cfg.world.n_train)
    split = np.full(len(world), "test", dtype=object)
    split[np.isin(world.ids, train_ds.ids)] = "train"
    world.split = split
    out = output_path(args.out)
    write_csv(world, out)
    log.info("wrote %d rows to %s", len(world), out)
    by_class = Counter(world.labels.tolist())
    by_loc = Counter(world.locations.tolist())
    print(f"{len(world)} samples ({int((split == 'train').sum())} train, "
          f"{int((split == 'test').sum())} test), {len(by_class)} classes, {len(by_loc)} locations")
    print("per class: " + " ".join(f"{c}:{by_class[c]}" for c in sorted(by_class)))
    print("per location: " + " ".join(f"{k}:{by_loc[k]}" for k in sorted(by_loc)))
    return 0


def _training_split(ds):
    return ds.by_split("train") if ds.split is not None else ds


def cmd_train(args):
    cfg = load_config(args)
    ds = _training_split(read_csv(args.data))
    spec = cfg.network.build(ds.n_features, cfg.loss.loss)

    def progress(epoch, loss, lr):
        log.info("epoch %d/%d loss %.5f lr %.5g", epoch + 1, cfg.train.epochs, loss, lr)

    result = train(ds, cfg.strategy, cfg.loss, cfg.train, spec, progress)
    ckpt = output_path(args.out)
    save_checkpoint(result.params, ckpt, extra={"strategy": cfg.strategy.label, "loss": cfg.loss.loss})
    trace_path = ckpt.with_suffix(".trace.csv")
    write_trace(result.trace, trace_path)
    print(f"checkpoint {ckpt}; trace {trace_path}; final loss {result.trace[-1][1]:.6f}")
    return 0


def cmd_probe(args):
    cfg = load_config(args)
    params, _ = load_checkpoint(args.checkpoint)
    ds = read_csv(args.data)
    if ds.split is None:
        raise IngestionError(f"{args.data}: probing needs a split column (train/test)")
    train_ds, test_ds = ds.by_split("train"), ds.by_split("test")
    seed = cfg.train.seed
    out_dir = output_path(args.out)
    for p in cfg.percents:
        labeled = label_subset(train_ds, p, seed)
        report = evaluate(params, train_ds, test_ds, labeled, cfg.probe, seed, p)
        path = out_dir / f"report_p{p}.json"
        report.write(path)
        print(f"{p}% labels: top-1 {report.accuracy:.4f} (C={report.C:g}) -> {path}")
    return 0


def cmd_matrix(args):
    cfg = load_config(args)
    out_dir = output_path(args.out)

    def progress(loss, strategy, seed, outcome):
        res, err = outcome
        if err is None:
            acc = " ".join(f"{p}%:{a:.4f}" for p, a in res["accuracy"].items())
            log.info("%s/%s seed %d: %s purity %.3f (%.1fs)", loss, strategy, seed, acc,
                     res["purity"], res["seconds"])

    matrix = run_matrix(cfg, progress)
    atomic_write_text(out_dir / "matrix.csv", matrix.to_csv())
    table = matrix.to_table()
    atomic_write_text(out_dir / "matrix.txt", table)
    atomic_write_text(out_dir / "config.toml", cfg.to_toml())
    sys.stdout.write(table)
    if not matrix.complete:
        raise MatrixIncomplete(f"some runs failed; partial matrix written to {out_dir}")
    return 0


def cmd_audit(args):
    """Validate one epoch of pairs for each checkable strategy, plus retrieval purity."""
    cfg = load_config(args)
    ds = read_csv(args.data)
    rng_seed = cfg.train.seed
    report = {"violations": {}, "noise_rate": {}}
    kinds = ["augment", "sequence"]
    if ds.has_labels:
        kinds += ["oracle", "oracle_same_loc"]
    for kind in kinds:
        st = Strategy(kind, window_seconds=cfg.strategy.window_seconds)
        plans = build_epoch_plan(st, ds, cfg.train.batch_size, rng_seed)
        bad = find_violations(plans, ds, st)
        report["violations"][kind] = len(bad)
        for i, p, why in bad[:5]:
            log.error("%s: anchor %d positive %d: %s", kind, i, p, why)
    if ds.has_labels:
        rng = np.random.default_rng(rng_seed)
        anchors = rng.integers(len(ds), size=args.draws)
        for lam in args.lambdas:
            pos = select_positives(Strategy("oracle_noisy", lam=lam), anchors, ds, rng)
            report["noise_rate"][repr(lam)] = float(np.mean(ds.labels[pos] != ds.labels[anchors]))
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        target = ds.by_split("test") if ds.split is not None else ds
        report["purity"] = retrieval_purity(params, target, cfg.matrix.purity_k)
    path = output_path(args.out)
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    for kind, n in report["violations"].items():
        print(f"{kind}: {n} violations")
    for lam, rate in report["noise_rate"].items():
        print(f"oracle_noisy({lam}): cross-class fraction {rate:.4f}")
    if "purity" in report:
        print(f"top-{cfg.matrix.purity_k} purity: {report['purity']:.4f}")
    if any(report["violations"].values()):
        raise AuditFailed("pairing constraints violated")
    return 0


def cmd_config(args):
    sys.stdout.write(load_config(args).to_toml())
    return 0


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="ctxpairs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override any config key; repeatable")
    for flag in FLAGS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None,
                            help=f"shorthand for --set {FLAGS[flag]}=...")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write the synthetic world as CSV")
    p.add_argument("--out", default="world.csv")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="self-supervised training")
    p.add_argument("--data", required=True, help="dataset CSV (train split used if present)")
    p.add_argument("--out", default="model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", parents=[common], help="linear evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="probe")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("matrix", parents=[common], help="loss x strategy x seed results matrix")
    p.add_argument("--out", default="matrix")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("audit", parents=[common], help="pairing validators and retrieval purity")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="audit.json")
    p.add_argument("--lambdas", type=_float_list, default=[0.3, 0.6, 0.9])
    p.add_argument("--draws", type=int, default=100_000)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("config", parents=[common], help="print the effective config as TOML")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CtxPairsError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return IngestionError.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
