"""Command-line entry point: ``kwslab {synth,train,eval,sweep,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error. ``KWSLAB_SEED`` overrides the training seed from config
files; ``--set section.key=value`` flags override both.
"""

import argparse
import csv
import difflib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import config as cfgmod
from .data import build_corpus, corpus_config_from_manifest, dataset_checksum, load_dataset
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError
from .evaluate import DetCurve, evaluate, write_report
from .model import load_checkpoint
from .svg import det_plot, tradeoff_plot
from .trainer import TrainConfig, train

logger = logging.getLogger("kwslab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
TRADEOFF_COLUMNS = (
    "run",
    "loss",
    "threshold",
    "fa_count",
    "fa_rate",
    "fr_count",
    "achieved_frr",
    "mean_latency_ms",
    "median_latency_ms",
    "mean_peak_latency_ms",
    "relative_fa",
    "latency_reduction_ms",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting and suggests close flags."""

    def error(self, message):
        if "unrecognized arguments" in message:
            known = [s for a in self._actions for s in a.option_strings]
            for word in message.split(":", 1)[1].split():
                close = difflib.get_close_matches(word.split("=")[0], known, n=1)
                if close:
                    message += f" (did you mean {close[0]}?)"
                    break
        elif "invalid choice" in message:
            word = message.split("'")[1]
            choices = [c for a in self._actions if a.choices for c in a.choices]
            close = difflib.get_close_matches(word, choices, n=1)
            if close:
                message += f" (did you mean {close[0]}?)"
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# run manifest
# ----------------------------------------------------------------------------


@dataclass
class RunManifest:
    run_id: str
    config: dict
    dataset: str
    dataset_checksum: str
    checkpoint: str
    metrics: list = field(default_factory=list)
    tool_version: str = __version__

    def write(self, run_dir):
        with open(os.path.join(run_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path, encoding="utf-8") as fh:
                return cls(**json.load(fh))
        except OSError as exc:
            raise DataError(f"cannot read run manifest {path}: {exc}") from None


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def _load_parser(args):
    parser = cfgmod.read_config(args.config) if args.config else cfgmod.empty_config()
    seed = os.environ.get("KWSLAB_SEED")
    if seed is not None:
        try:
            int(seed)
        except ValueError:
            raise ConfigError(f"KWSLAB_SEED must be an integer, got {seed!r}") from None
        cfgmod.apply_overrides(parser, [f"train.seed={seed}"])
    return cfgmod.apply_overrides(parser, args.set)


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise DataError(f"{what} not found: {path}")


def _split(root, split):
    _require_dir(root, "dataset directory")
    return list(load_dataset(root, split))


def _prepare_run_dir(path, overwrite):
    if os.path.exists(os.path.join(path, MANIFEST_NAME)) and not overwrite:
        raise UsageError(f"run directory {path} already holds a run; pass --overwrite to replace it")
    os.makedirs(path, exist_ok=True)


def run_training(train_cfg, eval_cfg, data_root, out_dir):
    """Train one configuration into ``out_dir`` and write its manifest."""
    checksum = dataset_checksum(data_root)
    result = train(train_cfg, _split(data_root, "train"), _split(data_root, "dev"), out_dir=out_dir)
    manifest = RunManifest(
        run_id=os.path.basename(os.path.normpath(out_dir)),
        config={
            "corpus": corpus_config_from_manifest(data_root).to_dict(),
            "train": train_cfg.to_dict(),
            "eval": eval_cfg.__dict__.copy(),
        },
        dataset=os.path.abspath(data_root),
        dataset_checksum=checksum,
        checkpoint="checkpoint.ckpt",
        metrics=["metrics.csv", "timing.csv"],
    )
    manifest.write(out_dir)
    return result


def _checkpoint_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.ckpt")
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    return path


def run_eval(checkpoint, data_root, eval_cfg, out_dir, split="eval"):
    params, _ = load_checkpoint(_checkpoint_path(checkpoint))
    report = evaluate(
        params,
        _split(data_root, split),
        target_frr=eval_cfg.target_frr,
        stride_frames=eval_cfg.stride_frames,
        debounce_ms=eval_cfg.debounce_ms,
    )
    write_report(report, out_dir)
    return report


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_synth(args):
    corpus = cfgmod.corpus_config(_load_parser(args))
    path = build_corpus(corpus, args.out)
    print(f"wrote {path} (checksum {dataset_checksum(args.out)[:16]})")
    return EXIT_OK


def cmd_train(args):
    if args.manifest:
        manifest = RunManifest.read(args.manifest)
        train_cfg = TrainConfig.from_dict(manifest.config["train"])
        eval_cfg = cfgmod.EvalConfig(**manifest.config["eval"])
        data = args.data or manifest.dataset
        if dataset_checksum(data) != manifest.dataset_checksum:
            raise DataError(f"dataset at {data} does not match the manifest checksum")
    else:
        if not args.data:
            raise UsageError("train: --data is required unless --manifest is given")
        parser = _load_parser(args)
        train_cfg, eval_cfg, data = cfgmod.train_config(parser), cfgmod.eval_config(parser), args.data
    _require_dir(data, "dataset directory")
    _prepare_run_dir(args.out, args.overwrite)
    result = run_training(train_cfg, eval_cfg, data, args.out)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"trained {train_cfg.loss.describe()} for {last.epoch} epochs: dev_acc={last.dev_acc:.3f}")
    print(f"run directory: {args.out}")
    return EXIT_OK


def cmd_eval(args):
    parser = _load_parser(args)
    if args.frr is not None:
        cfgmod.apply_overrides(parser, [f"eval.target_frr={args.frr}"])
    eval_cfg = cfgmod.eval_config(parser)
    out = args.out or os.path.join(args.checkpoint if os.path.isdir(args.checkpoint) else ".", "eval")
    report = run_eval(args.checkpoint, args.data, eval_cfg, out, args.split)
    op, lat = report.operating, report.latency
    print(
        f"threshold={op.threshold:.6g} FA={op.fa_count}/{op.n_neg} FR={op.fr_count}/{op.n_pos} "
        f"mean_latency={lat.mean:.1f} ms ({lat.n} detections) -> {out}"
    )
    return EXIT_OK


_DIST_KEYS = {"b": "bernoulli", "lambda": "poisson", "k": "constant"}


def parse_grid(items):
    """``["b=0.0,0.5", "f=0,10"]`` -> list of dicts, the cartesian product of all axes."""
    axes = []
    for item in items or ():
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not values:
            raise UsageError(f"grid axis {item!r} is not of the form key=v1,v2,...")
        if key not in (*_DIST_KEYS, "f", "loss"):
            close = difflib.get_close_matches(key, [*_DIST_KEYS, "f", "loss"], n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise UsageError(f"unknown grid key {key!r}{hint}")
        axes.append([(key, v.strip()) for v in values.split(",")])
    return [dict(point) for point in itertools.product(*axes)] if axes else [{}]


def grid_overrides(point, loss):
    """Config overrides and a run name for one grid point."""
    overrides = [f"train.loss={loss}"] if loss else []
    names = []
    for key, value in point.items():
        names.append(f"{key}-{value}")
        if key in _DIST_KEYS:
            overrides += ["train.loss=latency_mp", f"train.dist={_DIST_KEYS[key]}({value})"]
        elif key == "f":
            overrides += ["train.loss=max_latency", f"train.f={value}"]
        else:
            overrides.append(f"train.loss={value}")
    return overrides, "_".join(names) or "run"


def _sweep_point(job):
    config_path, overrides, data, run_dir = job
    parser = cfgmod.read_config(config_path) if config_path else cfgmod.empty_config()
    cfgmod.apply_overrides(parser, overrides)
    train_cfg, eval_cfg = cfgmod.train_config(parser), cfgmod.eval_config(parser)
    run_training(train_cfg, eval_cfg, data, run_dir)
    report = run_eval(run_dir, data, eval_cfg, os.path.join(run_dir, "eval"))
    return train_cfg.loss.describe(), report


def tradeoff_rows(names, losses, reports, baseline=0):
    base = reports[baseline]
    rows = []
    for name, loss, rep in zip(names, losses, reports):
        op, lat = rep.operating, rep.latency
        rel = op.fa_count / base.operating.fa_count if base.operating.fa_count else float("nan")
        rows.append(
            {
                "run": name,
                "loss": loss,
                "threshold": op.threshold,
                "fa_count": op.fa_count,
                "fa_rate": op.fa_rate,
                "fr_count": op.fr_count,
                "achieved_frr": op.achieved_frr,
                "mean_latency_ms": lat.mean,
                "median_latency_ms": lat.median,
                "mean_peak_latency_ms": lat.mean_peak,
                "relative_fa": rel,
                "latency_reduction_ms": base.latency.mean - lat.mean,
            }
        )
    return rows


def write_tradeoff(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.9g}" for c in TRADEOFF_COLUMNS])


def cmd_sweep(args):
    _require_dir(args.data, "dataset directory")
    base = _load_parser(args)
    points = parse_grid(args.grid)
    jobs, names = [], []
    os.makedirs(args.out, exist_ok=True)
    shared = os.path.join(args.out, "sweep.cfg")
    with open(shared, "w", encoding="utf-8") as fh:
        base.write(fh)
    for point in points:
        overrides, name = grid_overrides(point, args.loss)
        run_dir = os.path.join(args.out, name)
        _prepare_run_dir(run_dir, args.overwrite)
        # validate before spending time on training
        probe = cfgmod.apply_overrides(cfgmod.read_config(shared), overrides)
        cfgmod.train_config(probe)
        jobs.append((shared, overrides, args.data, run_dir))
        names.append(name)
    if args.baseline is not None and args.baseline not in names:
        raise UsageError(f"baseline {args.baseline!r} is not one of the runs: {', '.join(names)}")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(job) for job in jobs]
    baseline = names.index(args.baseline) if args.baseline else 0
    rows = tradeoff_rows(names, [r[0] for r in results], [r[1] for r in results], baseline)
    write_tradeoff(rows, os.path.join(args.out, "tradeoff.csv"))
    for r in rows:
        print(
            f"{r['run']:>20}  FA={r['fa_count']:<5d} mean_latency={r['mean_latency_ms']:8.1f} ms  "
            f"relative_fa={r['relative_fa']:.3f}  latency_reduction={r['latency_reduction_ms']:.1f} ms"
        )
    return EXIT_OK


def read_det_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"empty DET file: {path}")
    return DetCurve(
        np.array([float(r["threshold"]) for r in rows]),
        np.array([int(r["false_accepts"]) for r in rows]),
        np.array([int(r["false_rejects"]) for r in rows]),
        int(rows[0]["n_pos"]),
        int(rows[0]["n_neg"]),
    )


def _find_det(run_dir):
    for cand in (os.path.join(run_dir, "eval", "det_curve.csv"), os.path.join(run_dir, "det_curve.csv")):
        if os.path.isfile(cand):
            return cand
    return None


def cmd_report(args):
    _require_dir(args.run, "run directory")
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    written = []
    tradeoff = os.path.join(args.run, "tradeoff.csv")
    if os.path.isfile(tradeoff):
        with open(tradeoff, newline="") as fh:
            rows = list(csv.DictReader(fh))
        parsed = [
            {"latency_reduction_ms": float(r["latency_reduction_ms"]), "relative_fa": float(r["relative_fa"])}
            for r in rows
        ]
        path = os.path.join(out, "tradeoff.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(tradeoff_plot(parsed))
        written.append(path)
        curves = {}
        for r in rows:
            det = _find_det(os.path.join(args.run, r["run"]))
            if det:
                curves[r["run"]] = read_det_csv(det)
        if curves:
            path = os.path.join(out, "det.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(det_plot(curves))
            written.append(path)
    else:
        det = _find_det(args.run)
        if det is None:
            raise DataError(f"no det_curve.csv or tradeoff.csv under {args.run}")
        path = os.path.join(out, "det.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(det_plot({os.path.basename(os.path.normpath(args.run)): read_det_csv(det)}))
        written.append(path)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="kwslab", description="Latency-controlled keyword spotting toolkit.")
    p.add_argument("--version", action="version", version=f"kwslab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    common(s)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model")
    common(s)
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--manifest", help="reproduce the run described by this run manifest")
    s.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--frr", type=float, help="target false-reject rate")
    s.add_argument("--split", default="eval", choices=("train", "dev", "eval"))
    s.add_argument("--out", help="report directory (default: <run>/eval)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate a grid of loss settings")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="sweep output directory")
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2", help="grid axis (b, lambda, k, f, loss)")
    s.add_argument("--loss", help="loss kind for every grid point")
    s.add_argument("--baseline", help="run name used as the reference row (default: first)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--overwrite", action="store_true", help="replace existing run directories")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render CSV results as SVG plots")
    s.add_argument("--run", required=True, help="run or sweep directory")
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    """Run the CLI and return its exit code."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        print("error: choose a subcommand: synth, train, eval, sweep, report", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ContractError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
