"""
``mvaformer`` command line.

    mvaformer [--config FILE] [--seed N] [--out DIR] [--set KEY=VALUE ...] COMMAND

Commands: gen-data, train, eval, compare, dump-attention.  Every command
exits 0 on success and prints a single ``error: ...`` line with a nonzero
status otherwise.  ``MVAF_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import report
from .data import generate_dataset, load_dataset, save_dataset, split_dataset
from .errors import LookupFailure, MVAFError
from .model import TOKENS, Mode, attention_records, load_model, save_model
from .nn import write_attention_csv
from .train import METHODS, comparison_csv, evaluate, run_baselines, train

logger = logging.getLogger("mvaformer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _parser():
    p = _Parser(prog="mvaformer", description="Multi-view action recognition with divided attention.")
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="configuration override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", help="render the synthetic dataset")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", help="dataset directory (default: paths.data)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the evaluation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval")

    c = sub.add_parser("compare", help="train and evaluate every baseline")
    c.add_argument("--data")
    c.add_argument("--methods", default=",".join(METHODS),
                   help=f"comma separated subset of {','.join(METHODS)}")

    d = sub.add_parser("dump-attention", help="export attention weights of one person")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data")
    d.add_argument("--clip", required=True, help="clip id, e.g. scene0003")
    d.add_argument("--keyframe", type=int, required=True)
    d.add_argument("--person", type=int, required=True)
    d.add_argument("--query-view", type=int,
                   help="view whose queries the heatmaps show (default: first visible view)")
    return p


def load_run_config(path=None, seed=None, overrides=()):
    layers = []
    if path:
        layers.append(cfgmod.read_config_file(path))
    cli = {}
    for item in overrides:
        if "=" not in item:
            raise MVAFError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cli[key.strip()] = value.strip()
    if seed is not None:
        cli["seed"] = str(seed)
    layers.append(cli)
    return cfgmod.resolve(*layers)


def _split(run, dataset):
    return split_dataset(dataset.samples(), run.train.train_fraction, seed=run.seed,
                         tolerance=run.train.split_tolerance, min_support=run.train.min_support)


def _model_views(model, run):
    """Views a checkpoint consumes: all of them, or the configured one for single-view models."""
    if model.config.views == run.scene.views:
        return None
    if model.config.views == 1:
        return [run.train.single_view]
    raise MVAFError(f"checkpoint has {model.config.views} views, dataset has {run.scene.views}")


# -- commands ---------------------------------------------------------------------------
def cmd_gen_data(run, out):
    dataset = generate_dataset(run.scene)
    save_dataset(dataset, out)
    with open(os.path.join(out, "run.cfg"), "w") as f:
        f.write(run.dumps())
    return [os.path.join(out, "annotations.csv")]


def cmd_train(run, data_dir, out):
    dataset = load_dataset(data_dir)
    train_samples, eval_samples = _split(run, dataset)
    model, log = train(dataset, train_samples, run.model, run.train, eval_samples)
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, "model.mvck")
    save_model(model, ckpt)
    with open(os.path.join(out, "run.cfg"), "w") as f:
        f.write(run.dumps())
    with open(os.path.join(out, "train_log.csv"), "w") as f:
        f.write(log.batch_csv())
    with open(os.path.join(out, "epoch_log.csv"), "w") as f:
        f.write(log.epoch_csv())
    report.plot_loss(log, os.path.join(out, "loss.png"))
    return ckpt


def cmd_eval(run, checkpoint, data_dir, out, split="eval"):
    dataset = load_dataset(data_dir)
    model = load_model(checkpoint)
    train_samples, eval_samples = _split(run, dataset)
    samples = {"eval": eval_samples, "train": train_samples, "all": dataset.samples()}[split]
    rep = evaluate(model, dataset, samples, run.train.threshold, run.train.min_support, _model_views(model, run))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.csv")
    with open(path, "w") as f:
        f.write(rep.to_csv())
    return path, rep


def cmd_compare(run, data_dir, out, methods=METHODS):
    dataset = load_dataset(data_dir)
    train_samples, eval_samples = _split(run, dataset)
    rows = run_baselines(dataset, train_samples, eval_samples, run.model, run.train, methods)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "comparison.csv")
    with open(path, "w") as f:
        f.write(comparison_csv(rows))
    report.plot_comparison(rows, os.path.join(out, "comparison.png"))
    return path, rows


def find_sample(dataset, clip_id, keyframe, person_id):
    for s in dataset.samples():
        if (s.clip_id, s.keyframe, s.person_id) == (clip_id, keyframe, person_id):
            return s
    raise LookupFailure(f"no person {person_id} in {clip_id} at keyframe {keyframe}")


def cmd_dump_attention(run, checkpoint, data_dir, out, clip_id, keyframe, person_id, query_view=None):
    dataset = load_dataset(data_dir)
    model = load_model(checkpoint)
    sample = find_sample(dataset, clip_id, keyframe, person_id)
    views = _model_views(model, run)
    videos, index, boxes, _ = dataset.batch([sample], views)
    with ad.no_grad():
        _, raw = model.forward(videos, index, boxes, record=True)
    records = attention_records(raw)
    m = model.config.views
    t = 1 if model.config.mode is Mode.POOLED_VECTOR else TOKENS
    if query_view is None:
        visible = np.flatnonzero(~np.isnan(boxes[0, :, 0]))
        query_view = int(visible[0]) if len(visible) else 0
    os.makedirs(os.path.join(out, "heatmaps"), exist_ok=True)
    csv_path = os.path.join(out, "attention.csv")
    write_attention_csv(csv_path, records, t)
    for rec in records:
        name = f"layer{rec.layer}_head{rec.head}_{rec.kind.value}.ppm"
        report.write_ppm(os.path.join(out, "heatmaps", name),
                         report.attention_heatmap(rec.weights, m, t, query_view))
    report.plot_attention(records, m, t, query_view, os.path.join(out, "attention.png"))
    return csv_path, records, query_view


# -- entry point -----------------------------------------------------------------------
def _thread_limit():
    value = os.environ.get("MVAF_THREADS")
    if not value:
        return nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise MVAFError(f"MVAF_THREADS must be an integer, got {value!r}") from None
    if limit < 1:
        raise MVAFError(f"MVAF_THREADS must be positive, got {limit}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def _run(args):
    run = load_run_config(args.config, args.seed, args.set)
    data_dir = getattr(args, "data", None) or run.paths.data
    if args.command == "gen-data":
        out = args.out or run.paths.data
        cmd_gen_data(run, out)
        print(f"wrote dataset to {out}")
    elif args.command == "train":
        ckpt = cmd_train(run, data_dir, args.out or ".")
        print(f"wrote {ckpt}")
    elif args.command == "eval":
        path, rep = cmd_eval(run, args.checkpoint, data_dir, args.out or ".", args.split)
        print(f"macro precision={rep.macro_precision:.6f} recall={rep.macro_recall:.6f} f={rep.macro_f:.6f}")
        print(f"wrote {path}")
    elif args.command == "compare":
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        unknown = sorted(set(methods) - set(METHODS))
        if unknown:
            raise MVAFError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        path, rows = cmd_compare(run, data_dir, args.out or ".", methods)
        sys.stdout.write(comparison_csv(rows))
    else:
        path, _, qv = cmd_dump_attention(run, args.checkpoint, data_dir, args.out or ".", args.clip,
                                         args.keyframe, args.person, args.query_view)
        print(f"wrote {path} (heatmaps for query view {qv})")


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            _run(args)
    except (MVAFError, OSError, ValueError, KeyError) as exc:
        message = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        if isinstance(exc, KeyError) and not isinstance(exc, LookupFailure):
            message = f"missing key {message}"
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
