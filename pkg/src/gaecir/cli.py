"""Command-line front end.

Subcommands: gen-data, train, eval, analogy, inspect.
Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical, 5 incompatibility.
GAE_THREADS caps BLAS worker threads (must be set before numpy loads).
"""

from __future__ import annotations

import os
import sys

if "GAE_THREADS" in os.environ:  # noqa: E402 - must precede numpy import
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["GAE_THREADS"])

import argparse
from collections import Counter
from pathlib import Path

import numpy as np

from . import data as gdata
from . import evaluate as geval
from . import train as gtrain
from .config import RunConfig
from .errors import (ConfigError, FormatError, GaecirError,
                     IncompatibilityError, NumericalError)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_INCOMPATIBLE = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaecir",
        description="Train and evaluate gated autoencoders with "
                    "content-invariance regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a rotated-pair dataset file")
    p.add_argument("--source", choices=["synthetic", "mnist"], required=True)
    p.add_argument("--tset", default="mnistr20",
                   help="mnistr20 | mnistr20_10 | mnistr1")
    p.add_argument("--n", type=int, default=2000, help="number of pairs")
    p.add_argument("--size", type=int, default=16, help="working resolution")
    p.add_argument("--idx-images", help="path to an IDX image file (mnist source)")
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", required=True, help="output GAEPAIR1 file")

    p = sub.add_parser("train", help="train a model from a pair file")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data", help="training GAEPAIR1 file")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=int, help="override the config epoch count")
    p.add_argument("--no-cir", action="store_true",
                   help="disable the regularizer (baseline GAE)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a pair file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation (test) pair file")
    p.add_argument("--knn-data",
                   help="pair file supplying KNN training codes "
                        "(default: the eval file itself)")
    p.add_argument("--gae-name", help="GAE Data label for the CSV row")
    p.add_argument("--eval-name", help="Eval Data label for the CSV row")
    p.add_argument("--mscre-k", type=int, default=geval.DEFAULT_MSCRE_K)
    p.add_argument("--knn-k", type=int, default=geval.DEFAULT_KNN_K)
    p.add_argument("--seed", type=int, default=geval.DEFAULT_EVAL_SEED)
    p.add_argument("--out", help="append the CSV row to this file")

    p = sub.add_parser("analogy", help="render an analogy grid PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="pair file for sources/queries")
    p.add_argument("--pairs", type=int, default=3, help="number of source pairs")
    p.add_argument("--queries", type=int, default=5, help="number of query images")
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    return parser


def _histogram_lines(labels) -> str:
    counts = Counter(int(a) for a in labels)
    return "\n".join(f"  {angle:>5d}: {counts[angle]}" for angle in sorted(counts))


def cmd_gen_data(args) -> int:
    tset = gdata.TransformationSet.from_name(args.tset)
    if args.source == "mnist":
        if not args.idx_images:
            print("gen-data: --idx-images is required with --source mnist",
                  file=sys.stderr)
            return EXIT_USAGE
        images = gdata.prepare_mnist(gdata.load_idx(args.idx_images),
                                     size=args.size)
        if images.images.shape[0] > args.n:
            images = gdata.ImageSet(images.images[:args.n], split=images.split)
    else:
        images = gdata.synthetic_shapes(args.n, args.size,
                                        np.random.default_rng(args.seed))
    pairs = gdata.make_rotation_pairs(images, tset, pairs_per_image=1,
                                      rng=args.seed)
    pairs = gdata.contrast_normalize(pairs)
    gdata.save_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs ({pairs.input_dim} pixels) to {args.out}")
    print("class histogram:")
    print(_histogram_lines(pairs.angle_label))
    return 0


def cmd_train(args) -> int:
    overrides = {
        ("run", "seed"): args.seed,
        ("run", "output_dir"): args.out,
        ("train", "epochs"): args.epochs,
    }
    run_cfg = RunConfig.from_file(args.config, overrides)
    if not args.data:
        print("train: --data is required", file=sys.stderr)
        return EXIT_USAGE
    dataset = gdata.load_pairs(args.data)

    out_dir = Path(run_cfg.get("run", "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.dump(out_dir / "effective.cfg")

    if args.resume:
        ckpt = gtrain.load_checkpoint(args.resume)
        if ckpt.gae_config.input_dim != dataset.input_dim:
            raise IncompatibilityError(
                f"checkpoint input_dim {ckpt.gae_config.input_dim} != "
                f"dataset input_dim {dataset.input_dim}"
            )
        state = ckpt.to_state()
        epochs = state.config.epochs
    else:
        gae_cfg = run_cfg.gae_config(dataset.input_dim)
        train_cfg = run_cfg.train_config(no_cir=args.no_cir)
        state = gtrain.TrainState.new(gae_cfg, train_cfg)
        epochs = train_cfg.epochs

    every = run_cfg.checkpoint_every()
    log_path = out_dir / "loss_log.csv"
    if not args.resume or not log_path.exists():
        log_path.write_text("epoch,sre,scre,penalties,total\n")
    ckpt_path = out_dir / "checkpoint.gaeckpt"

    def on_epoch(epoch, result, st):
        with open(log_path, "a") as fh:
            fh.write(f"{epoch},{result.sre:.8f},{result.scre:.8f},"
                     f"{result.penalties:.8f},{result.total:.8f}\n")
        if every and (epoch + 1) % every == 0:
            gtrain.save_checkpoint(gtrain.Checkpoint.from_state(st),
                                   out_dir / f"checkpoint_{epoch + 1:06d}.gaeckpt")

    gtrain.train(state, dataset, epochs=epochs, callback=on_epoch)
    gtrain.save_checkpoint(gtrain.Checkpoint.from_state(state), ckpt_path)
    last = state.loss_history[-1]
    print(f"trained {epochs} epochs; final sre={last.sre:.6f} "
          f"scre={last.scre:.6f} total={last.total:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = gtrain.load_checkpoint(args.checkpoint)
    dataset = gdata.load_pairs(args.data)
    if dataset.input_dim != ckpt.gae_config.input_dim:
        raise IncompatibilityError(
            f"checkpoint input_dim {ckpt.gae_config.input_dim} != "
            f"dataset input_dim {dataset.input_dim}"
        )
    knn_train = gdata.load_pairs(args.knn_data) if args.knn_data else dataset
    if knn_train.input_dim != ckpt.gae_config.input_dim:
        raise IncompatibilityError(
            f"checkpoint input_dim {ckpt.gae_config.input_dim} != "
            f"knn-data input_dim {knn_train.input_dim}"
        )
    report = geval.compute_metrics(
        ckpt.params, dataset, knn_train,
        gae_data=args.gae_name or Path(args.checkpoint).stem,
        eval_data=args.eval_name or Path(args.data).stem,
        mscre_k=args.mscre_k, knn_k=args.knn_k, seed=args.seed,
    )
    row = report.to_csv_row()
    print(geval.MetricsReport.CSV_HEADER)
    print(row)
    if args.out:
        out = Path(args.out)
        new = not out.exists()
        with open(out, "a") as fh:
            if new:
                fh.write(geval.MetricsReport.CSV_HEADER + "\n")
            fh.write(row + "\n")
    return 0


def cmd_analogy(args) -> int:
    ckpt = gtrain.load_checkpoint(args.checkpoint)
    dataset = gdata.load_pairs(args.data)
    if dataset.input_dim != ckpt.gae_config.input_dim:
        raise IncompatibilityError(
            f"checkpoint input_dim {ckpt.gae_config.input_dim} != "
            f"dataset input_dim {dataset.input_dim}"
        )
    n_pairs, n_queries = args.pairs, args.queries
    if len(dataset) < n_pairs + n_queries:
        raise ConfigError(
            f"dataset has {len(dataset)} pairs, need {n_pairs + n_queries}"
        )
    size = int(round(np.sqrt(dataset.input_dim)))
    if size * size != dataset.input_dim:
        raise IncompatibilityError(
            f"input_dim {dataset.input_dim} is not a square image"
        )

    def cell(vec):
        return vec.reshape(size, size)

    blank = np.zeros((size, size), dtype=np.float32)
    sources = [(dataset.x[i], dataset.y[i]) for i in range(n_pairs)]
    queries = [dataset.x[n_pairs + q] for q in range(n_queries)]
    # two header rows show each source pair; the first column holds queries
    grid = [[blank] + [cell(a) for a, _ in sources],
            [blank] + [cell(b) for _, b in sources]]
    for q in queries:
        row = [cell(q)]
        for a, b in sources:
            row.append(cell(geval.make_analogy(ckpt.params, a, b, q)))
        grid.append(row)
    geval.render_grid(grid, args.out)
    print(f"wrote {len(grid)}x{len(grid[0])} analogy grid to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = gtrain.load_checkpoint(args.checkpoint)
    g, t = ckpt.gae_config, ckpt.train_config
    print(f"checkpoint: {args.checkpoint}")
    print(f"  input_dim={g.input_dim} num_factors={g.num_factors} "
          f"num_mappings={g.num_mappings} nonlinearity={g.mapping_nonlinearity}")
    print(f"  epoch={ckpt.epoch} seed={t.seed} lr={t.learning_rate} "
          f"batch_size={t.batch_size}")
    print(f"  cir: mode={t.cir.mode} lambda_max={t.cir.lambda_max} "
          f"k_max={t.cir.k_max} ramp_epochs={t.cir.ramp_epochs}")
    if ckpt.loss_history:
        last = ckpt.loss_history[-1]
        print(f"  last epoch loss: sre={last.sre:.6f} scre={last.scre:.6f} "
              f"penalties={last.penalties:.6f} total={last.total:.6f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analogy": cmd_analogy,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IncompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GaecirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
