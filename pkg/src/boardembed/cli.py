"""Command-line entry point: ``boardembed <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (
    ABLATION_ROWS,
    BENCH_EPOCHS,
    BENCH_LR,
    DEFAULT_ROWS,
    run_ablation_benchmark,
)
from .data import (
    TEMPLATE_STRATEGIES,
    SplitConfig,
    SyntheticConfig,
    generate_synthetic_dataset,
    load_board,
    load_dataset,
    make_cv_splits,
    save_dataset,
)
from .errors import BoardEmbedError
from .evaluator import (
    board_templates,
    evaluate_classification,
    predict_board,
    run_pipeline_eval,
)
from .model import EmbeddingModel
from .trainer import TrainConfig, config_dict, run_training

log = logging.getLogger("boardembed")

GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _atomic_write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def manifest_path(artifact: Path) -> Path:
    if artifact.is_dir() or not artifact.suffix:
        return artifact / "manifest.json"
    return artifact.with_name(artifact.stem + ".manifest.json")


def write_manifest(artifact, argv, config: dict, seed, artifacts: dict, started: float) -> Path:
    path = manifest_path(Path(artifact))
    _atomic_write_json(path, {
        "command": list(argv),
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "version": __version__,
    })
    return path


def _existing(path: str, kind: str = "file") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} not found: {path}")
    return p


def _fold_boards(args):
    boards = load_dataset(_existing(args.data, "data directory"))
    split = SplitConfig.load(_existing(args.split))
    if not 0 <= args.fold < len(split.folds):
        raise UsageError(f"fold {args.fold} out of range (split has {len(split.folds)})")
    fold = split.folds[args.fold]
    test_ids = set(fold.test)
    train = [b for b in boards if b.board_id in set(fold.train)]
    test = [b for b in boards if b.board_id in test_ids]
    return boards, fold, train, test


# ---------------------------------------------------------------- commands

def cmd_gen(args, argv, started):
    cfg = SyntheticConfig(n_boards=args.boards, n_categories=args.classes, feature_dim=args.dim,
                          sigma_board=args.sigma_board, sigma_inst=args.sigma_inst,
                          class_similarity=args.class_similarity,
                          proposals=not args.no_proposals, seed=args.seed)
    boards = generate_synthetic_dataset(cfg)
    out = Path(args.out)
    paths = save_dataset(boards, out)
    write_manifest(out, argv, vars(cfg), args.seed, {"boards": [p.name for p in paths]}, started)
    print(f"wrote {len(paths)} boards to {out}")


def cmd_split(args, argv, started):
    boards = load_dataset(_existing(args.data, "data directory"))
    split = make_cv_splits(boards, args.folds, np.random.default_rng(args.seed), args.test_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out)
    write_manifest(out, argv, {"folds": args.folds, "test_size": args.test_size}, args.seed,
                   {"split": str(out)}, started)
    for i, f in enumerate(split.folds):
        print(f"fold {i}: {len(f.train)} train / {len(f.test)} test")


def cmd_train(args, argv, started):
    boards, fold, _, _ = _fold_boards(args)
    cfg = TrainConfig(epochs=args.epochs, iterations_per_epoch=args.iterations,
                      n_way=args.n_way, k_shot=args.k_shot, margin=args.margin,
                      batching=args.batching, block=args.block, loss=args.loss,
                      extra_mode=args.extra, similarity=args.similarity, depth=args.depth,
                      lr=args.lr, seed=args.seed)
    result = run_training(boards, fold, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    artifacts = result.write(out)
    if not args.no_figures:
        from .plotting import plot_training_curves
        fig = out.with_name(out.stem + ".curves.png")
        plot_training_curves(result.metrics, fig)
        artifacts["figure"] = str(fig)
    write_manifest(out, argv, config_dict(cfg), args.seed, artifacts, started)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"epoch {last.epoch}: loss {last.loss:.4f} val top1 {last.eval_top1:.4f}")


def cmd_eval(args, argv, started):
    boards, fold, train, test = _fold_boards(args)
    model = EmbeddingModel.load(_existing(args.model))
    if args.mode == "classification":
        report = evaluate_classification(test, model, args.templates, args.seed, train)
        print(f"top1 {report.top1:.4f} top5 {report.top5:.4f} ({report.n_queries} instances)")
    else:
        report = run_pipeline_eval(test, model, args.templates, args.threshold, args.seed, train)
        print(f"mAP {report.mAP:.4f} over {len(report.per_category_ap)} categories")
        if report.skipped_boards:
            print(f"skipped boards without proposals: {', '.join(report.skipped_boards)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    artifacts = {"report": str(out)}
    if args.mode == "pipeline":
        ap_csv = out.with_name(out.stem + ".ap.csv")
        report.save_ap_csv(ap_csv)
        artifacts["ap_csv"] = str(ap_csv)
        if not args.no_figures and report.per_category_ap:
            from .plotting import plot_category_ap
            fig = out.with_name(out.stem + ".ap.png")
            plot_category_ap(report, fig)
            artifacts["figure"] = str(fig)
    write_manifest(out, argv, vars(args) | {"func": None}, args.seed, artifacts, started)


def cmd_predict(args, argv, started):
    board = load_board(_existing(args.board))
    model = EmbeddingModel.load(_existing(args.model))
    train = load_dataset(args.data) if args.data else []
    if args.templates != "random" and not train:
        raise UsageError(f"--templates {args.templates} needs --data with training boards")
    temps = board_templates(board, args.templates, np.random.default_rng(args.seed), train)
    if board.proposals is None:
        log.warning("board %s has no proposals; classifying ground-truth boxes", board.board_id)
        board.proposals = board.instances
    dets = predict_board(board, model, temps, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_json(out, {"board_id": board.board_id,
                             "detections": [d.to_json() for d in dets]})
    write_manifest(out, argv, vars(args) | {"func": None}, args.seed,
                   {"detections": str(out)}, started)
    print(f"{len(dets)} detections written to {out}")


def cmd_gradcheck(args, argv, started):
    from .gradcheck import run_gradcheck
    err = run_gradcheck(args.dim, args.nodes, args.seed, args.block, args.loss, args.eps)
    print(f"max relative error {err:.3e}")
    return 0 if err < GRADCHECK_TOLERANCE else 1


def cmd_bench(args, argv, started):
    result = run_ablation_benchmark(rows=args.rows, seeds=args.seeds, folds=args.folds,
                                    epochs=args.epochs, lr=args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_runs_csv(out / "runs.csv")
    result.write_summary_csv(out / "summary.csv")
    artifacts = {"runs": "runs.csv", "summary": "summary.csv"}
    if not args.no_figures:
        from .plotting import plot_benchmark
        plot_benchmark(result, out / "summary.png")
        artifacts["figure"] = "summary.png"
    write_manifest(out, argv, vars(args) | {"func": None}, None, artifacts, started)
    for s in result.summary():
        print(f"{s['row']:<16} top1 {s['top1']:.3f}  mAP {s['pipeline_map']:.3f}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boardembed", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic board dataset")
    g.add_argument("--boards", type=int, default=60)
    g.add_argument("--classes", type=int, default=12)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma-board", type=float, default=0.4)
    g.add_argument("--sigma-inst", type=float, default=0.1)
    g.add_argument("--class-similarity", type=float, default=0.5)
    g.add_argument("--no-proposals", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="write cross-validation folds with type coverage")
    s.add_argument("--data", required=True)
    s.add_argument("--folds", type=int, default=3)
    s.add_argument("--test-size", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one ablation configuration on a fold")
    t.add_argument("--data", required=True)
    t.add_argument("--split", required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--block", choices=("none", "nlnn", "gn"), default="gn")
    t.add_argument("--loss", choices=("triplet", "bce", "ce"), default="triplet")
    t.add_argument("--batching", choices=("within", "across"), default="within")
    t.add_argument("--extra", choices=("none", "geometry", "label"), default="none")
    t.add_argument("--similarity", choices=("dot", "cosine"), default="dot")
    t.add_argument("--depth", type=int, default=1)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--iterations", type=int, default=None,
                   help="iterations per epoch (default: number of training boards)")
    t.add_argument("--n-way", type=int, default=10)
    t.add_argument("--k-shot", type=int, default=10)
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a fold's test boards")
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--model", required=True)
    e.add_argument("--mode", choices=("classification", "pipeline"), default="classification")
    e.add_argument("--templates", choices=TEMPLATE_STRATEGIES, default="random")
    e.add_argument("--threshold", type=float, default=0.3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-figures", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="classify the proposals of one board")
    pr.add_argument("--board", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--templates", choices=TEMPLATE_STRATEGIES, default="random")
    pr.add_argument("--data", default=None, help="training boards for centroid/kmeans templates")
    pr.add_argument("--threshold", type=float, default=0.3)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of block + loss gradients")
    gc.add_argument("--dim", type=int, default=16)
    gc.add_argument("--nodes", type=int, default=6)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--block", choices=("none", "nlnn", "gn"), default="gn")
    gc.add_argument("--loss", choices=("triplet", "bce", "ce"), default="triplet")
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="run the synthetic ablation benchmark")
    b.add_argument("--rows", nargs="+", choices=sorted(ABLATION_ROWS), default=list(DEFAULT_ROWS))
    b.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    b.add_argument("--folds", type=int, default=3)
    b.add_argument("--epochs", type=int, default=BENCH_EPOCHS)
    b.add_argument("--lr", type=float, default=BENCH_LR)
    b.add_argument("--no-figures", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def run_command(argv) -> int:
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        code = args.func(args, ["boardembed", *argv], started)
    except (UsageError, FileNotFoundError) as exc:
        print(f"boardembed: error: {exc}", file=sys.stderr)
        return 2
    except (BoardEmbedError, ValueError, KeyError, OSError) as exc:
        print(f"boardembed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
