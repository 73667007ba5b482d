"""Ablation benchmark on synthetic boards.

Each row names one training configuration (batching, loss, block, extra
features); every row is trained per (seed, fold) and scored on the fold's
test boards with on-board random templates.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import SyntheticConfig, generate_synthetic_dataset, make_cv_splits
from .evaluator import evaluate_classification, run_pipeline_eval
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "CLF": dict(batching="within", loss="ce", block="none"),
    "CLF-GN": dict(batching="within", loss="ce", block="gn"),
    "SPN-B-A": dict(batching="across", loss="bce", block="none"),
    "SPN-T-A": dict(batching="across", loss="triplet", block="none"),
    "SPN-T-A-GN": dict(batching="across", loss="triplet", block="gn"),
    "SPN-T-W-NLNN": dict(batching="within", loss="triplet", block="nlnn"),
    "SPN-T-W-GN": dict(batching="within", loss="triplet", block="gn"),
    "SPN-T-W-GN-GF": dict(batching="within", loss="triplet", block="gn", extra_mode="geometry"),
    "SPN-T-W-GN-LF": dict(batching="within", loss="triplet", block="gn", extra_mode="label"),
}

DEFAULT_ROWS = ("SPN-B-A", "SPN-T-A", "SPN-T-W-GN", "SPN-T-W-GN-LF")

# Desk-scale schedule: fewer epochs than the full recipe, larger step.
BENCH_EPOCHS = 40
BENCH_LR = 1e-3


@dataclass
class RunRecord:
    row: str
    seed: int
    fold: int
    top1: float
    top5: float
    pipeline_map: float
    seconds: float


@dataclass
class BenchmarkResult:
    runs: list[RunRecord] = field(default_factory=list)

    def rows(self) -> list[str]:
        return list(dict.fromkeys(r.row for r in self.runs))

    def mean(self, row: str, metric: str = "top1") -> float:
        vals = [getattr(r, metric) for r in self.runs if r.row == row]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> list[dict]:
        return [{"row": row, "top1": self.mean(row, "top1"), "top5": self.mean(row, "top5"),
                 "pipeline_map": self.mean(row, "pipeline_map"),
                 "runs": sum(r.row == row for r in self.runs)} for row in self.rows()]

    def write_runs_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "seed", "fold", "top1", "top5", "pipeline_map", "seconds"])
            for r in self.runs:
                w.writerow([r.row, r.seed, r.fold, repr(r.top1), repr(r.top5),
                            repr(r.pipeline_map), f"{r.seconds:.2f}"])

    def write_summary_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "top1", "top5", "pipeline_map", "runs"])
            for s in self.summary():
                w.writerow([s["row"], repr(s["top1"]), repr(s["top5"]),
                            repr(s["pipeline_map"]), s["runs"]])


def run_ablation_benchmark(rows: Sequence[str] = DEFAULT_ROWS,
                           seeds: Sequence[int] = (1, 2, 3), folds: int = 3,
                           data_cfg: Optional[SyntheticConfig] = None,
                           epochs: int = BENCH_EPOCHS, lr: float = BENCH_LR,
                           base: Optional[TrainConfig] = None) -> BenchmarkResult:
    data_cfg = data_cfg or SyntheticConfig()
    base = base or TrainConfig()
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise KeyError(f"unknown ablation rows: {unknown}")
    result = BenchmarkResult()
    for seed in seeds:
        boards = generate_synthetic_dataset(replace(data_cfg, seed=seed))
        split = make_cv_splits(boards, folds, np.random.default_rng(seed))
        for k, fold in enumerate(split.folds):
            test_ids = set(fold.test)
            train = [b for b in boards if b.board_id not in test_ids]
            test = [b for b in boards if b.board_id in test_ids]
            for row in rows:
                t0 = time.perf_counter()
                cfg = replace(base, epochs=epochs, lr=lr, seed=seed, **ABLATION_ROWS[row])
                trained = run_training(boards, fold, cfg)
                model = trained.best_model
                clf = evaluate_classification(test, model, "random", seed=seed, train_boards=train)
                det = run_pipeline_eval(test, model, "random", seed=seed, train_boards=train)
                rec = RunRecord(row, seed, k, clf.top1, clf.top5, det.mAP,
                                time.perf_counter() - t0)
                log.info("%s seed=%d fold=%d top1=%.3f mAP=%.3f (%.1fs)", row, seed, k,
                         rec.top1, rec.pipeline_map, rec.seconds)
                result.runs.append(rec)
    return result
