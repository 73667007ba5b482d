"""Classification accuracy, detection matching and mean average precision."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BoardRecord, Template, select_templates
from .errors import MissingTemplateError
from .model import EmbeddingModel

log = logging.getLogger(__name__)


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class DetectionResult:
    board_id: str
    det_id: str
    bbox: tuple
    category: str
    confidence: float

    def to_json(self) -> dict:
        return {"board_id": self.board_id, "id": self.det_id, "bbox": list(self.bbox),
                "category": self.category, "confidence": self.confidence}


@dataclass
class EvalReport:
    top1: Optional[float] = None
    top5: Optional[float] = None
    n_queries: int = 0
    per_category_ap: dict = field(default_factory=dict)
    mAP: Optional[float] = None
    counts: dict = field(default_factory=dict)
    skipped_boards: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True),
                              encoding="utf-8")

    def save_ap_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "ap", "tp", "fp", "fn"])
            for c in sorted(self.per_category_ap):
                k = self.counts.get(c, {})
                w.writerow([c, repr(self.per_category_ap[c]), k.get("tp", 0), k.get("fp", 0),
                            k.get("fn", 0)])


# ---------------------------------------------------------------- classification

def board_templates(board: BoardRecord, strategy: str, rng: np.random.Generator,
                    train_boards: Sequence[BoardRecord] = (),
                    cache: Optional[dict] = None) -> list[Template]:
    """Templates for the categories on ``board`` under ``strategy``.

    Non-random strategies draw from ``train_boards``; ``cache`` memoizes their
    per-dataset selection.
    """
    cats = board.categories()
    if strategy == "random":
        chosen = select_templates(board, "random", rng, cats)
    else:
        key = strategy
        if cache is None or key not in cache:
            picked = select_templates(train_boards, strategy, rng)
            if cache is not None:
                cache[key] = picked
        else:
            picked = cache[key]
        missing = [c for c in cats if c not in picked]
        if missing:
            raise MissingTemplateError(missing)
        chosen = {c: picked[c] for c in cats}
    return [t for c in cats for t in chosen[c]]


def topk_hits(ranked, truth: str, k: int) -> bool:
    return truth in [c for c, _ in ranked[:k]]


def evaluate_classification(boards: Sequence[BoardRecord], model: EmbeddingModel,
                            strategy: str = "random", seed: int = 0,
                            train_boards: Sequence[BoardRecord] = (),
                            templates: Optional[dict] = None) -> EvalReport:
    """Top-1/top-5 accuracy over ground-truth instances, micro-averaged.

    Each board graph holds its instances plus the templates; instances used
    as on-board templates are not scored. ``templates`` may pre-fix the
    template list per board id.
    """
    rng = np.random.default_rng(seed)
    cache: dict = {}
    hits1 = hits5 = total = 0
    for board in boards:
        temps = templates[board.board_id] if templates is not None else \
            board_templates(board, strategy, rng, train_boards, cache)
        used = {id(t.instance) for t in temps}
        queries = [inst for inst in board.instances if id(inst) not in used]
        ranked = model.rank_board(queries, [(board.width, board.height)] * len(queries), temps)
        for inst, r in zip(queries, ranked):
            hits1 += topk_hits(r, inst.category, 1)
            hits5 += topk_hits(r, inst.category, 5)
            total += 1
    top1 = hits1 / total if total else 0.0
    top5 = hits5 / total if total else 0.0
    return EvalReport(top1=top1, top5=top5, n_queries=total)


# ---------------------------------------------------------------- detection mAP

def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a confidence-sorted TP indicator."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def match_detections(preds: Sequence[DetectionResult], gt_boxes: dict, iou_threshold: float):
    """Greedy matching for one category.

    ``gt_boxes`` maps board id to a list of boxes. Predictions are visited by
    descending confidence (ties by id); each takes the unmatched box with the
    highest IoU at or above the threshold. Returns the TP indicator in visit
    order.
    """
    order = sorted(preds, key=lambda p: (-p.confidence, p.board_id, p.det_id))
    used = {b: [False] * len(boxes) for b, boxes in gt_boxes.items()}
    tp = []
    for p in order:
        boxes = gt_boxes.get(p.board_id, [])
        best, best_j = -1.0, -1
        for j, box in enumerate(boxes):
            if used[p.board_id][j]:
                continue
            iou = box_iou(p.bbox, box)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[p.board_id][best_j] = True
            tp.append(1)
        else:
            tp.append(0)
    return np.array(tp, dtype=np.int64)


def evaluate_detection_map(predictions: Sequence[DetectionResult],
                           boards: Sequence[BoardRecord],
                           iou_threshold: float = 0.5) -> EvalReport:
    gt: dict[str, dict[str, list]] = {}
    for b in boards:
        for inst in b.instances:
            gt.setdefault(inst.category, {}).setdefault(b.board_id, []).append(inst.bbox)
    by_cat: dict[str, list[DetectionResult]] = {}
    for p in predictions:
        by_cat.setdefault(p.category, []).append(p)

    aps, counts = {}, {}
    for c in sorted(set(gt) | set(by_cat)):
        preds = by_cat.get(c, [])
        n_gt = sum(len(v) for v in gt.get(c, {}).values())
        tp = match_detections(preds, gt.get(c, {}), iou_threshold)
        n_tp = int(tp.sum())
        counts[c] = {"tp": n_tp, "fp": len(tp) - n_tp, "fn": n_gt - n_tp}
        if n_gt:
            aps[c] = average_precision(tp, n_gt)
    m_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return EvalReport(per_category_ap=aps, mAP=m_ap, counts=counts)


# ---------------------------------------------------------------- pipeline

def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def predict_board(board: BoardRecord, model: EmbeddingModel, templates: Sequence[Template],
                  score_threshold: float = 0.3) -> list[DetectionResult]:
    """Classify the board's proposals scoring at least ``score_threshold``."""
    props = [p for p in (board.proposals or []) if p.score >= score_threshold]
    if not props:
        return []
    ranked = model.rank_board(props, [(board.width, board.height)] * len(props), templates)
    return [DetectionResult(board.board_id, p.instance_id, p.bbox, r[0][0], _sigmoid(r[0][1]))
            for p, r in zip(props, ranked)]


def run_pipeline_eval(boards: Sequence[BoardRecord], model: EmbeddingModel,
                      strategy: str = "random", score_threshold: float = 0.3, seed: int = 0,
                      train_boards: Sequence[BoardRecord] = (),
                      iou_threshold: float = 0.5) -> EvalReport:
    rng = np.random.default_rng(seed)
    cache: dict = {}
    preds, evaluated, skipped = [], [], []
    for board in boards:
        if board.proposals is None:
            log.warning("board %s has no proposals; skipped", board.board_id)
            skipped.append(board.board_id)
            continue
        temps = board_templates(board, strategy, rng, train_boards, cache)
        preds.extend(predict_board(board, model, temps, score_threshold))
        evaluated.append(board)
    report = evaluate_detection_map(preds, evaluated, iou_threshold)
    report.skipped_boards = skipped
    return report
