"""SGD with momentum, plateau scheduling and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (
    BoardRecord,
    Fold,
    dataset_categories,
    feature_std,
    holdout_boards,
    sample_training_batch,
    select_templates,
)
from .errors import DegenerateBatchError, NumericError
from .evaluator import evaluate_classification
from .linalg import LinearParams
from .model import EmbeddingModel, ModelSpec

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patience: int = 50
    factor: float = 0.5
    best: float = -np.inf
    counter: int = 0
    velocity: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "patience": self.patience, "factor": self.factor,
                "best": None if not np.isfinite(self.best) else self.best,
                "counter": self.counter}


def sgd_update(params: dict[str, LinearParams], grads: dict, state: OptimState):
    """``v <- momentum * v + (g + wd * p)``; ``p <- p - lr * v``, in place.

    ``grads`` maps names to ``(dweight, dbias)``; parameters without a
    gradient entry get weight decay only.
    """
    for name, g in grads.items():
        if not all(np.all(np.isfinite(a)) for a in g):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    for name, p in params.items():
        gw, gb = grads.get(name, (0.0, 0.0))
        vel = state.velocity.get(name)
        if vel is None:
            vel = state.velocity[name] = (np.zeros_like(p.weight), np.zeros_like(p.bias))
        for arr, v, g in ((p.weight, vel[0], gw), (p.bias, vel[1], gb)):
            v *= state.momentum
            v += g + state.weight_decay * arr
            arr -= state.lr * v


def plateau_lr_schedule(state: OptimState, accuracy: float) -> OptimState:
    """Halve the learning rate after ``patience`` epochs without strict improvement."""
    if accuracy > state.best:
        state.best = accuracy
        state.counter = 0
    else:
        state.counter += 1
        if state.counter >= state.patience:
            state.lr *= state.factor
            state.counter = 0
    return state


@dataclass
class TrainConfig:
    epochs: int = 500
    iterations_per_epoch: Optional[int] = None
    n_way: int = 10
    k_shot: int = 10
    margin: float = 1.0
    batching: str = "within"
    block: str = "gn"
    loss: str = "triplet"
    extra_mode: str = "none"
    similarity: str = "dot"
    depth: int = 1
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patience: int = 50
    lr_factor: float = 0.5
    jitter_scale: float = 0.05
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.n_way < 1 or self.k_shot < 1:
            raise ValueError("epochs, N and K must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    eval_top1: float
    lr: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    best_model: EmbeddingModel
    metrics: list[EpochLog]
    state: OptimState
    config: TrainConfig

    def write(self, checkpoint_path) -> dict:
        """Write final and best checkpoints plus the metrics CSV; return their paths."""
        ckpt = Path(checkpoint_path)
        best = ckpt.with_name(ckpt.stem + ".best" + ckpt.suffix)
        metrics = ckpt.with_name(ckpt.stem + ".metrics.csv")
        optim = self.state.summary()
        self.model.save(ckpt, self.config.seed, optim)
        self.best_model.save(best, self.config.seed, optim)
        write_metrics(self.metrics, metrics)
        return {"checkpoint": str(ckpt), "best_checkpoint": str(best), "metrics": str(metrics)}


def write_metrics(rows: Sequence[EpochLog], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "eval_top1", "lr"])
        for r in rows:
            w.writerow([r.epoch, repr(r.loss), repr(r.eval_top1), repr(r.lr)])


def read_metrics(path) -> list[EpochLog]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EpochLog(int(r["epoch"]), float(r["loss"]), float(r["eval_top1"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


def run_training(boards: Sequence[BoardRecord], fold: Optional[Fold], cfg: TrainConfig,
                 categories: Optional[Sequence[str]] = None) -> TrainResult:
    """Train one model on the training boards of ``fold`` (all boards when None).

    A fifth of the training boards is held out to drive the plateau
    scheduler and pick the best checkpoint; test boards are never touched.
    """
    if fold is not None:
        train_ids = set(fold.train)
        train = [b for b in boards if b.board_id in train_ids]
    else:
        train = list(boards)
    if not train:
        raise ValueError("no training boards")
    categories = list(categories) if categories is not None else dataset_categories(train)
    if cfg.loss in ("triplet", "bce") and len(categories) < 2:
        raise DegenerateBatchError("training data holds a single category; pair losses are undefined")

    rng = np.random.default_rng(cfg.seed)
    fit, val = holdout_boards(train, cfg.val_fraction, rng)
    if not val:
        val = fit
    spec = ModelSpec(feature_dim=train[0].feature_dim, categories=categories, block=cfg.block,
                     loss=cfg.loss, extra_mode=cfg.extra_mode, similarity=cfg.similarity,
                     depth=cfg.depth)
    model = EmbeddingModel.init(spec, rng)
    state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       patience=cfg.patience, factor=cfg.lr_factor)
    jitter = cfg.jitter_scale * feature_std(fit)
    iters = cfg.iterations_per_epoch or len(fit)

    val_rng = np.random.default_rng(cfg.seed + 7919)
    val_templates = {}
    for b in val:
        cats = b.categories()
        picked = select_templates(b, "random", val_rng, cats)
        val_templates[b.board_id] = [t for c in cats for t in picked[c]]

    best_model = model.copy()
    best_acc = -np.inf
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr_used = state.lr
        for _ in range(iters):
            batch = sample_training_batch(fit, cfg.batching, cfg.n_way, cfg.k_shot, jitter, rng,
                                          cfg.margin)
            if len(set(batch.categories.tolist())) < 2 and cfg.loss != "ce":
                continue
            nodes = model.node_matrix(batch.features, batch.instances, batch.board_sizes,
                                      batch.is_template)
            rep = model.loss_and_grads(batch, nodes)
            sgd_update(model.params, rep.grads, state)
            losses.append(rep.loss)
        acc = evaluate_classification(val, model, templates=val_templates).top1
        mean_loss = float(np.mean(losses)) if losses else 0.0
        metrics.append(EpochLog(epoch, mean_loss, acc, lr_used))
        if acc > best_acc:
            best_acc = acc
            best_model = model.copy()
        plateau_lr_schedule(state, acc)
        log.debug("epoch %d loss %.4f val top1 %.4f lr %.2e", epoch, mean_loss, acc, lr_used)
    return TrainResult(model, best_model, metrics, state, cfg)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
