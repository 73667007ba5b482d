"""Pairwise similarity embedding, training losses and template matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBatchError, LabelError, ShapeError
from .linalg import LinearParams, init_linear, linear_backward, linear_forward

SIMILARITIES = ("dot", "cosine")
_COS_EPS = 1e-12


@dataclass
class SimilarityParams:
    phi_d: LinearParams


def init_similarity_params(dim: int, rng: np.random.Generator) -> SimilarityParams:
    return SimilarityParams(init_linear(dim, dim // 2, rng))


@dataclass
class TripletBatch:
    features: np.ndarray
    categories: np.ndarray
    board_ids: list = field(default_factory=list)
    margin: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.categories = np.asarray(self.categories)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.categories):
            raise ShapeError("features must be (B, d) with one category per row")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class LossReport:
    """Scalar loss, number of contributing terms, and gradients.

    ``grad_features`` is dL/d(features); ``grads`` maps parameter names to
    ``(dweight, dbias)``.
    """

    loss: float
    active_terms: int
    total_terms: int
    grad_features: Optional[np.ndarray] = None
    grads: dict = field(default_factory=dict)


def _embed_scores(x: np.ndarray, p: SimilarityParams, similarity: str):
    emb = linear_forward(x, p.phi_d)
    if similarity == "dot":
        return emb @ emb.T, (x, emb, None)
    if similarity == "cosine":
        norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True)) + _COS_EPS
        unit = emb / norms
        return unit @ unit.T, (x, emb, (unit, norms))
    raise ConfigError(f"unknown similarity {similarity!r}")


def _scores_backward(cache, p: SimilarityParams, d_scores: np.ndarray):
    x, emb, cos = cache
    sym = d_scores + d_scores.T
    if cos is None:
        d_emb = sym @ emb
    else:
        unit, norms = cos
        d_unit = sym @ unit
        d_emb = (d_unit - unit * (d_unit * unit).sum(axis=1, keepdims=True)) / norms
    dx, dw, db = linear_backward(x, p.phi_d, d_emb)
    return dx, {"phi_d": (dw, db)}


def pairwise_scores(x: np.ndarray, p: SimilarityParams, similarity: str = "dot") -> np.ndarray:
    return _embed_scores(np.asarray(x, dtype=np.float64), p, similarity)[0]


def cross_scores(queries: np.ndarray, templates: np.ndarray, p: SimilarityParams,
                 similarity: str = "dot") -> np.ndarray:
    """Scores between every query row and every template row."""
    q = linear_forward(np.atleast_2d(queries), p.phi_d)
    t = linear_forward(np.atleast_2d(templates), p.phi_d)
    if similarity == "cosine":
        q = q / (np.linalg.norm(q, axis=1, keepdims=True) + _COS_EPS)
        t = t / (np.linalg.norm(t, axis=1, keepdims=True) + _COS_EPS)
    elif similarity != "dot":
        raise ConfigError(f"unknown similarity {similarity!r}")
    return q @ t.T


def similarity_score(a, b, p: SimilarityParams, similarity: str = "dot") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cannot compare vectors of shapes {a.shape} and {b.shape}")
    return float(cross_scores(a, b, p, similarity)[0, 0])


def _check_categories(categories: np.ndarray):
    if len(np.unique(categories)) < 2:
        raise DegenerateBatchError("batch needs at least two categories")


def triplet_loss(batch: TripletBatch, p: SimilarityParams, similarity: str = "dot") -> LossReport:
    """Hinge triplet loss over every (anchor, same, different) triple.

    The sum of hinge terms is divided by the number of strictly positive
    terms, so only violated triples drive the gradient.
    """
    cats = batch.categories
    _check_categories(cats)
    scores, cache = _embed_scores(batch.features, p, similarity)
    same = cats[:, None] == cats[None, :]
    neg = ~same
    # one row per (anchor, similar) pair: terms[p, d] = S[i, d] - S[i, s] + margin
    anchor, similar = np.nonzero(same & ~np.eye(len(cats), dtype=bool))
    terms = scores[anchor] - scores[anchor, similar][:, None] + batch.margin
    valid = neg[anchor]
    active = valid & (terms > 0)
    total = int(valid.sum())
    m = int(active.sum())
    d_scores = np.zeros_like(scores)
    if m == 0:
        loss = 0.0
    else:
        loss = float(terms[active].sum() / m)
        rows, starts = np.unique(anchor, return_index=True)     # anchor is sorted
        d_scores[rows] += np.add.reduceat(active / m, starts, axis=0)   # +1 on S[i, d]
        d_scores[anchor, similar] -= active.sum(axis=1) / m      # -1 on S[i, s]
    dx, grads = _scores_backward(cache, p, d_scores)
    return LossReport(loss, m, total, dx, grads)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_pair_loss(batch: TripletBatch, p: SimilarityParams, similarity: str = "dot") -> LossReport:
    """Mean binary cross-entropy of sigmoid(score) over all unordered pairs."""
    cats = batch.categories
    _check_categories(cats)
    scores, cache = _embed_scores(batch.features, p, similarity)
    iu = np.triu_indices(len(cats), k=1)
    s = scores[iu]
    y = (cats[iu[0]] == cats[iu[1]]).astype(np.float64)
    n_pairs = len(s)
    loss = float((_softplus(s) - y * s).sum() / n_pairs)
    d_scores = np.zeros_like(scores)
    d_scores[iu] = (_sigmoid(s) - y) / n_pairs
    dx, grads = _scores_backward(cache, p, d_scores)
    return LossReport(loss, n_pairs, n_pairs, dx, grads)


def classifier_head_loss(batch: TripletBatch, head: LinearParams,
                         category_index: Optional[dict] = None) -> LossReport:
    """Softmax cross-entropy of a linear classifier head, averaged over the batch.

    Categories may be integer ids or names resolved through ``category_index``.
    """
    n_cls = head.out_dim
    if category_index is not None:
        try:
            labels = np.array([category_index[c] for c in batch.categories.tolist()])
        except KeyError as exc:
            raise LabelError(f"unknown category {exc.args[0]!r}") from None
    else:
        labels = batch.categories.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise LabelError(f"category id out of range for {n_cls} classes")
    x = batch.features
    logits = linear_forward(x, head)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    b = len(labels)
    loss = float((log_z - shifted[rows, labels]).sum() / b)
    probs = np.exp(shifted - log_z[:, None])
    d_logits = probs
    d_logits[rows, labels] -= 1.0
    d_logits /= b
    dx, dw, db = linear_backward(x, head, d_logits)
    return LossReport(loss, b, b, dx, {"head": (dw, db)})


def rank_categories(scores: np.ndarray, template_categories: Sequence, categories: Sequence):
    """Collapse a (queries x templates) score matrix into per-category rankings.

    A category's score is its best template score. Returns, per query, a list
    of ``(category, score)`` sorted by descending score with ties going to the
    lower category index.
    """
    cat_pos = {c: i for i, c in enumerate(categories)}
    n_q = scores.shape[0]
    best = np.full((n_q, len(categories)), -np.inf)
    for j, c in enumerate(template_categories):
        k = cat_pos[c]
        best[:, k] = np.maximum(best[:, k], scores[:, j])
    present = sorted({cat_pos[c] for c in template_categories})
    out = []
    for qi in range(n_q):
        order = sorted(present, key=lambda k: (-best[qi, k], k))
        out.append([(categories[k], float(best[qi, k])) for k in order])
    return out


def classify_by_templates(queries, templates, p: SimilarityParams, similarity: str = "dot",
                          categories: Optional[Sequence] = None):
    """Rank template categories for each query by similarity.

    ``templates`` is a sequence of ``(category, feature)``. Category index
    order (used for tie-breaks) is ``categories`` when given, else sorted
    names.
    """
    if len(templates) == 0:
        raise ConfigError("template set is empty")
    t_cats = [c for c, _ in templates]
    t_feat = np.array([f for _, f in templates], dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if categories is None:
        categories = sorted(set(t_cats))
    scores = cross_scores(q, t_feat, p, similarity)
    return rank_categories(scores, t_cats, list(categories))
