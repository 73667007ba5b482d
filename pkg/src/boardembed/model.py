"""Block + head composition, checkpoint persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blocks import BLOCK_KINDS, GNParams, block_backward, block_forward, init_block_params
from .data import EXTRA_MODES, Template, augment_matrix, extra_dim
from .errors import ConfigError, ParseError
from .linalg import LinearParams, init_linear
from .similarity import (
    SIMILARITIES,
    LossReport,
    SimilarityParams,
    TripletBatch,
    bce_pair_loss,
    classifier_head_loss,
    cross_scores,
    rank_categories,
    triplet_loss,
)

LOSS_KINDS = ("triplet", "bce", "ce")
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    feature_dim: int
    categories: list
    block: str = "gn"
    loss: str = "triplet"
    extra_mode: str = "none"
    similarity: str = "dot"
    depth: int = 1

    def __post_init__(self):
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"unknown block {self.block!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.extra_mode not in EXTRA_MODES:
            raise ConfigError(f"unknown extra-feature mode {self.extra_mode!r}")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.depth < 1:
            raise ConfigError("block depth must be at least 1")
        self.categories = list(self.categories)

    @property
    def node_dim(self) -> int:
        return self.feature_dim + extra_dim(self.extra_mode, len(self.categories))

    @property
    def n_blocks(self) -> int:
        return 0 if self.block == "none" else self.depth


class EmbeddingModel:
    """Learnable parameters and forward/backward passes for one ablation setting.

    Parameters live in a flat dict: ``block{i}.{layer}`` for block layers,
    ``phi_d`` for the similarity embedding and ``head`` for the classifier.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, LinearParams]):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "EmbeddingModel":
        dim = spec.node_dim
        params = {}
        for i in range(spec.n_blocks):
            for name, p in init_block_params(dim, rng, spec.block).as_dict().items():
                params[f"block{i}.{name}"] = p
        if spec.loss == "ce":
            params["head"] = init_linear(dim, len(spec.categories), rng)
        else:
            params["phi_d"] = init_linear(dim, dim // 2, rng)
        return cls(spec, params)

    def block_params(self, i: int) -> GNParams:
        prefix = f"block{i}."
        return GNParams.from_dict({k[len(prefix):]: v for k, v in self.params.items()
                                   if k.startswith(prefix)})

    @property
    def similarity_params(self) -> SimilarityParams:
        return SimilarityParams(self.params["phi_d"])

    @property
    def category_index(self) -> dict:
        return {c: i for i, c in enumerate(self.spec.categories)}

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.spec, {k: p.copy() for k, p in self.params.items()})

    # ------------------------------------------------------------ forward

    def refine(self, x: np.ndarray) -> np.ndarray:
        for i in range(self.spec.n_blocks):
            x, _ = block_forward(x, self.block_params(i))
        return x

    def node_matrix(self, features, instances, board_sizes, labeled) -> np.ndarray:
        return augment_matrix(np.asarray(features, dtype=np.float64), instances, board_sizes,
                              labeled, self.spec.extra_mode, self.spec.categories)

    def loss_and_grads(self, batch: TripletBatch, nodes: Optional[np.ndarray] = None) -> LossReport:
        """Loss on a batch, with gradients for every parameter in ``grads``.

        ``nodes`` are the augmented inputs; defaults to ``batch.features``.
        """
        x = batch.features if nodes is None else nodes
        caches = []
        for i in range(self.spec.n_blocks):
            x, cache = block_forward(x, self.block_params(i))
            caches.append(cache)
        refined = TripletBatch(x, batch.categories, batch.board_ids, batch.margin)
        sim = self.spec.similarity
        if self.spec.loss == "triplet":
            rep = triplet_loss(refined, self.similarity_params, sim)
        elif self.spec.loss == "bce":
            rep = bce_pair_loss(refined, self.similarity_params, sim)
        else:
            rep = classifier_head_loss(refined, self.params["head"], self.category_index)

        grads = dict(rep.grads)
        g = rep.grad_features
        for i in reversed(range(self.spec.n_blocks)):
            g, bgrads = block_backward(caches[i], self.block_params(i), g)
            for name, pair in bgrads.items():
                grads[f"block{i}.{name}"] = pair
        rep.grads = grads
        rep.grad_features = g
        return rep

    # ------------------------------------------------------------ inference

    def rank_board(self, queries, query_sizes, templates: Sequence[Template]):
        """Classify query instances against templates on one board graph.

        The graph holds the queries (unlabeled) and the templates (labeled).
        Returns per-query ``[(category, score), ...]`` best first.
        """
        n_q = len(queries)
        instances = list(queries) + [t.instance for t in templates]
        sizes = list(query_sizes) + [t.board_size for t in templates]
        labeled = [False] * n_q + [True] * len(templates)
        feats = np.array([inst.feature for inst in instances])
        refined = self.refine(self.node_matrix(feats, instances, sizes, labeled))
        q, t = refined[:n_q], refined[n_q:]
        if n_q == 0:
            return []
        if self.spec.loss == "ce":
            logits = q @ self.params["head"].weight.T + self.params["head"].bias
            cats = self.spec.categories
            return rank_categories(logits, cats, cats)
        scores = cross_scores(q, t, self.similarity_params, self.spec.similarity)
        t_cats = [tp.category for tp in templates]
        order = [c for c in self.spec.categories if c in set(t_cats)]
        order += sorted(set(t_cats) - set(order))
        return rank_categories(scores, t_cats, order)

    # ------------------------------------------------------------ persistence

    def to_json(self, seed: int = 0, optim: Optional[dict] = None) -> dict:
        params = {}
        for name in sorted(self.params):
            p = self.params[name]
            params[f"{name}.weight"] = {"shape": list(p.weight.shape), "data": p.weight.ravel().tolist()}
            params[f"{name}.bias"] = {"shape": list(p.bias.shape), "data": p.bias.tolist()}
        return {
            "version": CHECKPOINT_VERSION,
            "feature_dim": self.spec.feature_dim,
            "extra_mode": self.spec.extra_mode,
            "block": self.spec.block,
            "loss": self.spec.loss,
            "similarity": self.spec.similarity,
            "depth": self.spec.depth,
            "categories": list(self.spec.categories),
            "params": params,
            "optim": optim or {},
            "seed": seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EmbeddingModel":
        try:
            if doc["version"] != CHECKPOINT_VERSION:
                raise ParseError(f"unsupported checkpoint version {doc['version']}")
            spec = ModelSpec(
                feature_dim=int(doc["feature_dim"]), categories=doc["categories"],
                block=doc["block"], loss=doc["loss"], extra_mode=doc["extra_mode"],
                similarity=doc.get("similarity", "dot"), depth=int(doc.get("depth", 1)))
            arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                      for k, v in doc["params"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed checkpoint: {exc}") from None
        names = sorted({k.rsplit(".", 1)[0] for k in arrays})
        params = {n: LinearParams(arrays[f"{n}.weight"], arrays[f"{n}.bias"]) for n in names}
        expected = set(EmbeddingModel.init(spec, np.random.default_rng(0)).params)
        if set(params) != expected:
            raise ParseError(f"checkpoint parameters {sorted(params)} do not match {sorted(expected)}")
        return cls(spec, params)

    def save(self, path, seed: int = 0, optim: Optional[dict] = None):
        Path(path).write_text(json.dumps(self.to_json(seed, optim)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: malformed JSON ({exc})") from None
        return cls.from_json(doc)
