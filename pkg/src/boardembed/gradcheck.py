"""Finite-difference check of the full block + loss gradient."""
from __future__ import annotations

import numpy as np

from .linalg import LinearParams, finite_difference_gradcheck
from .model import EmbeddingModel, ModelSpec
from .similarity import TripletBatch


def random_problem(dim: int, nodes: int, seed: int, block: str = "gn", loss: str = "triplet",
                   n_categories: int = 2):
    """A small random model and batch for gradient checking."""
    rng = np.random.default_rng(seed)
    n_categories = max(2, min(n_categories, nodes))
    categories = [f"t{i}" for i in range(n_categories)]
    spec = ModelSpec(feature_dim=dim, categories=categories, block=block, loss=loss)
    model = EmbeddingModel.init(spec, rng)
    feats = rng.uniform(0.0, 1.0, size=(nodes, dim))
    cats = np.array([categories[i % n_categories] for i in range(nodes)])
    return model, TripletBatch(feats, cats, ["gc"] * nodes, 1.0)


def model_gradcheck(model: EmbeddingModel, batch: TripletBatch, eps: float = 1e-4) -> float:
    rep = model.loss_and_grads(batch)
    analytic = {name: LinearParams(*rep.grads.get(name, (np.zeros_like(p.weight),
                                                         np.zeros_like(p.bias))))
                for name, p in model.params.items()}

    def loss_fn(_params):
        return model.loss_and_grads(batch).loss

    return finite_difference_gradcheck(loss_fn, model.params, analytic, eps)


def run_gradcheck(dim: int = 16, nodes: int = 6, seed: int = 0, block: str = "gn",
                  loss: str = "triplet", eps: float = 1e-4) -> float:
    model, batch = random_problem(dim, nodes, seed, block, loss)
    return model_gradcheck(model, batch, eps)
