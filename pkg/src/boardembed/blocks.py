"""Board-level feature refinement blocks.

The GN block refines every node of a board graph using three sources:

* a global board feature, the mean of embedded node features;
* an attention-weighted aggregate of embedded neighbours, where the
  attention row of node i is ``relu(s_ij)^2 / sum_j relu(s_ij)^2`` over the
  bilinear scores ``s_ij = <psi_1(x_i), psi_2(x_j)>`` (self-edges included);
* the node itself, through a residual connection.

``x_hat_i = relu(x_i + phi_n([x_i, edge_i, global]))``

The NLNN variant is the same computation without the global feature.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyGraphError, ShapeError
from .linalg import (
    LinearParams,
    init_linear,
    linear_backward,
    linear_forward,
    relu,
)

BLOCK_KINDS = ("none", "nlnn", "gn")


@dataclass
class NodeMeta:
    board_id: str
    instance_id: str
    is_template: bool = False
    category: Optional[str] = None


@dataclass
class BoardGraph:
    """Node features of a single board plus per-node bookkeeping."""

    node_features: np.ndarray
    node_meta: list[NodeMeta] = field(default_factory=list)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_features.ndim != 2:
            raise ShapeError("node features must be an (n, d) matrix")
        if self.node_features.shape[0] == 0:
            raise EmptyGraphError("a board graph needs at least one node")
        if self.node_meta and len(self.node_meta) != self.node_features.shape[0]:
            raise ShapeError("node_meta length does not match node count")
        if len({m.board_id for m in self.node_meta}) > 1:
            raise ValueError("all nodes of a board graph must belong to one board")

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]


def half_dim(dim: int) -> int:
    return dim // 2


@dataclass
class GNParams:
    """Embedding layers of one block; ``phi_g`` is None for the NLNN variant."""

    phi_e: LinearParams
    psi_1: LinearParams
    psi_2: LinearParams
    phi_n: LinearParams
    phi_g: Optional[LinearParams] = None

    @property
    def uses_global(self) -> bool:
        return self.phi_g is not None

    def as_dict(self) -> dict[str, LinearParams]:
        out = {"phi_e": self.phi_e, "psi_1": self.psi_1, "psi_2": self.psi_2,
               "phi_n": self.phi_n}
        if self.phi_g is not None:
            out["phi_g"] = self.phi_g
        return out

    @classmethod
    def from_dict(cls, d: dict[str, LinearParams]) -> "GNParams":
        return cls(phi_e=d["phi_e"], psi_1=d["psi_1"], psi_2=d["psi_2"],
                   phi_n=d["phi_n"], phi_g=d.get("phi_g"))

    def check(self, dim: int):
        h = half_dim(dim)
        n_in = dim + h * (2 if self.uses_global else 1)
        expected = {"phi_e": (h, dim), "psi_1": (h, dim), "psi_2": (h, dim),
                    "phi_n": (dim, n_in), "phi_g": (h, dim)}
        for name, p in self.as_dict().items():
            if p.weight.shape != expected[name]:
                raise ShapeError(
                    f"{name} has shape {p.weight.shape}, expected {expected[name]} for d'={dim}")


def init_block_params(dim: int, rng: np.random.Generator, kind: str = "gn") -> GNParams:
    if kind not in ("gn", "nlnn"):
        raise ValueError(f"unknown block kind {kind!r}")
    h = half_dim(dim)
    phi_g = init_linear(dim, h, rng) if kind == "gn" else None
    n_in = dim + h * (2 if kind == "gn" else 1)
    return GNParams(
        phi_e=init_linear(dim, h, rng),
        psi_1=init_linear(dim, h, rng),
        psi_2=init_linear(dim, h, rng),
        phi_n=init_linear(n_in, dim, rng),
        phi_g=phi_g,
    )


@dataclass
class EdgeWeightMatrix:
    w: np.ndarray
    w_hat: np.ndarray


def normalize_edge_scores(w_hat: np.ndarray) -> np.ndarray:
    """Squared-ReLU row normalisation; rows without a positive score become zero."""
    r2 = relu(w_hat) ** 2
    denom = r2.sum(axis=1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, r2 / safe, 0.0)


def compute_edge_weights(x, p: GNParams) -> EdgeWeightMatrix:
    x = x.node_features if isinstance(x, BoardGraph) else np.asarray(x, dtype=np.float64)
    p.check(x.shape[1])
    w_hat = linear_forward(x, p.psi_1) @ linear_forward(x, p.psi_2).T
    return EdgeWeightMatrix(w=normalize_edge_scores(w_hat), w_hat=w_hat)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Lexicographic row order; identical rows are interchangeable."""
    return np.lexsort(x.T[::-1])


def block_forward(x: np.ndarray, p: GNParams):
    """Refine the rows of ``x``. Returns ``(y, cache)`` for :func:`block_backward`.

    Nodes are processed in canonical order so every reduction over nodes runs
    in the same sequence whatever order the caller supplies; the output is
    then bitwise permutation-equivariant.
    """
    if x.ndim != 2:
        raise ShapeError("node features must be an (n, d) matrix")
    n, dim = x.shape
    if n == 0:
        raise EmptyGraphError("a board graph needs at least one node")
    p.check(dim)
    order = canonical_order(x)
    y, cache = _forward_sorted(x[order], p)
    out = np.empty_like(y)
    out[order] = y
    cache["order"] = order
    return out, cache


def _forward_sorted(x: np.ndarray, p: GNParams):
    n = x.shape[0]
    a = linear_forward(x, p.psi_1)
    b = linear_forward(x, p.psi_2)
    w_hat = a @ b.T
    r = relu(w_hat)
    r2 = r * r
    denom = r2.sum(axis=1, keepdims=True)
    live = denom > 0
    w = np.where(live, r2 / np.where(live, denom, 1.0), 0.0)

    e = linear_forward(x, p.phi_e)
    edge = w @ e
    parts = [x, edge]
    if p.uses_global:
        g = linear_forward(x, p.phi_g).mean(axis=0)
        parts.append(np.broadcast_to(g, (n, g.shape[0])))
    z = np.concatenate(parts, axis=1)
    pre = x + linear_forward(z, p.phi_n)
    y = relu(pre)
    cache = dict(x=x, a=a, b=b, r=r, denom=denom, live=live, w=w, e=e, z=z, pre=pre)
    return y, cache


def block_backward(cache: dict, p: GNParams, grad_y: np.ndarray):
    """Backpropagate ``grad_y`` through :func:`block_forward`.

    Returns ``(grad_x, grads)`` where ``grads`` maps layer names to
    ``(dweight, dbias)`` tuples.
    """
    order = cache["order"]
    grad_sorted, grads = _backward_sorted(cache, p, grad_y[order])
    grad_x = np.empty_like(grad_sorted)
    grad_x[order] = grad_sorted
    return grad_x, grads


def _backward_sorted(cache: dict, p: GNParams, grad_y: np.ndarray):
    x = cache["x"]
    n, dim = x.shape
    h = half_dim(dim)
    grads = {}

    d_pre = np.where(cache["pre"] > 0, grad_y, 0.0)
    grad_x = d_pre.copy()

    dz, dw_n, db_n = linear_backward(cache["z"], p.phi_n, d_pre)
    grads["phi_n"] = (dw_n, db_n)
    grad_x += dz[:, :dim]
    d_edge = dz[:, dim:dim + h]

    if p.uses_global:
        d_g = dz[:, dim + h:].sum(axis=0)
        d_gnodes = np.broadcast_to(d_g / n, (n, h))
        dx_g, dw_g, db_g = linear_backward(x, p.phi_g, d_gnodes)
        grads["phi_g"] = (dw_g, db_g)
        grad_x += dx_g

    # edge = w @ e
    d_w = d_edge @ cache["e"].T
    d_e = cache["w"].T @ d_edge
    dx_e, dw_e, db_e = linear_backward(x, p.phi_e, d_e)
    grads["phi_e"] = (dw_e, db_e)
    grad_x += dx_e

    # w_ij = r_ij^2 / sum_k r_ik^2 on live rows
    w = cache["w"]
    denom = np.where(cache["live"], cache["denom"], 1.0)
    d_r2 = (d_w - (d_w * w).sum(axis=1, keepdims=True)) / denom
    d_r2 = np.where(cache["live"], d_r2, 0.0)
    d_what = d_r2 * 2.0 * cache["r"]

    d_a = d_what @ cache["b"]
    d_b = d_what.T @ cache["a"]
    dx_1, dw_1, db_1 = linear_backward(x, p.psi_1, d_a)
    dx_2, dw_2, db_2 = linear_backward(x, p.psi_2, d_b)
    grads["psi_1"] = (dw_1, db_1)
    grads["psi_2"] = (dw_2, db_2)
    grad_x += dx_1 + dx_2
    return grad_x, grads


def _apply(g: BoardGraph, p: GNParams) -> BoardGraph:
    y, _ = block_forward(g.node_features, p)
    return BoardGraph(y, list(g.node_meta))


def gn_block_apply(g: BoardGraph, p: GNParams) -> BoardGraph:
    if not p.uses_global:
        raise ShapeError("GN block needs phi_g; use nlnn_block_apply for the reduced block")
    return _apply(g, p)


def nlnn_block_apply(g: BoardGraph, p: GNParams) -> BoardGraph:
    if p.uses_global:
        raise ShapeError("NLNN block takes parameters without phi_g")
    return _apply(g, p)


def identity_block_apply(g: BoardGraph, p=None) -> BoardGraph:
    return BoardGraph(g.node_features.copy(), list(g.node_meta))
