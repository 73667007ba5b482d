"""Dense primitives with hand-written backward rules.

Everything works on float64 numpy arrays. Batched variants operate on row
matrices (one sample per row) so the graph blocks can process a whole board
at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyGraphError, NumericError, ShapeError


@dataclass
class LinearParams:
    """Fully connected layer ``y = W x + b`` with ``W`` of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearParams":
        return LinearParams(self.weight.copy(), self.bias.copy())

    def zeros_like(self) -> "LinearParams":
        return LinearParams(np.zeros_like(self.weight), np.zeros_like(self.bias))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weight, self.bias


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearParams:
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LinearParams(weight, np.zeros(out_dim))


@dataclass
class GradStore:
    """Gradient buffers keyed by parameter name, mirroring a parameter dict."""

    grads: dict[str, LinearParams]
    count: int = 0

    @classmethod
    def like(cls, params: dict[str, LinearParams]) -> "GradStore":
        return cls({k: p.zeros_like() for k, p in params.items()})

    def zero(self):
        for g in self.grads.values():
            g.weight.fill(0.0)
            g.bias.fill(0.0)
        self.count = 0

    def add(self, name: str, d_weight: np.ndarray, d_bias: np.ndarray):
        g = self.grads[name]
        if d_weight.shape != g.weight.shape or d_bias.shape != g.bias.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        g.weight += d_weight
        g.bias += d_bias

    def __getitem__(self, name: str) -> LinearParams:
        return self.grads[name]

    def items(self):
        return self.grads.items()


def linear_apply(x: np.ndarray, p: LinearParams) -> np.ndarray:
    """Apply a layer to a single vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.in_dim:
        raise ShapeError(f"expected input of length {p.in_dim}, got shape {x.shape}")
    return p.weight @ x + p.bias


def linear_forward(x: np.ndarray, p: LinearParams) -> np.ndarray:
    """Apply a layer to every row of ``x``."""
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise ShapeError(f"expected rows of length {p.in_dim}, got shape {x.shape}")
    return x @ p.weight.T + p.bias


def linear_backward(x: np.ndarray, p: LinearParams, grad_out: np.ndarray):
    """Return ``(dx, dweight, dbias)`` for ``linear_forward(x, p)``.

    Works for a single vector as well as for row batches; batch gradients
    are summed over rows.
    """
    if x.ndim == 1:
        return p.weight.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ p.weight, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0.0)


def mean_pool(xs) -> np.ndarray:
    """Componentwise mean over a list of equal-length vectors (or matrix rows)."""
    if len(xs) == 0:
        raise EmptyGraphError("cannot pool an empty set of nodes")
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("mean_pool needs vectors of equal length")
    return arr.mean(axis=0)


def mean_pool_backward(n: int, grad_out: np.ndarray) -> np.ndarray:
    return np.broadcast_to(grad_out / n, (n, grad_out.shape[0])).copy()


def finite_difference_gradcheck(
    loss_fn: Callable[[dict[str, LinearParams]], float],
    params: dict[str, LinearParams],
    analytic: dict[str, LinearParams],
    eps: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn`` is evaluated on ``params`` after each entry is perturbed in
    place (and restored). Returns the maximum over all scalar entries of
    ``|a - n| / max(|a|, |n|, floor)``. The floor keeps entries whose true
    gradient is near zero from being judged on finite-difference truncation
    and round-off noise alone.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = loss_fn(params)
    if not np.isfinite(base):
        raise NumericError(f"loss is not finite: {base}")
    worst = 0.0
    for name, p in params.items():
        g = analytic[name]
        for arr, garr in ((p.weight, g.weight), (p.bias, g.bias)):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up = loss_fn(params)
                arr[idx] = orig - eps
                down = loss_fn(params)
                arr[idx] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"loss is not finite near {name}{idx}")
                numeric = (up - down) / (2 * eps)
                a = garr[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return float(worst)
