import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boardembed.blocks import (
    BoardGraph,
    GNParams,
    NodeMeta,
    block_backward,
    block_forward,
    compute_edge_weights,
    gn_block_apply,
    identity_block_apply,
    init_block_params,
    nlnn_block_apply,
    normalize_edge_scores,
)
from boardembed.errors import EmptyGraphError, ShapeError
from boardembed.linalg import LinearParams, finite_difference_gradcheck


def _params(dim, seed, kind="gn"):
    return init_block_params(dim, np.random.default_rng(seed), kind)


def _zero_phi_n(p):
    p.phi_n = LinearParams(np.zeros_like(p.phi_n.weight), np.zeros_like(p.phi_n.bias))
    return p


def test_single_node_self_edge():
    p = _params(4, 0)
    x = np.array([[1.0, 0.5, 0.2, 0.8]])
    ew = compute_edge_weights(x, p)
    expected = 1.0 if ew.w_hat[0, 0] > 0 else 0.0
    assert ew.w[0, 0] == expected


def test_edge_normalization_examples():
    w = normalize_edge_scores(np.array([[2.0, -1.0, 1.0], [-1.0, -2.0, 0.0]]))
    assert np.allclose(w[0], [0.8, 0.0, 0.2])
    assert np.array_equal(w[1], np.zeros(3))


def test_residual_identity_with_zeroed_node_embedding():
    p = _zero_phi_n(_params(6, 1))
    x = np.abs(np.random.default_rng(2).normal(size=(5, 6)))
    y, _ = block_forward(x, p)
    assert np.array_equal(y, x)


def test_graph_validation():
    with pytest.raises(EmptyGraphError):
        BoardGraph(np.zeros((0, 4)))
    with pytest.raises(ShapeError):
        BoardGraph(np.zeros(4))
    meta = [NodeMeta("b1", "a"), NodeMeta("b2", "b")]
    with pytest.raises(ValueError):
        BoardGraph(np.zeros((2, 4)), meta)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        block_forward(np.ones((3, 8)), _params(6, 0))


def test_block_kinds_and_wrappers():
    gn, nl = _params(8, 0, "gn"), _params(8, 0, "nlnn")
    assert gn.phi_n.in_dim == 8 + 4 + 4 and nl.phi_n.in_dim == 8 + 4
    g = BoardGraph(np.ones((3, 8)), [NodeMeta("b", str(i)) for i in range(3)])
    assert gn_block_apply(g, gn).node_features.shape == (3, 8)
    assert nlnn_block_apply(g, nl).node_features.shape == (3, 8)
    with pytest.raises(ShapeError):
        gn_block_apply(g, nl)
    with pytest.raises(ShapeError):
        nlnn_block_apply(g, gn)
    assert np.array_equal(identity_block_apply(g).node_features, g.node_features)
    with pytest.raises(ValueError):
        init_block_params(8, np.random.default_rng(0), "transformer")


def test_params_round_trip_through_dict():
    p = _params(6, 3)
    q = GNParams.from_dict(p.as_dict())
    assert set(q.as_dict()) == {"phi_e", "psi_1", "psi_2", "phi_n", "phi_g"}


node_counts = st.integers(1, 7)
seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=60, deadline=None)
@given(node_counts, seeds, st.sampled_from(["gn", "nlnn"]))
def test_permutation_equivariance_is_exact(n, seed, kind):
    rng = np.random.default_rng(seed)
    p = _params(6, seed, kind)
    x = rng.normal(size=(n, 6))
    perm = rng.permutation(n)
    y, _ = block_forward(x, p)
    yp, _ = block_forward(x[perm], p)
    assert np.array_equal(yp, y[perm])


@settings(max_examples=60, deadline=None)
@given(node_counts, seeds)
def test_edge_rows_are_stochastic_or_zero(n, seed):
    rng = np.random.default_rng(seed)
    w = compute_edge_weights(rng.normal(size=(n, 6)), _params(6, seed)).w
    assert np.all(w >= 0)
    sums = w.sum(axis=1)
    assert np.all((np.abs(sums - 1) <= 1e-9) | (sums == 0))


@settings(max_examples=60, deadline=None)
@given(node_counts, seeds)
def test_duplicate_nodes_get_identical_outputs(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 6))
    x = np.vstack([x, x[:1]])
    y, _ = block_forward(x, _params(6, seed))
    assert np.array_equal(y[0], y[-1])


def test_refined_features_are_nonnegative():
    x = np.random.default_rng(0).normal(size=(5, 8))
    y, _ = block_forward(x, _params(8, 0))
    assert np.all(y >= 0)


@pytest.mark.parametrize("kind", ["gn", "nlnn"])
@pytest.mark.parametrize("seed", [0, 1])
def test_block_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    p = _params(8, seed, kind)
    # shift the biases so no pre-activation sits near a ReLU kink
    x = rng.uniform(0.2, 1.0, size=(5, 8))
    upstream = rng.normal(size=(5, 8))

    def loss(params):
        y, _ = block_forward(x, GNParams.from_dict(params))
        return float((y * upstream).sum())

    y, cache = block_forward(x, p)
    grad_x, grads = block_backward(cache, p, upstream)
    analytic = {k: LinearParams(*grads[k]) for k in p.as_dict()}
    assert finite_difference_gradcheck(loss, p.as_dict(), analytic, 1e-5) < 1e-4

    num = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        num[idx] = ((block_forward(xp, p)[0] * upstream).sum()
                    - (block_forward(xm, p)[0] * upstream).sum()) / 2e-6
    assert np.allclose(grad_x, num, rtol=1e-4, atol=1e-6)
