import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boardembed.errors import ConfigError, DegenerateBatchError, LabelError, ShapeError
from boardembed.linalg import LinearParams, finite_difference_gradcheck
from boardembed.similarity import (
    SimilarityParams,
    TripletBatch,
    bce_pair_loss,
    classifier_head_loss,
    classify_by_templates,
    init_similarity_params,
    pairwise_scores,
    rank_categories,
    similarity_score,
    triplet_loss,
)

from oracles import brute_bce, brute_ce, brute_triplet


def _identity(dim):
    return SimilarityParams(LinearParams(np.eye(dim), np.zeros(dim)))


def _random_case(rng, max_b=16, dim=6, n_cls=None):
    b = int(rng.integers(2, max_b + 1))
    n_cls = n_cls or int(rng.integers(2, min(b, 5) + 1))
    cats = np.concatenate([np.arange(n_cls), rng.integers(0, n_cls, b - n_cls)])
    rng.shuffle(cats)
    feats = rng.uniform(-1, 1, size=(b, dim))
    p = init_similarity_params(dim, rng)
    p.phi_d.bias[:] = rng.normal(scale=0.1, size=p.phi_d.out_dim)
    return feats, cats, p


def test_dot_similarity_examples():
    p = _identity(2)
    assert similarity_score([1, 0], [1, 0], p) == 1.0
    assert similarity_score([1, 0], [0, 1], p) == 0.0
    with pytest.raises(ShapeError):
        similarity_score([1, 0], [1, 0, 0], _identity(2))


def test_cosine_similarity_is_scale_free():
    p = _identity(3)
    a, b = np.array([1.0, 2.0, 0.5]), np.array([0.3, -1.0, 2.0])
    assert np.isclose(similarity_score(a, b, p, "cosine"), similarity_score(5 * a, b, p, "cosine"))
    with pytest.raises(ConfigError):
        similarity_score(a, b, p, "euclid")


def test_triplet_zero_when_margin_satisfied():
    feats = np.array([[3.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
    rep = triplet_loss(TripletBatch(feats, ["a", "a", "b"]), _identity(2))
    assert rep.loss == 0.0 and rep.active_terms == 0
    assert np.all(rep.grads["phi_d"][0] == 0) and np.all(rep.grad_features == 0)


def test_triplet_hand_case():
    # S = [[1, 1, 0], [1, 1, 0], [0, 0, 1]]: triples (0,1,2), (1,0,2) give 0 - 1 + 2
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    rep = triplet_loss(TripletBatch(feats, ["a", "a", "b"], margin=2.0), _identity(2))
    assert rep.loss == 1.0 and rep.active_terms == 2 and rep.total_terms == 2


def test_single_category_batch_rejected():
    batch = TripletBatch(np.ones((3, 2)), ["a", "a", "a"])
    with pytest.raises(DegenerateBatchError):
        triplet_loss(batch, _identity(2))
    with pytest.raises(DegenerateBatchError):
        bce_pair_loss(batch, _identity(2))


def test_batch_validation():
    with pytest.raises(ShapeError):
        TripletBatch(np.ones((3, 2)), ["a", "b"])
    with pytest.raises(ValueError):
        TripletBatch(np.ones((2, 2)), ["a", "b"], margin=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_losses_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    feats, cats, p = _random_case(rng)
    w, b = p.phi_d.weight.tolist(), p.phi_d.bias.tolist()
    margin = float(rng.uniform(0.1, 2.0))
    rep = triplet_loss(TripletBatch(feats, cats, margin=margin), p)
    loss, m = brute_triplet(feats, cats.tolist(), w, b, margin)
    assert abs(rep.loss - loss) <= 1e-10 and rep.active_terms == m
    assert abs(bce_pair_loss(TripletBatch(feats, cats), p).loss
               - brute_bce(feats, cats.tolist(), w, b)) <= 1e-10
    head = LinearParams(rng.normal(size=(5, 6)), rng.normal(size=5))
    assert abs(classifier_head_loss(TripletBatch(feats, cats), head).loss
               - brute_ce(feats, cats.tolist(), head.weight.tolist(), head.bias.tolist())) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 2.0), st.floats(0.01, 1.0))
def test_triplet_active_terms_grow_with_margin(seed, margin, extra):
    feats, cats, p = _random_case(np.random.default_rng(seed))
    lo = triplet_loss(TripletBatch(feats, cats, margin=margin), p)
    hi = triplet_loss(TripletBatch(feats, cats, margin=margin + extra), p)
    assert hi.active_terms >= lo.active_terms
    assert hi.loss * hi.active_terms >= lo.loss * lo.active_terms


@pytest.mark.parametrize("loss_fn", [triplet_loss, bce_pair_loss])
@pytest.mark.parametrize("similarity", ["dot", "cosine"])
def test_pair_loss_gradients(loss_fn, similarity):
    rng = np.random.default_rng(4)
    feats, cats, p = _random_case(rng, max_b=8)
    batch = TripletBatch(feats, cats, margin=0.7)
    rep = loss_fn(batch, p, similarity)

    def f(params):
        return loss_fn(batch, SimilarityParams(params["phi_d"]), similarity).loss

    analytic = {"phi_d": LinearParams(*rep.grads["phi_d"])}
    assert finite_difference_gradcheck(f, {"phi_d": p.phi_d}, analytic, 1e-6) < 1e-4


def test_classifier_head_gradient_and_labels():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(6, 4))
    head = LinearParams(rng.normal(size=(3, 4)), rng.normal(size=3))
    batch = TripletBatch(feats, [0, 1, 2, 0, 1, 2])
    rep = classifier_head_loss(batch, head)
    analytic = {"head": LinearParams(*rep.grads["head"])}
    err = finite_difference_gradcheck(lambda ps: classifier_head_loss(batch, ps["head"]).loss,
                                      {"head": head}, analytic, 1e-6)
    assert err < 1e-5
    named = TripletBatch(feats, list("abcabc"))
    assert classifier_head_loss(named, head, {"a": 0, "b": 1, "c": 2}).loss == rep.loss
    with pytest.raises(LabelError):
        classifier_head_loss(TripletBatch(feats, [0, 1, 2, 0, 1, 3]), head)
    with pytest.raises(LabelError):
        classifier_head_loss(named, head, {"a": 0, "b": 1})


def test_pairwise_scores_symmetric():
    feats, _, p = _random_case(np.random.default_rng(2))
    s = pairwise_scores(feats, p)
    assert np.allclose(s, s.T)


def test_classification_examples():
    p = _identity(2)
    templates = [("r", np.array([1.0, 0.0])), ("c", np.array([0.0, 1.0]))]
    ranked = classify_by_templates([[2.0, 0.1]], templates, p, categories=["r", "c"])
    assert ranked[0][0][0] == "r"
    # exact tie resolves to the lower category index
    ranked = classify_by_templates([[1.0, 1.0]], templates, p, categories=["r", "c"])
    assert [c for c, _ in ranked[0]] == ["r", "c"]
    with pytest.raises(ConfigError):
        classify_by_templates([[1.0, 1.0]], [], p)


def test_category_score_is_best_template():
    scores = np.array([[0.1, 0.9, 0.5]])
    ranked = rank_categories(scores, ["a", "b", "a"], ["a", "b"])
    assert ranked[0] == [("b", 0.9), ("a", 0.5)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_argmax_invariant_to_monotone_score_map(seed, scale, shift):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(4, 6))
    cats = ["a", "b", "c", "a", "b", "c"]
    top = [r[0][0] for r in rank_categories(scores, cats, ["a", "b", "c"])]
    mapped = [r[0][0] for r in rank_categories(scale * scores + shift, cats, ["a", "b", "c"])]
    assert top == mapped
