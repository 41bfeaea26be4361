import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vinseg.head import (
    HeadParams,
    QueryBatch,
    has_kink,
    head_forward,
    head_init,
    head_loss_and_grad,
    query_semantics,
    softmax,
)
from vinseg.losses import SemanticLossConfig
from vinseg.trainer import grad_check
from vinseg.types import PointCloud
from vinseg.voxel import FeatureMap, GridSpec, featurize, voxel_centers


def test_init_determinism_and_shapes():
    a, b, c = head_init(1, 10, 6), head_init(1, 10, 6), head_init(2, 10, 6)
    assert a.layer_sizes == [13, 256, 128, 64, 32, 6]
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert all(not bb.any() for bb in a.biases)
    lim = math.sqrt(6 / (13 + 256))
    assert np.abs(a.weights[0]).max() <= lim
    with pytest.raises(ValueError):
        head_init(0, 0, 3)


def test_param_shape_checks():
    with pytest.raises(ValueError):
        HeadParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    p = head_init(0, 2, 3, (4,))
    assert np.array_equal(p.unflat(p.flat()).flat(), p.flat())
    with pytest.raises(ValueError):
        p.unflat(np.zeros(3))


def test_zero_net_gives_zero_logits():
    p = head_init(0, 4, 3, (5, 5)).zeros_like()
    assert not head_forward(p, np.ones((7, 7))).any()


def test_hand_computed_toy_net():
    # 1 hidden unit: h = relu(x . [1, -1, 2] + 0.5); logits = [h, -h + 1]
    p = HeadParams([np.array([[1.0], [-1.0], [2.0]]), np.array([[1.0, -1.0]])], [np.array([0.5]), np.array([0.0, 1.0])])
    X = np.array([[1.0, 2.0, 0.25], [0.0, 3.0, 0.0]])
    # row 0: 1 - 2 + 0.5 + 0.5 = 0; row 1: -3 + 0.5 -> relu 0
    np.testing.assert_array_equal(head_forward(p, X), [[0.0, 1.0], [0.0, 1.0]])
    X = np.array([[2.0, 0.0, 1.0]])  # 2 + 2 + 0.5 = 4.5
    np.testing.assert_array_equal(head_forward(p, X), [[4.5, -3.5]])


def test_batch_independence_bitwise():
    p = head_init(5, 10, 6)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 13))
    both = head_forward(p, X)
    assert np.array_equal(head_forward(p, X[:1])[0], both[0])
    assert np.array_equal(head_forward(p, X[1:])[0], both[1])


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0, 0.0, 0.0]), [0.25] * 4)
    np.testing.assert_array_equal(softmax([1000.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(softmax([math.log(1), math.log(3)]), [0.25, 0.75], atol=1e-15)


@given(st.lists(st.floats(-500, 500), min_size=1, max_size=8), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(logits, c):
    a = softmax(np.array(logits))
    b = softmax(np.array(logits) + c)
    assert abs(a.sum() - 1) <= 1e-12
    assert np.max(np.abs(a - b)) <= 1e-12


G = GridSpec((0, 0, 0), (0.5, 0.5, 2.0), (1, 4, 4))


def _fmap(seed=0):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(0, 2, size=(60, 3)) * [1, 1, 1], rng.uniform(size=60))
    return featurize(G, cloud)


def test_query_at_voxel_center_has_zero_offset():
    fmap = _fmap()
    centers = voxel_centers(G, np.array([[0, j, k] for j in range(4) for k in range(4)]))
    rel, _ = fmap.lookup(centers)
    assert not rel.any()


def test_far_query_matches_clamped_voxel():
    fmap = _fmap()
    p = head_init(0, 10, 3, (8, 8))
    far = np.array([[50.0, -30.0, 7.0]])
    probs, labels, scores = query_semantics(p, fmap, far)
    k, j = 3, 0
    x = np.concatenate([far[0] - voxel_centers(G, [[0, j, k]])[0], fmap.data[:, 0, j, k]])
    np.testing.assert_array_equal(probs[0], softmax(head_forward(p, x[None]))[0])
    assert labels[0] == np.argmax(probs[0]) and scores[0] == probs[0].max()


def test_identical_inputs_give_identical_outputs():
    data = np.zeros((10, 1, 2, 2), dtype=np.float32)
    data[:, 0, 0, 0] = data[:, 0, 1, 1] = np.arange(10)
    fmap = FeatureMap(GridSpec((0, 0, 0), (1, 1, 1), (1, 2, 2)), data)
    p = head_init(3, 10, 4, (6,))
    probs, _, _ = query_semantics(p, fmap, [[0.3, 0.2, 0.9], [1.3, 1.2, 0.9]])
    assert np.array_equal(probs[0], probs[1])


def test_argmax_ties_pick_smallest_class():
    p = head_init(0, 10, 4, (3,)).zeros_like()
    _, labels, scores = query_semantics(p, _fmap(), [[0.1, 0.1, 0.1]])
    assert labels[0] == 0 and scores[0] == 0.25


def test_channel_mismatch():
    with pytest.raises(ValueError):
        query_semantics(head_init(0, 9, 3, (4,)), _fmap(), [[0, 0, 0]])


def test_all_masked_batch():
    p = head_init(0, 2, 3, (4,))
    b = QueryBatch(np.ones((3, 3)), np.ones((3, 2)), [0, 1, 2], [False] * 3)
    loss, g = head_loss_and_grad(p, b, SemanticLossConfig.uniform(3))
    assert loss == 0.0 and not g.flat().any()
    assert grad_check(p, b) == 0.0


def test_masked_queries_have_no_effect():
    rng = np.random.default_rng(1)
    p = head_init(0, 2, 3, (5,))
    X = rng.normal(size=(6, 5))
    y = np.array([0, 1, 2, 0, 1, 2])
    m = np.array([1, 0, 1, 1, 0, 1], bool)
    cfg = SemanticLossConfig((1.0, 2.0, 0.5), 1.0)
    l1, g1 = head_loss_and_grad(p, QueryBatch.from_inputs(X, y, m), cfg)
    X2 = X.copy()
    X2[~m] = 99.0
    y2 = y.copy()
    y2[~m] = 0
    l2, g2 = head_loss_and_grad(p, QueryBatch.from_inputs(X2, y2, m), cfg)
    l3, g3 = head_loss_and_grad(p, QueryBatch.from_inputs(X[m], y[m]), cfg)
    assert l1 == l2 == l3
    assert np.array_equal(g1.flat(), g2.flat()) and np.array_equal(g1.flat(), g3.flat())


def test_duplicating_queries_doubles_ce_sum():
    from vinseg.losses import weighted_cross_entropy

    rng = np.random.default_rng(2)
    probs = softmax(rng.normal(size=(5, 4)))
    y = rng.integers(0, 4, size=5)
    w = np.array([1.0, 0.5, 2.0, 1.5])
    once, _ = weighted_cross_entropy(probs, y, w, reduction="sum")
    twice, _ = weighted_cross_entropy(np.vstack([probs, probs]), np.concatenate([y, y]), w, reduction="sum")
    assert twice == 2 * once


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_gradient_matches_finite_differences(lam):
    rng = np.random.default_rng(int(lam * 10) + 3)
    for _ in range(10):
        p = head_init(int(rng.integers(1 << 30)), 3, 3, (5, 4))
        for b in p.biases:
            b += rng.normal(0, 0.1, size=b.shape)
        batch = QueryBatch(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.integers(0, 3, 6))
        if not has_kink(p, batch, 1e-3, lovasz=lam > 0):
            break
    cfg = SemanticLossConfig((0.7, 1.3, 1.0), lam)
    assert grad_check(p, batch, 1e-5, cfg) < 1e-4
