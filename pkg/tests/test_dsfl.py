import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import best_subset, hinge_bruteforce, mask_cost, random_cost_instance

from ddsfl import dsfl
from ddsfl.dsfl import GreedyTrace, LayerHyperparams, TrainBatch, TripletCache
from ddsfl.mathkit import LbfgsParams, check_gradient


def test_transform_examples():
    assert np.array_equal(dsfl.transform(np.eye(2), np.array([-1.0, 2.0])), [1.0, 2.0])
    assert np.array_equal(dsfl.transform(np.eye(2), np.zeros(2)), [0.0, 0.0])
    w = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
    assert np.allclose(dsfl.transform(w, np.array([1.0, 0.0])), [1 / np.sqrt(2)] * 2)
    with pytest.raises(ValueError):
        dsfl.transform(np.eye(2), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_nonnegative_and_sparsity_sum(seed):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    f = dsfl.transform(w, x)
    assert np.all(f >= 0)
    hp = LayerHyperparams(xi=0.0, lambda1=1.0)
    base = dsfl.cost_unsupervised(w, x, None, LayerHyperparams(xi=0.0, lambda1=0.0))[0]
    assert dsfl.cost_unsupervised(w, x, None, hp)[0] == pytest.approx(base + f.sum(), rel=1e-12)


def test_unsupervised_orthonormal_and_switch_off():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    x = np.random.default_rng(1).normal(size=(10, 6))
    hp0 = LayerHyperparams(xi=0.0, lambda1=0.0)
    assert dsfl.cost_unsupervised(q, x, None, hp0)[0] == pytest.approx(0.0, abs=1e-20 + 1e-10)
    w = np.random.default_rng(2).normal(size=(3, 6))
    r = x - x @ w.T @ w
    assert dsfl.cost_unsupervised(w, x, None, hp0)[0] == pytest.approx((r * r).sum(), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_reconstruction_homogeneous(seed, s):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    hp0 = LayerHyperparams(xi=0.0, lambda1=0.0)
    a = dsfl.cost_unsupervised(w, x, None, hp0)[0]
    b = dsfl.cost_unsupervised(w, s * x, None, hp0)[0]
    assert b == pytest.approx(s * s * a, rel=1e-9)


def test_shareable_edge_cases():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    x = np.random.default_rng(1).normal(size=(8, 5))
    assert dsfl.cost_shareable(q, np.ones(5), x)[0] == pytest.approx(0.0, abs=1e-10)
    assert dsfl.cost_shareable(q, np.zeros(5), x)[0] == pytest.approx((x * x).sum())
    assert dsfl.cost_shareable(q, np.zeros(5), x, lambda2=3.0)[0] == pytest.approx((x * x).sum())


def test_discriminative_equal_distances_gives_delta():
    # anchor 0 (feature 0): same-class neighbour at 1, other-class neighbour at |-1| = 1
    x = np.array([[0.0], [1.0], [-1.0], [3.0]])
    y = np.array([0, 0, 1, 1])
    cache = TripletCache(np.array([[1], [0], [3], [2]]), np.array([[2], [3], [0], [0]]))
    hp = LayerHyperparams(delta=1.0)
    v, _ = dsfl.cost_discriminative(np.eye(1), np.ones(1), x, y, cache, 0, hp)
    # anchor 1: dis_pos 1, dis_neg 4, so its hinge is inactive
    assert v == pytest.approx(1.0)


def test_discriminative_inactive_hinge():
    x = np.array([[0.0], [0.1], [5.0]])
    y = np.array([0, 0, 1])
    cache = TripletCache(np.array([[1], [0], [0]]), np.array([[2], [2], [0]]))
    v, g = dsfl.cost_discriminative(np.eye(1), np.ones(1), x, y, cache, 0, LayerHyperparams())
    assert v == 0.0 and np.all(g == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_discriminative_matches_loops(seed):
    w, alphas, batch, cache, hp = random_cost_instance(np.random.default_rng(seed))
    for c in range(batch.num_classes):
        v, _ = dsfl.cost_discriminative(w, alphas[c], batch.x_ex, batch.y_ex, cache, c, hp)
        ref = hinge_bruteforce(w, alphas[c], batch.x_ex, batch.y_ex, cache.pos, cache.neg, c, hp.delta)
        assert v == pytest.approx(ref, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_gradients(seed):
    w, alphas, batch, cache, hp = random_cost_instance(np.random.default_rng(seed))
    shape = w.shape

    def wrap(fn):
        return lambda t: (lambda v, g: (v, g.ravel()))(*fn(t.reshape(shape)))

    fns = [
        lambda m: dsfl.cost_unsupervised(m, batch.x_all, batch.omega, hp),
        lambda m: dsfl.cost_shareable(m, alphas[1], batch.x_ex[batch.class_rows(1)]),
        lambda m: dsfl.cost_discriminative(m, alphas[2], batch.x_ex, batch.y_ex, cache, 2, hp),
        lambda m: dsfl.w_objective(m, alphas, batch, cache, hp),
    ]
    for fn in fns:
        assert check_gradient(wrap(fn), w.ravel(), eps=1e-6) <= 1e-4


def test_refresh_triplets_hand_case():
    x = np.array([[0.0], [1.0], [3.0], [10.0], [12.0], [4.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    cache = dsfl.refresh_triplets(np.eye(1), np.ones((2, 1)), x, y, 1, 2)
    assert cache.pos[:, 0].tolist() == [1, 0, 1, 4, 3, 3]
    assert cache.neg[:, 0].tolist() == [5, 5, 5, 2, 2, 2]
    full = dsfl.refresh_triplets(np.eye(1), np.ones((2, 1)), x, y, 2, 2)
    for j in range(6):
        assert set(full.pos[j]) == set(np.flatnonzero(y == y[j])) - {j}


def test_refresh_triplets_per_class_masks():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3))
    y = np.arange(12) % 2
    w = np.vstack([np.eye(3), np.eye(3)])
    alphas = np.array([[1, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 1]], dtype=float)
    a = dsfl.refresh_triplets(w, alphas, x, y, 2, 2)
    b = dsfl.refresh_triplets(w, np.ones((2, 6)), x, y, 2, 2)
    assert np.array_equal(a.pos, b.pos) and np.array_equal(a.neg, b.neg)


def test_refresh_triplets_clamps_k():
    x = np.random.default_rng(0).normal(size=(6, 2))
    y = np.array([0, 0, 1, 1, 1, 1])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        cache = dsfl.refresh_triplets(np.eye(2), np.ones((2, 2)), x, y, 5, 2)
    assert cache.k == 1 and rec


def test_greedy_exact_span():
    rng = np.random.default_rng(0)
    w = np.eye(4)
    x = np.zeros((10, 4))
    x[:, [0, 2]] = rng.normal(size=(10, 2))
    batch = TrainBatch(x, x, np.zeros(10, dtype=int), 1)
    hp = LayerHyperparams(lambda2=1e-3, eta=0.0, max_active=4)
    alpha = dsfl.greedy_select_alpha(w, batch, None, 0, hp)
    assert set(np.flatnonzero(alpha)) == {0, 2}
    assert set(np.flatnonzero(alpha)) == best_subset(w, x, 1e-3)[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 8))
def test_greedy_single_step_oracle(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 5))
    y = np.arange(12) % 3
    w = rng.normal(size=(d, 5)) / np.sqrt(5)
    batch = TrainBatch(x, x, y, 3)
    hp = LayerHyperparams(lambda2=0.05, eta=0.3, k=2, max_active=d, greedy_tol=0.0)
    cache = dsfl.refresh_triplets(w, np.ones((3, d)), x, y, 2, 3)
    c = int(rng.integers(3))
    trace = GreedyTrace()
    dsfl.greedy_select_alpha(w, batch, cache, c, hp, trace)
    x_c = x[y == c]

    def dis(a):
        return hinge_bruteforce(w, a, x, y, cache.pos, cache.neg, c, hp.delta)

    alpha = np.zeros(d)
    for chosen in trace.chosen:
        costs = [mask_cost(w, np.where(np.arange(d) == e, 1.0, alpha), x_c, hp.lambda2, hp.eta, dis)
                 if alpha[e] == 0 else np.inf for e in range(d)]
        assert chosen == int(np.argmin(costs))
        alpha[chosen] = 1.0
    assert all(b <= a + 1e-12 for a, b in zip(trace.sha, trace.sha[1:]))


def test_greedy_huge_penalty_single_filter():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(9, 4))
    w = rng.normal(size=(6, 4))
    batch = TrainBatch(x, x, np.zeros(9, dtype=int), 1)
    alpha = dsfl.greedy_select_alpha(w, batch, None, 0, LayerHyperparams(lambda2=1e9, eta=0.0, max_active=6))
    assert np.count_nonzero(alpha) == 1
    single = [mask_cost(w, np.eye(6)[e], x, 0.0, 0.0) for e in range(6)]
    assert np.flatnonzero(alpha)[0] == int(np.argmin(single))


def test_step_w_autoencoder_subspace():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(8, 2)))[0].T
    x = rng.normal(size=(40, 2)) @ basis
    batch = TrainBatch(x, x, np.zeros(40, dtype=int), 1)
    hp = LayerHyperparams(xi=0.0, lambda1=0.0, gamma=0.0, eta=0.0)
    w0 = dsfl.init_filters(4, 8, 1)
    fb, _, _ = dsfl.step_W(w0, np.zeros((1, 4)), batch, None, hp, LbfgsParams(max_iters=500, grad_tol=1e-10))
    lr = dsfl.cost_unsupervised(fb.w, x, None, hp)[0]
    assert lr <= 1e-3 * (x * x).sum()


def test_step_w_zero_budget_and_descent(small_batch):
    hp = LayerHyperparams(xi=0.0, eta=0.5, k=3)
    w0 = dsfl.init_filters(10, small_batch.x_all.shape[1], 0)
    alphas = np.ones((3, 10))
    cache = dsfl.refresh_triplets(w0, alphas, small_batch.x_ex, small_batch.y_ex, 3, 3)
    fb, _, info = dsfl.step_W(w0, alphas, small_batch, cache, hp, LbfgsParams(max_iters=0))
    assert np.array_equal(fb.w, w0) and info.iters == 0
    before = dsfl.w_objective(w0, alphas, small_batch, cache, hp)[0]
    fb, _, _ = dsfl.step_W(w0, alphas, small_batch, cache, hp, LbfgsParams(max_iters=30), refresh=False)
    assert dsfl.w_objective(fb.w, alphas, small_batch, cache, hp)[0] <= before


def test_train_layer_monotone_and_deterministic(small_batch, mono_hp):
    a = dsfl.train_layer(small_batch, mono_hp, 24, seed=0)
    assert all(b <= h + 1e-8 for h, b in zip(a.history, a.history[1:]))
    b = dsfl.train_layer(small_batch, mono_hp, 24, seed=0)
    assert np.array_equal(a.filter_bank.w, b.filter_bank.w)
    assert np.array_equal(a.masks, b.masks)
    assert a.masks.shape == (3, 24)


def test_train_layer_label_blind(small_batch):
    hp = LayerHyperparams(xi=0.0, gamma=0.0, eta=0.0, warm_iters=20, w_iters=20, outer_rounds=2)
    a = dsfl.train_layer(small_batch, hp, 12, seed=4)
    perm = np.array([2, 0, 1])[small_batch.y_ex]
    other = TrainBatch(small_batch.x_all, small_batch.x_ex, perm, 3)
    b = dsfl.train_layer(other, hp, 12, seed=4)
    assert np.array_equal(a.filter_bank.w, b.filter_bank.w)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        LayerHyperparams(eta=-1.0)
    with pytest.raises(ValueError):
        LayerHyperparams(delta=0.0)
