"""Trial-step influence vectors, min-norm fusion, validation sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spcl import autodiff as ad
from spcl.data import make_batch
from spcl.errors import ConfigError
from spcl.influence import (
    GAMMA_DEGENERATE_EPS,
    ValidationBatches,
    _gamma_with_flag,
    compute_influence,
    draw_pool,
    fuse,
    influence_vectors,
    pareto_gamma,
    pseudo_update,
    pseudo_update_perturbed,
    sample_validation,
)
from spcl.models import MLPClassifier, ModelSpec


def mlp(seed=0, dims=(4, 6, 3), activation="tanh"):
    model = MLPClassifier(ModelSpec(dims[0], dims[1:-1], dims[-1], activation))
    return model, model.init_params(seed)


def rand_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    return make_batch(
        rng.normal(size=(n, model.spec.input_dim)),
        rng.integers(0, model.spec.num_classes_total, size=n),
    )


# ---------------------------------------------------------------------------
# pseudo update


def test_zero_lr_is_identity():
    model, params = mlp()
    batch = rand_batch(model, 5, 1)
    out = pseudo_update(model, params, batch, lr=0.0)
    assert np.array_equal(out.flat, params.flat)
    assert out is not params


def test_quadratic_analytic_step():
    # losses_i = 0.5 (theta - c_i)^2 for scalar theta; mean gradient theta - mean(c)
    cs = np.asarray([1.0, 3.0])

    class Quad:
        num_params = 1
        segments = (("theta", (1,), 0),)

        class spec:
            input_dim = 1
            num_classes_total = 2

        def loss_graph(self, leaves, x, y):
            theta = leaves[0]
            c = ad.constant(cs)
            d = ad.sub(ad.mul(ad.constant(np.ones(2)), ad.tsum(theta)), c)
            return ad.mul(ad.constant(0.5), ad.mul(d, d))

    model = Quad()
    params = ad.ParamVector(model.segments, np.asarray([5.0]))
    batch = make_batch(np.zeros((2, 1)), np.zeros(2, dtype=int))
    out = pseudo_update(model, params, batch, lr=0.1)
    assert out.flat[0] == pytest.approx(5.0 - 0.1 * (5.0 - 2.0), abs=1e-15)


def test_two_iterations_equals_two_single_steps():
    model, params = mlp(2)
    batch = rand_batch(model, 6, 3)
    once = pseudo_update(model, pseudo_update(model, params, batch, 0.05), batch, 0.05)
    twice = pseudo_update(model, params, batch, 0.05, iterations=2)
    assert np.array_equal(once.flat, twice.flat)


def test_original_params_untouched():
    model, params = mlp(4)
    before = params.flat.copy()
    pseudo_update(model, params, rand_batch(model, 4, 5), lr=0.5)
    assert np.array_equal(params.flat, before)


# ---------------------------------------------------------------------------
# influence vectors


def test_influence_zero_when_validation_stationary():
    # validation gradient zero => influence identically zero; engineered by
    # a quadratic validation loss minimized at the post-step parameters
    model, params = mlp(6)
    batch = rand_batch(model, 4, 7)
    v = rand_batch(model, 3, 8)
    i_s, i_p = influence_vectors(model, params, batch, v, v, lr=0.0)
    # lr=0 keeps params fixed and scales the closed form to zero
    assert np.all(i_s == 0.0) and np.all(i_p == 0.0)


def test_linear_scalar_model_analytic_case():
    # losses_i = x_i * theta: per-example grads are x_i, validation grad is x_v
    class Linear:
        num_params = 1
        segments = (("theta", (1,), 0),)

        class spec:
            input_dim = 1
            num_classes_total = 2

        def loss_graph(self, leaves, x, y):
            theta = leaves[0]
            return ad.mul(ad.constant(np.asarray(x)[:, 0]), ad.tsum(theta))

    model = Linear()
    params = ad.ParamVector(model.segments, np.asarray([2.0]))
    batch = make_batch(np.asarray([[1.0], [2.0]]), np.zeros(2, dtype=int))
    v = make_batch(np.asarray([[3.0]]), np.zeros(1, dtype=int))
    i_s, i_p = influence_vectors(model, params, batch, v, v, lr=0.1)
    assert np.allclose(i_s, [-0.3, -0.6], atol=1e-15)
    assert np.allclose(i_p, i_s, atol=0)


def test_influence_matches_finite_differences_small_mlp():
    model, params = mlp(9, dims=(5, 10, 4))
    batch = rand_batch(model, 8, 10)
    v_old = rand_batch(model, 4, 11)
    v_new = rand_batch(model, 4, 12)
    lr = 0.2
    i_s, i_p = influence_vectors(model, params, batch, v_old, v_new, lr)
    h = 1e-5
    for side, vec in ((v_old, i_s), (v_new, i_p)):
        for j in range(len(batch)):
            eps = np.zeros(len(batch))
            eps[j] = h
            up = pseudo_update_perturbed(model, params, batch, lr, 1, eps)
            dn = pseudo_update_perturbed(model, params, batch, lr, 1, -eps)
            fd = (
                model.per_example_losses_np(up, side.x, side.y).mean()
                - model.per_example_losses_np(dn, side.x, side.y).mean()
            ) / (2 * h)
            assert abs(vec[j] - fd) <= max(1e-10, 1e-5 * max(abs(vec[j]), abs(fd)))


def test_closed_form_agrees_with_unrolled_tape():
    from spcl.influence import _influence_unrolled

    model, params = mlp(13, dims=(4, 7, 3))
    batch = rand_batch(model, 6, 14)
    v_old = rand_batch(model, 3, 15)
    v_new = rand_batch(model, 3, 16)
    i_s, i_p = influence_vectors(model, params, batch, v_old, v_new, 0.15)
    u_s, u_p = _influence_unrolled(model, params, batch, v_old, v_new, 0.15, 1)
    assert np.abs(i_s - u_s).max() <= 1e-10
    assert np.abs(i_p - u_p).max() <= 1e-10


def test_multi_iteration_influence_matches_finite_differences():
    model, params = mlp(17, dims=(3, 5, 3))
    batch = rand_batch(model, 5, 18)
    v_old = rand_batch(model, 3, 19)
    v_new = rand_batch(model, 3, 20)
    lr = 0.1
    i_s, _ = influence_vectors(model, params, batch, v_old, v_new, lr, iterations=3)
    h = 1e-5
    for j in range(len(batch)):
        eps = np.zeros(len(batch))
        eps[j] = h
        up = pseudo_update_perturbed(model, params, batch, lr, 3, eps)
        dn = pseudo_update_perturbed(model, params, batch, lr, 3, -eps)
        fd = (
            model.per_example_losses_np(up, v_old.x, v_old.y).mean()
            - model.per_example_losses_np(dn, v_old.x, v_old.y).mean()
        ) / (2 * h)
        assert abs(i_s[j] - fd) <= max(1e-10, 1e-5 * max(abs(i_s[j]), abs(fd)))


def test_lr_scaling_is_exactly_linear_given_fixed_trial_point():
    model, params = mlp(21)
    batch = rand_batch(model, 6, 22)
    v = rand_batch(model, 3, 23)
    theta_hat = pseudo_update(model, params, batch, 0.1)
    base, _ = influence_vectors(model, params, batch, v, v, 0.1, pseudo_params=theta_hat)
    scaled, _ = influence_vectors(model, params, batch, v, v, 0.3, pseudo_params=theta_hat)
    assert np.abs(scaled - 3.0 * base).max() <= 1e-15


def test_empty_validation_rejected():
    model, params = mlp(24)
    batch = rand_batch(model, 4, 25)
    with pytest.raises(ConfigError):
        influence_vectors(model, params, batch, None, batch, 0.1)


# ---------------------------------------------------------------------------
# min-norm fusion


def test_gamma_hand_cases():
    assert pareto_gamma(np.asarray([1.0, 0.0]), np.asarray([0.0, 1.0])) == 0.5
    g = np.asarray([0.4, -0.7, 1.1])
    assert pareto_gamma(2 * g, g) == 0.0
    # frozen from a 10001-point grid search over the squared norm
    assert pareto_gamma(np.asarray([3.0, 0.0]), np.asarray([0.0, 1.0])) == pytest.approx(
        0.1, abs=1e-12
    )


def test_gamma_grid_search_oracle():
    gammas = np.linspace(0.0, 1.0, 10001)
    g_old = np.asarray([3.0, 0.0])
    g_new = np.asarray([0.0, 1.0])
    norms = [
        float(np.sum((g * g_old + (1 - g) * g_new) ** 2)) for g in gammas
    ]
    assert gammas[int(np.argmin(norms))] == pytest.approx(0.1, abs=1e-4)


def test_gamma_degenerate_inputs():
    gamma, flag = _gamma_with_flag(np.zeros(3), np.zeros(3))
    assert gamma == 0.5 and flag
    g = np.asarray([1.0, 2.0])
    gamma, flag = _gamma_with_flag(g, g.copy())
    assert gamma == 0.5 and flag


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
def test_gamma_minimizes_over_grid(seed, n):
    rng = np.random.default_rng(seed)
    i_s = rng.normal(scale=rng.uniform(0.1, 10), size=n)
    i_p = rng.normal(scale=rng.uniform(0.1, 10), size=n)
    gamma = pareto_gamma(i_s, i_p)
    assert 0.0 <= gamma <= 1.0
    best = np.sum((gamma * i_s + (1 - gamma) * i_p) ** 2)
    for g in np.linspace(0, 1, 101):
        assert best <= np.sum((g * i_s + (1 - g) * i_p) ** 2) + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100))
def test_gamma_invariant_to_common_positive_scaling(seed, c):
    rng = np.random.default_rng(seed)
    i_s = rng.normal(size=5)
    i_p = rng.normal(size=5)
    diff = i_p - i_s
    if float(diff @ diff) < GAMMA_DEGENERATE_EPS:
        return
    assert pareto_gamma(c * i_s, c * i_p) == pytest.approx(pareto_gamma(i_s, i_p), rel=1e-12)


def test_first_order_change_nonpositive_for_both_sides():
    # update direction d = gamma*g_old + (1-gamma)*g_new; the predicted change
    # of each side along -d is -<g_side, d>, which must be <= 0 at interior
    # gamma and for the dominating side at clamped gamma
    rng = np.random.default_rng(0)
    for _ in range(500):
        g_old = rng.normal(size=4)
        g_new = rng.normal(size=4)
        gamma = pareto_gamma(g_old, g_new)
        d = gamma * g_old + (1 - gamma) * g_new
        if 0.0 < gamma < 1.0:
            assert g_old @ d >= -1e-10
            assert g_new @ d >= -1e-10
        elif gamma == 0.0:
            assert g_new @ d >= -1e-10
        else:
            assert g_old @ d >= -1e-10


def test_fuse_identities():
    i_s = np.asarray([2.0, -4.0])
    i_p = np.asarray([0.0, 2.0])
    assert np.array_equal(fuse(i_s, i_p, 1.0), i_s)
    assert np.array_equal(fuse(i_s, i_p, 0.0), i_p)
    assert np.array_equal(fuse(i_s, i_p, 0.5), np.asarray([1.0, -1.0]))
    with pytest.raises(ConfigError):
        fuse(i_s, i_p, 1.5)


def test_compute_influence_record_invariants():
    model, params = mlp(30)
    batch = rand_batch(model, 6, 31)
    vb = ValidationBatches(v_old=rand_batch(model, 3, 32), v_new=rand_batch(model, 3, 33))
    rec = compute_influence(model, params, batch, vb, 0.1)
    assert 0.0 <= rec.gamma_star <= 1.0
    expected = rec.gamma_star * rec.i_s + (1.0 - rec.gamma_star) * rec.i_p
    assert np.array_equal(rec.i_fused, expected)  # bitwise identity
    assert np.array_equal(rec.batch_example_ids, batch.uids)


# ---------------------------------------------------------------------------
# validation sampling


def pool_of(n, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, 2, size=n), np.arange(n)


def test_request_of_whole_pool_returns_everything():
    pool = pool_of(32)
    vb = sample_validation(pool, pool, (32, 32), seed=0)
    assert len(vb.v_old) == 32 and len(vb.v_new) == 32
    assert set(vb.v_old.uids) == set(range(32))


def test_fixed_seed_reproducible():
    pool = pool_of(100)
    a = sample_validation(pool, pool, (10, 10), seed=5)
    b = sample_validation(pool, pool, (10, 10), seed=5)
    assert np.array_equal(a.v_old.uids, b.v_old.uids)
    assert np.array_equal(a.v_new.uids, b.v_new.uids)


def test_missing_old_pool_allowed_for_first_task():
    pool = pool_of(20)
    vb = sample_validation(None, pool, (8, 8), seed=1)
    assert vb.v_old is None and len(vb.v_new) == 8


def test_inclusion_frequencies_hypergeometric():
    pool = pool_of(100)
    draws, take = 10_000, 10
    counts = np.zeros(100)
    for s in range(draws):
        vb = sample_validation(pool, pool, (take, 1), seed=s)
        counts[vb.v_old.uids] += 1
    freq = counts / draws
    p = take / 100
    sigma = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(freq - p) <= 3 * sigma + 5e-3)


def test_draw_pool_fraction_ceiling():
    x, y, uids = pool_of(25)
    rng = np.random.default_rng(0)
    px, py, puids = draw_pool(x, y, uids, 0.1, rng)
    assert len(px) == 3  # ceil(2.5)
    assert set(puids) <= set(uids)
