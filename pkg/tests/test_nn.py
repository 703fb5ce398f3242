"""Unit tests for the from-scratch network pieces.

Every analytic gradient is checked against central finite differences with
step 1e-5 and the relative-error yardstick |a - n| / max(1e-8, |a| + |n|).
"""

import numpy as np
import pytest

from subgoal_diffusion.errors import ConfigurationError, InputError, UsageError
from subgoal_diffusion.nn import (Mlp, MlpSpec, Param, ParamStore, PointCloud,
                                  PointCloudEncoder, embed_text, glorot_uniform)

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def fd_check_params(store, loss_fn, rng, probes_per_param=4, tol=FD_TOL):
    """Probe random entries of every parameter against central differences."""
    worst = 0.0
    for p in store:
        flat = p.values.ravel()
        grads = p.grads.ravel()
        for j in rng.choice(flat.size, size=min(probes_per_param, flat.size),
                            replace=False):
            orig = flat[j]
            flat[j] = orig + FD_STEP
            up = loss_fn()
            flat[j] = orig - FD_STEP
            down = loss_fn()
            flat[j] = orig
            numeric = (up - down) / (2 * FD_STEP)
            err = rel_err(grads[j], numeric)
            assert err <= tol, (p.name, j, grads[j], numeric, err)
            worst = max(worst, err)
    return worst


def make_mlp(rng, widths=(3, 8, 6, 2)):
    store = ParamStore()
    acts = ("relu",) * (len(widths) - 2) + ("identity",)
    spec = MlpSpec(widths, acts)
    return Mlp("net", spec, store, rng), store


def test_glorot_uniform_bounds_and_spread():
    rng = np.random.default_rng(0)
    w = glorot_uniform(rng, (40, 60), 40, 60)
    limit = np.sqrt(6.0 / (40 + 60))
    assert w.shape == (40, 60)
    assert np.all(np.abs(w) <= limit)
    # a uniform on [-L, L] has std L/sqrt(3); loose factor-of-two bracket
    assert limit / 4 < w.std() < limit


def test_mlp_forward_matches_manual_two_layer():
    rng = np.random.default_rng(1)
    mlp, store = make_mlp(rng, widths=(2, 3, 1))
    x = np.array([0.3, -1.2])
    w0, b0 = store["net/W0"].values, store["net/b0"].values
    w1, b1 = store["net/W1"].values, store["net/b1"].values
    manual = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
    np.testing.assert_allclose(mlp.forward(x), manual, rtol=0, atol=1e-15)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    mlp, store = make_mlp(rng, widths=(4, 10, 8, 3))
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss():
        diff = mlp.forward(x) - target
        return float((diff * diff).mean())

    out, cache = mlp.forward_cached(x)
    store.zero_grads()
    mlp.backward(cache, 2.0 * (out - target) / out.size)
    fd_check_params(store, loss, rng)


def test_film_gradients_and_modulation():
    """FiLM applies (1 + s) * h + t after the activation; check both effects."""
    rng = np.random.default_rng(3)
    store = ParamStore()
    spec = MlpSpec((3, 6, 5, 2), ("relu", "tanh", "identity"), film_layers=(0, 1))
    mlp = Mlp("film", spec, store, rng, film_dim=7)
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 7))
    target = rng.normal(size=(4, 2))

    def loss():
        diff = mlp.forward(x, film_signal=c) - target
        return float((diff * diff).mean())

    out, cache = mlp.forward_cached(x, film_signal=c)
    store.zero_grads()
    mlp.backward(cache, 2.0 * (out - target) / out.size)
    fd_check_params(store, loss, rng)

    # zeroing the projections must reduce FiLM to the unmodulated network
    for name in ("film/film_W0", "film/film_b0", "film/film_W1", "film/film_b1"):
        store[name].values[...] = 0.0
    plain_store = ParamStore()
    plain = Mlp("plain", MlpSpec((3, 6, 5, 2), ("relu", "tanh", "identity")),
                plain_store, np.random.default_rng(99))
    for l in range(3):
        plain_store[f"plain/W{l}"].values[...] = store[f"film/W{l}"].values
        plain_store[f"plain/b{l}"].values[...] = store[f"film/b{l}"].values
    np.testing.assert_allclose(mlp.forward(x, film_signal=c), plain.forward(x),
                               rtol=0, atol=1e-14)


def test_film_scale_gradient_is_activation_times_upstream():
    """For output y = (1 + s) * h + t, dL/ds must equal g * h exactly."""
    rng = np.random.default_rng(4)
    store = ParamStore()
    spec = MlpSpec((2, 3, 3), ("identity", "identity"), film_layers=(0,))
    mlp = Mlp("m", spec, store, rng, film_dim=1)
    # make the final layer a pass-through so the upstream at the FiLM site is 1
    store["m/W1"].values[...] = np.eye(3)
    store["m/b1"].values[...] = 0.0
    # with a conditioning of exactly 1.0 the film_W gradient rows are [g*h, g]
    x = np.array([[0.5, -0.25]])
    c = np.array([[1.0]])
    out, cache = mlp.forward_cached(x, film_signal=c)
    store.zero_grads()
    mlp.backward(cache, np.ones_like(out))
    h = x @ store["m/W0"].values + store["m/b0"].values
    film_w = store["m/film_W0"].grads  # (film_dim, 2 * width): scales then shifts
    width = 3
    np.testing.assert_allclose(film_w[0, :width], h.ravel(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(film_w[0, width:], np.ones(width), rtol=0, atol=1e-15)


def test_mlp_backward_without_cache_raises():
    rng = np.random.default_rng(5)
    mlp, _ = make_mlp(rng)
    with pytest.raises(UsageError):
        mlp.backward(None, np.zeros((1, 2)))


def test_mlp_spec_validation():
    with pytest.raises(ConfigurationError):
        MlpSpec((3,), ())
    with pytest.raises(ConfigurationError):
        MlpSpec((3, 4), ("relu", "relu"))
    with pytest.raises(ConfigurationError):
        MlpSpec((3, 4, 2), ("relu", "identity"), film_layers=frozenset({5}))
    # the final layer is not FiLM-eligible
    with pytest.raises(ConfigurationError):
        MlpSpec((3, 4, 2), ("relu", "identity"), film_layers=frozenset({1}))
    # film layers without a film_dim cannot build
    spec = MlpSpec((3, 4, 2), ("relu", "identity"), film_layers=frozenset({0}))
    with pytest.raises(ConfigurationError):
        Mlp("bad", spec, ParamStore(), np.random.default_rng(0))


def test_point_cloud_validation():
    with pytest.raises(InputError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(InputError):
        PointCloud(np.zeros((0, 3)))
    bad = np.zeros((4, 3))
    bad[1, 1] = np.nan
    with pytest.raises(InputError):
        PointCloud(bad)


def test_encoder_permutation_and_duplication_invariance_exact():
    rng = np.random.default_rng(6)
    store = ParamStore()
    enc = PointCloudEncoder("pc", store, rng, widths=(16, 24))
    pts = rng.normal(size=(32, 3))
    base = enc.encode(pts)
    for seed in range(10):
        perm = np.random.default_rng(seed).permutation(32)
        assert np.array_equal(enc.encode(pts[perm]), base)
    doubled = np.vstack([pts, pts[rng.choice(32, size=11)]])
    assert np.array_equal(enc.encode(doubled), base)


def test_encoder_batch_matches_single():
    rng = np.random.default_rng(7)
    store = ParamStore()
    enc = PointCloudEncoder("pc", store, rng, widths=(8, 10))
    batch = rng.normal(size=(5, 12, 3))
    pooled = enc.encode(batch)
    for i in range(5):
        np.testing.assert_array_equal(pooled[i], enc.encode(batch[i]))


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    store = ParamStore()
    enc = PointCloudEncoder("pc", store, rng, widths=(6, 9))
    pts = rng.normal(size=(3, 10, 3))
    target = rng.normal(size=(3, 9))

    def loss():
        diff = enc.encode(pts) - target
        return float((diff * diff).sum())

    pooled, cache = enc.encode_cached(pts)
    store.zero_grads()
    enc.backward(cache, 2.0 * (pooled - target))
    fd_check_params(store, loss, rng, probes_per_param=6)


def test_embed_text_unit_norm_and_determinism():
    v1 = embed_text("grasp the rubbish")
    v2 = embed_text("grasp the rubbish")
    assert v1.vector.shape == (32,)
    np.testing.assert_array_equal(v1.vector, v2.vector)
    assert abs(np.linalg.norm(v1.vector) - 1.0) < 1e-12


def test_embed_text_distinct_strings_disagree():
    """Collision scan over a batch of related strings."""
    strings = [f"move item {i} to slot {j}" for i in range(8) for j in range(8)]
    vectors = [embed_text(s).vector for s in strings]
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            assert not np.allclose(vectors[i], vectors[j]), (strings[i], strings[j])


def test_embed_text_dimension_and_empty_string():
    assert embed_text("x", d_text=5).vector.shape == (5,)
    with pytest.raises(InputError):
        embed_text("")
    with pytest.raises(ConfigurationError):
        embed_text("x", d_text=0)


def test_param_store_rejects_duplicates_and_reports_sizes():
    store = ParamStore()
    store.add("a", np.zeros((2, 3)))
    with pytest.raises(ConfigurationError):
        store.add("a", np.zeros(1))
    store.add("b", np.zeros(4))
    assert store.n_values() == 10
    assert store.names() == ["a", "b"]
