import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import patch_similarity_naive

from spfnet import autodiff as ad
from spfnet.app import app_stage, fuse_rgb_weight, init_app, patch_similarity, propagate, wasserstein_1d
from spfnet.autodiff import Tensor, grad_check
from spfnet.nn import init_residual_group, residual_group


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_identical_features_give_ones():
    x = np.random.default_rng(0).uniform(0.5, 1.5, (1, 3, 5, 5))
    np.testing.assert_allclose(patch_similarity(T(x), T(x)).data, 1.0, atol=1e-12)


def test_orthogonal_patches_give_zero():
    p = np.zeros((1, 1, 3, 3))
    d = np.zeros((1, 1, 3, 3))
    p[0, 0, 1, 1] = 1.0  # center tap only
    d[0, 0, 0, 0] = 1.0  # corner tap only; the center patch sees both, disjointly
    assert patch_similarity(T(p), T(d)).data[0, 0, 1, 1] == 0.0


def test_one_channel_by_hand():
    p = np.array([[1.0, 2, 0], [0, 1, 1], [3, 0, 1]])[None, None]
    d = np.array([[1.0, 0, 1], [2, 1, 0], [0, 1, 1]])[None, None]
    got = patch_similarity(T(p), T(d)).data[0, 0]
    # center pixel: full 3x3 patches, dot = 1+0+0+0+1+0+0+0+1 = 3
    center = 3 / (np.sqrt(1 + 4 + 0 + 0 + 1 + 1 + 9 + 0 + 1) * np.sqrt(1 + 0 + 1 + 4 + 1 + 0 + 0 + 1 + 1))
    assert abs(got[1, 1] - center) < 1e-6
    # top-left pixel: patch rows [0,0,0],[0,1,2],[0,0,1] vs [0,0,0],[0,1,0],[0,2,1]
    corner = (1 + 0 + 1) / (np.sqrt(1 + 4 + 1) * np.sqrt(1 + 4 + 1))
    assert abs(got[0, 0] - corner) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_matches_brute_force(B, C, H, W, seed):
    rng = np.random.default_rng(seed)
    p, d = rng.standard_normal((2, B, C, H, W))
    np.testing.assert_allclose(patch_similarity(T(p), T(d)).data, patch_similarity_naive(p, d), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 100), st.floats(0.01, 100),
       st.integers(0, 2**31 - 1))
def test_bounded_and_scale_invariant(C, H, W, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    p, d = rng.standard_normal((2, 1, C, H, W))
    s = patch_similarity(T(p), T(d)).data
    assert np.all(np.abs(s) <= 1 + 1e-12)
    np.testing.assert_allclose(patch_similarity(T(alpha * p), T(beta * d)).data, s, atol=1e-6)


def test_zero_patches_are_guarded():
    out = patch_similarity(T(np.zeros((1, 2, 4, 4))), T(np.ones((1, 2, 4, 4)))).data
    assert np.isfinite(out).all() and not out.any()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        patch_similarity(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 2, 4, 5))))


def test_fuse_degenerate_gammas():
    rng = np.random.default_rng(0)
    wn, ws, sr = (T(rng.uniform(-1, 1, (1, 1, 3, 3))) for _ in range(3))
    out = fuse_rgb_weight(wn, ws, sr, T([0.0]), T([0.0]))
    np.testing.assert_array_equal(out.data, sr.data)


def test_fuse_all_ones():
    one = T(np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(fuse_rgb_weight(one, one, one, T([1.0]), T([1.0])).data, 3.0)


def test_fuse_scalar_arithmetic():
    out = fuse_rgb_weight(T([[[[0.8]]]]), T([[[[0.2]]]]), T([[[[0.1]]]]), T([0.5]), T([-0.5]))
    assert abs(out.item() - 0.4) < 1e-12


def test_fuse_without_priors_is_sigma():
    sr = T(np.full((1, 1, 2, 2), 0.3))
    assert fuse_rgb_weight(None, None, sr, T([2.0]), T([2.0])) is sr


def _body_nonzero(g, rng):
    g.tail.weight.data = 0.2 * rng.standard_normal(g.tail.weight.shape)
    return g


def test_propagate_zero_and_unit_weight():
    rng = np.random.default_rng(1)
    g = _body_nonzero(init_residual_group(rng, 2, 1, dtype=np.float64), rng)
    prev = T(rng.standard_normal((1, 2, 4, 4)))
    zero, one = T(np.zeros((1, 1, 4, 4))), T(np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(propagate(prev, zero, g).data, residual_group(prev, g).data, atol=1e-12)
    np.testing.assert_allclose(propagate(prev, one, g).data, residual_group(T(2 * prev.data), g).data, atol=1e-12)


def test_propagate_zero_init_group():
    rng = np.random.default_rng(2)
    g = init_residual_group(rng, 2, 1, dtype=np.float64)
    prev = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 1, 4, 4))
    np.testing.assert_allclose(propagate(T(prev), T(w), g).data, prev * w + prev, atol=1e-12)


def _priors(rng, C=4, h=6, s=2):
    return {m: T(rng.standard_normal((1, C, s * h, s * h))) for m in ("n", "s", "r")}


def test_stage_one_uses_downsampled_priors():
    rng = np.random.default_rng(3)
    params = init_app(rng, 4, ("n", "s", "r"), 1, np.float64)
    priors = _priors(rng)
    depth = T(rng.standard_normal((1, 4, 6, 6)))
    weights, enhanced, low = app_stage(priors, depth, None, params)
    for m in priors:
        assert weights[m].shape == (1, 1, 6, 6)
        # zero-init groups: enhanced = low * w + low
        np.testing.assert_allclose(enhanced[m].data, low[m].data * weights[m].data + low[m].data, atol=1e-12)
    for m in ("n", "s"):
        assert np.all(np.abs(weights[m].data) <= 1 + 1e-12)


def test_identical_features_rgb_weight():
    rng = np.random.default_rng(4)
    params = init_app(rng, 3, ("n", "s", "r"), 1, np.float64)
    params.gamma1.data[:] = 0.7
    params.gamma2.data[:] = -0.2
    depth = T(rng.uniform(0.5, 1.5, (1, 3, 4, 4)))
    priors = {m: depth for m in ("n", "s", "r")}  # same resolution: no resampling
    weights, _, _ = app_stage(priors, depth, None, params)
    np.testing.assert_allclose(weights["n"].data, 1.0, atol=1e-12)
    np.testing.assert_allclose(weights["r"].data, 0.7 - 0.2 + 1.0, atol=1e-12)


def test_app_stage_gradcheck():
    rng = np.random.default_rng(5)
    params = init_app(rng, 4, ("n", "s", "r"), 1, np.float64)
    params.gamma1.data = np.array([0.4])
    params.gamma2.data = np.array([-0.3])
    for g in params.groups.values():
        _body_nonzero(g, rng)
    priors = {m: T(rng.standard_normal((1, 4, 6, 6))) for m in ("n", "s", "r")}
    prev = {m: T(rng.standard_normal((1, 4, 6, 6))) for m in ("n", "s", "r")}
    depth = T(rng.standard_normal((1, 4, 6, 6)))
    proj = {m: T(rng.standard_normal((1, 4, 6, 6))) for m in ("n", "s", "r")}

    def f(*_):
        _, enh, _ = app_stage(priors, depth, prev, params)
        return ad.tsum(ad.concat([ad.mul(enh[m], proj[m]) for m in enh], axis=1))

    inputs = [depth, params.gamma1, params.gamma2] + list(priors.values()) + list(prev.values())
    assert grad_check(f, inputs) < 1e-4


def test_wasserstein_matches_shift():
    a = np.random.default_rng(0).standard_normal(500)
    assert abs(wasserstein_1d(a, a + 2.0) - 2.0) < 1e-9
