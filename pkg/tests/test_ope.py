import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import conv2d_naive, svf_naive

from spfnet import autodiff as ad
from spfnet.autodiff import Tensor, grad_check
from spfnet.nn import ConvParams, conv2d
from spfnet.ope import MAX_GRAD, N_BINS, init_mgf, init_ope, kernel_generate, kernel_stats, mgf, ope_stage, svf_filter


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _randomize(params, rng, scale=0.3):
    """Give zero-initialized tensors random values so every path carries signal."""
    from spfnet.model import _walk
    flat = {}
    _walk(params, "p", flat)
    for t in flat.values():
        if not t.data.any():
            t.data = scale * rng.standard_normal(t.shape)
    return params


def test_zero_kernels_give_zero():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
    assert not svf_filter(x, T(np.zeros((1, 9, 4, 4)))).data.any()


def test_delta_kernel_is_identity():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
    k = np.zeros((2, 9, 4, 5))
    k[:, 4] = 1.0
    np.testing.assert_array_equal(svf_filter(x, T(k)).data, x.data)


def test_hand_built_kernels_3x3():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 9, 3, 3))
    k[0, 0, 1, 1] = 1.0   # center pixel picks its top-left neighbor: 1
    k[0, 8, 0, 0] = 2.0   # top-left pixel picks 2 x its bottom-right neighbor: 2 * 5
    k[0, 1, 0, 2] = 3.0   # top-right pixel's upper neighbor is padding: 0
    out = svf_filter(T(x), T(k)).data[0, 0]
    assert out[1, 1] == 1.0 and out[0, 0] == 10.0 and out[0, 2] == 0.0
    np.testing.assert_allclose(out, svf_naive(x, k)[0, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_matches_per_pixel_oracle(B, C, H, W, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, H, W))
    k = rng.uniform(-1, 1, (B, 9, H, W))
    np.testing.assert_allclose(svf_filter(T(x), T(k)).data, svf_naive(x, k), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_linear_in_input(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 2, 5, 5))
    k = T(rng.uniform(-1, 1, (1, 9, 5, 5)))
    lhs = svf_filter(T(a * x + b * y), k).data
    rhs = a * svf_filter(T(x), k).data + b * svf_filter(T(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_shared_kernel_equals_conv(H, W, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, H, W))
    f = rng.standard_normal((3, 3))
    k = np.broadcast_to(f.reshape(9, 1, 1), (1, 9, H, W)).copy()
    want = conv2d_naive(x, f[None, None], np.zeros(1))
    np.testing.assert_allclose(svf_filter(T(x), T(k)).data, want, atol=1e-6)


def test_svf_rejects_bad_kernel_field():
    with pytest.raises(ValueError):
        svf_filter(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 8, 4, 4))))
    with pytest.raises(ValueError):
        svf_filter(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 9, 3, 4))))


def test_zero_init_generator_gives_zero_kernels():
    rng = np.random.default_rng(0)
    p = init_mgf(rng, 3, dtype=np.float64)
    k = kernel_generate(T(rng.standard_normal((1, 3, 4, 4))), T(rng.standard_normal((1, 1, 4, 4))), p.kg_prior)
    assert k.shape == (1, 9, 4, 4) and not k.data.any()


def test_zero_weight_reduces_to_feature_only():
    rng = np.random.default_rng(1)
    p = _randomize(init_mgf(rng, 3, dtype=np.float64), rng)
    feat = T(rng.standard_normal((1, 3, 4, 4)))
    a = kernel_generate(feat, T(np.zeros((1, 1, 4, 4))), p.kg_prior).data
    b = np.tanh(conv2d(feat, p.kg_prior).data)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_kernel_generate_plus_filter_gradcheck():
    rng = np.random.default_rng(2)
    kw, kb = T(0.3 * rng.standard_normal((9, 3, 1, 1))), T(rng.standard_normal(9))
    feat, w, x = T(rng.standard_normal((1, 3, 6, 6))), T(rng.standard_normal((1, 1, 6, 6))), \
        T(rng.standard_normal((1, 2, 6, 6)))
    proj = T(rng.standard_normal((1, 2, 6, 6)))
    f = lambda feat, w, x, kw, kb: ad.tsum(ad.mul(svf_filter(x, kernel_generate(feat, w, ConvParams(kw, kb))), proj))  # noqa: E731
    assert grad_check(f, [feat, w, x, kw, kb]) < 1e-4


def test_mgf_zero_init_is_identity():
    rng = np.random.default_rng(3)
    p = init_mgf(rng, 2, dtype=np.float64)
    d, pr = T(rng.standard_normal((1, 2, 5, 5))), T(rng.standard_normal((1, 2, 5, 5)))
    for mode in ("none", "d2p", "p2d", "d2p_p2d", "p2d_d2p"):
        f_pd, f_dp, _ = mgf(d, pr, T(np.ones((1, 1, 5, 5))), p, mode)
        np.testing.assert_array_equal(f_pd.data, d.data)
        np.testing.assert_array_equal(f_dp.data, pr.data)
    f_pd, _, _ = mgf(T(np.zeros((1, 2, 5, 5))), pr, None, p)
    assert not f_pd.data.any()


def test_mgf_matches_step_by_step_composition():
    rng = np.random.default_rng(4)
    p = _randomize(init_mgf(rng, 2, dtype=np.float64), rng)
    d, pr = rng.standard_normal((2, 1, 2, 5, 5))
    w = rng.standard_normal((1, 1, 5, 5))

    def kg(feat, conv):
        z = conv2d_naive(feat * w + feat, conv.weight.data, conv.bias.data)
        return np.tanh(z)

    k_pd = kg(pr, p.kg_prior)
    f_pd = svf_naive(d, k_pd) + d
    k_dp = kg(f_pd, p.kg_depth)
    f_dp = svf_naive(pr, k_dp) + pr
    got_pd, got_dp, ks = mgf(T(d), T(pr), T(w), p, "p2d_d2p")
    np.testing.assert_allclose(got_pd.data, f_pd, atol=1e-9)
    np.testing.assert_allclose(got_dp.data, f_dp, atol=1e-9)
    assert set(ks) == {"pd", "dp"}


def test_mgf_rejects_mismatch_and_mode():
    rng = np.random.default_rng(5)
    p = init_mgf(rng, 2, dtype=np.float64)
    with pytest.raises(ValueError):
        mgf(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 2, 5, 5))), None, p)
    with pytest.raises(ValueError):
        mgf(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 2, 4, 4))), None, p, "sideways")


def _stage_inputs(rng, C=4, H=6):
    mods = ("n", "s", "r")
    enhanced = {m: T(rng.standard_normal((1, C, H, H))) for m in mods}
    weights = {m: T(rng.uniform(-1, 1, (1, 1, H, H))) for m in mods}
    return T(rng.standard_normal((1, C, H, H))), enhanced, weights


def test_ope_zero_init_identity_on_depth():
    rng = np.random.default_rng(6)
    params = init_ope(rng, 4, ("n", "s", "r"), 2, dtype=np.float64)
    d, enh, w = _stage_inputs(rng)
    out = ope_stage(d, enh, w, params)
    np.testing.assert_array_equal(out.depth_next.data, d.data)
    for m in enh:
        np.testing.assert_array_equal(out.filtered_prior[m].data, enh[m].data)


def test_ope_order_is_not_commutative():
    rng = np.random.default_rng(7)
    params = _randomize(init_ope(rng, 4, ("n", "s", "r"), 1, dtype=np.float64), rng)
    d, enh, w = _stage_inputs(rng)
    a = ope_stage(d, enh, w, params, ("n", "s", "r")).depth_next.data
    b = ope_stage(d, enh, w, params, ("s", "r", "n")).depth_next.data
    assert np.abs(a - b).max() > 1e-6


def test_ope_successive_wiring():
    rng = np.random.default_rng(8)
    params = _randomize(init_ope(rng, 4, ("n", "s", "r"), 1, dtype=np.float64), rng)
    d, enh, w = _stage_inputs(rng)
    out = ope_stage(d, enh, w, params)
    f1, _, _ = mgf(conv2d(d, params.mgf["n"].fc), enh["n"], w["n"], params.mgf["n"])
    f2, _, _ = mgf(conv2d(ad.add(d, f1), params.mgf["s"].fc), enh["s"], w["s"], params.mgf["s"])
    f3, _, _ = mgf(conv2d(ad.add(f1, f2), params.mgf["r"].fc), enh["r"], w["r"], params.mgf["r"])
    for m, f in zip("nsr", (f1, f2, f3)):
        np.testing.assert_allclose(out.filtered_depth[m].data, f.data, atol=1e-12)
    fused = conv2d(ad.concat([f1, f2, f3], axis=1), params.fc_fuse).data + d.data
    np.testing.assert_allclose(out.fused.data, fused, atol=1e-12)


def test_ope_stage_gradcheck():
    rng = np.random.default_rng(9)
    params = _randomize(init_ope(rng, 4, ("n", "s", "r"), 1, dtype=np.float64), rng)
    d, enh, w = _stage_inputs(rng)
    proj = T(rng.standard_normal(d.shape))

    def f(*_):
        return ad.tsum(ad.mul(ope_stage(d, enh, w, params).depth_next, proj))

    assert grad_check(f, [d] + list(enh.values()) + list(w.values())) < 1e-4


def test_kernel_stats_constant_field():
    st_ = kernel_stats(np.full((9, 6, 6), 0.3))
    assert st_["mass"][0] == 1.0 and st_["mean"] == 0.0 and len(st_["mass"]) == N_BINS


def test_kernel_stats_checkerboard():
    cb = np.where(np.add.outer(np.arange(8), np.arange(8)) % 2 == 0, 1.0, -1.0)
    st_ = kernel_stats(np.broadcast_to(cb, (9, 8, 8)))
    assert np.argmax(st_["mass"]) == N_BINS - 1
    assert abs(st_["bin_centers"][-1] - MAX_GRAD * (1 - 0.5 / N_BINS)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kernel_stats_normalized(seed):
    k = np.tanh(np.random.default_rng(seed).standard_normal((9, 5, 7)))
    assert abs(kernel_stats(k)["mass"].sum() - 1.0) < 1e-12


def test_kernel_stats_mask():
    k = np.zeros((9, 4, 4))
    k[:, :, 2:] = 1.0
    mask = np.zeros((4, 4), bool)
    mask[:, 0] = True
    assert kernel_stats(k, mask)["mean"] == 0.0
    assert kernel_stats(k)["mean"] > 0.0
