"""SVD partitioning, factored and LoRA convolutions, FLOP and parameter accounting."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift.lowrank import (
    ConvGeometry,
    FactoredConv,
    LoraConv,
    PlainConv,
    _weight_grad_route,
    conv_forward_flops,
    factored_conv_forward,
    layer_forward_flops,
    lora_merge,
    merge,
    qr_refresh,
    reshape_conv_to_matrix,
    reshape_matrix_to_conv,
    set_trainable_rank,
    svd_partition,
    trainable_param_count,
)
from drift.numerics import DimensionError, Parameter, Tensor, backward, conv1d, no_grad, sum_

from test_numerics import numeric_grad


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_reshape_roundtrip(rng):
    w = rng.standard_normal((4, 3, 5))
    wm = reshape_conv_to_matrix(w)
    assert wm.shape == (20, 3)
    assert wm[1 * 5 + 2, 0] == w[1, 0, 2]  # row = c_out * k + tap
    assert np.array_equal(reshape_matrix_to_conv(wm, 4, 3, 5), w)


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 40), n=st.integers(1, 40), frac=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_partition_soundness(m, n, frac, seed):
    w = np.random.default_rng(seed).standard_normal((m, n))
    p = min(m, n)
    r = max(1, round(frac * p))
    f = svd_partition(w, r)
    assert f.r == r and f.u_frozen.shape == (m, p - r)
    assert rel(merge(f).data, w) <= 1e-12
    U = np.hstack([f.u_train.data, f.u_frozen.data])
    V = np.hstack([f.v_train.data, f.v_frozen.data])
    assert np.abs(U.T @ U - np.eye(p)).max() <= 1e-12
    assert np.abs(V.T @ V - np.eye(p)).max() <= 1e-12
    if r < p:
        assert f.s_train.data.min() >= f.s_frozen.data.max()
    assert f.u_train.requires_grad and not f.u_frozen.requires_grad


def test_partition_clamps_with_warning(rng):
    w = rng.standard_normal((5, 3))
    with pytest.warns(UserWarning, match="clamped"):
        f = svd_partition(w, 9)
    assert f.r == 3 and f.s_frozen.shape == (0,)
    with pytest.warns(UserWarning):
        assert svd_partition(w, 0).r == 1


def test_partition_rank_deficient_input():
    w = np.outer(np.arange(1.0, 7.0), np.arange(1.0, 5.0))  # rank 1
    f = svd_partition(w, 2)
    assert np.allclose(merge(f).data, w, atol=1e-12)
    assert f.s_train.data[1] < 1e-12


def test_merge_backward_matches_fd(rng):
    f = svd_partition(rng.standard_normal((6, 4)), 2)
    r = rng.standard_normal((6, 4))
    params = list(f.trainable().values())
    backward(sum_(merge(f) * r))
    for p in params:
        with no_grad():
            num = numeric_grad(lambda: float(np.sum(merge(f).data * r)), p.data)
        assert np.allclose(p.grad, num, rtol=1e-6, atol=1e-8)


def test_merge_conv_layout(rng):
    w = rng.standard_normal((4, 3, 5))
    f = svd_partition(reshape_conv_to_matrix(w), 2)
    assert np.allclose(merge(f, (4, 3, 5)).data, w, atol=1e-12)


def test_set_trainable_rank_preserves_weight(rng):
    f = svd_partition(rng.standard_normal((12, 7)), 5)
    f.u_train.data += 0.01 * rng.standard_normal(f.u_train.shape)  # trained factors drift off the SVD
    before = merge(f).data.copy()
    g = set_trainable_rank(f, 2)
    assert g.r == 2 and rel(merge(g).data, before) < 1e-12
    assert set_trainable_rank(g, 2) is g


def test_qr_refresh_exact_on_orthonormal(rng):
    f = svd_partition(rng.standard_normal((10, 6)), 3)
    before = merge(f).data.copy()
    v0 = f.u_train.version
    qr_refresh(f)
    assert rel(merge(f).data, before) < 1e-13
    assert f.u_train.version == v0 + 1


def test_qr_refresh_restores_orthonormality(rng):
    f = svd_partition(rng.standard_normal((10, 6)), 3)
    f.u_train.data[...] = f.u_train.data + 0.05 * rng.standard_normal(f.u_train.shape)
    qr_refresh(f)
    u = f.u_train.data
    assert np.abs(u.T @ u - np.eye(3)).max() < 1e-12


# --------------------------------------------------------------------------- layers


def make_factored(rng, geom, r, dtype=np.float64):
    w = rng.standard_normal((geom.c_out, geom.c_in, geom.k)).astype(dtype)
    b = rng.standard_normal(geom.c_out).astype(dtype)
    return FactoredConv.from_weight(geom, w, b, r), w, b


@pytest.mark.parametrize("geom", [ConvGeometry(8, 6, 3, 1, 1), ConvGeometry(6, 6, 3, 2, 1), ConvGeometry(5, 4, 4, 2, 1)])
def test_factored_forward_equals_plain(rng, geom):
    p = geom.r_max
    x = rng.standard_normal((3, geom.c_in, 9))
    for r in sorted({1, max(1, p // 4), p}):
        layer, w, b = make_factored(rng, geom, r)
        got = layer(Tensor(x)).data
        with no_grad():
            got_ng = layer(Tensor(x)).data
        ref = conv1d(x, layer.effective_weight(), b, geom.stride, geom.padding).data
        assert np.abs(got - ref).max() <= 1e-12
        assert np.array_equal(got, got_ng)
        assert np.abs(got - conv1d(x, w, b, geom.stride, geom.padding).data).max() <= 1e-11


@pytest.mark.parametrize("route", ["dense", "lowrank"])
def test_factored_grad_routes_match_fd(rng, route):
    geom = ConvGeometry(4, 3, 3, 1, 1)
    layer, _, _ = make_factored(rng, geom, 2)
    x = Parameter(rng.standard_normal((2, 3, 6)))
    r = rng.standard_normal((2, 4, 6))

    def loss():
        return sum_(factored_conv_forward(x, layer, geom, layer.bias, route=route) * r)

    params = [x, layer.bias, *layer.factors.trainable().values()]
    for p in params:
        p.zero_grad()
    backward(loss())
    for p in params:
        def f():
            p.version += 1  # invalidate the merged-weight cache
            with no_grad():
                return float(loss().data)
        num = numeric_grad(f, p.data)
        assert np.allclose(p.grad, num, rtol=1e-6, atol=1e-8), route


@pytest.mark.parametrize("geom", [ConvGeometry(16, 12, 3, 1, 1), ConvGeometry(16, 12, 3, 2, 1),
                                  ConvGeometry(16, 12, 1, 1, 0), ConvGeometry(8, 12, 5, 2, 2)])
def test_routes_agree(rng, geom):
    x = rng.standard_normal((4, 12, 10))
    g = rng.standard_normal((4, geom.c_out, geom.out_length(10)))
    grads = {}
    for route in ("dense", "lowrank"):
        layer, _, _ = make_factored(np.random.default_rng(0), geom, 5)
        out = factored_conv_forward(Tensor(x), layer, geom, layer.bias, route=route)
        backward(sum_(out * g))
        grads[route] = [p.grad.copy() for p in layer.factors.trainable().values()]
    for a, b in zip(grads["dense"], grads["lowrank"]):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10)


def test_route_choice_by_cost():
    geom = ConvGeometry(64, 64, 5, 1, 2)
    assert _weight_grad_route(geom, rows=512, r=1) == "lowrank"
    assert _weight_grad_route(geom, rows=512, r=64) == "dense"


def test_frozen_factors_get_no_grad(rng):
    geom = ConvGeometry(6, 4, 3, 1, 1)
    layer, _, _ = make_factored(rng, geom, 2)
    backward(sum_(layer(Tensor(rng.standard_normal((2, 4, 5))))))
    for p in layer.factors.frozen().values():
        assert not np.any(p.grad)


def test_factored_dimension_checks(rng):
    geom = ConvGeometry(6, 4, 3, 1, 1)
    layer, _, _ = make_factored(rng, geom, 2)
    with pytest.raises(DimensionError):
        layer(Tensor(np.zeros((1, 5, 8))))
    with pytest.raises(DimensionError):
        factored_conv_forward(Tensor(np.zeros((1, 4, 8))), layer, ConvGeometry(6, 4, 5))
    with pytest.raises(DimensionError):
        FactoredConv(ConvGeometry(7, 4, 3), layer.factors, layer.bias)


def test_weight_cache_tracks_versions(rng):
    geom = ConvGeometry(6, 4, 3, 1, 1)
    layer, _, _ = make_factored(rng, geom, 2)
    w0 = layer.effective_weight()
    layer.factors.s_train.assign(layer.factors.s_train.data * 2)
    assert not np.allclose(layer.effective_weight(), w0)


def test_set_rank_keeps_forward(rng):
    geom = ConvGeometry(8, 6, 3, 1, 1)
    layer, _, _ = make_factored(rng, geom, 6)
    x = Tensor(rng.standard_normal((2, 6, 7)))
    before = layer(x).data
    layer.set_rank(2)
    assert layer.rank == 2
    assert np.allclose(layer(x).data, before, atol=1e-12)


def test_lora_zero_init_and_merge(rng):
    geom = ConvGeometry(6, 4, 3, 1, 1)
    w = rng.standard_normal((6, 4, 3))
    b = rng.standard_normal(6)
    layer = LoraConv.wrap(geom, w, b, 2, rng, alpha=0.5)
    x = Tensor(rng.standard_normal((2, 4, 5)))
    assert np.array_equal(layer(x).data, conv1d(x, w, b, 1, 1).data)
    layer.w_up.data[...] = rng.standard_normal(layer.w_up.shape)
    delta = layer.w_up.data[:, :, 0] @ layer.w_down.data.reshape(2, -1)
    assert np.allclose(lora_merge(layer), w + 0.5 * delta.reshape(6, 4, 3), atol=1e-14)
    assert np.allclose(layer(x).data, conv1d(x, lora_merge(layer), b, 1, 1).data, atol=1e-12)


def test_lora_grads_only_adapters(rng):
    geom = ConvGeometry(4, 3, 3, 1, 1)
    layer = LoraConv.wrap(geom, rng.standard_normal((4, 3, 3)), rng.standard_normal(4), 2, rng)
    layer.w_up.data[...] = rng.standard_normal(layer.w_up.shape)
    x = rng.standard_normal((2, 3, 5))
    r = rng.standard_normal((2, 4, 5))
    backward(sum_(layer(Tensor(x)) * r))
    assert not np.any(layer.w_conv.grad)
    for p in (layer.w_down, layer.w_up):
        with no_grad():
            num = numeric_grad(lambda: float(np.sum(layer(Tensor(x)).data * r)), p.data)
        assert np.allclose(p.grad, num, rtol=1e-6, atol=1e-8)


def test_lora_rank_clamped_and_alpha_checked(rng):
    geom = ConvGeometry(2, 4, 3)
    layer = LoraConv.wrap(geom, rng.standard_normal((2, 4, 3)), np.zeros(2), 50, rng)
    assert layer.r == geom.lora_r_max == 2
    with pytest.raises(ValueError):
        LoraConv(geom, layer.w_conv.data, np.zeros(2), layer.w_down.data, layer.w_up.data, alpha=-1)


# --------------------------------------------------------------------------- accounting


def test_trainable_param_counts(rng):
    geom = ConvGeometry(8, 6, 3, 1, 1)
    for r in (1, 3, 6):
        layer, _, _ = make_factored(rng, geom, r)
        assert trainable_param_count(layer.factors) == r * (24 + 6 + 1)
        assert trainable_param_count(layer) == r * (24 + 6 + 1) + 8
        actual = sum(p.data.size for p in layer.parameters().values() if p.requires_grad)
        assert trainable_param_count(layer) == actual
    lora = LoraConv.wrap(geom, rng.standard_normal((8, 6, 3)), np.zeros(8), 4, rng)
    assert trainable_param_count(lora) == 4 * (18 + 8) + 8
    plain = PlainConv.init(geom, rng)
    assert trainable_param_count(plain) == 8 * 6 * 3 + 8
    with pytest.raises(TypeError):
        trainable_param_count(object())


def test_forward_flops_rank_independent(rng):
    geom = ConvGeometry(16, 8, 5, 1, 2)
    base = conv_forward_flops(geom, 12, 4)
    assert base == 4 * 16 * 8 * 5 * 12
    for r in (1, 2, 8):
        layer, _, _ = make_factored(rng, geom, r)
        f = layer_forward_flops(layer, 12, 4)
        assert f["total"] == base and f["adapter"] == 0
        assert f["weight_refresh"] == geom.m * geom.n * r


def test_lora_adapter_flops_linear(rng):
    geom = ConvGeometry(16, 8, 5, 1, 2)
    w = rng.standard_normal((16, 8, 5))
    for r in (1, 2, 4, 8):
        layer = LoraConv.wrap(geom, w, np.zeros(16), r, rng)
        f = layer_forward_flops(layer, 12)
        assert f["adapter"] == 16 * 8 * 5 * r
        assert f["total"] == f["conv"] + f["adapter"]


def test_no_warning_in_range(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        svd_partition(rng.standard_normal((4, 4)), 4)
