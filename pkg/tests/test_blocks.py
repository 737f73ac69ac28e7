import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strippool import tensor as T
from strippool.blocks import (
    Conv,
    GlobalPoolingGate,
    LongRangeBranch,
    MixedPoolingModule,
    ShortRangeBranch,
    StripPoolingModule,
    clamp_bins,
    param_count,
)
from strippool.tensor import ConfigError

from . import oracles

EPS = 1e-5


def zero_weights(module):
    for name, p in module.named_parameters():
        if name.endswith("weight"):
            p.value = np.zeros_like(p.value)


def randomize(module, seed, float64=True):
    """Random weights and running stats so eval-mode batchnorm is a non-trivial affine map."""
    rng = np.random.default_rng(seed)
    module.materialize(seed)
    for name, p in module.named_parameters():
        v = p.value + 0.2 * rng.standard_normal(p.shape)
        p.value = v.astype(np.float64 if float64 else np.float32)
    for _, st_ in module.named_stats():
        st_.mean = rng.uniform(-0.3, 0.3, st_.mean.shape)
        st_.var = rng.uniform(0.5, 1.5, st_.var.shape)
    return module


def bn_eval(v, module_bn_owner, axis_shape):
    """Eval-mode batchnorm of a ConvBN child recomputed by hand."""
    stats = module_bn_owner.stats["bn"]
    g, b = module_bn_owner["bn.gamma"].value, module_bn_owner["bn.beta"].value
    return (v - stats.mean.reshape(axis_shape)) / np.sqrt(stats.var.reshape(axis_shape) + EPS) \
        * g.reshape(axis_shape) + b.reshape(axis_shape)


# ---------------------------------------------------------------- strip pooling module

@pytest.mark.parametrize("train", [True, False])
def test_zero_weight_spm_halves_input_exactly(train):
    spm = StripPoolingModule(3).materialize(0)
    zero_weights(spm)
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 7)).astype(np.float32)
    out = spm(T.const(x), train)
    np.testing.assert_array_equal(out.value, 0.5 * x)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_spm_preserves_shape_and_attenuates(n, c, h, w, seed):
    spm = StripPoolingModule(c).materialize(seed)
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(np.float32)
    x[x == 0] = 1.0
    out = spm(T.const(x), train=False).value
    assert out.shape == x.shape
    ratio = out / x
    assert np.all(ratio > 0) and np.all(ratio < 1)
    assert np.all(np.abs(out) <= np.abs(x))
    gs = spm.gate_stats
    assert 0 < gs.min <= gs.mean <= gs.max < 1


def test_spm_rejects_channel_mismatch():
    spm = StripPoolingModule(3).materialize(0)
    with pytest.raises(ConfigError):
        spm(T.const(np.zeros((1, 4, 5, 5))), False)


def test_spm_profiles_match_composed_oracles():
    spm = randomize(StripPoolingModule(3), 1)
    x = np.random.default_rng(2).standard_normal((2, 3, 6, 5))
    spm(T.const(x), train=False)
    rows = oracles.row_means(x)[..., 0]
    cols = oracles.col_means(x)[:, :, 0, :]
    yh = np.maximum(bn_eval(oracles.conv1d(rows, spm.conv_h["weight"].value), spm.conv_h, (1, -1, 1)), 0)
    yv = np.maximum(bn_eval(oracles.conv1d(cols, spm.conv_v["weight"].value), spm.conv_v, (1, -1, 1)), 0)
    np.testing.assert_allclose(spm.last["y_h"].value[..., 0], yh, atol=1e-10)
    np.testing.assert_allclose(spm.last["y_v"].value[:, :, 0, :], yv, atol=1e-10)
    # Eq. 4: the fused map is the two-axis broadcast sum
    np.testing.assert_allclose(spm.last["y"].value, yh[..., :, None] + yv[..., None, :], atol=1e-10)


def test_spm_gate_reaches_full_row_and_column():
    spm = randomize(StripPoolingModule(4), 3)
    x = np.random.default_rng(4).standard_normal((1, 4, 9, 11))
    spm(T.const(x), train=False)
    base = spm.last["gate"].value.copy()
    i0, j0 = 4, 7
    bumped = x.copy()
    bumped[0, :, i0, j0] += 1e-3
    spm(T.const(bumped), train=False)
    moved = np.abs(spm.last["gate"].value - base).max(axis=1)[0]
    assert np.all(moved[i0, :] > 0), "every column of the perturbed row must respond"
    assert np.all(moved[:, j0] > 0), "every row of the perturbed column must respond"


def test_spm_gate_profile_equivariance():
    spm = randomize(StripPoolingModule(2), 5)
    x = np.random.default_rng(6).standard_normal((1, 2, 6, 10))
    spm(T.const(x), train=False)
    yh, yv = spm.last["y_h"].value.copy(), spm.last["y_v"].value.copy()
    perm = np.random.default_rng(7).permutation(10)
    spm(T.const(x[..., perm]), train=False)
    # column permutations leave the row profile untouched
    np.testing.assert_allclose(spm.last["y_h"].value, yh, atol=1e-12)
    # a cyclic shift of columns shifts the column profile identically, away from the padded ends
    spm(T.const(np.roll(x, 3, axis=3)), train=False)
    np.testing.assert_allclose(spm.last["y_v"].value[..., 4:9], yv[..., 1:6], atol=1e-12)


# ---------------------------------------------------------------- global-pooling gate

def test_zero_weight_se_gate_halves_input():
    se = GlobalPoolingGate(3).materialize(0)
    zero_weights(se)
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 6)).astype(np.float32)
    np.testing.assert_array_equal(se(T.const(x), False).value, 0.5 * x)


def test_se_gate_is_spatially_constant():
    se = randomize(GlobalPoolingGate(3), 1)
    x = np.random.default_rng(1).standard_normal((2, 3, 5, 6))
    se(T.const(x), False)
    assert se.last["gate"].shape == (2, 3, 1, 1)


def test_se_gate_equals_spm_on_spatially_constant_input():
    c = 3
    rng = np.random.default_rng(8)
    se = GlobalPoolingGate(c).materialize(0)
    spm = StripPoolingModule(c).materialize(0)
    for conv_se, conv_spm in ((se.conv_h, spm.conv_h), (se.conv_v, spm.conv_v)):
        w = np.zeros((c, c, 3), np.float32)
        w[..., 1] = rng.standard_normal((c, c))  # only the centre tap sees a length-1 sequence
        conv_se["weight"].value = w
        conv_spm["weight"].value = w.copy()
    fw = rng.standard_normal((c, c, 1, 1)).astype(np.float32)
    se.fuse["weight"].value = fw
    spm.fuse["weight"].value = fw.copy()
    for _, stats in spm.named_stats():
        stats.var = np.full_like(stats.var, 1.0 - EPS)  # eval batchnorm becomes the identity
    x = np.broadcast_to(rng.standard_normal((2, c, 1, 1)), (2, c, 6, 5)).astype(np.float32)
    np.testing.assert_allclose(se(T.const(x), False).value, spm(T.const(x), False).value, atol=1e-5)


# ---------------------------------------------------------------- long-range branch

def test_lrd_row_profile_spreads_along_bright_row():
    lrd = randomize(LongRangeBranch(2), 9)
    x = np.zeros((1, 2, 8, 9))
    x[0, :, 3, :] = 5.0
    lrd(T.const(x), False)
    horizontal = np.broadcast_to(lrd.last["y_h"].value, (1, 2, 8, 9))
    assert np.all(horizontal[0, :, 3, :] == horizontal[0, :, 3, :1])
    assert not np.allclose(horizontal[0, :, 3, 0], horizontal[0, :, 7, 0])


def test_lrd_zero_input_gives_zero():
    lrd = LongRangeBranch(3).materialize(1)
    for train in (True, False):
        assert np.all(lrd(T.const(np.zeros((2, 3, 6, 6), np.float32)), train).value == 0)


def test_lrd_sum_equals_materialised_broadcast():
    lrd = randomize(LongRangeBranch(3), 10)
    x = np.random.default_rng(11).standard_normal((2, 3, 7, 5))
    lrd(T.const(x), False)
    yh, yv = lrd.last["y_h"].value, lrd.last["y_v"].value
    expect = np.tile(yh, (1, 1, 1, 5)) + np.tile(yv, (1, 1, 7, 1))
    np.testing.assert_allclose(lrd.last["sum"].value, expect, atol=1e-12)


# ---------------------------------------------------------------- short-range branch

def test_srd_single_pixel_reduces_to_three_centre_tap_paths():
    srd = randomize(ShortRangeBranch(2), 12)
    x = np.random.default_rng(13).standard_normal((2, 2, 1, 1))
    out = srd(T.const(x), False).value

    def path(conv, v):
        return np.maximum(bn_eval(np.einsum("oi,ni->no", conv["weight"].value[..., 1, 1], v), conv, (1, -1)), 0)

    v = x[:, :, 0, 0]
    total = path(srd.direct, v) + sum(path(c, v) for c in srd.pool_convs)
    expect = path(srd.fusion, total)
    np.testing.assert_allclose(out[:, :, 0, 0], expect, atol=1e-12)


def test_srd_pyramid_paths_agree_on_constant_input():
    srd = ShortRangeBranch(2).materialize(0)
    for _, p in srd.named_parameters():
        if p.value.ndim == 4:
            p.value = np.full_like(p.value, 0.3)
    x = np.full((1, 2, 24, 24), 1.7, np.float32)
    srd(T.const(x), False)
    a, b = srd.last["pool20"].value, srd.last["pool12"].value
    # zero padding of each pooled grid only touches a thin border after upsampling
    np.testing.assert_allclose(a[..., 3:-3, 3:-3], b[..., 3:-3, 3:-3], atol=1e-5)


def test_srd_pyramid_path_matches_composed_oracles():
    srd = randomize(ShortRangeBranch(3), 14)
    x = np.random.default_rng(15).standard_normal((1, 3, 24, 24))
    srd(T.const(x), False)
    for b, conv in zip(srd.bins, srd.pool_convs):
        pooled = oracles.bin_mean(x, b, b)
        conv_out = oracles.conv2d(pooled, conv["weight"].value, None, 1, 1, 1)
        act = np.maximum(bn_eval(conv_out, conv, (1, -1, 1, 1)), 0)
        np.testing.assert_allclose(srd.last[f"pool{b}"].value, oracles.bilinear(act, 24, 24), atol=1e-4)


def test_bins_clamp_to_small_inputs():
    assert [(g.bins_h, g.bins_w) for g in clamp_bins(8, 30)] == [(8, 20), (8, 12)]


# ---------------------------------------------------------------- mixed pooling module

@pytest.mark.parametrize("train", [True, False])
@pytest.mark.parametrize("branches", ["both", "srd", "lrd"])
def test_zero_expansion_mpm_is_identity(train, branches):
    mpm = MixedPoolingModule(8, branches).materialize(0)
    mpm.expand["weight"].value = np.zeros_like(mpm.expand["weight"].value)
    x = np.random.default_rng(0).standard_normal((2, 8, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(mpm(T.const(x), train).value, x)


@pytest.mark.parametrize("hw", [(8, 8), (6, 11), (13, 5), (1, 1)])
def test_mpm_preserves_shape(hw):
    mpm = MixedPoolingModule(8).materialize(1)
    x = T.const(np.random.default_rng(1).standard_normal((2, 8) + hw).astype(np.float32))
    assert mpm(x, False).shape == x.shape


def test_mpm_structure():
    mpm = MixedPoolingModule(16)
    assert mpm.bottleneck == 4
    assert mpm.reduce_srd.cout == mpm.reduce_lrd.cout == 4
    assert mpm.expand.cin == 8 and mpm.expand.cout == 16
    with pytest.raises(ConfigError):
        MixedPoolingModule(10)


def test_param_counts():
    assert param_count(Conv(4, 8, 1)) == 40
    one = param_count(MixedPoolingModule(1024))
    assert abs(one - 4.4e6) <= 0.05 * 4.4e6
    assert abs(2 * one - 8.8e6) <= 0.05 * 8.8e6
