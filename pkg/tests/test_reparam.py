import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_bn, random_gcblock, random_kernel, rel_err
from gcnet.blocks import gcblock_forward
from gcnet.reparam import (
    PATH_1X1_1X1,
    PATH_3X3_1X1,
    PATH_RESIDUAL,
    GCBlock,
    PathSpec,
    ReparamError,
    contract_gcblock,
    embed_1x1_in_3x3,
    fuse_conv_bn,
    identity_1x1,
    merge_sequential,
    residual_to_conv3x3,
    sum_parallel,
)
from gcnet.tensor import BatchNormStats, ConvBN, ConvKernel, ShapeError, batchnorm_forward, conv2d, conv2d_direct, relu


# -- conv-BN folding -----------------------------------------------------------

def test_fuse_identity_bn(rng):
    k = random_kernel(rng, 3, 2, 3)
    f = fuse_conv_bn(k, BatchNormStats.identity(3))
    np.testing.assert_allclose(f.weight, k.weight, rtol=1e-15)
    np.testing.assert_allclose(f.bias, k.bias, rtol=1e-15)


def test_fuse_zero_gamma(rng):
    s = random_bn(rng, 3)
    s.gamma[:] = 0
    f = fuse_conv_bn(random_kernel(rng, 3, 2, 3), s)
    assert np.all(f.weight == 0)
    np.testing.assert_array_equal(f.bias, s.beta)


def test_fuse_matches_sequential(rng):
    k, s = random_kernel(rng, 4, 3, 3), random_bn(rng, 4)
    x = rng.normal(size=(1, 3, 6, 6))
    assert rel_err(conv2d(x, fuse_conv_bn(k, s)), batchnorm_forward(conv2d(x, k), s)) <= 1e-11


def test_fuse_preserves_geometry(rng):
    k = random_kernel(rng, 2, 2, 3, stride=2, padding=1)
    f = fuse_conv_bn(k, random_bn(rng, 2))
    assert (f.stride, f.padding) == (2, 1)


def test_fuse_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse_conv_bn(random_kernel(rng, 3, 2, 3), random_bn(rng, 4))


# -- sequential merge -----------------------------------------------------------

def test_merge_identity_second(rng):
    first = random_kernel(rng, 3, 2, 3)
    m = merge_sequential(first, identity_1x1(3))
    np.testing.assert_allclose(m.weight, first.weight, rtol=1e-15)
    np.testing.assert_allclose(m.bias, first.bias, rtol=1e-15)


def test_merge_scalar_linearity(rng):
    K = rng.normal(size=(1, 1, 3, 3))
    first = ConvKernel(K, np.array([0.7]), 1, 1)
    second = ConvKernel(np.full((1, 1, 1, 1), 2.0), np.array([1.0]))
    m = merge_sequential(first, second)
    np.testing.assert_allclose(m.weight, 2 * K, rtol=1e-15)
    np.testing.assert_allclose(m.bias, [2 * 0.7 + 1], rtol=1e-15)


def test_merge_matches_two_stage(rng):
    first, second = random_kernel(rng, 3, 2, 3), random_kernel(rng, 2, 3, 1)
    x = rng.normal(size=(1, 2, 7, 7))
    ref = conv2d(conv2d(x, first), second)
    assert rel_err(conv2d(x, merge_sequential(first, second)), ref) <= 1e-11


def test_merge_inherits_stride(rng):
    first, second = random_kernel(rng, 3, 2, 3, stride=2), random_kernel(rng, 4, 3, 1)
    x = rng.normal(size=(2, 2, 9, 8))
    m = merge_sequential(first, second)
    assert m.stride == 2
    assert rel_err(conv2d(x, m), conv2d(conv2d(x, first), second)) <= 1e-11


def test_merge_rejects_bad_second(rng):
    with pytest.raises(ReparamError):
        merge_sequential(random_kernel(rng, 3, 2, 3), random_kernel(rng, 2, 3, 3))
    with pytest.raises(ReparamError):
        merge_sequential(random_kernel(rng, 3, 2, 3), random_kernel(rng, 2, 3, 1, stride=2))
    with pytest.raises(ShapeError):
        merge_sequential(random_kernel(rng, 3, 2, 3), random_kernel(rng, 2, 4, 1))


def test_merge_rejects_attached_bn(rng):
    unit = ConvBN(random_kernel(rng, 3, 2, 3), random_bn(rng, 3))
    with pytest.raises(ReparamError, match="fold"):
        merge_sequential(unit, random_kernel(rng, 2, 3, 1))
    with pytest.raises(ReparamError, match="fold"):
        merge_sequential(random_kernel(rng, 3, 2, 3), ConvBN(random_kernel(rng, 2, 3, 1), random_bn(rng, 2)))


# -- embedding ------------------------------------------------------------------

def test_embed_layout(rng):
    k = random_kernel(rng, 3, 2, 1, padding=0)
    e = embed_1x1_in_3x3(k)
    assert e.weight.shape == (3, 2, 3, 3) and e.padding == 1
    np.testing.assert_array_equal(e.weight[:, :, 1, 1], k.weight[:, :, 0, 0])
    e.weight[:, :, 1, 1] = 0
    assert np.all(e.weight == 0)


@pytest.mark.parametrize("stride,h", [(1, 6), (2, 5), (2, 6), (2, 7)])
def test_embed_equivalence(rng, stride, h):
    k = random_kernel(rng, 3, 2, 1, stride=stride, padding=0)
    x = rng.normal(size=(1, 2, h, h + 1))
    e = embed_1x1_in_3x3(k)
    a, b = conv2d_direct(x, k), conv2d_direct(x, e)
    assert a.shape == b.shape
    np.testing.assert_allclose(b, a, rtol=1e-14, atol=1e-14)


def test_embed_scalar_identity(rng):
    e = embed_1x1_in_3x3(ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1)))
    x = rng.normal(size=(1, 1, 4, 5))
    np.testing.assert_array_equal(conv2d(x, e), x)


def test_embed_rejects_3x3(rng):
    with pytest.raises(ReparamError):
        embed_1x1_in_3x3(random_kernel(rng, 2, 2, 3))


# -- residual -------------------------------------------------------------------

def test_residual_identity(rng):
    x = rng.normal(size=(1, 4, 5, 5))
    k = residual_to_conv3x3(4, BatchNormStats.identity(4))
    np.testing.assert_allclose(conv2d(x, k), x, rtol=1e-14, atol=1e-15)


def test_residual_constant_shift(rng):
    s = BatchNormStats.identity(3)
    s.gamma[:] = 0
    s.beta[:] = 5
    y = conv2d(rng.normal(size=(1, 3, 4, 4)), residual_to_conv3x3(3, s))
    assert np.all(y == 5)


def test_residual_matches_bn(rng):
    s = random_bn(rng, 4)
    x = rng.normal(size=(1, 4, 6, 6))
    assert rel_err(conv2d(x, residual_to_conv3x3(4, s)), batchnorm_forward(x, s)) <= 1e-11


def test_residual_rejects_stride2(rng):
    with pytest.raises(ReparamError):
        residual_to_conv3x3(3, random_bn(rng, 3), stride=2)


# -- parallel sum ---------------------------------------------------------------

def test_sum_singleton(rng):
    k = random_kernel(rng, 2, 2, 3)
    s = sum_parallel([k])
    np.testing.assert_array_equal(s.weight, k.weight)
    np.testing.assert_array_equal(s.bias, k.bias)


def test_sum_doubles(rng):
    k = random_kernel(rng, 2, 3, 3)
    s = sum_parallel([k, k.copy()])
    np.testing.assert_array_equal(s.weight, 2 * k.weight)
    np.testing.assert_array_equal(s.bias, 2 * k.bias)


def test_sum_matches_per_path(rng):
    ks = [random_kernel(rng, 3, 2, 3) for _ in range(5)]
    x = rng.normal(size=(1, 2, 6, 7))
    ref = sum(conv2d(x, k) for k in ks)
    assert rel_err(conv2d(x, sum_parallel(ks)), ref) <= 1e-11


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 7), perm_seed=st.integers(0, 1000))
def test_sum_permutation_bit_identical(seed, n, perm_seed):
    r = np.random.default_rng(seed)
    ks = [random_kernel(r, 3, 2, 3) for _ in range(n)]
    perm = np.random.default_rng(perm_seed).permutation(n)
    a, b = sum_parallel(ks), sum_parallel([ks[i] for i in perm])
    assert a.weight.tobytes() == b.weight.tobytes()
    assert a.bias.tobytes() == b.bias.tobytes()


def test_sum_rejects_mixed_geometry(rng):
    with pytest.raises(ReparamError):
        sum_parallel([random_kernel(rng, 2, 2, 3), random_kernel(rng, 2, 2, 3, stride=2)])
    with pytest.raises(ReparamError):
        sum_parallel([random_kernel(rng, 2, 2, 3), random_kernel(rng, 2, 3, 3)])
    with pytest.raises(ReparamError):
        sum_parallel([])


# -- block contraction ------------------------------------------------------------

def _block_pair(block, x):
    return gcblock_forward(block, x), gcblock_forward(contract_gcblock(block), x)


def test_residual_only_block(rng):
    block = random_gcblock(rng, 4, 4, 1, 2)
    for p in block.paths:
        if p.kind == PATH_RESIDUAL:
            p.bn = BatchNormStats.identity(4)
        for u in p.convs:
            u.conv.weight[:] = 0
            u.conv.bias[:] = 0
            u.bn = BatchNormStats.identity(u.bn.channels)
    x = rng.normal(size=(1, 4, 5, 5))
    y = gcblock_forward(contract_gcblock(block), x)
    np.testing.assert_allclose(y, relu(x), atol=1e-12)


def test_stride2_block_n1(rng):
    block = random_gcblock(rng, 8, 8, 2, 1)
    assert not block.has_residual
    a, b = _block_pair(block, rng.normal(size=(1, 8, 16, 16)))
    assert a.shape == (1, 8, 8, 8)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_gcnet_s_style_block(rng):
    block = random_gcblock(rng, 16, 16, 1, 4)
    assert block.num_3x3_paths == 4 and block.has_residual
    a, b = _block_pair(block, rng.normal(size=(2, 16, 9, 9)))
    assert np.max(np.abs(a - b)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), c_in=st.integers(2, 16), c_out=st.integers(2, 16),
       n=st.integers(1, 5), stride=st.sampled_from([1, 2]), h=st.integers(4, 17), w=st.integers(4, 17))
def test_block_contraction_property(seed, c_in, c_out, n, stride, h, w):
    r = np.random.default_rng(seed)
    block = random_gcblock(r, c_in, c_out, stride, n)
    a, b = _block_pair(block, r.normal(size=(1, c_in, h, w)))
    assert np.max(np.abs(a - b)) <= 1e-9


def test_contraction_leaves_source_intact(rng):
    block = random_gcblock(rng, 4, 4, 1, 2)
    before = [u.conv.weight.copy() for p in block.paths for u in p.convs]
    fused = contract_gcblock(block)
    after = [u.conv.weight for p in block.paths for u in p.convs]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert fused.form == "inference" and block.form == "training"
    assert fused.fused.weight.shape == (4, 4, 3, 3)


def test_contraction_f32_dtype(rng):
    block = random_gcblock(rng, 6, 6, 1, 3, np.float32)
    fused = contract_gcblock(block)
    assert fused.fused.weight.dtype == np.float32
    x = rng.normal(size=(1, 6, 8, 8)).astype(np.float32)
    a, b = gcblock_forward(block, x), gcblock_forward(fused, x)
    assert rel_err(b, a) <= 1e-3


def test_contract_rejects_contracted(rng):
    fused = contract_gcblock(random_gcblock(rng, 4, 4, 1, 1))
    with pytest.raises(ReparamError):
        contract_gcblock(fused)


def test_contract_rejects_malformed(rng):
    block = random_gcblock(rng, 4, 4, 1, 2)
    block.paths = [p for p in block.paths if p.kind != PATH_1X1_1X1]
    with pytest.raises(ReparamError):
        contract_gcblock(block)
    block = random_gcblock(rng, 4, 4, 1, 2)
    block.paths = [p for p in block.paths if p.kind != PATH_RESIDUAL]
    with pytest.raises(ReparamError):
        contract_gcblock(block)
    block = random_gcblock(rng, 4, 4, 2, 2)
    block.paths.append(PathSpec(PATH_RESIDUAL, bn=BatchNormStats.identity(4), stride=2))
    with pytest.raises(ReparamError):
        contract_gcblock(block)
    block = random_gcblock(rng, 4, 4, 1, 2)
    block.paths[0].convs.reverse()
    with pytest.raises(ReparamError):
        contract_gcblock(block)
    with pytest.raises(ReparamError):
        contract_gcblock(GCBlock(4, 4, 1, [p for p in random_gcblock(rng, 4, 4, 1, 1).paths
                                            if p.kind != PATH_3X3_1X1]))
