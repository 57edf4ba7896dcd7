import numpy as np
import pytest

from conftest import random_gcblock, randomize_unit, rel_err
from gcnet.blocks import (
    DAPPM_POOLS,
    bilateral_fuse,
    gcblock_forward,
    make_fusion_d2s,
    make_fusion_s2d,
    make_gcblock,
    make_pyramid_pooling,
    make_seghead,
    pyramid_pool_forward,
    seghead_forward,
)
from gcnet.reparam import GCBlock, ReparamError, contract_gcblock, embed_1x1_in_3x3, identity_1x1
from gcnet.tensor import (
    BatchNormStats,
    ShapeError,
    avg_pool,
    batchnorm_forward,
    bilinear_resize,
    conv2d,
    relu,
)


def unit_ref(u, x, act=False):
    y = conv2d(x, u.conv)
    if u.bn is not None:
        y = batchnorm_forward(y, u.bn)
    return relu(y) if act else y


# -- GCBlock ----------------------------------------------------------------------

def test_inference_identity_block(rng):
    b = GCBlock(3, 3, 1, fused=embed_1x1_in_3x3(identity_1x1(3)))
    x = np.abs(rng.normal(size=(1, 3, 5, 6)))
    np.testing.assert_array_equal(gcblock_forward(b, x), x)


def test_stride2_shape(rng):
    b = make_gcblock(4, 6, 2, 2, rng)
    assert gcblock_forward(b, rng.normal(size=(1, 4, 32, 64))).shape == (1, 6, 16, 32)


def test_block_paths_structure(rng):
    b = make_gcblock(4, 4, 1, 3, rng)
    assert [p.kind for p in b.paths] == ["3x3_1x1"] * 3 + ["1x1_1x1", "residual"]
    b2 = make_gcblock(4, 8, 1, 1, rng)
    assert not b2.has_residual  # channel change forbids the identity path
    one = b.paths[3]
    assert one.convs[0].conv.stride == 1 and one.convs[1].conv.stride == 1
    s2 = make_gcblock(4, 4, 2, 1, rng).paths[1]
    assert s2.convs[0].conv.stride == 2 and s2.convs[1].conv.stride == 1


def test_block_matches_sum_of_paths(rng):
    b = random_gcblock(rng, 5, 5, 1, 2)
    x = rng.normal(size=(2, 5, 7, 7))
    total = 0
    for p in b.paths:
        if p.bn is not None:
            total = total + batchnorm_forward(x, p.bn)
        else:
            total = total + unit_ref(p.convs[1], unit_ref(p.convs[0], x))
    assert rel_err(gcblock_forward(b, x), relu(total)) <= 1e-12


def test_block_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        gcblock_forward(make_gcblock(4, 4, 1, 1, rng), rng.normal(size=(1, 3, 5, 5)))


def test_block_train_mode_updates_stats(rng):
    b = make_gcblock(3, 3, 1, 1, rng)
    before = b.paths[0].convs[0].bn.mean.copy()
    gcblock_forward(b, rng.normal(size=(2, 3, 4, 4)), mode="train")
    assert not np.array_equal(before, b.paths[0].convs[0].bn.mean)


def test_block_constructor_errors(rng):
    with pytest.raises(ValueError):
        make_gcblock(4, 4, 1, 0, rng)
    with pytest.raises(ValueError):
        make_gcblock(4, 4, 3, 1, rng)


def test_eval_forward_bit_reproducible(rng):
    b = random_gcblock(rng, 4, 4, 1, 2)
    x = rng.normal(size=(1, 4, 6, 6))
    assert gcblock_forward(b, x).tobytes() == gcblock_forward(b, x).tobytes()


# -- bilateral fusion ---------------------------------------------------------------

def _fusion(rng, C=4, factor=2, random=True):
    c_sem = 4 * C if factor == 2 else 8 * C
    s2d, d2s = make_fusion_s2d(c_sem, 2 * C, rng), make_fusion_d2s(2 * C, c_sem, factor, rng)
    if random:
        for u in s2d.convs + d2s.convs:
            randomize_unit(rng, u)
    return s2d, d2s, c_sem


def test_fusion_zero_weights(rng):
    s2d, d2s, c_sem = _fusion(rng)
    for u in s2d.convs + d2s.convs:
        u.conv.weight[:] = 0
        u.bn = BatchNormStats.identity(u.bn.channels)
    sem, det = rng.normal(size=(1, c_sem, 4, 8)), rng.normal(size=(1, 8, 8, 16))
    s2, d2 = bilateral_fuse(sem, det, s2d, d2s)
    np.testing.assert_array_equal(s2, relu(sem))
    np.testing.assert_array_equal(d2, relu(det))


def test_fusion_shapes_gcnet_s(rng):
    C, H, W = 32, 128, 256
    s2d, d2s = make_fusion_s2d(4 * C, 2 * C, rng), make_fusion_d2s(2 * C, 4 * C, 2, rng)
    sem = rng.normal(size=(1, 4 * C, H // 16, W // 16))
    det = rng.normal(size=(1, 2 * C, H // 8, W // 8))
    s2, d2 = bilateral_fuse(sem, det, s2d, d2s)
    assert s2.shape == (1, 128, 8, 16) and d2.shape == (1, 64, 16, 32)


@pytest.mark.parametrize("factor", [2, 4])
def test_fusion_matches_oracle(rng, factor):
    s2d, d2s, c_sem = _fusion(rng, factor=factor)
    sem = rng.normal(size=(2, c_sem, 2, 4))
    det = rng.normal(size=(2, 8, 2 * factor, 4 * factor))
    up = bilinear_resize(unit_ref(s2d.convs[0], sem), *det.shape[2:])
    down = det
    for i, u in enumerate(d2s.convs):
        down = unit_ref(u, down, act=i < len(d2s.convs) - 1)
    s2, d2 = bilateral_fuse(sem, det, s2d, d2s)
    assert rel_err(s2, relu(sem + down)) <= 1e-11
    assert rel_err(d2, relu(det + up)) <= 1e-11


def test_fusion_dim_mismatch(rng):
    s2d, d2s, c_sem = _fusion(rng, factor=2)
    with pytest.raises(ShapeError):
        bilateral_fuse(rng.normal(size=(1, c_sem, 2, 4)), rng.normal(size=(1, 8, 8, 16)), s2d, d2s)


def test_fusion_bad_factor(rng):
    with pytest.raises(ValueError):
        make_fusion_d2s(8, 16, 3, rng)


# -- pyramid pooling -----------------------------------------------------------------

def _ppm(rng, kind="dappm", c_in=32, cb=8, c_out=16, random=True):
    p = make_pyramid_pooling(c_in, cb, c_out, kind, rng)
    if random:
        for u in p.scales + p.process + [p.compression, p.shortcut]:
            randomize_unit(rng, u)
    return p


@pytest.mark.parametrize("kind", ["dappm", "simple"])
def test_ppm_shape(rng, kind):
    p = _ppm(rng, kind)
    assert pyramid_pool_forward(p, rng.normal(size=(2, 32, 4, 8))).shape == (2, 16, 4, 8)


def _identity_like(p):
    for u in p.scales + p.process + [p.compression, p.shortcut]:
        u.conv.weight[:] = 0
        k = min(u.conv.in_channels, u.conv.out_channels)
        u.conv.weight[np.arange(k), np.arange(k), u.conv.kernel_size // 2, u.conv.kernel_size // 2] = 1


def test_ppm_constant_input_simple(rng):
    p = make_pyramid_pooling(8, 4, 8, "simple", rng)
    _identity_like(p)
    y = pyramid_pool_forward(p, np.full((1, 8, 6, 6), 0.5))
    assert np.all(np.isfinite(y))
    assert np.all(y == y[:, :, :1, :1])


def test_ppm_constant_input_dappm(rng):
    # padded pooling windows count zeros, so borders differ; values are covered by the oracle test
    p = make_pyramid_pooling(8, 4, 8, "dappm", rng)
    _identity_like(p)
    y = pyramid_pool_forward(p, np.full((1, 8, 8, 8), 0.5))
    assert np.all(np.isfinite(y))


def test_ppm_dappm_matches_oracle(rng):
    p = _ppm(rng)
    x = rng.normal(size=(1, 32, 4, 8))
    h, w = x.shape[2:]
    feats = [unit_ref(p.scales[0], x, act=True)]
    pooled = [avg_pool(x, k, s, pad) for k, s, pad in DAPPM_POOLS] + [x.mean(axis=(2, 3), keepdims=True)]
    for i, px in enumerate(pooled):
        br = bilinear_resize(unit_ref(p.scales[i + 1], px, act=True), h, w)
        feats.append(unit_ref(p.process[i], br + feats[-1], act=True))
    ref = unit_ref(p.compression, np.concatenate(feats, 1)) + unit_ref(p.shortcut, x)
    assert rel_err(pyramid_pool_forward(p, x), ref) <= 1e-10


def test_ppm_simple_matches_oracle(rng):
    p = _ppm(rng, "simple")
    x = rng.normal(size=(1, 32, 2, 4))
    g = unit_ref(p.scales[0], x.mean(axis=(2, 3), keepdims=True), act=True)
    ref = bilinear_resize(unit_ref(p.compression, g), 2, 4) + unit_ref(p.shortcut, x)
    assert rel_err(pyramid_pool_forward(p, x), ref) <= 1e-10


def test_ppm_errors(rng):
    with pytest.raises(ShapeError):
        pyramid_pool_forward(_ppm(rng), rng.normal(size=(1, 16, 2, 2)))
    with pytest.raises(ValueError):
        make_pyramid_pooling(8, 4, 8, "aspp", rng)


# -- segmentation head -------------------------------------------------------------------

def test_head_shape(rng):
    h = make_seghead(128, 64, 19, rng)
    assert seghead_forward(h, rng.normal(size=(1, 128, 64, 128))).shape == (1, 19, 64, 128)
    assert h.num_classes == 19


def test_head_zero_weights(rng):
    h = make_seghead(8, 4, 3, None)
    assert np.all(seghead_forward(h, rng.normal(size=(1, 8, 4, 4))) == 0)


def test_head_matches_oracle(rng):
    h = make_seghead(6, 5, 3, rng)
    randomize_unit(rng, h.conv3x3)
    h.conv1x1.bias[:] = rng.normal(size=3)
    x = rng.normal(size=(2, 6, 5, 7))
    ref = conv2d(unit_ref(h.conv3x3, x, act=True), h.conv1x1)
    assert rel_err(seghead_forward(h, x), ref) <= 1e-11


def test_head_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        seghead_forward(make_seghead(8, 4, 3, rng), rng.normal(size=(1, 7, 4, 4)))


def test_contracted_block_inside_composite(rng):
    blocks = [random_gcblock(rng, 6, 6, 1, 2) for _ in range(3)]
    x = rng.normal(size=(1, 6, 8, 8))
    a = b = x
    for blk in blocks:
        a = gcblock_forward(blk, a)
        b = gcblock_forward(contract_gcblock(blk), b)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_block_without_paths_rejected():
    with pytest.raises(ReparamError):
        gcblock_forward(GCBlock(2, 2, 1), np.zeros((1, 2, 3, 3)))
