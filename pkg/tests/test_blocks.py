import numpy as np
import pytest

from rc3d import ops
from rc3d.blocks import (DeconvBlock, DOConv, P3DBlockA, RC3DBlock, SelfAttention2d, default_mid,
                         rc3d_mp_block, stack_pool, stack_pool_streams)
from rc3d.nn import Activation, ConvLayer
from rc3d.tensor import InvalidArgument, Tensor

ACT = Activation()


def weights_and_biases(module):
    w = sum(p.size for n, p in module.named_parameters() if n.endswith("weight"))
    b = sum(p.size for n, p in module.named_parameters() if n.endswith("bias"))
    return w, b


def kill_terminal(block):
    block.terminal().weight.data[...] = 0.0
    block.terminal().bias.data[...] = 0.0


# ---------------------------------------------------------------- parameter counts

def test_p3d_block_a_count():
    block = P3DBlockA(64, 64, np.random.default_rng(0), mid=64)
    assert weights_and_biases(block) == (64 * 64 + 64 * 64 * 9 + 64 * 64 * 3 + 64 * 64, 256)
    assert weights_and_biases(block)[0] == 57_344


def test_rc3d_block_count_is_compact():
    block = RC3DBlock(64, 64, np.random.default_rng(0), c_mid=16)
    weights, _ = weights_and_biases(block)
    assert weights == 64 * 16 + 16 * 16 * 27 + 16 * 64 == 8_960
    assert weights < 2 * 64 * 64 * 27 == 221_184


def test_default_bottleneck_width():
    assert default_mid(64) == 16 and default_mid(3) == 1
    assert RC3DBlock(8, 64, np.random.default_rng(0)).c_mid == 16


def test_resize_path_only_when_channels_change():
    rng = np.random.default_rng(0)
    assert not hasattr(RC3DBlock(8, 8, rng), "resize")
    assert RC3DBlock(4, 8, rng).resize.weight.shape == (8, 4, 1, 1, 1)
    assert P3DBlockA(4, 8, rng).resize.weight.shape == (8, 4, 1, 1, 1)


def test_invalid_channels():
    with pytest.raises(InvalidArgument):
        RC3DBlock(8, 8, np.random.default_rng(0), c_mid=0)
    with pytest.raises(InvalidArgument):
        P3DBlockA(0, 8, np.random.default_rng(0))


# ---------------------------------------------------------------- extents and dead branches

@pytest.mark.parametrize("ext", [(1, 1, 1), (3, 5, 4), (2, 8, 8)])
def test_residual_blocks_keep_extents(ext, rng):
    x = Tensor(rng.standard_normal((2, 4) + ext))
    assert RC3DBlock(4, 6, rng)(x).shape == (2, 6) + ext
    assert P3DBlockA(4, 6, rng)(x).shape == (2, 6) + ext


def test_mp_block_pools_space_only(rng):
    for t in (1, 3, 5):
        x = Tensor(rng.standard_normal((1, 4, t, 8, 6)))
        assert rc3d_mp_block(4, 8, rng)(x).shape == (1, 8, t, 4, 3)


@pytest.mark.parametrize("make", [lambda r: P3DBlockA(5, 5, r), lambda r: RC3DBlock(5, 5, r)])
def test_dead_branch_is_activated_identity(make, rng):
    block = make(rng)
    kill_terminal(block)
    x = Tensor(rng.standard_normal((2, 5, 3, 4, 4)))
    np.testing.assert_allclose(block(x).data, ACT(x).data, rtol=1e-6, atol=1e-7)


def test_dead_branch_with_resize_is_activated_resized_identity(rng):
    block = RC3DBlock(3, 6, rng)
    kill_terminal(block)
    x = Tensor(rng.standard_normal((1, 3, 3, 4, 4)))
    np.testing.assert_allclose(block(x).data, ACT(block.resize(x)).data, rtol=1e-6, atol=1e-7)


def test_dead_mp_block_preserves_constant(rng):
    block = rc3d_mp_block(4, 4, rng)
    kill_terminal(block)
    out = block(Tensor(np.full((1, 4, 3, 8, 8), 0.6))).data
    assert out.shape == (1, 4, 3, 4, 4)
    np.testing.assert_allclose(out, 0.6 - 0.1, rtol=1e-6)


# ---------------------------------------------------------------- StackPool

def test_stack_pool_constant_and_values(rng):
    out = stack_pool(Tensor(np.full((2, 3, 2, 4, 4), 1.25))).data
    assert out.shape == (2, 6, 1, 1, 1)
    np.testing.assert_allclose(out, 1.25)
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 1, 3)
    np.testing.assert_allclose(stack_pool(Tensor(x)).data.reshape(-1), [3.0, 2.0])


def test_stack_pool_max_half_dominates(rng):
    x = rng.standard_normal((3, 7, 2, 5, 5))
    out = stack_pool(Tensor(x)).data
    assert np.all(out[:, :7] >= out[:, 7:])


def test_stack_pool_streams_matches_concat_when_extents_agree(rng):
    a = Tensor(rng.standard_normal((2, 3, 2, 4, 4)))
    b = Tensor(rng.standard_normal((2, 5, 2, 4, 4)))
    joined = stack_pool(ops.concat([a, b], axis=1)).data
    np.testing.assert_array_equal(stack_pool_streams([a, b]).data, joined)
    c = Tensor(rng.standard_normal((2, 2, 1, 4, 4)))
    assert stack_pool_streams([a, c]).shape == (2, 10, 1, 1, 1)


# ---------------------------------------------------------------- self-attention

def test_attention_is_identity_at_init(rng):
    att = SelfAttention2d(16, rng)
    x = Tensor(rng.standard_normal((2, 16, 5, 6)))
    out, attn = att(x, return_attention=True)
    assert np.array_equal(out.data, x.data)
    assert attn.shape == (2, 30, 30)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
    assert att.query.weight.shape[0] == 2 and att.value.weight.shape[0] == 16


def test_attention_gamma_mixes_values(rng):
    att = SelfAttention2d(8, rng)
    att.gamma.data[...] = 0.5
    x = Tensor(rng.standard_normal((1, 8, 3, 3)))
    assert not np.allclose(att(x).data, x.data)


# ---------------------------------------------------------------- deconv block

@pytest.mark.parametrize("size,skip", [((4, 4), (8, 8)), ((3, 5), (7, 11)), ((2, 2), (4, 4))])
def test_deconv_output_matches_skip_extents(size, skip, rng):
    block = DeconvBlock(8, 3, 6, rng, with_attention=True)
    x = Tensor(rng.standard_normal((1, 8) + size))
    s = Tensor(rng.standard_normal((1, 3) + skip))
    assert block(x, s).shape == (1, 6) + skip


def test_deconv_rejects_small_skip(rng):
    block = DeconvBlock(8, 3, 6, rng)
    with pytest.raises(InvalidArgument):
        block(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 3, 6, 8))))


def test_deconv_constant_inputs_give_constant_output(rng):
    block = DeconvBlock(8, 3, 6, rng, with_attention=True)
    x = Tensor(np.full((1, 8, 4, 4), 0.4))
    skip = Tensor(np.full((1, 3, 8, 8), -0.2))
    up = block.upsample(x, (8, 8)).data
    np.testing.assert_allclose(up, up[:, :, :1, :1] * np.ones_like(up), rtol=1e-5)
    out = block(x, skip, pre_attention=True).data[:, :, 1:-1, 1:-1]
    np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------- DOConv

def test_doconv_eval_is_deterministic(rng):
    block = DOConv(3, 4, rng, p=0.7).eval()
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    assert np.array_equal(block(x).data, block(x).data)


def test_doconv_p0_training_equals_eval(rng):
    block = DOConv(3, 4, rng, p=0.0)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    train_out = block(x, rng).data
    assert np.array_equal(train_out, block.eval()(x).data)


def test_doconv_drops_channels_at_rate_p():
    block = DOConv(2000, 1, np.random.default_rng(0), p=0.3, kernel=1)
    block.conv.weight.data[...] = 0.0
    block.conv.weight.data[0, :, 0, 0] = np.arange(1, 2001)
    x = Tensor(np.ones((1, 2000, 1, 1)))
    rng = np.random.default_rng(1)
    keep = ops.dropout2d(x, 0.3, True, np.random.default_rng(1)).data[0, :, 0, 0] != 0
    assert abs(keep.mean() - 0.7) < 0.03
    expected = np.dot(np.arange(1, 2001), keep) / 0.7
    assert block(x, rng).data.item() == pytest.approx(expected - 0.1, rel=1e-5)


def test_conv_layer_biases_start_at_zero(rng):
    assert np.all(ConvLayer(3, 4, 3, rng).bias.data == 0)
