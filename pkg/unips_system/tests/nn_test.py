# unips_system/tests/nn_test.py

import numpy as np
import pytest

from unips_system.core.exceptions import CheckpointError, ConfigurationError, DimensionError
from unips_system.core.gradcheck import gradcheck
from unips_system.core.nn import (
    MLP,
    Conv3x3,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PoolingByAttention,
    TransformerBlock,
    multi_head_attention,
)
from unips_system.core.tensor import Tensor


def test_linear_shapes_and_dimension_check():
    layer = Linear(4, 3, np.random.default_rng(0))
    out = layer(Tensor(np.ones((2, 5, 4))))
    assert out.shape == (2, 5, 3)
    with pytest.raises(DimensionError):
        layer(Tensor(np.ones((2, 3))))


def test_layernorm_output_statistics():
    norm = LayerNorm(6)
    x = Tensor(np.random.default_rng(1).normal(3.0, 2.0, size=(4, 6)))
    out = norm(x).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-5)
    np.testing.assert_allclose(out.std(axis=-1), np.ones(4), atol=1e-3)


def test_attention_width_must_divide_heads():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        MLP([4], np.random.default_rng(0))


def test_self_attention_is_permutation_equivariant():
    block = TransformerBlock(8, 2, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(1, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    out = block(Tensor(x)).data
    permuted = block(Tensor(x[:, perm])).data
    np.testing.assert_allclose(permuted, out[:, perm], atol=1e-5)


def test_pooling_by_attention_is_permutation_invariant():
    pool = PoolingByAttention(8, 2, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(3, 6, 8))
    perm = np.random.default_rng(6).permutation(6)
    out = pool(Tensor(x)).data
    assert out.shape == (3, 8)
    np.testing.assert_allclose(pool(Tensor(x[:, perm])).data, out, atol=1e-5)


def test_cross_attention_uses_context_length():
    attention = MultiHeadAttention(8, 2, np.random.default_rng(7), attn_dim=4, kv_dim=6)
    out = attention(Tensor(np.ones((2, 3, 8))), Tensor(np.ones((2, 7, 6))))
    assert out.shape == (2, 3, 8)


def test_functional_attention_projects_values_from_their_own_tokens():
    attention = MultiHeadAttention(8, 2, np.random.default_rng(20))
    rng = np.random.default_rng(21)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    k = Tensor(rng.normal(size=(1, 4, 8)))
    v = Tensor(rng.normal(size=(1, 4, 8)))
    out = multi_head_attention(q, k, v, 2, attention).data
    assert out.shape == (1, 3, 8)
    np.testing.assert_array_equal(out, attention(q, k, v).data)
    assert not np.allclose(out, attention(q, k).data)
    shifted = multi_head_attention(q, k, Tensor(v.data + 1.0), 2, attention).data
    assert not np.allclose(shifted, out)
    with pytest.raises(ConfigurationError):
        multi_head_attention(q, k, v, 4, attention)
    with pytest.raises(DimensionError):
        attention(q, k, Tensor(rng.normal(size=(1, 5, 8))))


def test_single_token_attention_returns_the_projected_value():
    attention = MultiHeadAttention(8, 2, np.random.default_rng(22))
    rng = np.random.default_rng(23)
    q = Tensor(rng.normal(size=(1, 3, 8)))
    token = Tensor(rng.normal(size=(1, 1, 8)))
    out = multi_head_attention(q, token, token, 2, attention).data
    expected = attention.out(attention.value(token)).data
    np.testing.assert_allclose(out, np.repeat(expected, 3, axis=1), atol=1e-5)


def test_swapping_key_value_tokens_leaves_the_output_unchanged():
    attention = MultiHeadAttention(8, 2, np.random.default_rng(24))
    rng = np.random.default_rng(25)
    q = Tensor(rng.normal(size=(1, 2, 8)))
    token = rng.normal(size=(1, 1, 8))
    identical = Tensor(np.concatenate([token, token], axis=1))
    swapped = Tensor(identical.data[:, ::-1].copy())
    np.testing.assert_allclose(attention(q, identical).data, attention(q, swapped).data, atol=1e-6)

    pair = rng.normal(size=(1, 2, 8))
    forward = attention(q, Tensor(pair)).data
    reverse = attention(q, Tensor(pair[:, ::-1].copy())).data
    np.testing.assert_allclose(forward, reverse, atol=1e-5)


def test_attention_gradcheck_on_every_projection():
    attention = MultiHeadAttention(4, 2, np.random.default_rng(26))
    rng = np.random.default_rng(27)
    q = Tensor(rng.normal(size=(1, 3, 4)))
    k = Tensor(rng.normal(size=(1, 2, 4)))
    v = Tensor(rng.normal(size=(1, 2, 4)))
    target = Tensor(rng.normal(size=(1, 3, 4)))
    projections = {
        "query": attention.query.weight,
        "key": attention.key.weight,
        "value": attention.value.weight,
        "out": attention.out.weight,
    }
    result = gradcheck(lambda: ((multi_head_attention(q, k, v, 2, attention) - target) ** 2).mean(),
                       list(projections.values()), names=list(projections))
    assert result.tolerance == 1e-3
    assert set(result.per_tensor) == set(projections)
    assert result.passed, result.per_tensor


def test_conv3x3_same_padding_and_gradcheck():
    conv = Conv3x3(2, 3, np.random.default_rng(8))
    x = Tensor(np.random.default_rng(9).normal(size=(1, 4, 5, 2)))
    assert conv(x).shape == (1, 4, 5, 3)
    params = [p for _, p in conv.named_parameters()]
    assert gradcheck(lambda: (conv(x) ** 2).mean(), params).passed


def test_transformer_block_gradcheck():
    block = TransformerBlock(4, 2, np.random.default_rng(10))
    x = Tensor(np.random.default_rng(11).normal(size=(1, 3, 4)), requires_grad=True)
    target = Tensor(np.random.default_rng(12).normal(size=(1, 3, 4)))
    result = gradcheck(lambda: ((block(x) - target) ** 2).mean(), [x, block.attn.query.weight],
                       tolerance=1e-2)
    assert result.passed, result.per_tensor


def test_parameter_names_are_deterministic():
    first = [name for name, _ in TransformerBlock(4, 2, np.random.default_rng(0)).named_parameters()]
    second = [name for name, _ in TransformerBlock(4, 2, np.random.default_rng(1)).named_parameters()]
    assert first == second
    assert "attn.query.weight" in first
    assert "mlp.layers.0.weight" in first


def test_state_dict_round_trip_and_strictness():
    source = MLP([3, 5, 2], np.random.default_rng(13))
    target = MLP([3, 5, 2], np.random.default_rng(14))
    target.load_state_dict(source.state_dict())
    x = Tensor(np.ones((1, 3)))
    np.testing.assert_array_equal(target(x).data, source(x).data)

    state = source.state_dict()
    state.pop("layers.1.bias")
    with pytest.raises(CheckpointError):
        target.load_state_dict(state)

    wrong = MLP([3, 4, 2], np.random.default_rng(15)).state_dict()
    with pytest.raises(CheckpointError):
        target.load_state_dict(wrong)


def test_freeze_removes_parameters_from_training():
    block = TransformerBlock(4, 2, np.random.default_rng(16))
    assert block.trainable_parameters()
    block.freeze()
    assert block.trainable_parameters() == []
    assert block.num_parameters() > 0
