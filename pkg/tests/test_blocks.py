import numpy as np
import pytest

from latentchain.blocks import (
    MultiHeadAttention, RMSNorm, RotaryTable, TransformerBlock, causal_mask,
    l2_normalize, unit_sphere_projection,
)
from latentchain.errors import ContractError, DegenerateInputError
from latentchain.tensor import Tensor

from gradcheck import check_gradients


def rng():
    return np.random.default_rng(0)


def test_rms_norm_unit_gain_formula():
    norm = RMSNorm(2, "n")
    x = np.array([[3.0, 4.0]])
    out = norm(Tensor(x)).data
    expected = x / np.sqrt(12.5 + 1e-6)
    assert np.allclose(out, expected, atol=1e-6)


def test_l2_normalize_rows():
    out = l2_normalize(Tensor([[3.0, 4.0]])).data
    assert np.allclose(out, [[0.6, 0.8]], atol=1e-6)


def test_unit_sphere_rejects_zero():
    with pytest.raises(DegenerateInputError):
        unit_sphere_projection(Tensor(np.zeros((1, 4))))


def test_rotary_preserves_norm_and_relative_angles():
    table = RotaryTable(8, 16)
    g = rng()
    x = Tensor(g.standard_normal((1, 1, 5, 8)).astype(np.float32))
    rotated = table.apply(x, 5).data
    assert np.allclose(np.linalg.norm(rotated, axis=-1),
                       np.linalg.norm(x.data, axis=-1), atol=1e-5)
    # position 0 is the identity rotation
    assert np.allclose(rotated[..., 0, :], x.data[..., 0, :], atol=1e-6)


def test_rotary_requires_even_head_dim():
    with pytest.raises(ContractError):
        RotaryTable(7, 16)


def test_causal_mask_upper_triangle():
    m = causal_mask(4)
    assert np.all(m[np.triu_indices(4, k=1)] < -1e8)
    assert np.all(m[np.tril_indices(4)] == 0)


def attention(latent=8, attn=8, heads=2, ctx=16, rope=True, seed=0):
    table = RotaryTable(attn // heads, ctx) if rope else None
    return MultiHeadAttention(latent, attn, heads, table,
                              np.random.default_rng(seed), "attn")


def test_attention_single_position_reads_itself():
    mha = attention()
    x = Tensor(rng().standard_normal((1, 1, 8)).astype(np.float32))
    w = mha.attention_weights(x, causal=True)
    assert np.allclose(w, 1.0)


def test_qk_scale_invariance_bitwise():
    # rescaling the q/k projections by powers of two leaves weights bit-identical
    mha = attention()
    x = Tensor(rng().standard_normal((2, 6, 8)).astype(np.float32))
    base = mha.attention_weights(x, causal=True)
    for c in (2.0, 0.25, 8.0):
        mha.wq.data *= c
        mha.wk.data *= c
        scaled = mha.attention_weights(x, causal=True)
        mha.wq.data /= c
        mha.wk.data /= c
        assert np.array_equal(base, scaled)


def test_qk_scale_invariance_close_for_any_positive_scale():
    mha = attention()
    x = Tensor(rng().standard_normal((1, 5, 8)).astype(np.float32))
    base = mha.attention_weights(x, causal=True)
    mha.wq.data *= 3.7
    mha.wk.data *= 0.3
    scaled = mha.attention_weights(x, causal=True)
    assert np.allclose(base, scaled, atol=1e-5)


def test_attention_two_position_matches_reference():
    """Hand-rolled per-head reference computation."""
    mha = attention(latent=4, attn=4, heads=2, rope=False, seed=3)
    g = np.random.default_rng(5)
    x64 = g.standard_normal((1, 2, 4))
    x = Tensor(x64.astype(np.float64))

    def ref():
        q = x64 @ mha.wq.data.astype(np.float64)
        k = x64 @ mha.wk.data.astype(np.float64)
        v = x64 @ mha.wv.data.astype(np.float64)
        hd = 2
        outs = []
        for h in range(2):
            qs = q[0, :, h * hd:(h + 1) * hd]
            ks = k[0, :, h * hd:(h + 1) * hd]
            vs = v[0, :, h * hd:(h + 1) * hd]
            qs = qs / np.linalg.norm(qs, axis=-1, keepdims=True)
            ks = ks / np.linalg.norm(ks, axis=-1, keepdims=True)
            logits = qs @ ks.T * np.sqrt(hd)
            logits[0, 1] = -1e9
            w = np.exp(logits - logits.max(-1, keepdims=True))
            w = w / w.sum(-1, keepdims=True)
            outs.append(w @ vs)
        merged = np.concatenate(outs, axis=-1)
        return merged @ mha.wo.data.astype(np.float64)

    out = mha(x, causal=True).data
    assert np.max(np.abs(out - ref())) < 1e-10


def test_causal_prefix_property_bitwise():
    block = TransformerBlock(8, 8, 16, 2, RotaryTable(4, 16),
                             np.random.default_rng(1), "b")
    g = rng()
    x = g.standard_normal((1, 6, 8)).astype(np.float32)
    y1 = block(Tensor(x), causal=True).data
    x2 = x.copy()
    x2[0, 4:, :] = g.standard_normal((2, 8))
    y2 = block(Tensor(x2), causal=True).data
    assert np.array_equal(y1[0, :4], y2[0, :4])


def test_cross_attention_requires_memory():
    block = TransformerBlock(8, 8, 16, 2, None, np.random.default_rng(1), "b",
                             cross_attention=True)
    with pytest.raises(ContractError):
        block(Tensor(np.zeros((1, 2, 8), dtype=np.float32)), causal=True)


def test_block_gradients_flow_end_to_end():
    block = TransformerBlock(6, 6, 12, 2, None, np.random.default_rng(2), "b")
    g = rng()
    x = g.standard_normal((2, 3, 6))

    def fn(ts):
        return (block(ts[0], causal=True) ** 2.0).sum()

    # float64 pass through the block requires parameters in float64
    for p in block.params():
        p.data = p.data.astype(np.float64)
    check_gradients(fn, [x], g, trials=4)


def test_block_parameter_names_unique():
    block = TransformerBlock(8, 8, 16, 2, None, np.random.default_rng(0), "blk",
                             cross_attention=True)
    names = [p.name for p in block.params()]
    assert len(names) == len(set(names))
