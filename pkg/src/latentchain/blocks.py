"""Shared transformer machinery.

Every model in the package (reasoner, talkers, baselines) is assembled from
the same pre-norm residual block: RMS norm -> multi-head attention with
rotary positions and non-learnable QK normalization -> residual, then
RMS norm -> GELU feedforward -> residual. Decoder blocks optionally carry a
cross-attention sublayer reading an encoder memory.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DegenerateInputError
from .optim import Parameter
from .tensor import Tensor, rms_normalize, rotary_rotate, unit_normalize

INIT_STD = 0.02
_RMS_EPS = 1e-6
_QK_EPS = 1e-12
_MASK_FILL = -1e9


def init_weight(rng: np.random.Generator, shape, name: str, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(np.float32), name)


def l2_normalize(x: Tensor, eps: float = _QK_EPS) -> Tensor:
    """Scale rows of ``x`` to unit Euclidean norm along the last axis."""
    return unit_normalize(x, eps=eps)


class RMSNorm:
    """Root-mean-square normalization with a learnable gain."""

    def __init__(self, dim: int, name: str):
        self.gain = Parameter(np.ones(dim, dtype=np.float32), f"{name}.gain")

    def __call__(self, x: Tensor) -> Tensor:
        return rms_normalize(x, self.gain, eps=_RMS_EPS)

    def params(self):
        return [self.gain]


class RotaryTable:
    """Precomputed cos/sin tables for rotary position embeddings."""

    def __init__(self, head_dim: int, max_len: int, base: float = 10000.0):
        if head_dim % 2 != 0:
            raise ContractError(f"rotary head dim must be even, got {head_dim}")
        half = head_dim // 2
        inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
        angles = np.outer(np.arange(max_len, dtype=np.float64), inv_freq)
        self.cos = np.cos(angles).astype(np.float32)
        self.sin = np.sin(angles).astype(np.float32)

    def apply(self, x: Tensor, length: int) -> Tensor:
        """Rotate per-head vectors of shape (B, H, T, head_dim)."""
        return rotary_rotate(x, self.cos[:length][None, None],
                             self.sin[:length][None, None])


def causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length), dtype=np.float32)
    mask[np.triu_indices(length, k=1)] = _MASK_FILL
    return mask


class MultiHeadAttention:
    """Multi-head attention with per-head L2-normalized queries and keys.

    Query/key vectors are normalized after the rotary rotation, so the
    attention weights are invariant to any rescaling of the q/k projections.
    Logits use the fixed scale sqrt(head_dim); nothing in the normalization
    is learnable.
    """

    def __init__(self, latent_dim: int, attention_dim: int, head_count: int,
                 rope: RotaryTable | None, rng: np.random.Generator, name: str):
        if attention_dim % head_count != 0:
            raise ContractError(
                f"attention dim {attention_dim} not divisible by {head_count} heads"
            )
        self.head_count = head_count
        self.head_dim = attention_dim // head_count
        self.scale = math.sqrt(self.head_dim)
        self.rope = rope
        self.wq = init_weight(rng, (latent_dim, attention_dim), f"{name}.wq")
        self.wk = init_weight(rng, (latent_dim, attention_dim), f"{name}.wk")
        self.wv = init_weight(rng, (latent_dim, attention_dim), f"{name}.wv")
        self.wo = init_weight(rng, (attention_dim, latent_dim), f"{name}.wo")

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.head_count, self.head_dim).swapaxes(1, 2)

    def __call__(self, x: Tensor, causal: bool, memory: Tensor | None = None) -> Tensor:
        source = x if memory is None else memory
        q = self._split_heads(x @ self.wq)
        k = self._split_heads(source @ self.wk)
        v = self._split_heads(source @ self.wv)
        if self.rope is not None and memory is None:
            q = self.rope.apply(q, x.shape[1])
            k = self.rope.apply(k, x.shape[1])
        q = l2_normalize(q)
        k = l2_normalize(k)
        logits = (q @ k.swapaxes(-1, -2)) * self.scale
        mask = None
        if causal:
            if memory is not None:
                raise ContractError("causal masking is undefined for cross-attention")
            mask = causal_mask(x.shape[1])
        weights = logits.softmax(axis=-1, additive_mask=mask)
        ctx = weights @ v
        b, _, t, _ = ctx.shape
        merged = ctx.swapaxes(1, 2).reshape(b, t, self.head_count * self.head_dim)
        return merged @ self.wo

    def attention_weights(self, x: Tensor, causal: bool) -> np.ndarray:
        """Forward up to the softmax; used by normalization-invariance tests."""
        q = self._split_heads(x @ self.wq)
        k = self._split_heads(x @ self.wk)
        if self.rope is not None:
            q = self.rope.apply(q, x.shape[1])
            k = self.rope.apply(k, x.shape[1])
        q = l2_normalize(q)
        k = l2_normalize(k)
        logits = (q @ k.swapaxes(-1, -2)) * self.scale
        mask = causal_mask(x.shape[1]) if causal else None
        return logits.softmax(axis=-1, additive_mask=mask).data

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo]


class FeedForward:
    def __init__(self, latent_dim: int, ffn_dim: int, rng: np.random.Generator, name: str):
        self.w1 = init_weight(rng, (latent_dim, ffn_dim), f"{name}.w1")
        self.w2 = init_weight(rng, (ffn_dim, latent_dim), f"{name}.w2")

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w1).gelu() @ self.w2

    def params(self):
        return [self.w1, self.w2]


class TransformerBlock:
    """Pre-norm residual block, optionally with a cross-attention sublayer."""

    def __init__(self, latent_dim: int, attention_dim: int, ffn_dim: int,
                 head_count: int, rope: RotaryTable | None,
                 rng: np.random.Generator, name: str, cross_attention: bool = False):
        self.norm1 = RMSNorm(latent_dim, f"{name}.norm1")
        self.attn = MultiHeadAttention(latent_dim, attention_dim, head_count,
                                       rope, rng, f"{name}.attn")
        self.cross = None
        self.norm_cross = None
        if cross_attention:
            self.norm_cross = RMSNorm(latent_dim, f"{name}.norm_cross")
            self.cross = MultiHeadAttention(latent_dim, attention_dim, head_count,
                                            None, rng, f"{name}.cross")
        self.norm2 = RMSNorm(latent_dim, f"{name}.norm2")
        self.ffn = FeedForward(latent_dim, ffn_dim, rng, f"{name}.ffn")

    def __call__(self, x: Tensor, causal: bool, memory: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), causal=causal)
        if self.cross is not None:
            if memory is None:
                raise ContractError("cross-attention block called without memory")
            x = x + self.cross(self.norm_cross(x), causal=False, memory=memory)
        x = x + self.ffn(self.norm2(x))
        return x

    def params(self):
        out = self.norm1.params() + self.attn.params()
        if self.cross is not None:
            out += self.norm_cross.params() + self.cross.params()
        out += self.norm2.params() + self.ffn.params()
        return out


def block_stack(count: int, latent_dim: int, attention_dim: int, ffn_dim: int,
                head_count: int, rope: RotaryTable | None, rng: np.random.Generator,
                prefix: str, cross_attention: bool = False) -> list[TransformerBlock]:
    return [
        TransformerBlock(latent_dim, attention_dim, ffn_dim, head_count, rope,
                         rng, f"{prefix}.{i}", cross_attention=cross_attention)
        for i in range(count)
    ]


def unit_sphere_projection(x: Tensor) -> Tensor:
    """Project onto the unit hypersphere; rejects (near-)zero vectors."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(norms < 1e-8):
        raise DegenerateInputError("cannot L2-normalize a zero vector")
    return unit_normalize(x)
