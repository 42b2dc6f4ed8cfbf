"""KV-cached inference fast path.

Plain-numpy re-implementation of the causal block stack for generation
loops: the prompt is encoded once, then each new position attends cached
keys/values instead of re-running the full prefix. Used only under
inference (no gradients); training and teacher-forced passes stay on the
autodiff path. Parity with the autodiff forward is covered by tests.
"""

from __future__ import annotations

import math

import numpy as np

_RMS_EPS = 1e-6
_QK_EPS = 1e-12
_MASK_FILL = -1e9


class KVCache:
    """Per-block key/value buffers for incremental decoding."""

    def __init__(self, n_blocks: int, batch: int, heads: int, capacity: int,
                 head_dim: int):
        shape = (n_blocks, batch, heads, capacity, head_dim)
        self.k = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.length = 0
        self.capacity = capacity


def _rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + _RMS_EPS)
    return x * inv * gain


def _unit(x: np.ndarray, eps: float = _QK_EPS) -> np.ndarray:
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * (x * x * x))))


def _heads(x: np.ndarray, head_count: int) -> np.ndarray:
    b, t, a = x.shape
    return x.reshape(b, t, head_count, a // head_count).swapaxes(1, 2)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def decode_blocks(blocks, x: np.ndarray, cache: KVCache, rope) -> np.ndarray:
    """Run the block stack over a new segment, extending the cache.

    ``x`` holds positions cache.length .. cache.length+t-1; earlier
    positions are attended through the cached keys/values.
    """
    t = x.shape[1]
    off = cache.length
    if off + t > cache.capacity:
        raise ValueError("decode cache capacity exceeded")
    cos = rope.cos[off:off + t][None, None] if rope is not None else None
    sin = rope.sin[off:off + t][None, None] if rope is not None else None
    seg_mask = None
    if t > 1:
        seg_mask = np.zeros((t, off + t), dtype=np.float32)
        cols = np.arange(off + t)[None, :]
        rows = np.arange(t)[:, None]
        seg_mask[cols > off + rows] = _MASK_FILL
    for bi, block in enumerate(blocks):
        h = _rms(x, block.norm1.gain.data)
        attn = block.attn
        q = _heads(h @ attn.wq.data, attn.head_count)
        k = _heads(h @ attn.wk.data, attn.head_count)
        v = _heads(h @ attn.wv.data, attn.head_count)
        if rope is not None:
            q = _rotate(q, cos, sin)
            k = _rotate(k, cos, sin)
        q = _unit(q)
        k = _unit(k)
        cache.k[bi, :, :, off:off + t] = k
        cache.v[bi, :, :, off:off + t] = v
        keys = cache.k[bi, :, :, :off + t]
        values = cache.v[bi, :, :, :off + t]
        logits = (q @ keys.swapaxes(-1, -2)) * attn.scale
        if seg_mask is not None:
            logits = logits + seg_mask
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        ctx = w @ values
        b, _, tt, hd = ctx.shape
        merged = ctx.swapaxes(1, 2).reshape(b, tt, attn.head_count * hd)
        x = x + merged @ attn.wo.data
        h2 = _rms(x, block.norm2.gain.data)
        x = x + _gelu(h2 @ block.ffn.w1.data) @ block.ffn.w2.data
    cache.length += t
    return x


def make_cache(model, batch: int, capacity: int) -> KVCache:
    cfg = model.config
    return KVCache(cfg.block_count, batch, cfg.head_count, capacity,
                   cfg.attention_dim // cfg.head_count)
