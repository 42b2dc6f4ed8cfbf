"""Token reconstruction models reading latent chains.

MonoTalker: decoder-only, no embedding table, no token inputs. It maps a
latent chain to one token per position in a single forward pass.

DualTalker: encoder over the latent chain plus an autoregressive decoder
with its own embedding table. The decoder cross-attends to the encoded
chain in every block, so the full chain guides every generated token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import RMSNorm, RotaryTable, block_stack, init_weight
from .errors import ConfigError, ContractError
from .optim import Parameter
from .reasoner import LatentChain
from .tensor import Tensor, embedding_lookup, no_grad


@dataclass
class MonoTalkerConfig:
    latent_dim: int
    attention_dim: int
    ffn_dim: int
    head_count: int
    decoder_count: int
    vocab_size: int
    context_length: int = 64

    def __post_init__(self):
        if self.attention_dim % self.head_count != 0:
            raise ConfigError("attention_dim must be divisible by head_count")


@dataclass
class DualTalkerConfig(MonoTalkerConfig):
    encoder_count: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.encoder_count < 1:
            raise ConfigError("encoder_count must be at least 1")


class MonoTalker:
    """One-pass reconstructor: latents in, tokens out, nothing else."""

    def __init__(self, config: MonoTalkerConfig, rng: np.random.Generator):
        self.config = config
        rope = RotaryTable(config.attention_dim // config.head_count,
                           config.context_length)
        self.blocks = block_stack(config.decoder_count, config.latent_dim,
                                  config.attention_dim, config.ffn_dim,
                                  config.head_count, rope, rng, "decoder")
        self.final_norm = RMSNorm(config.latent_dim, "final_norm")
        self.head = init_weight(rng, (config.latent_dim, config.vocab_size), "head")

    def params(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out += b.params()
        return out + self.final_norm.params() + [self.head]

    def all_params(self) -> list[Parameter]:
        return self.params()

    def forward_logits(self, latents: Tensor) -> Tensor:
        if latents.shape[-1] != self.config.latent_dim:
            raise ContractError(
                f"latent dim {latents.shape[-1]} does not match config "
                f"{self.config.latent_dim}"
            )
        x = latents
        for block in self.blocks:
            x = block(x, causal=True)
        return self.final_norm(x) @ self.head

    def mono_reconstruct(self, chain: LatentChain) -> np.ndarray:
        """One token per chain position, greedy, in a single forward pass."""
        if len(chain) == 0:
            raise ContractError("cannot reconstruct from an empty chain")
        return self.reconstruct_batch(chain.as_array()[None].astype(np.float32))[0]

    def reconstruct_batch(self, latents: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.forward_logits(Tensor(latents))
        return logits.data.argmax(axis=-1)


class DualTalker:
    """Encoder-decoder reconstructor with continuous latent guidance."""

    def __init__(self, config: DualTalkerConfig, rng: np.random.Generator):
        self.config = config
        head_dim = config.attention_dim // config.head_count
        enc_rope = RotaryTable(head_dim, config.context_length)
        dec_rope = RotaryTable(head_dim, config.context_length)
        self.embedding = init_weight(rng, (config.vocab_size, config.latent_dim),
                                     "embedding")
        self.encoders = block_stack(config.encoder_count, config.latent_dim,
                                    config.attention_dim, config.ffn_dim,
                                    config.head_count, enc_rope, rng, "encoder")
        self.decoders = block_stack(config.decoder_count, config.latent_dim,
                                    config.attention_dim, config.ffn_dim,
                                    config.head_count, dec_rope, rng, "decoder",
                                    cross_attention=True)
        self.final_norm = RMSNorm(config.latent_dim, "final_norm")
        self.head = init_weight(rng, (config.latent_dim, config.vocab_size), "head")

    def params(self) -> list[Parameter]:
        out = [self.embedding]
        for b in self.encoders + self.decoders:
            out += b.params()
        return out + self.final_norm.params() + [self.head]

    def all_params(self) -> list[Parameter]:
        return self.params()

    def dual_encode(self, latents) -> Tensor:
        """Bidirectional encoding of the latent chain (positions encoded)."""
        if isinstance(latents, LatentChain):
            if len(latents) == 0:
                raise ContractError("cannot encode an empty chain")
            latents = latents.as_array()[None].astype(np.float32)
        x = latents if isinstance(latents, Tensor) else Tensor(latents)
        for block in self.encoders:
            x = block(x, causal=False)
        return x

    def decode_logits(self, tokens: np.ndarray, memory: Tensor) -> Tensor:
        """Teacher-forced decoder logits over ``tokens`` given the memory."""
        tokens = np.atleast_2d(tokens)
        x = embedding_lookup(self.embedding, tokens)
        for block in self.decoders:
            x = block(x, causal=True, memory=memory)
        return self.final_norm(x) @ self.head

    def dual_reconstruct(self, chain, initial_tokens, length: int,
                         temperature: float | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
        """Greedy (or sampled) decoding conditioned on the fixed chain."""
        initial_tokens = np.asarray(initial_tokens, dtype=np.int64)
        if length < len(initial_tokens):
            raise ContractError("target length shorter than the initial tokens")
        if length > self.config.context_length:
            raise ContractError(
                f"length {length} exceeds decoder context {self.config.context_length}"
            )
        if length == len(initial_tokens):
            return initial_tokens.copy()
        generated = self.reconstruct_batch(
            chain.as_array()[None].astype(np.float32) if isinstance(chain, LatentChain)
            else np.asarray(chain, dtype=np.float32)[None],
            initial_tokens[None],
            length - len(initial_tokens),
            temperature=temperature,
            rng=rng,
        )
        return np.concatenate([initial_tokens, generated[0]])

    def reconstruct_batch(self, latents: np.ndarray, seeds: np.ndarray, n_new: int,
                          temperature: float | None = None,
                          rng: np.random.Generator | None = None) -> np.ndarray:
        """Batched decoding; the memory is computed once and held fixed."""
        seeds = np.atleast_2d(seeds)
        with no_grad():
            memory = self.dual_encode(Tensor(np.asarray(latents, dtype=np.float32)))
            tokens = seeds.copy()
            for _ in range(n_new):
                logits = self.decode_logits(tokens, memory).data[:, -1, :]
                if temperature is None:
                    nxt = logits.argmax(axis=-1)
                else:
                    scaled = logits / max(temperature, 1e-6)
                    scaled -= scaled.max(axis=-1, keepdims=True)
                    probs = np.exp(scaled)
                    probs /= probs.sum(axis=-1, keepdims=True)
                    if rng is None:
                        raise ContractError("sampling requires an rng")
                    nxt = np.array([rng.choice(len(p), p=p) for p in probs])
                tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        return tokens[:, seeds.shape[1]:]
