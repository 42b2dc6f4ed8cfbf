"""Coupled baselines sharing the reasoner's block implementation.

``vanilla``: plain decoder-only LM with a tied head, trained and decoded
token by token.

``coconut``: same architecture, but generation first loops the final
block's hidden state (pre output-norm) back as the next input embedding for
a fixed number of latent steps, then switches to token steps conditioned on
the full mixed history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import RMSNorm, RotaryTable, block_stack, init_weight
from .decode import decode_blocks, make_cache
from .errors import CheckpointError, ConfigError, ContractError
from .optim import Parameter
from .tensor import Tensor, concat, embedding_lookup

VARIANTS = ("vanilla", "coconut")


@dataclass
class BaselineConfig:
    vocab_size: int
    latent_dim: int
    attention_dim: int
    ffn_dim: int
    head_count: int
    block_count: int
    context_length: int
    variant: str = "vanilla"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention_dim % self.head_count != 0:
            raise ConfigError("attention_dim must be divisible by head_count")


class BaselineLM:
    """Decoder-only LM; the coconut variant adds hidden-state loopback."""

    def __init__(self, config: BaselineConfig, rng: np.random.Generator):
        self.config = config
        self.rope = RotaryTable(config.attention_dim // config.head_count,
                                config.context_length)
        self.embedding = init_weight(rng, (config.vocab_size, config.latent_dim),
                                     "embedding.online")
        self.blocks = block_stack(config.block_count, config.latent_dim,
                                  config.attention_dim, config.ffn_dim,
                                  config.head_count, self.rope, rng, "blocks")
        self.final_norm = RMSNorm(config.latent_dim, "final_norm")

    def params(self) -> list[Parameter]:
        out = [self.embedding]
        for b in self.blocks:
            out += b.params()
        return out + self.final_norm.params()

    def all_params(self) -> list[Parameter]:
        return self.params()

    # -- forward -----------------------------------------------------------------

    def _run_blocks(self, x: Tensor) -> Tensor:
        if x.shape[1] > self.config.context_length:
            raise ContractError(
                f"sequence length {x.shape[1]} exceeds context {self.config.context_length}"
            )
        for block in self.blocks:
            x = block(x, causal=True)
        return x

    def hidden_states(self, inputs: Tensor) -> Tensor:
        """Final block output before any output normalization."""
        return self._run_blocks(inputs)

    def logits_from_hidden(self, hidden: Tensor) -> Tensor:
        return self.final_norm(hidden) @ self.embedding.swapaxes(0, 1)

    def head_logits_np(self, h: np.ndarray) -> np.ndarray:
        """Tied-head logits on the inference fast path (no gradients)."""
        inv = 1.0 / np.sqrt((h * h).mean(axis=-1, keepdims=True) + 1e-6)
        return (h * inv * self.final_norm.gain.data) @ self.embedding.data.T

    def forward_logits(self, tokens: np.ndarray) -> Tensor:
        tokens = np.atleast_2d(np.asarray(tokens))
        hidden = self.hidden_states(embedding_lookup(self.embedding, tokens))
        return self.logits_from_hidden(hidden)

    # -- generation ----------------------------------------------------------------

    def vanilla_generate(self, prompt, n_tokens: int) -> np.ndarray:
        """Greedy next-token generation conditioned on previously chosen tokens."""
        return self.generate_batch(np.asarray(prompt)[None], n_tokens)[0]

    def generate_batch(self, prompts: np.ndarray, n_tokens: int) -> np.ndarray:
        prompts = np.atleast_2d(prompts)
        b, p = prompts.shape
        if p + n_tokens > self.config.context_length:
            raise ContractError("generation would exceed the context length")
        out = np.zeros((b, 0), dtype=prompts.dtype)
        if n_tokens == 0:
            return out
        emb = self.embedding.data
        cache = make_cache(self, b, p + n_tokens)
        hidden = decode_blocks(self.blocks, emb[prompts], cache, self.rope)
        for step in range(n_tokens):
            logits = self.head_logits_np(hidden[:, -1, :])
            nxt = logits.argmax(axis=-1)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if step + 1 < n_tokens:
                hidden = decode_blocks(self.blocks, emb[nxt][:, None, :],
                                       cache, self.rope)
        return out

    def coconut_rollout(self, prompt, n_latent: int, n_tokens: int,
                        latent_hook=None) -> tuple[np.ndarray, np.ndarray]:
        """Loop hidden states for ``n_latent`` steps, then emit tokens.

        Latent steps never touch the LM head; token steps always do.
        Returns (latents, tokens) for a single prompt.
        """
        latents, tokens = self.coconut_batch(np.asarray(prompt)[None],
                                             n_latent, n_tokens, latent_hook)
        return latents[0], tokens[0]

    def coconut_batch(self, prompts: np.ndarray, n_latent: int, n_tokens: int,
                      latent_hook=None) -> tuple[np.ndarray, np.ndarray]:
        prompts = np.atleast_2d(prompts)
        b, p = prompts.shape
        if p + n_latent + n_tokens > self.config.context_length:
            raise ContractError("rollout would exceed the context length")
        emb = self.embedding.data
        latents = np.zeros((b, n_latent, self.config.latent_dim), dtype=np.float32)
        tokens = np.zeros((b, 0), dtype=prompts.dtype)
        cache = make_cache(self, b, p + n_latent + n_tokens)
        hidden = decode_blocks(self.blocks, emb[prompts], cache, self.rope)
        for step in range(n_latent):
            h = hidden[:, -1, :]
            if latent_hook is not None:
                h = np.asarray(latent_hook(step, h), dtype=np.float32)
            latents[:, step, :] = h
            hidden = decode_blocks(self.blocks, h[:, None, :], cache, self.rope)
        for step in range(n_tokens):
            logits = self.head_logits_np(hidden[:, -1, :])
            nxt = logits.argmax(axis=-1)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            if step + 1 < n_tokens:
                hidden = decode_blocks(self.blocks, emb[nxt][:, None, :],
                                       cache, self.rope)
        return latents, tokens

    def coconut_unrolled_logits(self, prefixes: np.ndarray, targets: np.ndarray,
                                n_latent: int) -> Tensor:
        """Differentiable unroll for training: latent loops, then teacher forcing.

        Returns logits of shape (B, n_targets, vocab) aligned with ``targets``.
        Gradients flow through the looped hidden states into every block.
        """
        prefixes = np.atleast_2d(prefixes)
        targets = np.atleast_2d(targets)
        n_targets = targets.shape[1]
        inputs = embedding_lookup(self.embedding, prefixes)
        for _ in range(n_latent):
            hidden = self.hidden_states(inputs)
            inputs = concat([inputs, hidden[:, -1:, :]], axis=1)
        if n_targets > 1:
            forced = embedding_lookup(self.embedding, targets[:, :-1])
            inputs = concat([inputs, forced], axis=1)
        hidden = self.hidden_states(inputs)
        tail = hidden[:, -n_targets:, :]
        return self.logits_from_hidden(tail)


def init_from_pretrained(checkpoint_params: dict, config: BaselineConfig,
                         n_blocks: int, rng: np.random.Generator) -> BaselineLM:
    """Build a baseline whose embedding and first ``n_blocks`` blocks come
    from a pretrained checkpoint; anything else keeps its fresh init."""
    model = BaselineLM(config, rng)
    copy_pretrained_params(checkpoint_params, model, n_blocks)
    return model


def copy_pretrained_params(checkpoint_params: dict, model, n_blocks: int):
    """Copy embedding, first ``n_blocks`` block tensors and the final norm."""
    src_embed = checkpoint_params.get("embedding.online")
    if src_embed is None:
        raise CheckpointError("checkpoint lacks an online embedding table")
    dst = {p.name: p for p in model.all_params()}
    dst_embed = dst.get("embedding.online", dst.get("embedding"))
    if src_embed.shape != dst_embed.data.shape:
        raise CheckpointError(
            f"vocab/dim mismatch: checkpoint embedding {src_embed.shape} vs "
            f"model {dst_embed.data.shape}"
        )
    src_block_count = 1 + max(
        (int(k.split(".")[1]) for k in checkpoint_params if k.startswith("blocks.")),
        default=-1,
    )
    if src_block_count < n_blocks:
        raise CheckpointError(
            f"checkpoint has {src_block_count} blocks, need {n_blocks}"
        )
    dst_embed.data[...] = src_embed
    for name, value in checkpoint_params.items():
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            if idx >= n_blocks:
                continue
        elif name not in ("final_norm.gain",):
            continue
        if name in dst:
            if dst[name].data.shape != value.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {value.shape} vs "
                    f"{dst[name].data.shape}"
                )
            dst[name].data[...] = value
