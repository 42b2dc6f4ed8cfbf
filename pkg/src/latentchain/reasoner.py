"""Latent-space reasoner.

A decoder-only transformer whose output is not a token distribution but a
normalized latent vector per position. Token ids enter through an online
embedding table; an EMA-maintained copy of that table (the target table)
supplies training targets and never receives gradients. After the blocks, a
hybrid normalization (RMS, then projection to the unit hypersphere when L2
mode is on) produces the prediction. During pretraining L2 mode is off and
the RMS-normalized hidden state is decoded by a tied LM head (the transpose
of the online embedding); during latent-prediction training and rollout L2
mode is on and predicted latents are looped back as inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import RMSNorm, RotaryTable, block_stack, init_weight, unit_sphere_projection
from .decode import decode_blocks, make_cache
from .errors import ConfigError, ContractError, ModeError, VocabularyError
from .optim import Parameter
from .tensor import Tensor, embedding_lookup, no_grad

ORIGIN_TOKEN = "embedded-token"
ORIGIN_LOOPED = "looped-prediction"


@dataclass
class ReasonerConfig:
    vocab_size: int
    latent_dim: int
    attention_dim: int
    ffn_dim: int
    head_count: int
    block_count: int
    context_length: int
    l2_enabled: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "latent_dim", "attention_dim", "ffn_dim",
                     "head_count", "block_count", "context_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.attention_dim % self.head_count != 0:
            raise ConfigError(
                f"attention_dim {self.attention_dim} not divisible by "
                f"head_count {self.head_count}"
            )
        if self.context_length < 2:
            raise ConfigError("context_length must be at least 2")


@dataclass
class LatentChain:
    """Ordered latent vectors produced by rollout, tagged by origin."""

    vectors: list = field(default_factory=list)
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.vectors)

    def append(self, vector: np.ndarray, origin: str):
        self.vectors.append(np.asarray(vector))
        self.origins.append(origin)

    def looped(self) -> np.ndarray:
        """The looped predictions as one (n, latent_dim) array."""
        rows = [v for v, o in zip(self.vectors, self.origins) if o == ORIGIN_LOOPED]
        if not rows:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack(rows)

    def as_array(self) -> np.ndarray:
        return np.stack(self.vectors)


class Reasoner:
    """Embedding pair + QK-normed causal blocks + hybrid output norm."""

    def __init__(self, config: ReasonerConfig, rng: np.random.Generator):
        self.config = config
        self.l2_enabled = config.l2_enabled
        self.rope = RotaryTable(config.attention_dim // config.head_count,
                                config.context_length)
        self.embedding = init_weight(rng, (config.vocab_size, config.latent_dim),
                                     "embedding.online")
        self.target_embedding = Parameter(self.embedding.data.copy(),
                                          "embedding.target")
        self.target_embedding.requires_grad = False
        self.blocks = block_stack(config.block_count, config.latent_dim,
                                  config.attention_dim, config.ffn_dim,
                                  config.head_count, self.rope, rng, "blocks")
        self.final_norm = RMSNorm(config.latent_dim, "final_norm")

    # -- parameters ------------------------------------------------------------

    def params(self) -> list[Parameter]:
        """Trainable parameters; the EMA target table is excluded."""
        out = [self.embedding]
        for b in self.blocks:
            out += b.params()
        out += self.final_norm.params()
        return out

    def all_params(self) -> list[Parameter]:
        return self.params() + [self.target_embedding]

    # -- embedding -------------------------------------------------------------

    def _check_ids(self, tokens: np.ndarray):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.config.vocab_size)][0]
            raise VocabularyError(
                f"token id {int(bad)} outside vocabulary of size {self.config.vocab_size}"
            )
        return tokens

    def embed(self, tokens, which: str = "online") -> Tensor:
        tokens = self._check_ids(tokens)
        if which == "online":
            return embedding_lookup(self.embedding, tokens)
        if which == "target":
            return embedding_lookup(self.target_embedding, tokens)
        raise ContractError(f"unknown embedding table {which!r}")

    # -- forward passes ----------------------------------------------------------

    def hybrid_norm(self, x: Tensor) -> Tensor:
        """RMS normalization, then unit-sphere projection when L2 mode is on."""
        y = self.final_norm(x)
        if self.l2_enabled:
            y = unit_sphere_projection(y)
        return y

    def _run_blocks(self, x: Tensor) -> Tensor:
        if x.shape[1] > self.config.context_length:
            raise ContractError(
                f"sequence length {x.shape[1]} exceeds context {self.config.context_length}"
            )
        for block in self.blocks:
            x = block(x, causal=True)
        return x

    def forward_pretrain(self, tokens: np.ndarray) -> Tensor:
        """Next-token logits via the tied head. Requires L2 mode off."""
        if self.l2_enabled:
            raise ModeError("pretraining forward requires L2 normalization disabled")
        tokens = np.atleast_2d(self._check_ids(tokens))
        h = self._run_blocks(self.embed(tokens))
        h = self.hybrid_norm(h)
        return h @ self.embedding.swapaxes(0, 1)

    def forward_sst(self, inputs: Tensor) -> Tensor:
        """Per-position next-step latent predictions, each unit norm.

        ``inputs`` is a (B, T, latent_dim) matrix mixing embedded tokens and
        looped predictions.
        """
        if not self.l2_enabled:
            raise ModeError("latent prediction requires L2 normalization enabled")
        return self.hybrid_norm(self._run_blocks(inputs))

    def forward_sst_tokens(self, tokens: np.ndarray) -> Tensor:
        tokens = np.atleast_2d(self._check_ids(tokens))
        return self.forward_sst(self.embed(tokens))

    # -- autoregressive latent rollout --------------------------------------------

    def rollout_latents(self, prompt_tokens, n_steps: int, step_hook=None) -> LatentChain:
        """Embed the prompt, then loop ``n_steps`` predicted latents back.

        The rollout never samples tokens: it is a pure function of the prompt
        ids and the parameters. ``step_hook(step, latent) -> latent`` lets an
        evaluation harness perturb each prediction before it is recorded and
        looped back.
        """
        prompt_tokens = np.asarray(prompt_tokens)
        if n_steps < 0:
            raise ContractError("n_steps must be non-negative")
        if len(prompt_tokens) + n_steps > self.config.context_length:
            raise ContractError(
                f"prompt {len(prompt_tokens)} + steps {n_steps} exceeds context "
                f"{self.config.context_length}"
            )
        looped = self.rollout_batch(prompt_tokens[None, :], n_steps, step_hook)
        chain = LatentChain()
        with no_grad():
            rows = self.embed(prompt_tokens, "online").data
        for row in rows:
            chain.append(row, ORIGIN_TOKEN)
        for step in range(n_steps):
            chain.append(looped[0, step], ORIGIN_LOOPED)
        return chain

    def rollout_batch(self, prompts: np.ndarray, n_steps: int, step_hook=None) -> np.ndarray:
        """Vectorized rollout over same-length prompts with KV caching.

        Returns the looped predictions as a (B, n_steps, latent_dim) array.
        """
        if not self.l2_enabled:
            raise ModeError("latent rollout requires L2 normalization enabled")
        prompts = np.atleast_2d(self._check_ids(prompts))
        b, p = prompts.shape
        if p + n_steps > self.config.context_length:
            raise ContractError(
                f"prompt {p} + steps {n_steps} exceeds context {self.config.context_length}"
            )
        out = np.zeros((b, n_steps, self.config.latent_dim), dtype=np.float32)
        if n_steps == 0:
            return out
        cache = make_cache(self, b, p + n_steps)
        hidden = decode_blocks(self.blocks, self.embedding.data[prompts],
                               cache, self.rope)
        gain = self.final_norm.gain.data
        for step in range(n_steps):
            h = hidden[:, -1, :]
            inv = 1.0 / np.sqrt((h * h).mean(axis=-1, keepdims=True) + 1e-6)
            pred = h * inv * gain
            pred = pred / np.sqrt((pred * pred).sum(axis=-1, keepdims=True))
            if step_hook is not None:
                pred = np.asarray(step_hook(step, pred), dtype=np.float32)
            out[:, step, :] = pred
            if step + 1 < n_steps:
                hidden = decode_blocks(self.blocks, pred[:, None, :],
                                       cache, self.rope)
        return out
