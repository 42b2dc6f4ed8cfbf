"""Training pipelines.

Reasoner training has two phases. Pretraining is plain next-token
cross-entropy with the tied head and L2 normalization off. The latent
phase (``sst``) turns L2 normalization on, retires the head, and trains
each position to predict the unit-normalized EMA-target embedding row of
its next token under a scaled cosine loss; the target table then takes an
EMA step toward the online table. Talkers train against a frozen reasoner
on latents produced by real rollouts. Baselines reuse the same batching.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import BaselineLM
from .cfg import CfgSample
from .errors import ConfigError, ContractError, DegenerateInputError, ModeError
from .optim import Adam, ema_update
from .reasoner import Reasoner
from .talker import DualTalker, MonoTalker
from .tensor import Tensor, no_grad
from .trees import TreeSample, route_prompt
from .vocab import Vocabulary


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    effective_batch_size: int = 128
    micro_batch_size: int = 0          # 0: no accumulation
    context_length: int = 1024
    steps: int = 1000
    ema_momentum: float = 0.98
    loss_scale_k: float = 4.0
    seed: int = 0
    warmup_fraction: float = 0.01
    completion_len: int = 8
    talker_seed_len: int = 8
    log_every: int = 50

    def __post_init__(self):
        if self.loss_scale_k <= 0:
            raise ConfigError(f"loss scale k must be positive, got {self.loss_scale_k}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("EMA momentum must lie in [0, 1]")
        if self.micro_batch_size and self.effective_batch_size % self.micro_batch_size:
            raise ConfigError("effective batch size must be a multiple of the micro batch")

    @property
    def micro(self) -> int:
        return self.micro_batch_size or self.effective_batch_size

    def lr_at(self, step: int) -> float:
        warmup = max(1, int(self.steps * self.warmup_fraction))
        return self.learning_rate * min(1.0, (step + 1) / warmup)


class TrainLogger:
    """Append-only CSV log: step, phase, loss, lr, seed."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "phase", "loss", "lr", "seed"])

    def log(self, step: int, phase: str, loss: float, lr: float, seed: int):
        row = (step, phase, f"{loss:.6f}", f"{lr:.8g}", seed)
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def params_digest(model) -> str:
    h = hashlib.sha256()
    for p in sorted(model.all_params(), key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean CE over mask-true positions; masked-out entries contribute exactly 0."""
    targets = np.atleast_2d(targets)
    mask = np.atleast_2d(mask)
    lse = logits.logsumexp(-1)
    picked = logits.take_along_axis(targets[..., None], axis=-1)
    per_pos = lse - picked.reshape(lse.shape)
    weights = Tensor(mask.astype(logits.dtype))
    count = max(int(mask.sum()), 1)
    return (per_pos * weights).sum() * (1.0 / count)


def scaled_cosine_loss(pred: Tensor, target, k: float, mask=None) -> Tensor:
    """k * (1 - cos(pred, target)) averaged over mask-true positions.

    The target side is detached: gradients flow into ``pred`` only.
    """
    if k <= 0:
        raise ConfigError(f"loss scale k must be positive, got {k}")
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    pred_sq = (pred * pred).sum(axis=-1)
    tgt_sq = (tgt * tgt).sum(axis=-1)
    if np.any((pred.data * pred.data).sum(axis=-1) < 1e-24) or np.any(tgt_sq < 1e-24):
        raise DegenerateInputError("cosine loss undefined for zero vectors")
    dot = (pred * Tensor(tgt)).sum(axis=-1)
    cos = dot * (pred_sq * Tensor(tgt_sq)) ** -0.5
    per_pos = (1.0 - cos) * k
    if mask is None:
        return per_pos.mean()
    mask = np.asarray(mask)
    weights = Tensor(mask.astype(pred.dtype))
    count = max(int(mask.sum()), 1)
    return (per_pos * weights).sum() * (1.0 / count)


def build_loss_mask(sample, phase: str, completion_len: int = 8) -> np.ndarray:
    """Token-position mask: which tokens count as supervision targets."""
    if phase not in ("pretrain", "sst"):
        raise ConfigError(f"unknown phase {phase!r}")
    if isinstance(sample, TreeSample):
        if phase == "pretrain":
            return np.ones(len(sample.tokens), dtype=bool)
        return sample.route_mask.copy()
    if isinstance(sample, CfgSample):
        n = len(sample.terminals)
        if phase == "pretrain":
            return np.ones(n, dtype=bool)
        mask = np.zeros(n, dtype=bool)
        mask[n - completion_len:] = True
        return mask
    raise ContractError(f"unsupported sample type {type(sample).__name__}")


# ---------------------------------------------------------------- batching

def pad_token_batch(samples, pad_id: int):
    """Right-pad tree samples; returns (tokens, route_mask, real_mask)."""
    length = max(len(s.tokens) for s in samples)
    tokens = np.full((len(samples), length), pad_id, dtype=np.int64)
    route = np.zeros((len(samples), length), dtype=bool)
    real = np.zeros((len(samples), length), dtype=bool)
    for i, s in enumerate(samples):
        n = len(s.tokens)
        tokens[i, :n] = s.tokens
        route[i, :n] = s.route_mask
        real[i, :n] = True
    return tokens, route, real


def encode_cfg_sample(sample: CfgSample, vocab: Vocabulary) -> np.ndarray:
    return np.array([vocab.id(str(int(t))) for t in sample.terminals], dtype=np.int64)


def cfg_window(enc: np.ndarray, rng: np.random.Generator, prompt_len: int,
               completion_len: int, end_prob: float = 0.5) -> np.ndarray:
    """A (prompt_len + completion_len) window; ends at the sequence tail
    with probability ``end_prob``, otherwise at a uniform crop."""
    w = prompt_len + completion_len
    if len(enc) < w:
        raise ContractError(f"sequence of {len(enc)} shorter than window {w}")
    if rng.random() < end_prob:
        start = len(enc) - w
    else:
        start = int(rng.integers(0, len(enc) - w + 1))
    return enc[start:start + w]


# ---------------------------------------------------------------- single steps

def pretrain_step(model, tokens: np.ndarray, loss_mask: np.ndarray,
                  optimizer: Adam, lr: float | None = None) -> float:
    """One CE step via teacher forcing; loss over mask-true target tokens."""
    optimizer.zero_grad()
    loss = lm_loss(model, tokens, loss_mask)
    loss.backward()
    optimizer.step(lr)
    return loss.item()


def lm_loss(model, tokens: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    tokens = np.atleast_2d(tokens)
    loss_mask = np.atleast_2d(loss_mask)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    if isinstance(model, Reasoner):
        logits = model.forward_pretrain(inputs)
    else:
        logits = model.forward_logits(inputs)
    return cross_entropy(logits, targets, loss_mask[:, 1:])


def sst_step(model: Reasoner, tokens: np.ndarray, token_mask: np.ndarray,
             optimizer: Adam, k: float, momentum: float,
             lr: float | None = None) -> float:
    """One scaled-cosine step toward normalized EMA-target embedding rows."""
    if not model.l2_enabled:
        raise ModeError("latent-phase training requires L2 normalization on")
    tokens = np.atleast_2d(tokens)
    token_mask = np.atleast_2d(token_mask)
    pred_mask = token_mask[:, 1:]
    if not pred_mask.any():
        return 0.0
    optimizer.zero_grad()
    loss = sst_loss(model, tokens, token_mask, k)
    loss.backward()
    optimizer.step(lr)
    ema_update(model.target_embedding, model.embedding, momentum)
    return loss.item()


def sst_targets(model: Reasoner, next_tokens: np.ndarray) -> np.ndarray:
    """Unit-normalized EMA-target embedding rows for the next tokens."""
    with no_grad():
        rows = model.embed(next_tokens, "target").data
    norms = np.sqrt((rows ** 2).sum(axis=-1, keepdims=True))
    return rows / np.maximum(norms, 1e-12)


def sst_loss(model: Reasoner, tokens: np.ndarray, token_mask: np.ndarray,
             k: float) -> Tensor:
    preds = model.forward_sst_tokens(tokens[:, :-1])
    targets = sst_targets(model, tokens[:, 1:])
    return scaled_cosine_loss(preds, targets, k, token_mask[:, 1:])


# ---------------------------------------------------------------- loops

def _accumulated_step(loss_fn, batches, optimizer: Adam, lr: float) -> float:
    """Average gradients over micro-batches, then take one optimizer step."""
    optimizer.zero_grad()
    total = 0.0
    scale = 1.0 / len(batches)
    for batch in batches:
        loss = loss_fn(batch) * scale
        loss.backward()
        total += loss.item()
    optimizer.step(lr)
    return total


def train_pretrain(model, samples, cfg: TrainConfig, vocab: Vocabulary,
                   logger: TrainLogger | None = None, phase: str = "pretrain"):
    """Next-token CE over the corpus; works for the reasoner (L2 off) and
    for vanilla baselines (post-training uses the same loop)."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params(), lr=cfg.learning_rate)
    pad_id = vocab.special_id("pad")
    tree_mode = isinstance(samples[0], TreeSample)
    if not tree_mode:
        encoded = [encode_cfg_sample(s, vocab) for s in samples]
        prompt_len = cfg.context_length - cfg.completion_len
    n_micro = cfg.effective_batch_size // cfg.micro
    for step in range(cfg.steps):
        batches = []
        for _ in range(n_micro):
            idx = rng.integers(0, len(samples), size=cfg.micro)
            if tree_mode:
                chosen = [samples[i] for i in idx]
                tokens, _, real = pad_token_batch(chosen, pad_id)
                batches.append((tokens, real))
            else:
                rows = [cfg_window(encoded[i], rng, prompt_len, cfg.completion_len)
                        for i in idx]
                tokens = np.stack(rows)
                batches.append((tokens, np.ones_like(tokens, dtype=bool)))
        lr = cfg.lr_at(step)
        loss = _accumulated_step(lambda b: lm_loss(model, b[0], b[1]),
                                 batches, optimizer, lr)
        if logger and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.log(step, phase, loss, lr, cfg.seed)
    return optimizer


def train_sst(model: Reasoner, samples, cfg: TrainConfig, vocab: Vocabulary,
              logger: TrainLogger | None = None,
              metric_hook=None, metric_every: int = 100):
    """Latent-prediction phase. ``metric_hook(step)`` supports sweep probes."""
    if not model.l2_enabled:
        raise ModeError("enable L2 normalization before latent-phase training")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params(), lr=cfg.learning_rate)
    pad_id = vocab.special_id("pad")
    tree_mode = isinstance(samples[0], TreeSample)
    if not tree_mode:
        encoded = [encode_cfg_sample(s, vocab) for s in samples]
        prompt_len = cfg.context_length - cfg.completion_len
    n_micro = cfg.effective_batch_size // cfg.micro
    for step in range(cfg.steps):
        if metric_hook is not None and step % metric_every == 0:
            metric_hook(step)
        lr = cfg.lr_at(step)
        batches = []
        for _ in range(n_micro):
            idx = rng.integers(0, len(samples), size=cfg.micro)
            if tree_mode:
                chosen = [samples[i] for i in idx]
                tokens, route, _ = pad_token_batch(chosen, pad_id)
                batches.append((tokens, route))
            else:
                rows = [cfg_window(encoded[i], rng, prompt_len, cfg.completion_len)
                        for i in idx]
                tokens = np.stack(rows)
                mask = np.zeros_like(tokens, dtype=bool)
                mask[:, -cfg.completion_len:] = True
                batches.append((tokens, mask))
        optimizer.zero_grad()
        total = 0.0
        scale = 1.0 / n_micro
        for tokens, mask in batches:
            loss = sst_loss(model, tokens, mask, cfg.loss_scale_k) * scale
            loss.backward()
            total += loss.item()
        optimizer.step(lr)
        ema_update(model.target_embedding, model.embedding, cfg.ema_momentum)
        if logger and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.log(step, "sst", total, lr, cfg.seed)
    if metric_hook is not None:
        metric_hook(cfg.steps)
    return optimizer


# ---------------------------------------------------------------- talkers

def rollout_tree_chains(reasoner: Reasoner, samples, vocab: Vocabulary,
                        chunk: int = 128):
    """Frozen-reasoner rollout latents for every sample, grouped by depth."""
    by_len: dict = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.route), []).append(i)
    chains: list = [None] * len(samples)
    for route_len, indices in sorted(by_len.items()):
        prompts = np.stack([route_prompt(samples[i], vocab) for i in indices])
        for lo in range(0, len(indices), chunk):
            sel = indices[lo:lo + chunk]
            looped = reasoner.rollout_batch(prompts[lo:lo + chunk], route_len)
            for j, i in enumerate(sel):
                chains[i] = looped[j]
    return chains


def rollout_cfg_chains(reasoner: Reasoner, encoded, cfg: TrainConfig,
                       chunk: int = 128):
    """End-window rollout chains plus decoder seeds and target tokens."""
    p = cfg.context_length - cfg.completion_len
    prompts = np.stack([enc[-cfg.context_length:][:p] for enc in encoded])
    targets = np.stack([enc[-cfg.completion_len:] for enc in encoded])
    seeds = prompts[:, -cfg.talker_seed_len:]
    chains = np.zeros((len(encoded), cfg.completion_len, reasoner.config.latent_dim),
                      dtype=np.float32)
    for lo in range(0, len(encoded), chunk):
        chains[lo:lo + chunk] = reasoner.rollout_batch(prompts[lo:lo + chunk],
                                                       cfg.completion_len)
    return chains, seeds, targets


def train_talker(talker, reasoner: Reasoner, samples, cfg: TrainConfig,
                 vocab: Vocabulary, logger: TrainLogger | None = None):
    """Cross-entropy reconstruction against a frozen reasoner.

    The reasoner only produces rollout latents here; its parameters are
    never touched (asserted via digest by the callers' tests). For the tree
    task only the route latents are passed, so the talker never sees the
    tree structure.
    """
    if not reasoner.l2_enabled:
        raise ModeError("talker training requires a latent-phase reasoner")
    if talker.config.latent_dim != reasoner.config.latent_dim:
        raise ContractError(
            f"latent dim mismatch: talker {talker.config.latent_dim} vs "
            f"reasoner {reasoner.config.latent_dim}"
        )
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(talker.params(), lr=cfg.learning_rate)
    mono = isinstance(talker, MonoTalker)
    if mono:
        chains = rollout_tree_chains(reasoner, samples, vocab)
        routes = [s.tokens[s.route_mask] for s in samples]
        by_len: dict = {}
        for i, s in enumerate(samples):
            by_len.setdefault(len(s.route), []).append(i)
        groups = sorted(by_len.items())
        weights = np.array([len(ix) for _, ix in groups], dtype=np.float64)
        weights /= weights.sum()
    else:
        encoded = [encode_cfg_sample(s, vocab) for s in samples]
        chains, seeds, targets = rollout_cfg_chains(reasoner, encoded, cfg)
    for step in range(cfg.steps):
        lr = cfg.lr_at(step)
        optimizer.zero_grad()
        if mono:
            gi = int(rng.choice(len(groups), p=weights))
            indices = groups[gi][1]
            idx = [indices[j] for j in rng.integers(0, len(indices), cfg.micro)]
            lat = np.stack([chains[i] for i in idx])
            tgt = np.stack([routes[i] for i in idx])
            logits = talker.forward_logits(Tensor(lat))
            loss = cross_entropy(logits, tgt, np.ones_like(tgt, dtype=bool))
        else:
            idx = rng.integers(0, len(samples), size=cfg.micro)
            memory = talker.dual_encode(Tensor(chains[idx]))
            dec_in = np.concatenate([seeds[idx], targets[idx][:, :-1]], axis=1)
            logits = talker.decode_logits(dec_in, memory)
            k = cfg.completion_len
            loss = cross_entropy(logits[:, -k:, :], targets[idx],
                                 np.ones((len(idx), k), dtype=bool))
        loss.backward()
        optimizer.step(lr)
        if logger and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.log(step, "talker", loss.item(), lr, cfg.seed)
    return optimizer


# ---------------------------------------------------------------- coconut

def train_coconut(model: BaselineLM, samples, cfg: TrainConfig, vocab: Vocabulary,
                  n_latent: int = 4, logger: TrainLogger | None = None):
    """Unrolled latent-loopback training; CE exclusively on the target tokens."""
    if model.config.variant != "coconut":
        raise ContractError("train_coconut requires a coconut-variant model")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params(), lr=cfg.learning_rate)
    encoded = [encode_cfg_sample(s, vocab) for s in samples]
    prompt_len = cfg.context_length - cfg.completion_len
    n_tok = cfg.completion_len - n_latent
    if n_tok < 1:
        raise ConfigError("completion_len must exceed the latent step count")
    for step in range(cfg.steps):
        lr = cfg.lr_at(step)
        idx = rng.integers(0, len(encoded), size=cfg.micro)
        windows = np.stack([cfg_window(encoded[i], rng, prompt_len,
                                       cfg.completion_len) for i in idx])
        prefixes = windows[:, :prompt_len]
        target_tokens = windows[:, prompt_len + n_latent:]
        optimizer.zero_grad()
        logits = model.coconut_unrolled_logits(prefixes, target_tokens, n_latent)
        loss = cross_entropy(logits, target_tokens,
                             np.ones_like(target_tokens, dtype=bool))
        loss.backward()
        optimizer.step(lr)
        if logger and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.log(step, "baseline", loss.item(), lr, cfg.seed)
    return optimizer
