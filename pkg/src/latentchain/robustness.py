"""Noise-injection robustness harness.

The multi-step completion protocol holds out the final ``n_steps`` symbols
of each test sequence. All systems bridge the same ``n_steps`` positions
and are scored on the final ``n_score`` of them:

- decoupled (reasoner + talker): rolls out ``n_steps`` latents from the
  prompt, reconstructs ``n_steps`` tokens;
- vanilla: generates ``n_steps`` tokens autoregressively;
- coconut: loops ``n_steps - n_score`` hidden states, then emits
  ``n_score`` tokens.

Token noise replaces a fixed fraction of prompt symbols; latent noise adds
per-step Gaussian noise scaled by the max-absolute entry of that step's
latent. Corruption streams are keyed by (seed, sample index[, step]) so a
report is reproducible regardless of batch composition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BaselineLM
from .errors import ConfigError, ContractError
from .reasoner import Reasoner
from .talker import MonoTalker
from .training import encode_cfg_sample
from .vocab import Vocabulary


@dataclass
class NoiseSpec:
    kind: str               # "token" | "latent"
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("token", "latent"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.magnitude < 0:
            raise ConfigError("noise magnitude must be non-negative")


@dataclass
class EvalReport:
    model_tag: str
    noise_kind: str
    magnitude: float
    per_step_accuracy: list
    exact_match: float
    n_samples: int
    seed: int
    relative: list = field(default_factory=list)  # vs the zero-noise run
    skipped: int = 0


# ---------------------------------------------------------------- injection

def inject_token_noise(tokens: np.ndarray, rho: float, rng: np.random.Generator,
                       alphabet) -> np.ndarray:
    """Replace exactly round-half-up(rho * len) distinct positions.

    Every replacement is drawn uniformly from ``alphabet`` excluding the
    original symbol, so a replaced position always differs.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"token noise fraction must lie in [0, 1], got {rho}")
    tokens = np.asarray(tokens)
    out = tokens.copy()
    n_replace = int(np.floor(rho * len(tokens) + 0.5))
    if n_replace == 0:
        return out
    alphabet = np.asarray(alphabet)
    positions = rng.choice(len(tokens), size=n_replace, replace=False)
    for pos in positions:
        options = alphabet[alphabet != out[pos]]
        out[pos] = options[int(rng.integers(0, len(options)))]
    return out


def inject_latent_noise(latent: np.ndarray, sigma_frac: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Add N(0, (sigma_frac * max|latent|)^2) noise elementwise."""
    if sigma_frac < 0:
        raise ConfigError("sigma fraction must be non-negative")
    latent = np.asarray(latent)
    if sigma_frac == 0.0:
        return latent.copy()
    scale = sigma_frac * np.abs(latent).max()
    return latent + rng.normal(0.0, scale, size=latent.shape).astype(latent.dtype)


def _noise_rng(seed: int, sample_index: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(sample_index, step)))


# ---------------------------------------------------------------- systems

class DecoupledSystem:
    """Reasoner rollout plus talker reconstruction (the decoupled model)."""

    tag = "R"

    def __init__(self, reasoner: Reasoner, talker, seed_len: int = 8):
        self.reasoner = reasoner
        self.talker = talker
        self.seed_len = seed_len

    def complete(self, prompts: np.ndarray, n_steps: int, n_score: int,
                 latent_noise=None) -> np.ndarray:
        chains = self.reasoner.rollout_batch(prompts, n_steps, step_hook=latent_noise)
        if isinstance(self.talker, MonoTalker):
            tokens = self.talker.reconstruct_batch(chains)
        else:
            seeds = prompts[:, -self.seed_len:]
            tokens = self.talker.reconstruct_batch(chains, seeds, n_steps)
        return tokens[:, -n_score:]

    def rollout_chains(self, prompts: np.ndarray, n_steps: int,
                       latent_noise=None) -> np.ndarray:
        return self.reasoner.rollout_batch(prompts, n_steps, step_hook=latent_noise)


class VanillaSystem:
    tag = "T"

    def __init__(self, model: BaselineLM):
        self.model = model

    def complete(self, prompts, n_steps, n_score, latent_noise=None):
        if latent_noise is not None:
            raise ContractError("the vanilla baseline has no latent pathway")
        tokens = self.model.generate_batch(prompts, n_steps)
        return tokens[:, -n_score:]


class CoconutSystem:
    tag = "C"

    def __init__(self, model: BaselineLM):
        self.model = model

    def complete(self, prompts, n_steps, n_score, latent_noise=None):
        n_latent = n_steps - n_score
        _, tokens = self.model.coconut_batch(prompts, n_latent, n_score,
                                             latent_hook=latent_noise)
        return tokens


# ---------------------------------------------------------------- evaluation

def cfg_eval_arrays(samples, vocab: Vocabulary, prompt_len: int, n_steps: int):
    """(prompts, truths, skipped): clean prompt windows and held-out tails."""
    prompts, truths = [], []
    skipped = 0
    for s in samples:
        enc = encode_cfg_sample(s, vocab)
        if len(enc) < prompt_len + n_steps:
            skipped += 1
            continue
        prefix = enc[:-n_steps]
        prompts.append(prefix[-prompt_len:])
        truths.append(enc[-n_steps:])
    if not prompts:
        raise ContractError("no evaluable samples: all shorter than the protocol")
    return np.stack(prompts), np.stack(truths), skipped


def multi_step_eval(system, prompts: np.ndarray, truths: np.ndarray,
                    noise: NoiseSpec | None, alphabet, n_score: int = 4,
                    batch: int = 64, skipped: int = 0) -> EvalReport:
    """Per-step accuracy on the final ``n_score`` held-out positions."""
    n_steps = truths.shape[1]
    scored_truth = truths[:, -n_score:]
    outputs = np.zeros_like(scored_truth)
    for lo in range(0, len(prompts), batch):
        hi = min(lo + batch, len(prompts))
        chunk = prompts[lo:hi]
        if noise is not None and noise.kind == "token" and noise.magnitude > 0:
            chunk = np.stack([
                inject_token_noise(chunk[j], noise.magnitude,
                                   _noise_rng(noise.seed, lo + j), alphabet)
                for j in range(hi - lo)
            ])
        hook = None
        if noise is not None and noise.kind == "latent" and noise.magnitude > 0:
            def hook(step, latents, _lo=lo):
                out = np.empty_like(latents)
                for j in range(latents.shape[0]):
                    out[j] = inject_latent_noise(
                        latents[j], noise.magnitude,
                        _noise_rng(noise.seed, _lo + j, step + 1))
                return out
        outputs[lo:hi] = system.complete(chunk, n_steps, n_score,
                                         latent_noise=hook)
    correct = outputs == scored_truth
    per_step = correct.mean(axis=0)
    exact = correct.all(axis=1).mean()
    return EvalReport(
        model_tag=system.tag,
        noise_kind=noise.kind if noise else "token",
        magnitude=noise.magnitude if noise else 0.0,
        per_step_accuracy=[float(a) for a in per_step],
        exact_match=float(exact),
        n_samples=int(len(prompts)),
        seed=noise.seed if noise else 0,
        skipped=skipped,
    )


def eval_grid(system, prompts, truths, kind: str, magnitudes, alphabet,
              n_score: int = 4, seed: int = 0, batch: int = 64) -> list:
    """Evaluate a noise grid; relative ratios are taken against this same
    system's zero-noise run, which is always included."""
    mags = sorted(set([0.0] + [float(m) for m in magnitudes]))
    reports = []
    for mag in mags:
        noise = NoiseSpec(kind=kind, magnitude=mag, seed=seed)
        reports.append(multi_step_eval(system, prompts, truths, noise,
                                       alphabet, n_score=n_score, batch=batch))
    clean = reports[0]
    for report in reports:
        report.relative = [
            float(a / c) if c > 0 else 0.0
            for a, c in zip(report.per_step_accuracy, clean.per_step_accuracy)
        ]
    return reports


REPORT_COLUMNS = ["model", "noise_kind", "magnitude", "step", "accuracy",
                  "relative", "n_samples", "seed"]


def write_report_csv(path, reports):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            for step, (acc, rel) in enumerate(zip(r.per_step_accuracy, r.relative), 1):
                writer.writerow([r.model_tag, r.noise_kind, f"{r.magnitude:g}",
                                 step, f"{acc:.6f}", f"{rel:.6f}",
                                 r.n_samples, r.seed])


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- talker ablation

ABLATION_CONDITIONS = ("baseline", "random-latents", "corrupt-initial-tokens",
                       "gaussian-latents", "mismatched-latents")


def ablate_talker(condition: str, system: DecoupledSystem, prompts_a, truths_a,
                  prompts_b, truths_b, alphabet, seed: int = 0,
                  batch: int = 64) -> dict:
    """Apply one corruption condition, reconstruct, score against both truths.

    Chains always come from clean sample-A prompts except where the
    condition replaces them; initial decoder tokens always come from A.
    Returns per-token accuracy vs both ground truths over the generated span.
    """
    if condition not in ABLATION_CONDITIONS:
        raise ConfigError(f"unknown ablation condition {condition!r}")
    n_steps = truths_a.shape[1]
    rng = np.random.default_rng(seed)
    outputs = []
    base_chains = []
    for lo in range(0, len(prompts_a), batch):
        hi = min(lo + batch, len(prompts_a))
        chains = system.rollout_chains(prompts_a[lo:hi], n_steps)
        base_chains.append(chains.copy())
        if condition == "random-latents":
            rnd = rng.standard_normal(chains.shape).astype(np.float32)
            rnd /= np.linalg.norm(rnd, axis=-1, keepdims=True)
            chains = rnd
        elif condition == "gaussian-latents":
            chains = rng.normal(0.0, 1.0, size=chains.shape).astype(np.float32)
        elif condition == "mismatched-latents":
            chains = system.rollout_chains(prompts_b[lo:hi], n_steps)
        seeds = prompts_a[lo:hi, -system.seed_len:]
        if condition == "corrupt-initial-tokens":
            seeds = np.stack([
                inject_token_noise(row, 1.0, _noise_rng(seed, lo + j), alphabet)
                for j, row in enumerate(seeds)
            ])
        if isinstance(system.talker, MonoTalker):
            tokens = system.talker.reconstruct_batch(chains)
        else:
            tokens = system.talker.reconstruct_batch(chains, seeds, n_steps)
        outputs.append(tokens[:, -n_steps:])
    outputs = np.concatenate(outputs)
    return {
        "condition": condition,
        "accuracy_vs_a": float((outputs == truths_a).mean()),
        "accuracy_vs_b": float((outputs == truths_b).mean()),
        "n_samples": int(len(prompts_a)),
        "n_tokens": int(outputs.size),
        "chains": np.concatenate(base_chains),
        "outputs": outputs,
    }


def independence_baseline(outputs: np.ndarray, truths: np.ndarray,
                          rng: np.random.Generator, rounds: int = 16) -> float:
    """Chance level measured by re-pairing outputs with other samples' truths."""
    n = len(outputs)
    total = 0.0
    for _ in range(rounds):
        perm = rng.permutation(n)
        perm = np.where(perm == np.arange(n), (perm + 1) % n, perm)
        total += float((outputs == truths[perm]).mean())
    return total / rounds
