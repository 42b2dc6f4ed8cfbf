"""Run configuration: plain-text INI files with sections per subsystem.

Values here feed the model/training/evaluation dataclasses; command-line
flags override file values. The seed is mandatory, either in the file or
via --seed; no command ever falls back to wall-clock entropy.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError

TASKS = ("tree", "cfg")


@dataclass
class ModelSection:
    latent_dim: int = 128
    attention_dim: int = 128
    ffn_dim: int = 512
    head_count: int = 4
    reasoner_blocks: int = 6
    pretrain_blocks: int = 0            # 0: same as reasoner_blocks
    talker_decoder_blocks: int = 2
    talker_encoder_blocks: int = 0      # 0: mono talker
    baseline_blocks: int = 0            # 0: same as pretrain blocks
    context_length: int = 64

    @property
    def pretrain_block_count(self) -> int:
        return self.pretrain_blocks or self.reasoner_blocks

    @property
    def baseline_block_count(self) -> int:
        return self.baseline_blocks or self.pretrain_block_count


@dataclass
class DataSection:
    n_samples: int = 8192
    depths: tuple = (1, 2, 3)
    band_low: int = 600
    band_high: int = 700
    tier_sizes: tuple = (3, 3, 3, 4)
    terminal_count: int = 3
    test_percent: int = 10
    max_retries: int = 2000


@dataclass
class TrainingSection:
    learning_rate: float = 1e-4
    effective_batch_size: int = 128
    micro_batch_size: int = 0
    pretrain_steps: int = 3000
    sst_steps: int = 2000
    talker_steps: int = 2000
    baseline_steps: int = 1500
    ema_momentum: float = 0.98
    loss_scale_k: float = 4.0
    warmup_fraction: float = 0.01
    completion_len: int = 8
    talker_seed_len: int = 8
    log_every: int = 50


@dataclass
class EvaluationSection:
    n_samples: int = 1024
    n_steps: int = 8
    n_score: int = 4
    token_grid: tuple = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
    latent_grid: tuple = (0.0, 0.05, 0.10, 0.15)
    batch: int = 64


@dataclass
class RunConfig:
    task: str = "tree"
    seed: int | None = None
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (config [run] seed or --seed)")
        return int(self.seed)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.data.band_low > self.data.band_high:
            raise ConfigError("band_low must not exceed band_high")
        return self


def _coerce(value: str, template):
    if isinstance(template, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        parts = value.replace(",", " ").split()
        inner = template[0] if template else 0.0
        return tuple(type(inner)(p) for p in parts)
    return value


def _fill_section(obj, parser: configparser.ConfigParser, section: str):
    if not parser.has_section(section):
        return
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown option {key!r} in section [{section}]")
        setattr(obj, key, _coerce(raw, known[key]))


def resolve_config_path(name_or_path: str) -> Path:
    """A real path wins; otherwise fall back to the shipped presets."""
    path = Path(name_or_path)
    if path.exists():
        return path
    preset = resources.files("latentchain").joinpath("presets", f"{name_or_path}.ini")
    if preset.is_file():
        return Path(str(preset))
    raise ConfigError(f"config not found: {name_or_path}")


def load_config(name_or_path: str | None) -> RunConfig:
    cfg = RunConfig()
    if name_or_path is None:
        return cfg
    path = resolve_config_path(name_or_path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(path, encoding="utf-8")
    if parser.has_section("run"):
        if parser.has_option("run", "task"):
            cfg.task = parser.get("run", "task").strip()
        if parser.has_option("run", "seed"):
            cfg.seed = parser.getint("run", "seed")
    _fill_section(cfg.model, parser, "model")
    _fill_section(cfg.data, parser, "data")
    _fill_section(cfg.training, parser, "training")
    _fill_section(cfg.evaluation, parser, "evaluation")
    return cfg.validate()


def config_digest(cfg: RunConfig) -> str:
    lines = [f"task={cfg.task}", f"seed={cfg.seed}"]
    for section_name in ("model", "data", "training", "evaluation"):
        section = getattr(cfg, section_name)
        for f in fields(section):
            lines.append(f"{section_name}.{f.name}={getattr(section, f.name)}")
    blob = "\n".join(sorted(lines)).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
