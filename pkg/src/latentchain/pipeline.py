"""End-to-end command implementations shared by the CLI and the test suite.

Each function implements one pipeline stage: it reads its input artifacts,
writes its outputs under an output directory (write-once), and returns the
output paths. A manifest with config and artifact digests accompanies every
run so results can be reproduced exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .baselines import BaselineConfig, BaselineLM, copy_pretrained_params, init_from_pretrained
from .cfg import gen_cfg_grammar, load_grammar, save_grammar
from .checkpoint import (
    Checkpoint, load_checkpoint, require_phase, restore_into, save_checkpoint,
)
from .config import RunConfig, config_digest
from .errors import CheckpointError
from .corpus import (
    build_cfg_corpus, build_tree_corpus, load_cfg_corpus, load_tree_corpus,
    split_lines, write_lines,
)
from .errors import ConfigError, ContractError
from .reasoner import Reasoner, ReasonerConfig
from .robustness import (
    CoconutSystem, DecoupledSystem, VanillaSystem, cfg_eval_arrays, eval_grid,
    write_report_csv,
)
from .talker import DualTalker, DualTalkerConfig, MonoTalker, MonoTalkerConfig
from .training import TrainConfig, TrainLogger, train_coconut, train_pretrain, train_sst, train_talker
from .vocab import NAME_POOL, Vocabulary, cfg_vocabulary, tree_vocabulary
from . import analysis, plots


# ---------------------------------------------------------------- plumbing

def fresh_path(out_dir, name: str) -> Path:
    path = Path(out_dir) / name
    if path.exists():
        raise ConfigError(f"refusing to overwrite existing artifact: {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: RunConfig, inputs: dict,
                   outputs: dict) -> Path:
    manifest = {
        "command": command,
        "config_digest": config_digest(cfg),
        "seed": cfg.seed,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)}
                   for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": str(v), "sha256": _sha256(v)}
                    for k, v in sorted(outputs.items())},
    }
    path = Path(out_dir) / f"manifest-{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def train_config(cfg: RunConfig, steps: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        learning_rate=t.learning_rate,
        effective_batch_size=t.effective_batch_size,
        micro_batch_size=t.micro_batch_size,
        context_length=cfg.model.context_length,
        steps=steps,
        ema_momentum=t.ema_momentum,
        loss_scale_k=t.loss_scale_k,
        seed=cfg.require_seed(),
        warmup_fraction=t.warmup_fraction,
        completion_len=t.completion_len,
        talker_seed_len=t.talker_seed_len,
        log_every=t.log_every,
    )


def grammar_path_for(data_path) -> Path:
    return Path(data_path).parent / "grammar.txt"


def task_vocabulary(cfg: RunConfig, grammar=None) -> Vocabulary:
    if cfg.task == "tree":
        return tree_vocabulary()
    if grammar is None:
        raise ConfigError("the cfg task needs a grammar to build its vocabulary")
    return cfg_vocabulary(grammar.terminals)


def load_task_corpus(cfg: RunConfig, data_path, vocab: Vocabulary):
    if cfg.task == "tree":
        return load_tree_corpus(data_path, vocab)
    return load_cfg_corpus(data_path)


# ---------------------------------------------------------------- model builders

def build_reasoner(cfg: RunConfig, vocab_size: int, l2: bool,
                   block_count: int, seed: int) -> Reasoner:
    m = cfg.model
    rc = ReasonerConfig(vocab_size=vocab_size, latent_dim=m.latent_dim,
                        attention_dim=m.attention_dim, ffn_dim=m.ffn_dim,
                        head_count=m.head_count, block_count=block_count,
                        context_length=m.context_length, l2_enabled=l2)
    return Reasoner(rc, np.random.default_rng(seed))


def build_talker(cfg: RunConfig, vocab_size: int, seed: int):
    m = cfg.model
    t = cfg.training
    context = max(16, t.completion_len + t.talker_seed_len + 8)
    if m.talker_encoder_blocks > 0:
        tc = DualTalkerConfig(latent_dim=m.latent_dim, attention_dim=m.attention_dim,
                              ffn_dim=m.ffn_dim, head_count=m.head_count,
                              decoder_count=m.talker_decoder_blocks,
                              vocab_size=vocab_size, context_length=context,
                              encoder_count=m.talker_encoder_blocks)
        return DualTalker(tc, np.random.default_rng(seed))
    tc = MonoTalkerConfig(latent_dim=m.latent_dim, attention_dim=m.attention_dim,
                          ffn_dim=m.ffn_dim, head_count=m.head_count,
                          decoder_count=m.talker_decoder_blocks,
                          vocab_size=vocab_size, context_length=context)
    return MonoTalker(tc, np.random.default_rng(seed))


def build_baseline_config(cfg: RunConfig, vocab_size: int, variant: str) -> BaselineConfig:
    m = cfg.model
    return BaselineConfig(vocab_size=vocab_size, latent_dim=m.latent_dim,
                          attention_dim=m.attention_dim, ffn_dim=m.ffn_dim,
                          head_count=m.head_count,
                          block_count=m.baseline_block_count,
                          context_length=m.context_length, variant=variant)


def load_reasoner(ckpt: Checkpoint) -> Reasoner:
    if ckpt.kind != "reasoner":
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} is not a reasoner")
    model = Reasoner(ReasonerConfig(**ckpt.config), np.random.default_rng(0))
    restore_into(model, ckpt)
    return model


def load_talker(ckpt: Checkpoint):
    if ckpt.kind == "mono_talker":
        model = MonoTalker(MonoTalkerConfig(**ckpt.config), np.random.default_rng(0))
    elif ckpt.kind == "dual_talker":
        model = DualTalker(DualTalkerConfig(**ckpt.config), np.random.default_rng(0))
    else:
        raise ContractError(f"checkpoint kind {ckpt.kind!r} is not a talker")
    restore_into(model, ckpt)
    return model


def load_baseline(ckpt: Checkpoint) -> BaselineLM:
    if ckpt.kind != "baseline":
        raise CheckpointError(f"checkpoint kind {ckpt.kind!r} is not a baseline")
    model = BaselineLM(BaselineConfig(**ckpt.config), np.random.default_rng(0))
    restore_into(model, ckpt)
    return model


# ---------------------------------------------------------------- commands

def run_gen_data(cfg: RunConfig, out_dir) -> dict:
    seed = cfg.require_seed()
    outputs = {}
    if cfg.task == "tree":
        vocab = tree_vocabulary()
        lines = build_tree_corpus(cfg.data.n_samples, cfg.data.depths, seed, vocab)
    else:
        grammar = gen_cfg_grammar(np.random.default_rng(seed),
                                  tier_sizes=cfg.data.tier_sizes,
                                  terminal_count=cfg.data.terminal_count)
        gpath = fresh_path(out_dir, "grammar.txt")
        save_grammar(gpath, grammar)
        outputs["grammar"] = gpath
        lines = build_cfg_corpus(cfg.data.n_samples, grammar, seed,
                                 band=(cfg.data.band_low, cfg.data.band_high),
                                 max_retries=cfg.data.max_retries)
    train, test = split_lines(lines, cfg.data.test_percent)
    train_path = fresh_path(out_dir, "train.txt")
    test_path = fresh_path(out_dir, "test.txt")
    write_lines(train_path, train)
    write_lines(test_path, test)
    outputs["train"] = train_path
    outputs["test"] = test_path
    write_manifest(out_dir, "gen-data", cfg, {}, outputs)
    return outputs


def run_pretrain(cfg: RunConfig, data_path, out_dir) -> dict:
    seed = cfg.require_seed()
    grammar = None if cfg.task == "tree" else load_grammar(grammar_path_for(data_path))
    vocab = task_vocabulary(cfg, grammar)
    samples = load_task_corpus(cfg, data_path, vocab)
    model = build_reasoner(cfg, len(vocab), l2=False,
                           block_count=cfg.model.pretrain_block_count, seed=seed)
    log_path = fresh_path(out_dir, "pretrain-log.csv")
    logger = TrainLogger(log_path)
    tc = train_config(cfg, cfg.training.pretrain_steps)
    train_pretrain(model, samples, tc, vocab, logger)
    ckpt_path = fresh_path(out_dir, "pretrain.ckpt")
    save_checkpoint(ckpt_path, model, model.config, "reasoner", "pretrain",
                    seed=seed, step=tc.steps)
    fig_path = fresh_path(out_dir, "pretrain-loss.png")
    plots.training_curve_figure(fig_path, logger.rows)
    outputs = {"checkpoint": ckpt_path, "log": log_path, "figure": fig_path}
    write_manifest(out_dir, "pretrain", cfg, {"data": data_path}, outputs)
    return outputs


def run_sst(cfg: RunConfig, checkpoint_path, data_path, out_dir) -> dict:
    seed = cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "pretrain")
    grammar = None if cfg.task == "tree" else load_grammar(grammar_path_for(data_path))
    vocab = task_vocabulary(cfg, grammar)
    samples = load_task_corpus(cfg, data_path, vocab)
    model = build_reasoner(cfg, len(vocab), l2=True,
                           block_count=cfg.model.reasoner_blocks, seed=seed)
    copy_pretrained_params(ckpt.params, model, cfg.model.reasoner_blocks)
    model.target_embedding.data[...] = model.embedding.data
    log_path = fresh_path(out_dir, "sst-log.csv")
    logger = TrainLogger(log_path)
    tc = train_config(cfg, cfg.training.sst_steps)
    train_sst(model, samples, tc, vocab, logger)
    ckpt_path = fresh_path(out_dir, "sst.ckpt")
    save_checkpoint(ckpt_path, model, model.config, "reasoner", "sst",
                    seed=seed, step=tc.steps)
    fig_path = fresh_path(out_dir, "sst-loss.png")
    plots.training_curve_figure(fig_path, logger.rows)
    outputs = {"checkpoint": ckpt_path, "log": log_path, "figure": fig_path}
    write_manifest(out_dir, "sst", cfg,
                   {"data": data_path, "checkpoint": checkpoint_path}, outputs)
    return outputs


def run_train_talker(cfg: RunConfig, checkpoint_path, data_path, out_dir) -> dict:
    seed = cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "sst")
    reasoner = load_reasoner(ckpt)
    grammar = None if cfg.task == "tree" else load_grammar(grammar_path_for(data_path))
    vocab = task_vocabulary(cfg, grammar)
    samples = load_task_corpus(cfg, data_path, vocab)
    talker = build_talker(cfg, len(vocab), seed + 1)
    log_path = fresh_path(out_dir, "talker-log.csv")
    logger = TrainLogger(log_path)
    tc = train_config(cfg, cfg.training.talker_steps)
    train_talker(talker, reasoner, samples, tc, vocab, logger)
    kind = "dual_talker" if isinstance(talker, DualTalker) else "mono_talker"
    ckpt_path = fresh_path(out_dir, "talker.ckpt")
    save_checkpoint(ckpt_path, talker, talker.config, kind, "talker",
                    seed=seed, step=tc.steps)
    outputs = {"checkpoint": ckpt_path, "log": log_path}
    write_manifest(out_dir, "train-talker", cfg,
                   {"data": data_path, "checkpoint": checkpoint_path}, outputs)
    return outputs


def run_train_baseline(cfg: RunConfig, checkpoint_path, data_path, out_dir,
                       variant: str) -> dict:
    seed = cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "pretrain")
    grammar = None if cfg.task == "tree" else load_grammar(grammar_path_for(data_path))
    vocab = task_vocabulary(cfg, grammar)
    samples = load_task_corpus(cfg, data_path, vocab)
    bcfg = build_baseline_config(cfg, len(vocab), variant)
    model = init_from_pretrained(ckpt.params, bcfg, bcfg.block_count,
                                 np.random.default_rng(seed + 2))
    log_path = fresh_path(out_dir, f"baseline-{variant}-log.csv")
    logger = TrainLogger(log_path)
    tc = train_config(cfg, cfg.training.baseline_steps)
    if variant == "coconut":
        n_latent = cfg.evaluation.n_steps - cfg.evaluation.n_score
        train_coconut(model, samples, tc, vocab, n_latent=n_latent, logger=logger)
    else:
        train_pretrain(model, samples, tc, vocab, logger, phase="baseline")
    ckpt_path = fresh_path(out_dir, f"baseline-{variant}.ckpt")
    save_checkpoint(ckpt_path, model, model.config, "baseline", "baseline",
                    seed=seed, step=tc.steps)
    outputs = {"checkpoint": ckpt_path, "log": log_path}
    write_manifest(out_dir, "train-baseline", cfg,
                   {"data": data_path, "checkpoint": checkpoint_path}, outputs)
    return outputs


def _eval_systems(cfg: RunConfig, reasoner_ckpt, talker_ckpt,
                  vanilla_ckpt=None, coconut_ckpt=None):
    systems = []
    if reasoner_ckpt and talker_ckpt:
        rc = load_checkpoint(reasoner_ckpt)
        require_phase(rc, "sst")
        reasoner = load_reasoner(rc)
        talker = load_talker(load_checkpoint(talker_ckpt))
        systems.append(DecoupledSystem(reasoner, talker,
                                       seed_len=cfg.training.talker_seed_len))
    if vanilla_ckpt:
        systems.append(VanillaSystem(load_baseline(load_checkpoint(vanilla_ckpt))))
    if coconut_ckpt:
        systems.append(CoconutSystem(load_baseline(load_checkpoint(coconut_ckpt))))
    if not systems:
        raise ConfigError("no model checkpoints supplied for evaluation")
    return systems


def run_eval_robustness(cfg: RunConfig, data_path, out_dir, kind: str,
                        reasoner_ckpt=None, talker_ckpt=None,
                        vanilla_ckpt=None, coconut_ckpt=None) -> dict:
    if cfg.task != "cfg":
        raise ConfigError("the robustness protocol is defined on the cfg task")
    seed = cfg.require_seed()
    grammar = load_grammar(grammar_path_for(data_path))
    vocab = task_vocabulary(cfg, grammar)
    samples = load_task_corpus(cfg, data_path, vocab)[:cfg.evaluation.n_samples]
    prompt_len = cfg.model.context_length - cfg.evaluation.n_steps
    prompts, truths, skipped = cfg_eval_arrays(samples, vocab, prompt_len,
                                               cfg.evaluation.n_steps)
    alphabet = np.array([vocab.id(str(int(t))) for t in grammar.terminals])
    systems = _eval_systems(cfg, reasoner_ckpt, talker_ckpt,
                            vanilla_ckpt, coconut_ckpt)
    grid = (cfg.evaluation.token_grid if kind == "token"
            else cfg.evaluation.latent_grid)
    reports = []
    for system in systems:
        if kind == "latent" and isinstance(system, VanillaSystem):
            continue
        reports.extend(eval_grid(system, prompts, truths, kind, grid, alphabet,
                                 n_score=cfg.evaluation.n_score, seed=seed,
                                 batch=cfg.evaluation.batch))
    for r in reports:
        r.skipped = skipped
    csv_path = fresh_path(out_dir, f"robustness-{kind}.csv")
    write_report_csv(csv_path, reports)
    fig_path = fresh_path(out_dir, f"robustness-{kind}.png")
    plots.robustness_figure(fig_path, reports)
    outputs = {"report": csv_path, "figure": fig_path}
    inputs = {"data": data_path}
    for name, p in (("reasoner", reasoner_ckpt), ("talker", talker_ckpt),
                    ("vanilla", vanilla_ckpt), ("coconut", coconut_ckpt)):
        if p:
            inputs[name] = p
    write_manifest(out_dir, f"eval-robustness-{kind}", cfg, inputs, outputs)
    return {"reports": reports, **outputs}


def run_analyze_latents(cfg: RunConfig, checkpoint_path, data_path, out_dir) -> dict:
    if cfg.task != "tree":
        raise ConfigError("latent analysis is defined on the tree task")
    cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "sst")
    reasoner = load_reasoner(ckpt)
    vocab = tree_vocabulary()
    samples = load_tree_corpus(data_path, vocab)[:cfg.evaluation.n_samples]
    records, skipped = analysis.analyze_tree_chains(reasoner, samples, vocab)
    csv_path = fresh_path(out_dir, "plane-records.csv")
    analysis.write_plane_records_csv(csv_path, records)
    summary_path = fresh_path(out_dir, "latent-summary.csv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        fh.write(f"mean_rank_percentile,{analysis.mean_rank_percentile(records):.6f}\n")
        fh.write(f"major_contributor_rate,{analysis.major_contributor_rate(records):.6f}\n")
        fh.write(f"n_records,{len(records)}\n")
        fh.write(f"degenerate_steps_skipped,{skipped}\n")
    fig_path = fresh_path(out_dir, "plane-analysis.png")
    plots.plane_figure(fig_path, records)
    outputs = {"records": csv_path, "summary": summary_path, "figure": fig_path}
    write_manifest(out_dir, "analyze-latents", cfg,
                   {"data": data_path, "checkpoint": checkpoint_path}, outputs)
    return {"records": records, "skipped": skipped, **outputs}


def run_k_sweep(cfg: RunConfig, checkpoint_path, data_path, probe_path,
                out_dir, k_values) -> dict:
    if cfg.task != "tree":
        raise ConfigError("the loss-scale sweep is defined on the tree task")
    seed = cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "pretrain")
    vocab = tree_vocabulary()
    samples = load_tree_corpus(data_path, vocab)
    probes = load_tree_corpus(probe_path, vocab)[:256]

    def make_model():
        model = build_reasoner(cfg, len(vocab), l2=True,
                               block_count=cfg.model.reasoner_blocks, seed=seed)
        copy_pretrained_params(ckpt.params, model, cfg.model.reasoner_blocks)
        model.target_embedding.data[...] = model.embedding.data
        return model

    def train_fn(model, k, hook):
        tc = train_config(cfg, cfg.training.sst_steps)
        tc.loss_scale_k = k
        train_sst(model, samples, tc, vocab, metric_hook=hook, metric_every=100)

    def probe_fn(model):
        return analysis.contributor_rate(model, probes, vocab)

    curves = analysis.k_sweep(k_values, make_model, train_fn, probe_fn)
    csv_path = fresh_path(out_dir, "k-sweep.csv")
    analysis.write_sweep_csv(csv_path, curves)
    fig_path = fresh_path(out_dir, "k-sweep.png")
    plots.sweep_figure(fig_path, curves)
    outputs = {"curves": csv_path, "figure": fig_path}
    write_manifest(out_dir, "k-sweep", cfg,
                   {"data": data_path, "probes": probe_path,
                    "checkpoint": checkpoint_path}, outputs)
    return {"curves": curves, **outputs}


def run_pca_export(cfg: RunConfig, checkpoint_path, data_path, out_dir) -> dict:
    if cfg.task != "tree":
        raise ConfigError("the PCA export is defined on the tree task")
    cfg.require_seed()
    ckpt = load_checkpoint(checkpoint_path)
    require_phase(ckpt, "sst")
    reasoner = load_reasoner(ckpt)
    vocab = tree_vocabulary()
    samples = load_tree_corpus(data_path, vocab)[:cfg.evaluation.n_samples]
    from .training import rollout_tree_chains

    chains = rollout_tree_chains(reasoner, samples, vocab)
    predictions = np.concatenate(chains, axis=0)
    name_ids = np.array([vocab.id(n) for n in NAME_POOL])
    embeddings = reasoner.embedding.data[name_ids]
    embeddings = embeddings / np.linalg.norm(embeddings, axis=-1, keepdims=True)
    vectors = np.concatenate([embeddings, predictions], axis=0)
    origins = ["embedding"] * len(embeddings) + ["prediction"] * len(predictions)
    components, explained, coords = analysis.pca_export(vectors, 2)
    csv_path = fresh_path(out_dir, "pca.csv")
    analysis.write_pca_csv(csv_path, origins, coords)
    fig_path = fresh_path(out_dir, "pca.png")
    plots.pca_figure(fig_path, np.array(origins), coords)
    outputs = {"coordinates": csv_path, "figure": fig_path}
    write_manifest(out_dir, "pca-export", cfg,
                   {"data": data_path, "checkpoint": checkpoint_path}, outputs)
    return {"explained_variance": explained.tolist(), **outputs}
