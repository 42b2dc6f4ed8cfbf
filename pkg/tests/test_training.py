import numpy as np
import pytest

from latentchain.baselines import BaselineConfig, BaselineLM
from latentchain.cfg import gen_cfg_grammar, gen_cfg_sequence
from latentchain.errors import ConfigError, DegenerateInputError, ModeError
from latentchain.optim import Adam
from latentchain.reasoner import Reasoner, ReasonerConfig
from latentchain.talker import DualTalker, DualTalkerConfig, MonoTalker, MonoTalkerConfig
from latentchain.tensor import Tensor
from latentchain.training import (
    TrainConfig, build_loss_mask, cross_entropy, encode_cfg_sample, lm_loss,
    params_digest, pretrain_step, scaled_cosine_loss, sst_step, train_coconut,
    train_pretrain, train_sst, train_talker,
)
from latentchain.trees import TreeSample, gen_tree_corpus, parse_tree_sample
from latentchain.vocab import cfg_vocabulary, tree_vocabulary

TREE_VOCAB = tree_vocabulary()


def small_reasoner(l2=False, seed=0):
    cfg = ReasonerConfig(vocab_size=len(TREE_VOCAB), latent_dim=16,
                         attention_dim=16, ffn_dim=32, head_count=2,
                         block_count=2, context_length=64, l2_enabled=l2)
    return Reasoner(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------- cosine loss

def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_cosine_loss_identical_zero():
    p = Tensor(np.array([unit([1.0, 2.0, 3.0])]))
    loss = scaled_cosine_loss(p, p.data.copy(), k=4.0)
    assert abs(loss.item()) < 1e-9


def test_cosine_loss_orthogonal_equals_k():
    p = Tensor(np.array([[1.0, 0.0]]))
    t = np.array([[0.0, 1.0]])
    assert abs(scaled_cosine_loss(p, t, k=4.0).item() - 4.0) < 1e-9


def test_cosine_loss_antiparallel_equals_2k():
    p = Tensor(np.array([[1.0, 0.0]]))
    t = np.array([[-1.0, 0.0]])
    assert abs(scaled_cosine_loss(p, t, k=4.0).item() - 8.0) < 1e-9


def test_cosine_loss_bounds_random_pairs():
    g = np.random.default_rng(0)
    for _ in range(200):
        p = Tensor(g.standard_normal((5, 8)))
        t = g.standard_normal((5, 8))
        val = scaled_cosine_loss(p, t, k=4.0).item()
        assert -1e-9 <= val <= 8.0 + 1e-9


def test_cosine_loss_zero_vector_rejected():
    p = Tensor(np.zeros((1, 3)))
    with pytest.raises(DegenerateInputError):
        scaled_cosine_loss(p, np.ones((1, 3)), k=4.0)


def test_cosine_loss_rejects_bad_k():
    p = Tensor(np.ones((1, 3)))
    with pytest.raises(ConfigError):
        scaled_cosine_loss(p, np.ones((1, 3)), k=0.0)


def test_cosine_loss_gradient_only_to_pred():
    g = np.random.default_rng(1)
    pred = Tensor(g.standard_normal((4, 8)), requires_grad=True)
    tgt = Tensor(g.standard_normal((4, 8)), requires_grad=True)
    loss = scaled_cosine_loss(pred, tgt, k=4.0)
    loss.backward()
    assert pred.grad is not None and np.abs(pred.grad).sum() > 0
    assert tgt.grad is None or np.allclose(tgt.grad, 0.0)


def test_cosine_loss_masked_positions_inert_bitwise():
    g = np.random.default_rng(2)
    pred = Tensor(g.standard_normal((6, 8)))
    tgt = g.standard_normal((6, 8))
    mask = np.array([True, False, True, False, True, False])
    base = scaled_cosine_loss(pred, tgt, k=4.0, mask=mask).item()
    tgt2 = tgt.copy()
    tgt2[1] = g.standard_normal(8)
    tgt2[3] *= 5.0
    perturbed = scaled_cosine_loss(pred, tgt2, k=4.0, mask=mask).item()
    assert base == perturbed


# ---------------------------------------------------------------- loss masks

APPENDIX_LINE = ("NL,NO,LJ,LI,OA,OM,JB,JH,IG,IF,AD,AE,MK,MC"
                 "[ROOT]N[TARGET]K[ROUTE]NOMK")


def test_mask_appendix_sample_route_tokens():
    sample = parse_tree_sample(APPENDIX_LINE, TREE_VOCAB)
    mask = build_loss_mask(sample, "sst")
    assert mask.sum() == 4
    assert TREE_VOCAB.decode(sample.tokens[mask]) == ["N", "O", "M", "K"]


def test_mask_pretrain_all_true():
    sample = parse_tree_sample(APPENDIX_LINE, TREE_VOCAB)
    assert build_loss_mask(sample, "pretrain").all()


def test_mask_empty_route_all_false():
    sample = parse_tree_sample(APPENDIX_LINE, TREE_VOCAB)
    empty = TreeSample(edges=sample.edges, root=sample.root,
                       target_leaf=sample.target_leaf, route=[],
                       tokens=sample.tokens,
                       route_mask=np.zeros(len(sample.tokens), dtype=bool))
    assert not build_loss_mask(empty, "sst").any()


def test_mask_cfg_completion_positions():
    g = gen_cfg_grammar(np.random.default_rng(0))
    s = gen_cfg_sequence(g, np.random.default_rng(1))
    mask = build_loss_mask(s, "sst", completion_len=8)
    assert mask.sum() == 8
    assert mask[-8:].all()


# ---------------------------------------------------------------- steps

def test_pretrain_loss_near_log_vocab_on_uniform_tokens():
    model = small_reasoner()
    g = np.random.default_rng(0)
    toks = g.integers(0, model.config.vocab_size, size=(4, 32))
    loss = lm_loss(model, toks, np.ones_like(toks, dtype=bool)).item()
    assert abs(loss - np.log(model.config.vocab_size)) < 0.06 * np.log(model.config.vocab_size)


def test_pretrain_step_mode_error_in_sst_mode():
    model = small_reasoner(l2=True)
    opt = Adam(model.params(), lr=1e-3)
    toks = np.arange(6)[None]
    with pytest.raises(ModeError):
        pretrain_step(model, toks, np.ones_like(toks, dtype=bool), opt)


def test_identical_samples_mean_reduction():
    model = small_reasoner()
    toks = np.arange(8)[None]
    mask = np.ones_like(toks, dtype=bool)
    single = lm_loss(model, toks, mask)
    single.backward()
    g_single = model.embedding.grad.copy()
    for p in model.params():
        p.zero_grad()
    batch = np.repeat(toks, 4, axis=0)
    lm_loss(model, batch, np.repeat(mask, 4, axis=0)).backward()
    assert np.allclose(model.embedding.grad, g_single, atol=1e-6)


def test_sst_step_all_false_mask_no_change():
    model = small_reasoner(l2=True)
    opt = Adam(model.params(), lr=1e-3)
    before = params_digest(model)
    toks = np.arange(6)[None]
    loss = sst_step(model, toks, np.zeros_like(toks, dtype=bool), opt,
                    k=4.0, momentum=0.98)
    assert loss == 0.0
    assert params_digest(model) == before


def test_sst_step_updates_target_via_ema_formula():
    model = small_reasoner(l2=True)
    opt = Adam(model.params(), lr=1e-3)
    toks = np.arange(8)[None]
    mask = np.ones_like(toks, dtype=bool)
    old_target = model.target_embedding.data.copy()
    sst_step(model, toks, mask, opt, k=4.0, momentum=0.98)
    expected = 0.98 * old_target + 0.02 * model.embedding.data
    assert np.allclose(model.target_embedding.data, expected, atol=1e-7)


def test_sst_step_requires_l2_mode():
    model = small_reasoner(l2=False)
    opt = Adam(model.params(), lr=1e-3)
    toks = np.arange(6)[None]
    with pytest.raises(ModeError):
        sst_step(model, toks, np.ones_like(toks, dtype=bool), opt, 4.0, 0.98)


def test_perfect_predictor_zero_loss():
    model = small_reasoner(l2=True)
    from latentchain.training import sst_targets
    toks = np.arange(6)[None]
    targets = sst_targets(model, toks[:, 1:])
    loss = scaled_cosine_loss(Tensor(targets.astype(np.float64)),
                              targets.astype(np.float64), k=4.0)
    assert abs(loss.item()) < 1e-9


# ---------------------------------------------------------------- smoke loops

@pytest.mark.slow
def test_pretrain_smoke_loss_decreases():
    samples = gen_tree_corpus(64, [1, 2], seed=1, vocab=TREE_VOCAB)
    model = small_reasoner()
    cfg = TrainConfig(learning_rate=3e-3, effective_batch_size=16,
                      context_length=64, steps=200, seed=0, log_every=1000)
    g0 = np.random.default_rng(0)
    toks0 = g0.integers(0, len(TREE_VOCAB), size=(4, 32))
    start = lm_loss(model, toks0, np.ones_like(toks0, dtype=bool)).item()
    train_pretrain(model, samples, cfg, TREE_VOCAB)
    from latentchain.training import pad_token_batch
    tokens, _, real = pad_token_batch(samples[:16], TREE_VOCAB.special_id("pad"))
    end = lm_loss(model, tokens, real).item()
    assert end < start * 0.7


@pytest.mark.slow
def test_sst_and_talker_smoke():
    samples = gen_tree_corpus(128, [1, 2], seed=2, vocab=TREE_VOCAB)
    model = small_reasoner()
    cfg = TrainConfig(learning_rate=3e-3, effective_batch_size=16,
                      context_length=64, steps=150, seed=0, log_every=1000)
    train_pretrain(model, samples, cfg, TREE_VOCAB)
    model.l2_enabled = True
    model.target_embedding.data[...] = model.embedding.data
    train_sst(model, samples, cfg, TREE_VOCAB)

    tcfg = MonoTalkerConfig(latent_dim=16, attention_dim=16, ffn_dim=32,
                            head_count=2, decoder_count=2,
                            vocab_size=len(TREE_VOCAB))
    talker = MonoTalker(tcfg, np.random.default_rng(5))
    digest_before = params_digest(model)
    tcfg2 = TrainConfig(learning_rate=3e-3, effective_batch_size=8,
                        context_length=64, steps=150, seed=1, log_every=1000)
    train_talker(talker, model, samples, tcfg2, TREE_VOCAB)
    assert params_digest(model) == digest_before  # frozen reasoner
    # well above the ~1/26 chance level; the real quality bar is in acceptance
    from latentchain.training import rollout_tree_chains
    correct = total = 0
    for s, chain in zip(samples[:32], rollout_tree_chains(model, samples[:32], TREE_VOCAB)):
        out = talker.reconstruct_batch(chain[None])[0]
        truth = s.tokens[s.route_mask]
        correct += (out == truth).sum()
        total += len(truth)
    assert correct / total > 0.25


def test_mono_talker_sees_only_route_latents():
    samples = gen_tree_corpus(8, [2], seed=3, vocab=TREE_VOCAB)
    model = small_reasoner(l2=True)
    from latentchain.training import rollout_tree_chains
    chains = rollout_tree_chains(model, samples, TREE_VOCAB)
    for s, chain in zip(samples, chains):
        assert chain.shape == (len(s.route), model.config.latent_dim)


@pytest.mark.slow
def test_coconut_training_gradients_reach_all_blocks():
    g = gen_cfg_grammar(np.random.default_rng(0))
    seqs = [gen_cfg_sequence(g, np.random.default_rng(i), band=(243, 500))
            for i in range(4)]
    vocab = cfg_vocabulary(g.terminals)
    cfg = BaselineConfig(vocab_size=len(vocab), latent_dim=16, attention_dim=16,
                         ffn_dim=32, head_count=2, block_count=2,
                         context_length=48, variant="coconut")
    model = BaselineLM(cfg, np.random.default_rng(1))
    tc = TrainConfig(learning_rate=1e-3, effective_batch_size=4,
                     context_length=40, steps=1, seed=0)
    enc = encode_cfg_sample(seqs[0], vocab)
    prefix = enc[:32][None]
    targets = enc[36:40][None]
    logits = model.coconut_unrolled_logits(prefix, targets, n_latent=4)
    assert logits.shape == (1, 4, len(vocab))
    loss = cross_entropy(logits, targets, np.ones((1, 4), dtype=bool))
    loss.backward()
    for i in range(cfg.block_count):
        wq = next(p for p in model.params() if p.name == f"blocks.{i}.attn.wq")
        assert np.abs(wq.grad).sum() > 0, f"no gradient in block {i}"
    start = loss.item()
    train_coconut(model, seqs, tc, vocab)
    logits = model.coconut_unrolled_logits(prefix, targets, n_latent=4)
    end = cross_entropy(logits, targets, np.ones((1, 4), dtype=bool)).item()
    assert end < start
