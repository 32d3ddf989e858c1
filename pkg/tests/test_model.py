import math

import numpy as np
import pytest

import _oracles as oracle
from trimformer import autodiff as ad
from trimformer.errors import ConfigError, DataError
from trimformer.model import (
    CaptureSpec,
    ModelConfig,
    build_model,
    count_flops_per_step,
    count_params,
    forward,
    lm_loss,
    perplexity,
)
from trimformer.pruning import prune_depth

NEMOTRON_15B = ModelConfig(32, 6144, 48, 8, 128, 24576, 256000, max_seq_len=4096)
DERIVED_8B = ModelConfig(32, 4096, 48, 8, 128, 16384, 256000, max_seq_len=4096)
DERIVED_4B = ModelConfig(32, 3072, 24, 8, 128, 9216, 256000, max_seq_len=4096)


def small_config(**kw):
    base = dict(
        num_layers=2, d_model=16, num_heads=4, num_query_groups=2, d_head=4,
        d_hidden=32, vocab_size=19, max_seq_len=16,
    )
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(num_heads=3, num_query_groups=2)
    with pytest.raises(ConfigError):
        small_config(d_model=0)
    with pytest.raises(ConfigError):
        small_config(num_layers=-1)


def test_config_roundtrip():
    cfg = small_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- build


def test_build_deterministic(toy_config):
    a = build_model(toy_config, seed=5)
    b = build_model(toy_config, seed=5)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = build_model(toy_config, seed=6)
    assert not np.array_equal(a.params["embedding"].data, c.params["embedding"].data)


def test_tied_embeddings_have_no_head():
    m = build_model(small_config(tie_embeddings=True), seed=0)
    assert "lm_head" not in m.params
    logits, _ = forward(m, np.array([[1, 2]]))
    assert logits.shape == (1, 2, 19)


def test_count_params_matches_tensor_walk(toy_config):
    m = build_model(toy_config, seed=0)
    walked = sum(int(np.prod(p.data.shape)) for p in m.params.values())
    emb = int(np.prod(m.params["embedding"].data.shape))
    head = 0 if toy_config.tie_embeddings else int(np.prod(m.params["lm_head"].data.shape))
    counts = count_params(toy_config)
    assert counts.total == walked
    assert counts.non_embedding == walked - emb - head


@pytest.mark.parametrize(
    "config,total,non_emb",
    [
        (NEMOTRON_15B, 15.6e9, 12.5e9),
        (DERIVED_8B, 8.27e9, 6.2e9),
        (DERIVED_4B, 4.19e9, 2.6e9),
    ],
)
def test_count_params_published_sizes(config, total, non_emb):
    counts = count_params(config)
    assert abs(counts.total - total) / total < 0.01
    assert abs(counts.non_embedding - non_emb) / non_emb < 0.01


def test_flops_estimate():
    # 1152-sequence batches at 4096 tokens for the 15B-scale config.
    flops = count_flops_per_step(NEMOTRON_15B, batch_size=1152, seq_len=4096)
    assert abs(flops - 4.4e17) / 4.4e17 < 0.15
    zero_layer = small_config(num_layers=0)
    flops0 = count_flops_per_step(zero_layer, 2, 8)
    assert flops0 == 6.0 * count_params(zero_layer).total * 16
    assert count_params(zero_layer).non_embedding == 2 * zero_layer.d_model
    toy = small_config()
    assert count_flops_per_step(toy, 3, 5) == 6.0 * count_params(toy).total * 15


# ---------------------------------------------------------------- forward


def test_single_token_logits_shape():
    m = build_model(small_config(), seed=0)
    logits, _ = forward(m, np.array([[7]]))
    assert logits.shape == (1, 1, 19)


def test_forward_errors():
    m = build_model(small_config(max_seq_len=4), seed=0)
    with pytest.raises(DataError):
        forward(m, np.zeros((1, 5), dtype=int))
    with pytest.raises(DataError):
        forward(m, np.array([[25]]))


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_forward_matches_reference(groups):
    cfg = small_config(num_layers=1, num_query_groups=groups)
    m = build_model(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    toks = rng.integers(0, 19, size=(2, 7))
    got, _ = forward(m, toks)
    want = oracle.reference_forward(m, toks)
    assert np.abs(got.data - want).max() < 1e-5


def test_gqa_one_group_per_head_is_mha():
    # num_query_groups == num_heads exercises the no-repeat path against the
    # grouped reference, i.e. plain multi-head attention.
    cfg = small_config(num_layers=1, num_query_groups=4)
    m = build_model(cfg, seed=6, dtype=np.float64)
    toks = np.array([[3, 1, 4, 1, 5]])
    got, _ = forward(m, toks)
    assert np.abs(got.data - oracle.reference_forward(m, toks)).max() < 1e-5


def test_causality():
    m = build_model(small_config(), seed=1)
    rng = np.random.default_rng(5)
    toks = rng.integers(0, 19, size=(1, 8))
    base, _ = forward(m, toks)
    for t in (2, 5):
        changed = toks.copy()
        changed[0, t] = (changed[0, t] + 1) % 19
        new, _ = forward(m, changed)
        assert np.array_equal(new.data[0, :t], base.data[0, :t])
        assert not np.array_equal(new.data[0, t:], base.data[0, t:])


def test_zeroed_layer_is_exactly_removable():
    cfg = small_config(num_layers=3)
    m = build_model(cfg, seed=2)
    m.params["layers.1.attn.wo"].data[:] = 0
    m.params["layers.1.mlp.w2"].data[:] = 0
    toks = np.array([[1, 2, 3, 4, 5, 6]])
    full, _ = forward(m, toks)
    skipped, _ = forward(m, toks, skip_layers={1})
    removed, _ = forward(prune_depth(m, [1]), toks)
    assert np.array_equal(full.data, skipped.data)
    assert np.array_equal(full.data, removed.data)


def test_capture_shapes(toy_config):
    m = build_model(toy_config, seed=0)
    toks = np.zeros((2, 6), dtype=int)
    spec = CaptureSpec(
        attn_head_out=True, qkv=True, mlp_pre=True, mlp_post=True,
        ln1=True, ln2=True, block_inputs=True, embedding_out=True, final_ln=True,
    )
    logits, rec = forward(m, toks, capture=spec)
    h, g, dh = toy_config.num_heads, toy_config.num_query_groups, toy_config.d_head
    assert rec.attn_head_out[0].shape == (2, 6, h, dh)
    q, k, v = rec.qkv[1]
    assert q.shape == (2, h, 6, dh) and k.shape == (2, g, 6, dh) == v.shape
    assert rec.mlp_pre[2].shape == (2, 6, toy_config.d_hidden)
    assert rec.ln1[3].shape == (2, 6, toy_config.d_model)
    assert len(rec.block_inputs) == toy_config.num_layers + 1
    assert rec.embedding_out.shape == (2, 6, toy_config.d_model)
    assert rec.final_ln.shape == (2, 6, toy_config.d_model)
    assert rec.logits.shape == logits.shape


def test_capture_layer_filter():
    m = build_model(small_config(), seed=0)
    _, rec = forward(
        m, np.zeros((1, 4), dtype=int),
        capture=CaptureSpec(ln2=True, layers=frozenset({1})),
    )
    assert set(rec.ln2) == {1}


def test_capture_only_records_no_gradient_state(toy_config):
    m = build_model(toy_config, seed=0)
    before = ad.nodes_recorded_total()
    forward(m, np.zeros((1, 4), dtype=int), capture=CaptureSpec(ln1=True))
    assert ad.nodes_recorded_total() == before


# ---------------------------------------------------------------- loss / ppl


def test_perplexity_near_vocab_at_init(toy_config):
    m = build_model(toy_config, seed=0)
    toks = np.random.default_rng(0).integers(0, 257, size=(4, 24))
    ppl = perplexity(m, toks)
    assert abs(ppl - 257) / 257 < 0.2


def test_perplexity_equals_exp_lm_loss(toy_config):
    m = build_model(toy_config, seed=0)
    toks = np.random.default_rng(1).integers(0, 257, size=(3, 16))
    assert perplexity(m, toks) == pytest.approx(math.exp(lm_loss(m, toks).item()), rel=1e-12)


def test_perplexity_empty_dataset():
    m = build_model(small_config(), seed=0)
    with pytest.raises(DataError):
        perplexity(m, [])


def test_forced_bigram_model_hits_entropy_exponential():
    # Uniform-over-two-successors bigram: every realized transition has
    # probability 1/2, so perplexity must equal exp(ln 2) = 2 exactly.
    v = 4
    cfg = ModelConfig(0, v, 1, 1, 2, 1, v, max_seq_len=64)
    m = build_model(cfg, seed=0, dtype=np.float64)
    m.params["embedding"].data = np.eye(v)
    # Solve the output head so logits(a) = 40 * allowed_next(a) - 20.
    u = np.zeros((v, v))
    for a in range(v):
        e = np.eye(v)[a]
        u[a] = (e - e.mean()) / np.sqrt(e.var() + 1e-5)
    targets = np.zeros((v, v))
    for a in range(v):
        targets[a, (a + 1) % v] = 40.0
        targets[a, (a + 2) % v] = 40.0
    targets -= 20.0
    head_t, *_ = np.linalg.lstsq(u, targets, rcond=None)
    m.params["lm_head"].data = head_t.T
    logits, _ = forward(m, np.arange(v)[None, :])
    assert np.abs(logits.data[0] - targets).max() < 1e-6

    rng = np.random.default_rng(8)
    seqs = []
    for _ in range(8):
        seq = [int(rng.integers(0, v))]
        for _ in range(31):
            seq.append((seq[-1] + int(rng.choice([1, 2]))) % v)
        seqs.append(seq)
    ppl = perplexity(m, np.array(seqs))
    assert abs(ppl - 2.0) < 1e-6


# ---------------------------------------------------------------- gradients


def test_full_transformer_gradient_vs_finite_differences():
    # Every parameter of a 2-layer model in float64. h=1e-5 keeps the
    # central-difference oracle accurate across the squared-ReLU kink.
    cfg = small_config()
    m = build_model(cfg, seed=1, dtype=np.float64)
    toks = np.random.default_rng(0).integers(0, 19, size=(2, 6))
    with ad.Tape():
        loss = lm_loss(m, toks)
    ad.backward(loss)
    worst = oracle.check_fd(
        lambda: lm_loss(m, toks).item(), m.trainable(), h=1e-5, tol=1e-4
    )
    assert worst < 1e-4
