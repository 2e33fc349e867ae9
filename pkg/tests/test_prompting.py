"""Prompt bank: coupling variants, insertion helpers, sequence assembly."""

import numpy as np
import pytest
import torch

from anchortune.backbone import (
    ROLE_HARD_COUPLED,
    ROLE_SOFT_PROMPT,
    DualEncoder,
    EncoderConfig,
    ShapeError,
    Vocab,
)
from anchortune.prompting import (
    COUPLING_VARIANTS,
    CouplingProjector,
    CouplingSpec,
    PromptBank,
    append_visual_prompts,
    assemble_text_input,
    class_text_features,
    dropout_mask,
    prepend_text_prompts,
    strip_visual_prompts,
)

ENC = EncoderConfig(visual_layers=2, text_layers=2, d_v=32, d_t=32,
                    d_joint=16, patch_size=8, heads=2, context_length=16,
                    frame_size=16)


def bank(variant="nonlinear", hard=True, seed=0, **kw):
    defaults = dict(text_len=4, visual_len=2, depth_text=2, depth_visual=2)
    defaults.update(kw)
    hard_t = None
    if hard:
        g = torch.Generator().manual_seed(1000)
        hard_t = torch.empty(defaults["text_len"], ENC.d_t).normal_(
            0.0, 0.02, generator=g)
    return PromptBank(ENC, coupling=CouplingSpec(variant, dropout=0.1),
                      hard=hard_t, seed=seed, **defaults)


# ---- spec and construction ---------------------------------------------------


def test_coupling_spec_validation():
    with pytest.raises(ValueError, match="unknown coupling variant"):
        CouplingSpec("quadratic")
    with pytest.raises(ValueError, match="dropout"):
        CouplingSpec("nonlinear", dropout=1.0)


def test_bank_shapes_and_depth_validation():
    b = bank()
    assert b.text_soft.shape == (2, 4, 32)
    assert b.visual_soft.shape == (2, 2, 32)
    assert b.hard.shape == (4, 32)
    with pytest.raises(ValueError, match="depth_text"):
        bank(depth_text=3)
    with pytest.raises(ValueError, match="depths must be >= 0"):
        bank(depth_visual=-1)


def test_hard_prompt_shape_is_checked():
    with pytest.raises(ShapeError, match="hard prompt shape"):
        PromptBank(ENC, text_len=4, depth_text=2, depth_visual=2,
                   hard=torch.zeros(3, 32))


def test_hard_prompt_is_a_frozen_buffer():
    b = bank()
    assert not b.hard.requires_grad
    names = {n for n, _ in b.named_parameters()}
    assert "hard" not in names
    assert b.has_hard
    assert not bank(hard=False, variant="none").has_hard


def test_same_seed_reproduces_the_bank():
    a, b2 = bank(seed=5), bank(seed=5)
    assert torch.equal(a.text_soft, b2.text_soft)
    assert torch.equal(a.visual_soft, b2.visual_soft)
    assert not torch.equal(bank(seed=6).text_soft, a.text_soft)


def test_text_init_adds_cycled_template_rows():
    init = torch.randn(3, 32)
    plain = bank(seed=4)
    seeded = PromptBank(ENC, text_len=4, visual_len=2, depth_text=2,
                        depth_visual=2, coupling=CouplingSpec("none"),
                        seed=4, text_init=init)
    cycled = torch.stack([init[i % 3] for i in range(4)])
    assert torch.allclose(seeded.text_soft - plain.text_soft,
                          cycled.expand(2, 4, 32), atol=1e-7)


def test_text_init_shape_is_checked():
    with pytest.raises(ShapeError, match="text_init"):
        PromptBank(ENC, text_len=4, depth_text=2, depth_visual=2,
                   text_init=torch.zeros(4, 16), coupling=CouplingSpec("none"))


# ---- dropout ------------------------------------------------------------------


def test_dropout_mask_values_and_determinism():
    g1 = torch.Generator().manual_seed(0)
    g2 = torch.Generator().manual_seed(0)
    m1 = dropout_mask((100, 100), 0.25, g1)
    m2 = dropout_mask((100, 100), 0.25, g2)
    assert torch.equal(m1, m2)
    values = np.unique(m1.numpy())
    assert np.allclose(values, [0.0, 1.0 / 0.75])
    assert torch.equal(dropout_mask((4, 4), 0.0, g1), torch.ones(4, 4))


# ---- coupling variants -----------------------------------------------------------


def test_projector_initializes_to_pass_the_soft_half_through():
    proj = CouplingProjector(8)
    soft, hard = torch.randn(3, 8), torch.randn(3, 8)
    out = proj(torch.cat([soft, hard], dim=-1))
    assert torch.allclose(out, soft, atol=1e-7)


def test_variant_none_returns_the_raw_soft_rows():
    b = bank("none", hard=False)
    seq = b.coupled_text_prompts()
    assert torch.equal(seq.tokens, b.text_soft[0])
    assert seq.roles == [ROLE_SOFT_PROMPT] * 4


def test_variant_additive_sums_soft_and_hard():
    b = bank("additive")
    seq = b.coupled_text_prompts()
    assert torch.allclose(seq.tokens, b.text_soft[0] + b.hard)
    assert len(seq) == 4


def test_variant_linear_is_identity_at_init():
    b = bank("linear")
    assert torch.allclose(b.coupled_text_prompts().tokens, b.text_soft[0],
                          atol=1e-7)


def test_variant_nonlinear_is_relu_of_soft_at_init():
    b = bank("nonlinear")
    seq = b.coupled_text_prompts(train=False)
    assert torch.allclose(seq.tokens, torch.relu(b.text_soft[0]), atol=1e-7)


def test_nonlinear_train_mode_needs_a_generator():
    b = bank("nonlinear")
    with pytest.raises(ValueError, match="generator"):
        b.coupled_text_prompts(train=True)
    g = torch.Generator().manual_seed(0)
    a = b.coupled_text_prompts(train=True, generator=g)
    g = torch.Generator().manual_seed(0)
    c = b.coupled_text_prompts(train=True, generator=g)
    assert torch.equal(a.tokens, c.tokens)


def test_token_axis_variants_double_the_block():
    b = bank("connection_position")
    seq = b.coupled_text_prompts()
    assert seq.tokens.shape == (8, 32)
    assert seq.roles == [ROLE_SOFT_PROMPT] * 4 + [ROLE_HARD_COUPLED] * 4
    assert torch.equal(seq.tokens[:4], b.text_soft[0])
    assert torch.equal(seq.tokens[4:], b.hard)


def test_random_position_permutes_the_connection_layout():
    b = bank("random_position")
    seq = b.coupled_text_prompts()
    ref = bank("connection_position").coupled_text_prompts()
    order = b.rand_order.tolist()
    assert sorted(order) == list(range(8))
    assert torch.equal(seq.tokens, ref.tokens[b.rand_order])
    assert seq.roles == [ref.roles[i] for i in order]
    assert seq.roles != ref.roles   # the fixed layout seed shuffles for real


def test_random_position_layout_follows_the_coupling_seed():
    kw = dict(text_len=4, depth_text=2, depth_visual=2, hard=torch.zeros(4, 32))
    a = PromptBank(ENC, coupling=CouplingSpec("random_position", seed=1), **kw)
    b2 = PromptBank(ENC, coupling=CouplingSpec("random_position", seed=1), **kw)
    c = PromptBank(ENC, coupling=CouplingSpec("random_position", seed=2), **kw)
    assert torch.equal(a.rand_order, b2.rand_order)
    assert not torch.equal(a.rand_order, c.rand_order)


def test_coupled_variants_require_a_hard_prompt():
    for variant in ("nonlinear", "linear", "additive", "connection_position",
                    "random_position"):
        b = bank(variant, hard=False)
        with pytest.raises(ValueError, match="needs a hard prompt"):
            b.coupled_text_prompts()


def test_depth_zero_has_no_prompts_to_couple():
    b = bank("none", hard=False, depth_text=0)
    with pytest.raises(ValueError, match="depth_text is 0"):
        b.coupled_text_prompts()


def test_prompt_accessors_check_bounds():
    b = bank()
    with pytest.raises(IndexError):
        b.text_prompts(2)
    with pytest.raises(IndexError):
        b.visual_prompts(-1)
    assert torch.equal(b.text_prompts(1), b.text_soft[1])


def test_trainable_parameters_include_projector_only_when_coupled_through_it():
    for variant in COUPLING_VARIANTS:
        b = bank(variant, hard=variant != "none")
        params = b.trainable_parameters()
        has_proj = any(p is b.projector.linear.weight for p in params)
        assert has_proj == (variant in ("nonlinear", "linear")), variant
        assert any(p is b.text_soft for p in params)
        assert any(p is b.visual_soft for p in params)


# ---- insertion helpers ------------------------------------------------------------


def test_prepend_append_strip_round_trip():
    x = torch.randn(3, 5, 8)
    p = torch.randn(2, 8)
    pre, n = prepend_text_prompts(x, p)
    assert n == 2 and pre.shape == (3, 7, 8)
    assert torch.equal(pre[:, :2], p.expand(3, 2, 8))
    assert torch.equal(pre[:, 2:], x)
    app, n = append_visual_prompts(x, p)
    assert torch.equal(app[:, 5:], p.expand(3, 2, 8))
    assert torch.equal(strip_visual_prompts(app, n), x)
    assert strip_visual_prompts(x, 0) is x


# ---- assembly -----------------------------------------------------------------------


def encoder():
    return DualEncoder(ENC, Vocab(["alpha", "beta", "gamma"]), seed=0)


def test_assemble_layout_prompts_then_words():
    enc = encoder()
    b = bank("additive")
    seq = assemble_text_input(enc, "alpha beta", b)
    assert len(seq) == 4 + 2
    assert seq.roles[:4] == [ROLE_SOFT_PROMPT] * 4
    assert seq.roles[4:] == ["word", "word"]
    word_seq = enc.embed_words(enc.vocab.tokenize("alpha beta"))
    assert torch.equal(seq.tokens[4:], word_seq.tokens)
    assert seq.ids == word_seq.ids


def test_assemble_without_bank_is_the_vanilla_path():
    enc = encoder()
    seq = assemble_text_input(enc, "alpha")
    assert seq.roles == ["word"]
    b = bank("none", hard=False, depth_text=0)
    seq0 = assemble_text_input(enc, "alpha", b)
    assert seq0.roles == ["word"]


def test_assemble_rejects_context_overflow():
    enc = encoder()
    b = bank("connection_position")   # 8 prompt rows
    with pytest.raises(ShapeError, match="context window"):
        assemble_text_input(enc, " ".join(["alpha"] * 9), b)


def test_class_text_features_match_per_name_encoding():
    enc = encoder()
    b = bank("additive")
    names = ["alpha", "beta gamma", "gamma"]
    batched = class_text_features(enc, names, b)
    assert batched.shape == (3, 16)
    for i, name in enumerate(names):
        single = enc.encode_text(assemble_text_input(enc, name, b), b)
        assert torch.allclose(batched[i], single, atol=1e-6), name


def test_class_text_features_vanilla_when_bankless():
    enc = encoder()
    feats = class_text_features(enc, ["alpha", "beta"])
    one = enc.encode_text(enc.embed_words(enc.vocab.tokenize("alpha")))
    assert torch.allclose(feats[0], one, atol=1e-6)
