import numpy as np
import pytest

from tinypeft import autodiff as ad
from tinypeft.adapters import AdapterSpec, build_adapters
from tinypeft.autodiff import Tensor, grad_check
from tinypeft.errors import ConfigurationError, DimensionError, VocabularyError
from tinypeft.model import (
    BOS_ID, EOS_ID, PAD_ID, Backbone, ModelConfig, backbone_param_shapes,
    batch_loss, forward, greedy_decode, teacher_inputs,
)

from conftest import random_batch, random_example, tiny_config


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_config(d_emb=15)  # not divisible by heads
    with pytest.raises(ConfigurationError):
        tiny_config(vocab_size=3)
    with pytest.raises(ConfigurationError):
        tiny_config(dropout_rate=1.0)


def test_embed_text_pad_rows_identical(backbone):
    e = backbone.embed_text([PAD_ID, PAD_ID])
    assert np.array_equal(e.data[0], e.data[1])


def test_embed_text_gather_semantics(backbone):
    tokens = [5, 9, 3]
    e = backbone.embed_text(tokens)
    table = backbone.params["token_embedding"].data
    for i, t in enumerate(tokens):
        assert np.array_equal(e.data[i], table[t])


def test_embed_text_out_of_range_names_offender(backbone):
    with pytest.raises(VocabularyError, match="token id 99 at position 1"):
        backbone.embed_text([1, 99, 2])


def test_embed_text_gradient_matches_finite_differences(backbone):
    table = backbone.params["token_embedding"]
    table.requires_grad = True
    tokens = np.array([2, 7, 7, 1])

    def f():
        return ad.sum_all(backbone.embed_text(tokens))

    assert grad_check(f, [table], h=1e-5) < 1e-8
    table.requires_grad = False


def test_embed_patches_zero_inputs(backbone, config):
    z = np.zeros((config.n_patches, config.patch_feature_dim))
    assert not np.any(backbone.embed_patches(z).data)  # projector bias starts at zero


def test_embed_patches_permutation_equivariant(backbone, config, rng):
    patches = rng.standard_normal((config.n_patches, config.patch_feature_dim))
    perm = rng.permutation(config.n_patches)
    out = backbone.embed_patches(patches).data
    out_perm = backbone.embed_patches(patches[perm]).data
    assert np.array_equal(out_perm, out[perm])


def test_embed_patches_hand_computed():
    cfg = tiny_config(d_emb=2, n_heads=1, patch_feature_dim=3, n_patches=2)
    bb = Backbone(cfg, seed=0)
    w = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    bb.params["patch_proj_w"].data = w
    patches = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]])
    assert np.array_equal(bb.embed_patches(patches).data, patches @ w)


def test_embed_patches_shape_error(backbone):
    with pytest.raises(DimensionError):
        backbone.embed_patches(np.zeros((2, 2)))


def test_forward_logits_shape(backbone, config, rng):
    ex = random_example(config, rng)
    logits = forward(backbone, ex.patches, ex.text, teacher_inputs(ex.target))
    assert logits.shape == (config.max_target_len, config.vocab_size)


def test_forward_eval_deterministic(backbone, config, rng):
    ex = random_example(config, rng)
    a = forward(backbone, ex.patches, ex.text, teacher_inputs(ex.target))
    b = forward(backbone, ex.patches, ex.text, teacher_inputs(ex.target))
    assert np.array_equal(a.data, b.data)


def test_prompt_grows_encoder_sequence_adalink_does_not(backbone, config, rng):
    ex = random_example(config, rng)
    plain = backbone.encode(ex.patches, ex.text)
    assert plain.shape[0] == config.enc_len

    prompt = build_adapters(AdapterSpec(kind="prompt", prompt_len=8), backbone, seed=0)
    with_prompt = backbone.encode(ex.patches, ex.text, prompt)
    assert with_prompt.shape[0] == config.enc_len + 8

    link = build_adapters(AdapterSpec(kind="adalink", rank=2), backbone, seed=0)
    with_link = backbone.encode(ex.patches, ex.text, link)
    assert with_link.shape[0] == config.enc_len


def test_attention_probability_rows_sum_to_one(backbone, config, rng, monkeypatch):
    captured = []
    orig = ad.softmax_rows

    def spy(x):
        y = orig(x)
        captured.append(y.data)
        return y

    monkeypatch.setattr(ad, "softmax_rows", spy)
    ex = random_example(config, rng)
    forward(backbone, ex.patches, ex.text, teacher_inputs(ex.target))
    assert captured
    for probs in captured:
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9


def test_end_to_end_grad_check_one_layer_model():
    cfg = tiny_config(d_emb=8, n_heads=2, d_ff=16, vocab_size=12)
    bb = Backbone(cfg, seed=3)
    rng = np.random.default_rng(0)
    batch = random_batch(cfg, rng, batch_size=1)
    names = bb.trainable_names(full_finetune=True)
    # spot-check a representative parameter from each group to keep this fast;
    # the acceptance suite sweeps every trainable entry
    picked = [n for n in names if n in (
        "token_embedding", "enc0.self_q_w", "dec0.cross_v_w", "enc0.mlp_b1",
        "dec_pos", "enc_final_ln_g",
    )]
    bb.set_trainable(picked)
    params = [bb.params[n] for n in picked]

    def f():
        return batch_loss(bb, batch)[0]

    assert grad_check(f, params, h=1e-5) < 1e-4


def _eos_greedy_backbone(cfg):
    """Backbone rigged so every decode step scores eos highest: with the
    final-LN gamma zeroed and beta at ones, logits reduce to ones @ E^T."""
    bb = Backbone(cfg, seed=5)
    bb.params["dec_final_ln_g"].data[:] = 0.0
    bb.params["dec_final_ln_b"].data[:] = 1.0
    emb = np.zeros((cfg.vocab_size, cfg.d_emb))
    emb[EOS_ID] = 1.0
    bb.params["token_embedding"].data = emb
    return bb


def test_greedy_decode_immediate_eos(config, rng):
    bb = _eos_greedy_backbone(config)
    ex = random_example(config, rng)
    assert len(greedy_decode(bb, ex.patches, ex.text)) == 0


def test_greedy_decode_tie_breaks_to_lowest_id(config, rng):
    bb = _eos_greedy_backbone(config)
    emb = np.zeros((config.vocab_size, config.d_emb))
    emb[5] = 1.0
    emb[9] = 1.0  # same score as token 5; argmax must pick 5
    bb.params["token_embedding"].data = emb
    ex = random_example(config, rng)
    out = greedy_decode(bb, ex.patches, ex.text, max_len=3)
    assert out.tolist() == [5, 5, 5]


def test_greedy_decode_deterministic(backbone, config, rng):
    ex = random_example(config, rng)
    a = greedy_decode(backbone, ex.patches, ex.text)
    b = greedy_decode(backbone, ex.patches, ex.text)
    assert np.array_equal(a, b)


def test_param_shapes_cover_params(backbone, config):
    shapes = backbone_param_shapes(config)
    assert set(shapes) == set(backbone.params)
    for name, shape in shapes.items():
        assert backbone.params[name].shape == shape


def test_copy_is_deep(backbone):
    clone = backbone.copy()
    assert clone.checksum() == backbone.checksum()
    clone.params["token_embedding"].data[0, 0] += 1.0
    assert clone.checksum() != backbone.checksum()
