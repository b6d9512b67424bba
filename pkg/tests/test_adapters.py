import numpy as np
import pytest

from tinypeft import autodiff as ad
from tinypeft.adapters import (
    AdaLink, AdapterSpec, adalink_forward, adapter_state, adapters_from_state,
    apply_multimodal_adalink, build_adapters, count_trainable_params,
    flops_added, lora_linear, lora_target_layers,
)
from tinypeft.autodiff import ComputeGraph, Tensor
from tinypeft.errors import ConfigurationError, DimensionError
from tinypeft.model import Backbone, ModelConfig, batch_loss, example_logits
from tinypeft.training import collect_trainables

from conftest import random_batch, random_example, tiny_config


def _module(d_emb=4, rank=2, scope="text", relu=False, seed=0):
    return AdaLink(d_emb, rank, scope, relu, np.random.default_rng(seed))


def test_zero_init_is_identity_bit_exact(rng):
    m = _module(d_emb=8, rank=3)
    e = Tensor(rng.standard_normal((5, 8)))
    assert np.array_equal(adalink_forward(e, m).data, e.data)


def test_adalink_hand_computed():
    m = _module(d_emb=2, rank=1)
    m.w_down.data = np.array([[1.0], [1.0]])
    m.w_up.data = np.array([[0.5, -0.5]])
    out = adalink_forward(Tensor([[1.0, 2.0]]), m)
    assert np.allclose(out.data, [[2.5, 0.5]], atol=1e-15)


def test_adalink_residual_rank_bounded(rng):
    m = _module(d_emb=16, rank=2, seed=3)
    m.w_up.data = rng.standard_normal((2, 16))
    e = Tensor(rng.standard_normal((10, 16)))
    delta = adalink_forward(e, m).data - e.data
    s = np.linalg.svd(delta, compute_uv=False)
    assert np.all(s[2:] < 1e-9)


def test_adalink_linear_variant_scales_linearly(rng):
    m = _module(d_emb=8, rank=4, relu=False, seed=1)
    m.w_up.data = rng.standard_normal((4, 8))
    e = rng.standard_normal((6, 8))
    alpha = -2.75
    out1 = adalink_forward(Tensor(e * alpha), m).data
    out2 = alpha * adalink_forward(Tensor(e), m).data
    assert np.max(np.abs(out1 - out2)) < 1e-12 * max(1.0, np.max(np.abs(out2)))


def test_adalink_width_mismatch(rng):
    m = _module(d_emb=8, rank=2)
    with pytest.raises(DimensionError):
        adalink_forward(Tensor(rng.standard_normal((3, 4))), m)


def test_multimodal_isolation(rng):
    text = _module(d_emb=8, rank=2, scope="text", seed=1)
    image = _module(d_emb=8, rank=2, scope="image", seed=2)
    image.w_up.data = rng.standard_normal((2, 8))
    e_img = Tensor(rng.standard_normal((4, 8)))
    e_txt = Tensor(rng.standard_normal((3, 8)))
    before, _ = apply_multimodal_adalink(e_img, e_txt, text, image)
    text.w_up.data = rng.standard_normal((2, 8))  # perturb the other modality
    after, _ = apply_multimodal_adalink(e_img, e_txt, text, image)
    assert np.array_equal(before.data, after.data)


def test_multimodal_missing_module(rng):
    text = _module(scope="text")
    e = Tensor(rng.standard_normal((3, 4)))
    with pytest.raises(ConfigurationError, match="image"):
        apply_multimodal_adalink(e, e, text_module=text)


def test_multimodal_zero_init_identity(rng):
    e_img = Tensor(rng.standard_normal((4, 4)))
    e_txt = Tensor(rng.standard_normal((2, 4)))
    out_img, out_txt = apply_multimodal_adalink(
        e_img, e_txt, _module(scope="text"), _module(scope="image"))
    assert np.array_equal(out_img.data, e_img.data)
    assert np.array_equal(out_txt.data, e_txt.data)


def test_unified_double_rank_matches_modality_param_count():
    cfg = ModelConfig()
    modality = count_trainable_params(AdapterSpec("adalink", rank=64), cfg)
    unified = count_trainable_params(
        AdapterSpec("adalink", rank=128, scope="unified"), cfg)
    assert modality.total == unified.total


def test_lora_linear_zero_b_equals_base(rng):
    x = Tensor(rng.standard_normal((2, 3)))
    w = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal(4))
    a_t = Tensor(rng.standard_normal((3, 2)))
    b_t = Tensor(np.zeros((2, 4)))
    base = ad.add_bias(ad.matmul(x, w), b)
    assert np.array_equal(lora_linear(x, w, b, a_t, b_t).data, base.data)
    b_t2 = Tensor(rng.standard_normal((2, 4)))
    assert np.array_equal(lora_linear(x, w, b, a_t, b_t2, lora_scale=0.0).data, base.data)


def test_lora_linear_hand_computed():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([10.0, 20.0])
    a_t = Tensor([[1.0], [1.0]])
    b_t = Tensor([[2.0, -1.0]])
    # x@w + b = [11, 22]; (x@a)@b = [6, -3]
    assert np.allclose(lora_linear(x, w, b, a_t, b_t).data, [[17.0, 19.0]], atol=1e-15)


def test_lora_gradients_only_reach_a_and_b(rng):
    cfg = tiny_config()
    bb = Backbone(cfg, seed=2)
    aset = build_adapters(AdapterSpec("lora", rank=2), bb, seed=0)
    params = collect_trainables(bb, aset)
    batch = random_batch(cfg, rng)
    with ComputeGraph() as g:
        loss, _ = batch_loss(bb, batch, aset, train=True, rng=np.random.default_rng(0))
        g.backward(loss)
    for p in bb.params.values():
        assert p.grad is None
    for name, p in params.items():
        assert p.grad is not None, name


# --- accounting -------------------------------------------------------------

PAPER_COUNT_CASES = [
    (AdapterSpec("adalink", rank=64), 4096, 2, 1_048_576),
    (AdapterSpec("adalink", rank=64), 2048, 2, 524_288),
    (AdapterSpec("adalink", rank=4, scope="unified"), 1024, 1, 8_192),
    (AdapterSpec("adalink", rank=256, scope="unified"), 1024, 1, 524_288),
    (AdapterSpec("adalink", rank=1024, scope="unified"), 1024, 1, 2_097_152),
]


@pytest.mark.parametrize("spec,d_emb,n_mod,expected", PAPER_COUNT_CASES)
def test_reported_adapter_param_counts(spec, d_emb, n_mod, expected):
    cfg = ModelConfig(d_emb=d_emb, n_heads=d_emb // 64)
    assert count_trainable_params(spec, cfg, n_modalities=n_mod).total == expected


@pytest.mark.parametrize("d_emb,expected", [(4096, 262_144), (2048, 131_072)])
def test_reported_prompt_core_counts(d_emb, expected):
    cfg = ModelConfig(d_emb=d_emb, n_heads=d_emb // 64)
    count = count_trainable_params(AdapterSpec("prompt"), cfg)
    assert count.core == expected
    assert count.components["prompt"] == expected
    assert count.total == expected + count.components["reparam"]


def test_lora_count_formula():
    cfg = tiny_config()
    spec = AdapterSpec("lora", rank=2)
    expected = sum(2 * (i + o) for i, o in lora_target_layers(cfg).values())
    assert count_trainable_params(spec, cfg).total == expected


def test_counts_match_empirical_gradient_partition(rng):
    cfg = tiny_config()
    batch = random_batch(cfg, rng)
    for spec in (AdapterSpec("adalink", rank=2), AdapterSpec("lora", rank=2),
                 AdapterSpec("prompt", prompt_len=4), AdapterSpec("full")):
        bb = Backbone(cfg, seed=7)
        aset = build_adapters(spec, bb, seed=1)
        params = collect_trainables(bb, aset)
        with ComputeGraph() as g:
            loss, _ = batch_loss(bb, batch, aset, train=True, rng=np.random.default_rng(2))
            g.backward(loss)
        got = sum(p.size for p in params.values() if p.grad is not None)
        want = count_trainable_params(spec, cfg).total
        assert got == want, f"{spec.kind}: {got} != {want}"


def test_flops_depth_invariance_for_input_adapter():
    spec = AdapterSpec("adalink", rank=8)
    costs = {
        flops_added(spec, 100, tiny_config(n_enc_layers=layers))
        for layers in (2, 4, 8)
    }
    assert len(costs) == 1


def test_flops_formula_instantiation():
    cfg = ModelConfig(d_emb=64, n_heads=4)
    assert flops_added(AdapterSpec("adalink", rank=4), 100, cfg) == 51_200


def test_prompt_flops_double_with_layers():
    spec = AdapterSpec("prompt", prompt_len=8)
    c2 = flops_added(spec, 20, tiny_config(n_enc_layers=2))
    c4 = flops_added(spec, 20, tiny_config(n_enc_layers=4))
    assert c4 == 2 * c2
    assert c4 > c2 > 0


def test_adapter_state_roundtrip(rng):
    cfg = tiny_config()
    bb = Backbone(cfg, seed=0)
    for spec in (AdapterSpec("adalink", rank=3), AdapterSpec("lora", rank=2),
                 AdapterSpec("prompt", prompt_len=4)):
        aset = build_adapters(spec, bb, seed=5)
        for p in aset.named_params().values():
            p.data = rng.standard_normal(p.shape)
        spec_d, d_emb, tensors = adapter_state(aset)
        rebuilt = adapters_from_state(spec_d, d_emb, tensors)
        assert rebuilt.spec == aset.spec
        for name, p in aset.named_params().items():
            assert np.array_equal(rebuilt.named_params()[name].data, p.data)


def test_zero_init_identity_at_logits_level(rng):
    cfg = tiny_config()
    bb = Backbone(cfg, seed=9)
    ex = random_example(cfg, rng)
    base = example_logits(bb, ex).data
    for spec in (AdapterSpec("adalink", rank=2), AdapterSpec("adalink", rank=2, scope="unified"),
                 AdapterSpec("lora", rank=2), AdapterSpec("full")):
        aset = build_adapters(spec, bb, seed=3)
        got = example_logits(bb, ex, aset).data
        assert np.array_equal(got, base), spec.kind


def test_prompt_reparam_identity_at_init(rng):
    cfg = tiny_config()
    bb = Backbone(cfg, seed=9)
    aset = build_adapters(AdapterSpec("prompt", prompt_len=4), bb, seed=3)
    eff = aset.prompt_module.effective_prompt()
    assert np.array_equal(eff.data, aset.prompt_module.prompt.data)
