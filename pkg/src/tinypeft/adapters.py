"""The adapter zoo: residual input-embedding adapters, LoRA, prompt tuning,
and a full fine-tuning mode, plus exact parameter and FLOP accounting.

The central piece is :class:`AdaLink`, a residual low-rank map

    adapted = e + f(e @ w_down) @ w_up

applied to input embeddings before the transformer, instantiated per task
and per modality (or once, "unified"). `w_up` starts at zero, so a fresh
module is the identity and attaching it never perturbs the frozen model.
There are deliberately no bias terms: a module holds exactly
``2 * d_emb * rank`` parameters.

Adapter modules are plain parameter containers: immutable during inference
and mutated only by the single-threaded training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError
from .model import ALWAYS_FROZEN_PREFIXES, ModelConfig, backbone_param_shapes

KINDS = ("adalink", "lora", "prompt", "full")
SET_SCOPES = ("modality", "unified", "text", "image")

# Bottleneck divisor for the prompt's residual re-parameterization layers.
REPARAM_BOTTLENECK_DIV = 4


@dataclass(frozen=True)
class AdapterSpec:
    """Declarative description of one tuning method."""

    kind: str
    rank: int = 8
    scope: str = "modality"
    use_nonlinearity: bool = False
    prompt_len: int = 64
    reparam_layers: int = 2
    lora_scale: float = 1.0
    dropout_override: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown adapter kind {self.kind!r}, want one of {KINDS}")
        if self.kind in ("adalink", "lora") and self.rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {self.rank}")
        if self.kind == "adalink" and self.scope not in SET_SCOPES:
            raise ConfigurationError(f"scope must be one of {SET_SCOPES}, got {self.scope!r}")
        if self.kind == "prompt" and self.prompt_len < 1:
            raise ConfigurationError(f"prompt_len must be >= 1, got {self.prompt_len}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _trunc_normal(rng, shape, std):
    # clipped at two standard deviations; any nonzero scheme works for the
    # down projection since the zero up-projection guarantees identity at init
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class AdaLink:
    """One residual low-rank input-embedding adapter."""

    def __init__(self, d_emb: int, rank: int, scope: str,
                 use_nonlinearity: bool = False, rng=None):
        if scope not in ("text", "image", "unified"):
            raise ConfigurationError(f"module scope must be text|image|unified, got {scope!r}")
        rng = rng or np.random.default_rng(0)
        self.d_emb = d_emb
        self.rank = rank
        self.scope = scope
        self.use_nonlinearity = use_nonlinearity
        self.w_down = Tensor(_trunc_normal(rng, (d_emb, rank), 1.0 / np.sqrt(d_emb)),
                             name=f"adalink.{scope}.w_down")
        self.w_up = Tensor(np.zeros((rank, d_emb)), name=f"adalink.{scope}.w_up")

    def forward(self, e: Tensor, train: bool = False, rng=None,
                dropout_rate: float = 0.0) -> Tensor:
        if e.ndim != 2 or e.shape[1] != self.d_emb:
            raise DimensionError(f"adapter expects width {self.d_emb}, got {e.shape}")
        delta = ad.lowrank_delta(e, self.w_down, self.w_up, self.use_nonlinearity)
        delta = ad.dropout(delta, dropout_rate, rng=rng, training=train)
        return ad.add(e, delta)

    def named_params(self):
        return {f"adalink.{self.scope}.w_down": self.w_down,
                f"adalink.{self.scope}.w_up": self.w_up}


def adalink_forward(e: Tensor, module: AdaLink) -> Tensor:
    """e + f(e @ w_down) @ w_up, output shape equals input shape."""
    return module.forward(e)


def apply_multimodal_adalink(e_image: Tensor, e_text: Tensor,
                             text_module: AdaLink | None = None,
                             image_module: AdaLink | None = None,
                             unified_module: AdaLink | None = None):
    """Transform each modality by its own module, or both by a shared one.

    Returns (adapted_image, adapted_text); downstream concatenation order
    (image first, then text) is the caller's responsibility.
    """
    if unified_module is not None:
        return adalink_forward(e_image, unified_module), adalink_forward(e_text, unified_module)
    if image_module is None or text_module is None:
        missing = "image" if image_module is None else "text"
        raise ConfigurationError(f"no adapter module for present modality {missing!r}")
    return adalink_forward(e_image, image_module), adalink_forward(e_text, text_module)


class PromptTuning:
    """64 soft tokens fed through two residual re-parameterization layers.

    The effective prompt is reparam(reparam(prompt)) where each layer maps
    p -> p + relu(p @ w1) @ w2 through a bottleneck of d_emb/4. The w2 maps
    start at zero so the effective prompt equals the raw prompt at init.
    """

    def __init__(self, d_emb: int, prompt_len: int, n_layers: int,
                 token_table: np.ndarray, rng=None):
        rng = rng or np.random.default_rng(0)
        self.d_emb = d_emb
        self.prompt_len = prompt_len
        rows = rng.integers(0, len(token_table), size=prompt_len)
        self.prompt = Tensor(token_table[rows].copy(), name="prompt.tokens")
        bottleneck = max(1, d_emb // REPARAM_BOTTLENECK_DIV)
        self.reparam = []
        for i in range(n_layers):
            w1 = Tensor(_trunc_normal(rng, (d_emb, bottleneck), 1.0 / np.sqrt(d_emb)),
                        name=f"prompt.reparam{i}.w1")
            w2 = Tensor(np.zeros((bottleneck, d_emb)), name=f"prompt.reparam{i}.w2")
            self.reparam.append((w1, w2))

    def effective_prompt(self) -> Tensor:
        p = self.prompt
        for w1, w2 in self.reparam:
            p = ad.add(p, ad.lowrank_delta(p, w1, w2, True))
        return p

    def named_params(self):
        out = {"prompt.tokens": self.prompt}
        for i, (w1, w2) in enumerate(self.reparam):
            out[f"prompt.reparam{i}.w1"] = w1
            out[f"prompt.reparam{i}.w2"] = w2
        return out


def lora_linear(x: Tensor, base_w: Tensor, base_b: Tensor,
                a: Tensor, b: Tensor, lora_scale: float = 1.0) -> Tensor:
    """x @ base_w + base_b + scale * (x @ a) @ b; the base stays gradient-free."""
    base = ad.add_bias(ad.matmul(x, base_w), base_b)
    delta = ad.matmul(ad.matmul(x, a), b)
    if lora_scale != 1.0:
        delta = ad.scale(delta, lora_scale)
    return ad.add(base, delta)


def lora_target_layers(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Adapted linear layers (encoder attention and MLP only) with their dims."""
    d, ff = config.d_emb, config.d_ff
    out = {}
    for i in range(config.n_enc_layers):
        for m in ("q", "k", "v", "o"):
            out[f"enc{i}.self_{m}"] = (d, d)
        out[f"enc{i}.mlp_1"] = (d, ff)
        out[f"enc{i}.mlp_2"] = (ff, d)
    return out


class AdapterSet:
    """One materialized tuning method, hooked into the backbone forward pass.

    Exactly one kind is active per training run. The hook methods are what
    `model.Backbone` calls: `adapt_inputs` (input-embedding adapters),
    `prompt_rows` (soft prompt), `wrap_linear` (LoRA), and `dropout_rate`.
    """

    def __init__(self, spec: AdapterSpec, d_emb: int):
        self.spec = spec
        self.d_emb = d_emb
        self.adalink_modules: dict[str, AdaLink] = {}
        self.lora_modules: dict[str, tuple[Tensor, Tensor]] = {}
        self.prompt_module: PromptTuning | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    # -- hooks used by the model ------------------------------------------------

    def dropout_rate(self, config) -> float:
        if self.spec.dropout_override is not None:
            return self.spec.dropout_override
        if self.kind == "prompt":
            return 0.05
        return config.dropout_rate

    def adapt_inputs(self, e_img: Tensor, e_txt: Tensor, train: bool, rng,
                     rate: float = 0.0):
        if self.kind != "adalink":
            return e_img, e_txt
        mods = self.adalink_modules

        def run(m, e):
            return m.forward(e, train=train, rng=rng, dropout_rate=rate)

        if self.spec.scope == "unified":
            u = mods["unified"]
            return run(u, e_img), run(u, e_txt)
        if self.spec.scope == "modality":
            return run(mods["image"], e_img), run(mods["text"], e_txt)
        if self.spec.scope == "text":
            return e_img, run(mods["text"], e_txt)
        return run(mods["image"], e_img), e_txt

    def prompt_rows(self, train: bool, rng) -> Tensor | None:
        if self.kind != "prompt":
            return None
        return self.prompt_module.effective_prompt()

    def wrap_linear(self, name: str, x: Tensor, w: Tensor, b: Tensor,
                    train: bool, rng, rate: float = 0.0) -> Tensor | None:
        if self.kind != "lora" or name not in self.lora_modules:
            return None
        a_t, b_t = self.lora_modules[name]
        base = ad.add_bias(ad.matmul(x, w), b)
        delta = ad.matmul(ad.matmul(x, a_t), b_t)
        if self.spec.lora_scale != 1.0:
            delta = ad.scale(delta, self.spec.lora_scale)
        delta = ad.dropout(delta, rate, rng=rng, training=train)
        return ad.add(base, delta)

    # -- bookkeeping --------------------------------------------------------------

    def validate_for(self, config) -> None:
        if self.d_emb != config.d_emb:
            raise ConfigurationError(
                f"adapter built for d_emb={self.d_emb}, backbone has d_emb={config.d_emb}"
            )
        if self.kind == "prompt":
            if self.prompt_module.prompt_len > config.max_prompt_len:
                raise ConfigurationError(
                    f"prompt length {self.prompt_module.prompt_len} exceeds "
                    f"max_prompt_len {config.max_prompt_len}"
                )
        if self.kind == "lora":
            targets = lora_target_layers(config)
            for name, (a_t, b_t) in self.lora_modules.items():
                if name not in targets:
                    raise ConfigurationError(f"LoRA target {name!r} not in this backbone")
                d_in, d_out = targets[name]
                if a_t.shape[0] != d_in or b_t.shape[1] != d_out:
                    raise ConfigurationError(
                        f"LoRA dims for {name!r}: A {a_t.shape}, B {b_t.shape}, "
                        f"layer is {d_in}x{d_out}"
                    )

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for m in self.adalink_modules.values():
            out.update(m.named_params())
        for name, (a_t, b_t) in self.lora_modules.items():
            out[f"lora.{name}.a"] = a_t
            out[f"lora.{name}.b"] = b_t
        if self.prompt_module is not None:
            out.update(self.prompt_module.named_params())
        return out

    def mark_trainable(self):
        for p in self.named_params().values():
            p.requires_grad = True


def adapter_state(aset: AdapterSet):
    """(spec dict, d_emb, name -> array) triple for checkpointing."""
    tensors = {name: p.data for name, p in aset.named_params().items()}
    return aset.spec.to_dict(), aset.d_emb, tensors


def adapters_from_state(spec_dict: dict, d_emb: int, tensors: dict) -> AdapterSet:
    """Rebuild a set from checkpoint state; inverse of `adapter_state`."""
    spec = AdapterSpec.from_dict(spec_dict)
    s = AdapterSet(spec, d_emb)
    if spec.kind == "adalink":
        scopes = ("image", "text") if spec.scope == "modality" else (spec.scope,)
        for scope in scopes:
            m = AdaLink.__new__(AdaLink)
            m.d_emb, m.rank, m.scope = d_emb, spec.rank, scope
            m.use_nonlinearity = spec.use_nonlinearity
            m.w_down = Tensor(tensors[f"adalink.{scope}.w_down"],
                              name=f"adalink.{scope}.w_down")
            m.w_up = Tensor(tensors[f"adalink.{scope}.w_up"],
                            name=f"adalink.{scope}.w_up")
            s.adalink_modules[scope] = m
    elif spec.kind == "lora":
        names = sorted({k.split(".", 1)[1].rsplit(".", 1)[0] for k in tensors})
        for name in names:
            s.lora_modules[name] = (
                Tensor(tensors[f"lora.{name}.a"], name=f"lora.{name}.a"),
                Tensor(tensors[f"lora.{name}.b"], name=f"lora.{name}.b"),
            )
    elif spec.kind == "prompt":
        m = PromptTuning.__new__(PromptTuning)
        m.d_emb = d_emb
        m.prompt = Tensor(tensors["prompt.tokens"], name="prompt.tokens")
        m.prompt_len = m.prompt.shape[0]
        m.reparam = []
        for i in range(spec.reparam_layers):
            m.reparam.append((
                Tensor(tensors[f"prompt.reparam{i}.w1"], name=f"prompt.reparam{i}.w1"),
                Tensor(tensors[f"prompt.reparam{i}.w2"], name=f"prompt.reparam{i}.w2"),
            ))
        s.prompt_module = m
    return s


def build_adapters(spec: AdapterSpec, backbone, seed: int = 0) -> AdapterSet:
    """Materialize a spec against a backbone; fresh modules are identity maps."""
    config = backbone.config
    rng = np.random.default_rng(seed)
    s = AdapterSet(spec, config.d_emb)
    if spec.kind == "adalink":
        scopes = ("image", "text") if spec.scope == "modality" else (spec.scope,)
        for scope in scopes:
            s.adalink_modules[scope] = AdaLink(
                config.d_emb, spec.rank, scope, spec.use_nonlinearity, rng
            )
    elif spec.kind == "lora":
        for name, (d_in, d_out) in lora_target_layers(config).items():
            a_t = Tensor(_trunc_normal(rng, (d_in, spec.rank), 1.0 / np.sqrt(d_in)),
                         name=f"lora.{name}.a")
            b_t = Tensor(np.zeros((spec.rank, d_out)), name=f"lora.{name}.b")
            s.lora_modules[name] = (a_t, b_t)
    elif spec.kind == "prompt":
        s.prompt_module = PromptTuning(
            config.d_emb, spec.prompt_len, spec.reparam_layers,
            backbone.params["token_embedding"].data, rng,
        )
    return s


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ParamCount:
    """Exact trainable-parameter accounting for one adapter spec.

    `core` is the headline serving figure (for prompt tuning, the prompt
    matrix alone: the re-parameterization layers are training scaffolding
    that folds into the effective prompt afterwards). `total` is every
    entry that receives gradient updates during training.
    """

    total: int
    core: int
    components: dict = field(default_factory=dict)


def count_trainable_params(spec: AdapterSpec, config: ModelConfig,
                           n_tasks: int = 1, n_modalities: int = 2) -> ParamCount:
    d = config.d_emb
    if spec.kind == "adalink":
        scopes = n_modalities if spec.scope == "modality" else 1
        per_module = 2 * d * spec.rank
        total = scopes * per_module * n_tasks
        return ParamCount(total, total, {"adalink": total})
    if spec.kind == "prompt":
        core = spec.prompt_len * d * n_tasks
        bottleneck = max(1, d // REPARAM_BOTTLENECK_DIV)
        reparam = spec.reparam_layers * 2 * d * bottleneck * n_tasks
        return ParamCount(core + reparam, core, {"prompt": core, "reparam": reparam})
    if spec.kind == "lora":
        per_model = sum(
            spec.rank * (d_in + d_out)
            for d_in, d_out in lora_target_layers(config).values()
        )
        total = per_model * n_tasks
        return ParamCount(total, total, {"lora": total})
    # full fine-tuning: everything except the always-frozen vision stand-in
    per_model = sum(
        int(np.prod(shape))
        for name, shape in backbone_param_shapes(config).items()
        if not name.startswith(ALWAYS_FROZEN_PREFIXES)
    )
    total = per_model * n_tasks
    return ParamCount(total, total, {"backbone": total})


def _encoder_cost(seq_len: int, config: ModelConfig) -> int:
    """Multiply-accumulates of one encoder pass at a given sequence length."""
    d, ff = config.d_emb, config.d_ff
    per_layer = 4 * seq_len * d * d + 2 * seq_len * seq_len * d + 2 * seq_len * d * ff
    return config.n_enc_layers * per_layer


def flops_added(spec: AdapterSpec, n_positions: int, config: ModelConfig) -> int:
    """Multiply-accumulates one forward pass gains over the plain backbone.

    The input-embedding adapter cost has no layer-count term at all; prompt
    tuning pays the encoder's marginal cost of a longer sequence in every
    layer; LoRA pays per adapted linear layer.
    """
    if n_positions < 1:
        raise ContractError(f"sequence length must be >= 1, got {n_positions}")
    d = config.d_emb
    if spec.kind == "adalink":
        return n_positions * 2 * d * spec.rank
    if spec.kind == "prompt":
        return _encoder_cost(n_positions + spec.prompt_len, config) \
            - _encoder_cost(n_positions, config)
    if spec.kind == "lora":
        return sum(
            2 * spec.rank * (d_in + d_out) * n_positions
            for d_in, d_out in lora_target_layers(config).values()
        )
    return 0
