"""A small frozen encoder-decoder transformer over token and patch inputs.

The encoder consumes image-patch embeddings followed by text-token
embeddings (optionally preceded by soft prompt rows); the decoder attends
to the encoder output and predicts target tokens through an output
projection tied to the token embedding table.

Choices that matter to callers:

* positions are learned absolute embeddings added inside the encoder and
  decoder, sized so a prepended prompt always fits; input adapters run
  before positions are added,
* the patch projector is the stand-in for an external frozen vision tower
  and is never trained, under any tuning mode,
* dropout fires on the embedded inputs and on each block output; eval mode
  never touches an rng,
* a frozen backbone is immutable after construction, so concurrent
  read-only inference is safe; training mutates adapter state only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, VocabularyError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
N_RESERVED_TOKENS = 4

_MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters; validated on construction."""

    d_emb: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    patch_feature_dim: int = 16
    n_patches: int = 8
    max_text_len: int = 12
    max_target_len: int = 8
    dropout_rate: float = 0.1
    max_prompt_len: int = 64

    def __post_init__(self):
        counts = (
            self.d_emb, self.n_enc_layers, self.n_dec_layers, self.n_heads,
            self.d_ff, self.patch_feature_dim, self.n_patches,
            self.max_text_len, self.max_target_len,
        )
        if any(c < 1 for c in counts):
            raise ConfigurationError(f"all size fields must be >= 1: {self}")
        if self.d_emb % self.n_heads != 0:
            raise ConfigurationError(
                f"d_emb={self.d_emb} not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size < N_RESERVED_TOKENS:
            raise ConfigurationError(f"vocab_size must be >= {N_RESERVED_TOKENS}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError(f"dropout_rate must be in [0,1): {self.dropout_rate}")
        if self.max_prompt_len < 0:
            raise ConfigurationError("max_prompt_len must be >= 0")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def enc_len(self) -> int:
        return self.n_patches + self.max_text_len


def backbone_param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape manifest; the single source of truth for construction,
    checkpointing and parameter counting."""
    d, ff = config.d_emb, config.d_ff
    shapes = {
        "token_embedding": (config.vocab_size, d),
        "patch_proj_w": (config.patch_feature_dim, d),
        "patch_proj_b": (d,),
        "enc_pos": (config.max_prompt_len + config.enc_len, d),
        "dec_pos": (config.max_target_len, d),
        "enc_final_ln_g": (d,),
        "enc_final_ln_b": (d,),
        "dec_final_ln_g": (d,),
        "dec_final_ln_b": (d,),
    }

    def block(prefix, attn_names):
        for a in attn_names:
            for m in ("q", "k", "v", "o"):
                shapes[f"{prefix}.{a}_{m}_w"] = (d, d)
                shapes[f"{prefix}.{a}_{m}_b"] = (d,)
        shapes[f"{prefix}.mlp_w1"] = (d, ff)
        shapes[f"{prefix}.mlp_b1"] = (ff,)
        shapes[f"{prefix}.mlp_w2"] = (ff, d)
        shapes[f"{prefix}.mlp_b2"] = (d,)
        n_ln = 1 + len(attn_names)
        for i in range(1, n_ln + 1):
            shapes[f"{prefix}.ln{i}_g"] = (d,)
            shapes[f"{prefix}.ln{i}_b"] = (d,)

    for i in range(config.n_enc_layers):
        block(f"enc{i}", ("self",))
    for i in range(config.n_dec_layers):
        block(f"dec{i}", ("self", "cross"))
    return shapes


# Parameter groups that stay frozen even under full fine-tuning: the patch
# projector plays the part of an external frozen vision tower.
ALWAYS_FROZEN_PREFIXES = ("patch_proj_",)


class Backbone:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in backbone_param_shapes(config).items():
            self.params[name] = Tensor(self._init_param(name, shape, rng), name=name)
        # Baked serving: an optional task-specific copy of the vocabulary
        # table with a text adapter folded in. Only the encoder's text input
        # reads it; decoder inputs and the tied output projection keep the
        # original table.
        self.enc_text_override: Tensor | None = None

    @staticmethod
    def _init_param(name, shape, rng):
        if name.endswith(("_g",)):
            return np.ones(shape)
        if name.endswith(("_b", "_b1", "_b2")) or name == "patch_proj_b":
            return np.zeros(shape)
        if "pos" in name:
            # position-dependent attention at toy scale only becomes learnable
            # when the positional signal is comparable to the content signal
            return rng.standard_normal(shape) * 0.3
        scale = 0.02 if name == "token_embedding" else 1.0 / np.sqrt(shape[0])
        return rng.standard_normal(shape) * scale

    # -- parameter bookkeeping ------------------------------------------------

    def trainable_names(self, full_finetune: bool) -> list[str]:
        if not full_finetune:
            return []
        return [
            n for n in self.params
            if not n.startswith(ALWAYS_FROZEN_PREFIXES)
        ]

    def set_trainable(self, names):
        wanted = set(names)
        unknown = wanted - set(self.params)
        if unknown:
            raise ConfigurationError(f"unknown parameter names: {sorted(unknown)}")
        for n, p in self.params.items():
            p.requires_grad = n in wanted

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "Backbone":
        other = Backbone(self.config, seed=0)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        if self.enc_text_override is not None:
            other.enc_text_override = Tensor(self.enc_text_override.data.copy())
        return other

    # -- embedding layers -----------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        bad = np.nonzero((tokens < 0) | (tokens >= self.config.vocab_size))[0]
        if bad.size:
            i = int(bad[0])
            raise VocabularyError(
                f"token id {int(tokens[i])} at position {i} outside vocabulary "
                f"of size {self.config.vocab_size}"
            )
        return tokens

    def embed_text(self, tokens) -> Tensor:
        return ad.gather_rows(self.params["token_embedding"], self._check_tokens(tokens))

    def _encoder_text_embedding(self, tokens) -> Tensor:
        if self.enc_text_override is not None:
            return ad.gather_rows(self.enc_text_override, self._check_tokens(tokens))
        return self.embed_text(tokens)

    def embed_patches(self, patches) -> Tensor:
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        expect = (self.config.n_patches, self.config.patch_feature_dim)
        if patches.shape != expect:
            raise DimensionError(f"patches shape {patches.shape}, expected {expect}")
        return ad.add_bias(
            ad.matmul(patches, self.params["patch_proj_w"]), self.params["patch_proj_b"]
        )

    # -- transformer internals --------------------------------------------------

    def _linear(self, x, prefix, adapters, train, rng, rate):
        w, b = self.params[f"{prefix}_w"], self.params[f"{prefix}_b"]
        if adapters is not None:
            out = adapters.wrap_linear(prefix, x, w, b, train, rng, rate)
            if out is not None:
                return out
        return ad.add_bias(ad.matmul(x, w), b)

    def _attention(self, xq, xkv, prefix, causal, adapters, train, rng, rate):
        cfg = self.config
        dh = cfg.d_emb // cfg.n_heads
        q = self._linear(xq, f"{prefix}_q", adapters, train, rng, rate)
        k = self._linear(xkv, f"{prefix}_k", adapters, train, rng, rate)
        v = self._linear(xkv, f"{prefix}_v", adapters, train, rng, rate)
        mask = None
        if causal:
            n = xq.shape[0]
            mask = Tensor(np.triu(np.full((n, n), _MASK_VALUE), k=1))
        heads = []
        for h in range(cfg.n_heads):
            qh = ad.narrow(q, 1, h * dh, dh)
            kh = ad.narrow(k, 1, h * dh, dh)
            vh = ad.narrow(v, 1, h * dh, dh)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            if mask is not None:
                scores = ad.add(scores, mask)
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return self._linear(merged, f"{prefix}_o", adapters, train, rng, rate)

    def _ln(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}_g"], self.params[f"{prefix}_b"])

    def _block_mlp(self, x, prefix, adapters, train, rng, rate):
        w1, b1 = self.params[f"{prefix}.mlp_w1"], self.params[f"{prefix}.mlp_b1"]
        w2, b2 = self.params[f"{prefix}.mlp_w2"], self.params[f"{prefix}.mlp_b2"]
        if adapters is not None:
            h = adapters.wrap_linear(f"{prefix}.mlp_1", x, w1, b1, train, rng, rate)
            if h is None:
                h = ad.add_bias(ad.matmul(x, w1), b1)
            h = ad.relu(h)
            out = adapters.wrap_linear(f"{prefix}.mlp_2", h, w2, b2, train, rng, rate)
            if out is None:
                out = ad.add_bias(ad.matmul(h, w2), b2)
            return out
        h = ad.relu(ad.add_bias(ad.matmul(x, w1), b1))
        return ad.add_bias(ad.matmul(h, w2), b2)

    def _drop(self, x, train, rng, rate):
        return ad.dropout(x, rate, rng=rng, training=train)

    def encode(self, patches, text_tokens, adapters=None, train=False, rng=None) -> Tensor:
        cfg = self.config
        rate = cfg.dropout_rate if adapters is None else adapters.dropout_rate(cfg)
        e_img = self.embed_patches(patches)
        e_txt = self._encoder_text_embedding(text_tokens)
        if adapters is not None:
            e_img, e_txt = adapters.adapt_inputs(e_img, e_txt, train, rng, rate)
        parts = [e_img, e_txt]
        if adapters is not None:
            prompt = adapters.prompt_rows(train, rng)
            if prompt is not None:
                if prompt.shape[1] != cfg.d_emb:
                    raise ConfigurationError(
                        f"prompt width {prompt.shape[1]} != d_emb {cfg.d_emb}"
                    )
                if prompt.shape[0] > cfg.max_prompt_len:
                    raise ConfigurationError(
                        f"prompt length {prompt.shape[0]} exceeds max_prompt_len "
                        f"{cfg.max_prompt_len}"
                    )
                parts.insert(0, prompt)
        x = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        x = ad.add(x, ad.narrow(self.params["enc_pos"], 0, 0, x.shape[0]))
        x = self._drop(x, train, rng, rate)
        for i in range(cfg.n_enc_layers):
            p = f"enc{i}"
            normed = self._ln(x, f"{p}.ln1")
            a = self._attention(normed, normed, f"{p}.self", False, adapters, train, rng, rate)
            x = ad.add(x, self._drop(a, train, rng, rate))
            m = self._block_mlp(self._ln(x, f"{p}.ln2"), p, adapters, train, rng, rate)
            x = ad.add(x, self._drop(m, train, rng, rate))
        return self._ln(x, "enc_final_ln")

    def decode(self, enc_out, dec_tokens, adapters=None, train=False, rng=None) -> Tensor:
        """Teacher-forced decoder pass; returns next-token logits per position."""
        cfg = self.config
        rate = cfg.dropout_rate if adapters is None else adapters.dropout_rate(cfg)
        dec_tokens = np.asarray(dec_tokens, dtype=np.int64)
        if len(dec_tokens) > cfg.max_target_len:
            raise DimensionError(
                f"decoder length {len(dec_tokens)} exceeds max_target_len {cfg.max_target_len}"
            )
        x = self.embed_text(dec_tokens)
        x = ad.add(x, ad.narrow(self.params["dec_pos"], 0, 0, x.shape[0]))
        x = self._drop(x, train, rng, rate)
        for i in range(cfg.n_dec_layers):
            p = f"dec{i}"
            normed = self._ln(x, f"{p}.ln1")
            a = self._attention(normed, normed, f"{p}.self", True, None, train, rng, rate)
            x = ad.add(x, self._drop(a, train, rng, rate))
            c = self._attention(self._ln(x, f"{p}.ln2"), enc_out,
                                f"{p}.cross", False, None, train, rng, rate)
            x = ad.add(x, self._drop(c, train, rng, rate))
            m = self._block_mlp(self._ln(x, f"{p}.ln3"), p, None, train, rng, rate)
            x = ad.add(x, self._drop(m, train, rng, rate))
        x = self._ln(x, "dec_final_ln")
        return ad.matmul(x, ad.transpose(self.params["token_embedding"]))


def forward(backbone: Backbone, patches, text_tokens, dec_tokens,
            adapters=None, train: bool = False, rng=None) -> Tensor:
    """Full pass for one example; logits are [len(dec_tokens), vocab_size]."""
    if adapters is not None:
        adapters.validate_for(backbone.config)
    enc_out = backbone.encode(patches, text_tokens, adapters, train, rng)
    return backbone.decode(enc_out, dec_tokens, adapters, train, rng)


def teacher_inputs(targets) -> np.ndarray:
    """Shift targets right behind a BOS token."""
    targets = np.asarray(targets, dtype=np.int64)
    return np.concatenate([[BOS_ID], targets[:-1]])


def example_logits(backbone, example, adapters=None, train=False, rng=None) -> Tensor:
    return forward(backbone, example.patches, example.text,
                   teacher_inputs(example.target), adapters, train, rng)


def batch_loss(backbone, batch, adapters=None, train=False, rng=None):
    """Mean token cross entropy over non-pad target positions of the batch."""
    sums = []
    total_valid = 0
    for ex in batch.examples():
        logits = example_logits(backbone, ex, adapters, train, rng)
        s, n_valid = ad.cross_entropy_logits(logits, ex.target, ignore_id=PAD_ID)
        sums.append(s)
        total_valid += n_valid
    if total_valid == 0:
        raise DimensionError("batch has no non-pad target tokens")
    total = sums[0]
    for s in sums[1:]:
        total = ad.add(total, s)
    return ad.scale(total, 1.0 / total_valid), total_valid


def greedy_decode(backbone, patches, text_tokens, adapters=None,
                  max_len: int | None = None) -> np.ndarray:
    """Argmax decoding from BOS until EOS or max_len; argmax ties resolve to
    the lowest token id. Returns generated ids without BOS/EOS."""
    if adapters is not None:
        adapters.validate_for(backbone.config)
    max_len = backbone.config.max_target_len if max_len is None else max_len
    if max_len < 1:
        raise DimensionError(f"max_len must be >= 1, got {max_len}")
    max_len = min(max_len, backbone.config.max_target_len)
    enc_out = backbone.encode(patches, text_tokens, adapters, train=False)
    seq = [BOS_ID]
    out = []
    for _ in range(max_len):
        logits = backbone.decode(enc_out, np.asarray(seq), adapters, train=False)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        seq.append(nxt)
    return np.asarray(out, dtype=np.int64)
