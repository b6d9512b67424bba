"""Deterministic synthetic multimodal tasks and evaluation metrics.

Task families
-------------
mm_vqa      patch grids encode colored shapes as one-hot feature blocks; the
            question names an attribute and a patch position, the answer is
            a 1-2 token readout. Correctness needs *both* modalities: the
            text says where to look and what to report, the image holds the
            value. A majority-vote-given-text oracle stays near chance by
            construction, and every generated dataset can be replayed
            against the labeling rule with `verify_dataset`.
mm_caption  fixed trigger text; the target lists the colors of the first k
            patches in order.
text_copy   echo a short token sequence.
text_cls    binary label token decided by presence of a marker token; the
            rule is linearly separable from a bag of tokens on purpose, so
            a depth-0 classifier can certify learnability.

Generators are pure functions of (task_id, seed, knobs): two processes
produce identical bytes. Generation is stateless per example and safe to
parallelize.

The on-disk dataset format is JSON lines: a header record carrying the task
definition and its config hash, then one record per example with explicit
integer arrays (patch features in these tasks are exact one-hots).

A word on the vqa `encoding_offset` knob: it slides the one-hot feature
blocks to a different range of the patch feature vector, which makes a
model pretrained at offset 0 see semantically equivalent scenes through
completely different (frozen) projector columns. That is the distribution
shift the input-embedding adapters are asked to bridge.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, VerificationError
from .model import BOS_ID, EOS_ID, N_RESERVED_TOKENS, PAD_ID, greedy_decode


@dataclass(frozen=True)
class VocabLayout:
    """Where each token family lives in the shared vocabulary."""

    n_colors: int = 3
    n_shapes: int = 3
    n_positions: int = 8
    copy_slice: int = 16
    cls_slice: int = 16

    @property
    def color0(self):
        return N_RESERVED_TOKENS

    @property
    def shape0(self):
        return self.color0 + self.n_colors

    @property
    def ask_color(self):
        return self.shape0 + self.n_shapes

    @property
    def ask_shape(self):
        return self.ask_color + 1

    @property
    def ask_both(self):
        return self.ask_color + 2

    @property
    def pos0(self):
        return self.ask_color + 3

    @property
    def caption_trigger(self):
        return self.pos0 + self.n_positions

    @property
    def copy0(self):
        return self.caption_trigger + 1

    @property
    def cls0(self):
        return self.copy0 + self.copy_slice

    @property
    def cls_true(self):
        return self.cls0 + self.cls_slice

    @property
    def cls_false(self):
        return self.cls_true + 1

    @property
    def vocab_needed(self):
        return self.cls_false + 1


DEFAULT_LAYOUT = VocabLayout()

TASK_KINDS = ("mm_vqa", "mm_caption", "text_copy", "text_cls")


@dataclass
class TaskDef:
    """Identity and knobs of one synthetic task; hashable content, not object."""

    task_id: str
    kind: str
    seed: int = 0
    n_train: int = 512
    n_val: int = 256
    knobs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}, want one of {TASK_KINDS}")

    def knob(self, name, default):
        return self.knobs.get(name, default)

    def to_dict(self):
        return {
            "task_id": self.task_id, "kind": self.kind, "seed": self.seed,
            "n_train": self.n_train, "n_val": self.n_val, "knobs": dict(self.knobs),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(self.task_id.encode())])


@dataclass
class Example:
    patches: np.ndarray  # [n_patches, patch_feature_dim] float64
    text: np.ndarray     # [max_text_len] int64, pads trail
    target: np.ndarray   # [max_target_len] int64, ends with eos, pads trail


@dataclass
class MultimodalBatch:
    """A stack of same-task examples; `boundary` is where text begins in the
    encoder sequence (after the image patches)."""

    task_id: str
    patches: np.ndarray   # [B, n_patches, patch_feature_dim]
    text: np.ndarray      # [B, max_text_len]
    targets: np.ndarray   # [B, max_target_len]
    boundary: int

    def __len__(self):
        return len(self.text)

    def examples(self):
        for i in range(len(self.text)):
            yield Example(self.patches[i], self.text[i], self.targets[i])


@dataclass
class TaskData:
    task: TaskDef
    train: list
    val: list

    def batches(self, split: str, batch_size: int, rng=None):
        """Single-task batches; order shuffled when an rng is given."""
        examples = self.train if split == "train" else self.val
        order = np.arange(len(examples))
        if rng is not None:
            rng.shuffle(order)
        n_patches = examples[0].patches.shape[0]
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            yield MultimodalBatch(
                task_id=self.task.task_id,
                patches=np.stack([examples[i].patches for i in idx]),
                text=np.stack([examples[i].text for i in idx]),
                targets=np.stack([examples[i].target for i in idx]),
                boundary=n_patches,
            )


def _pad_to(tokens, length):
    tokens = list(tokens)
    if len(tokens) > length:
        raise ConfigurationError(f"sequence of {len(tokens)} tokens exceeds budget {length}")
    return np.asarray(tokens + [PAD_ID] * (length - len(tokens)), dtype=np.int64)


def _vqa_blocks(task: TaskDef, config, layout: VocabLayout):
    n_colors = task.knob("n_colors", layout.n_colors)
    n_shapes = task.knob("n_shapes", layout.n_shapes)
    offset = task.knob("encoding_offset", 0)
    if n_colors > layout.n_colors or n_shapes > layout.n_shapes:
        raise ConfigurationError("task uses more attribute values than the vocabulary holds")
    if n_colors > config.n_patches or n_shapes > config.n_patches:
        raise ConfigurationError(
            f"{n_colors} colors / {n_shapes} shapes do not fit {config.n_patches} patches"
        )
    if offset + n_colors + n_shapes > config.patch_feature_dim:
        raise ConfigurationError(
            f"encoding offset {offset} pushes one-hot blocks past "
            f"patch_feature_dim={config.patch_feature_dim}"
        )
    if config.n_patches > layout.n_positions:
        raise ConfigurationError("not enough position tokens for this patch grid")
    return n_colors, n_shapes, offset


def _vqa_scene(rng, config, n_colors, n_shapes, offset):
    colors = rng.integers(0, n_colors, size=config.n_patches)
    shapes = rng.integers(0, n_shapes, size=config.n_patches)
    feats = np.zeros((config.n_patches, config.patch_feature_dim))
    rows = np.arange(config.n_patches)
    feats[rows, offset + colors] = 1.0
    feats[rows, offset + n_colors + shapes] = 1.0
    return feats, colors, shapes


def _gen_mm_vqa(task: TaskDef, config, layout: VocabLayout):
    n_colors, n_shapes, offset = _vqa_blocks(task, config, layout)
    attrs = task.knob("attrs", "color,shape,both").split(",")
    rng = task.rng()
    ask = {"color": layout.ask_color, "shape": layout.ask_shape, "both": layout.ask_both}
    seen = set()
    out = []
    while len(out) < task.n_train + task.n_val:
        feats, colors, shapes = _vqa_scene(rng, config, n_colors, n_shapes, offset)
        attr = attrs[rng.integers(0, len(attrs))]
        pos = int(rng.integers(0, config.n_patches))
        text = _pad_to([ask[attr], layout.pos0 + pos], config.max_text_len)
        if attr == "color":
            answer = [layout.color0 + colors[pos]]
        elif attr == "shape":
            answer = [layout.shape0 + shapes[pos]]
        else:
            answer = [layout.color0 + colors[pos], layout.shape0 + shapes[pos]]
        key = (feats.tobytes(), text.tobytes())
        if key in seen:
            continue
        seen.add(key)
        out.append(Example(feats, text, _pad_to(answer + [EOS_ID], config.max_target_len)))
    return out


def _gen_mm_caption(task: TaskDef, config, layout: VocabLayout):
    n_colors, n_shapes, offset = _vqa_blocks(task, config, layout)
    k = task.knob("caption_patches", 3)
    if k + 1 > config.max_target_len:
        raise ConfigurationError(f"caption of {k} patches does not fit max_target_len")
    rng = task.rng()
    text = _pad_to([layout.caption_trigger], config.max_text_len)
    seen = set()
    out = []
    while len(out) < task.n_train + task.n_val:
        feats, colors, _ = _vqa_scene(rng, config, n_colors, n_shapes, offset)
        key = feats.tobytes()
        if key in seen:
            continue
        seen.add(key)
        answer = [layout.color0 + c for c in colors[:k]]
        out.append(Example(feats, text, _pad_to(answer + [EOS_ID], config.max_target_len)))
    return out


def _gen_text_copy(task: TaskDef, config, layout: VocabLayout):
    max_copy = task.knob("copy_max_len", min(5, config.max_target_len - 1))
    if max_copy + 1 > config.max_target_len or max_copy > config.max_text_len:
        raise ConfigurationError("copy length does not fit the text/target budgets")
    rng = task.rng()
    patches = np.zeros((config.n_patches, config.patch_feature_dim))
    seen = set()
    out = []
    while len(out) < task.n_train + task.n_val:
        n = int(rng.integers(2, max_copy + 1))
        toks = (layout.copy0 + rng.integers(0, layout.copy_slice, size=n)).tolist()
        text = _pad_to(toks, config.max_text_len)
        key = text.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(Example(patches, text, _pad_to(toks + [EOS_ID], config.max_target_len)))
    return out


def _gen_text_cls(task: TaskDef, config, layout: VocabLayout):
    length = task.knob("cls_len", 8)
    if length > config.max_text_len:
        raise ConfigurationError("classification text does not fit max_text_len")
    rng = task.rng()
    marker = layout.cls0 + int(task.knob("marker_index", int(rng.integers(0, layout.cls_slice))))
    patches = np.zeros((config.n_patches, config.patch_feature_dim))
    seen = set()
    out = []
    while len(out) < task.n_train + task.n_val:
        positive = len(out) % 2 == 0  # alternate for balance
        toks = layout.cls0 + rng.integers(0, layout.cls_slice, size=length)
        if positive and marker not in toks:
            toks[rng.integers(0, length)] = marker
        elif not positive:
            toks[toks == marker] = marker + 1 if marker + 1 < layout.cls0 + layout.cls_slice \
                else marker - 1
        text = _pad_to(toks.tolist(), config.max_text_len)
        key = text.tobytes()
        if key in seen:
            continue
        seen.add(key)
        label = layout.cls_true if marker in toks else layout.cls_false
        out.append(Example(patches, text, _pad_to([label, EOS_ID], config.max_target_len)))
    return out


_GENERATORS = {
    "mm_vqa": _gen_mm_vqa,
    "mm_caption": _gen_mm_caption,
    "text_copy": _gen_text_copy,
    "text_cls": _gen_text_cls,
}


def generate(task: TaskDef, config, layout: VocabLayout = DEFAULT_LAYOUT) -> TaskData:
    """Generate disjoint train/val splits, already verified against the rule."""
    if layout.vocab_needed > config.vocab_size:
        raise ConfigurationError(
            f"vocab layout needs {layout.vocab_needed} tokens, config has {config.vocab_size}"
        )
    examples = _GENERATORS[task.kind](task, config, layout)
    data = TaskData(task, examples[:task.n_train], examples[task.n_train:])
    verify_dataset(data, config, layout)
    return data


# ---------------------------------------------------------------------------
# rule replay


def _replay_rule(task: TaskDef, config, layout: VocabLayout, ex: Example) -> np.ndarray:
    """Recompute the expected target of one encoded example from scratch."""
    if task.kind == "mm_vqa":
        n_colors = task.knob("n_colors", layout.n_colors)
        n_shapes = task.knob("n_shapes", layout.n_shapes)
        offset = task.knob("encoding_offset", 0)
        ask, pos_tok = int(ex.text[0]), int(ex.text[1])
        pos = pos_tok - layout.pos0
        color = int(np.argmax(ex.patches[pos, offset:offset + n_colors]))
        shape = int(np.argmax(ex.patches[pos, offset + n_colors:offset + n_colors + n_shapes]))
        if ask == layout.ask_color:
            answer = [layout.color0 + color]
        elif ask == layout.ask_shape:
            answer = [layout.shape0 + shape]
        else:
            answer = [layout.color0 + color, layout.shape0 + shape]
    elif task.kind == "mm_caption":
        n_colors = task.knob("n_colors", layout.n_colors)
        offset = task.knob("encoding_offset", 0)
        k = task.knob("caption_patches", 3)
        answer = [
            layout.color0 + int(np.argmax(ex.patches[p, offset:offset + n_colors]))
            for p in range(k)
        ]
    elif task.kind == "text_copy":
        answer = [int(t) for t in ex.text if t != PAD_ID]
    else:
        rng = task.rng()
        marker = layout.cls0 + int(task.knob("marker_index", int(rng.integers(0, layout.cls_slice))))
        answer = [layout.cls_true if marker in ex.text else layout.cls_false]
    return _pad_to(answer + [EOS_ID], config.max_target_len)


def verify_dataset(data: TaskData, config, layout: VocabLayout = DEFAULT_LAYOUT) -> int:
    """Replay the labeling rule over every example; raise on any disagreement."""
    n = 0
    for split_name, split in (("train", data.train), ("val", data.val)):
        for i, ex in enumerate(split):
            expected = _replay_rule(data.task, config, layout, ex)
            if not np.array_equal(expected, ex.target):
                raise VerificationError(
                    f"task {data.task.task_id}: {split_name}[{i}] target "
                    f"{ex.target.tolist()} disagrees with rule {expected.tolist()}"
                )
            n += 1
    return n


# ---------------------------------------------------------------------------
# metrics


def strip_sequence(seq) -> list[int]:
    """Tokens before the first eos; trailing pads dropped if eos is missing."""
    out = []
    for t in np.asarray(seq).tolist():
        if t == EOS_ID:
            return out
        out.append(int(t))
    while out and out[-1] == PAD_ID:
        out.pop()
    return out


def exact_match(pred, gold) -> int:
    return int(strip_sequence(pred) == strip_sequence(gold))


def token_accuracy(pred, gold) -> float:
    """Positionwise agreement over the stripped gold length."""
    p, g = strip_sequence(pred), strip_sequence(gold)
    if not g:
        return 1.0 if not p else 0.0
    hits = sum(1 for i, t in enumerate(g) if i < len(p) and p[i] == t)
    return hits / len(g)


def evaluate(backbone, adapters, examples, max_len=None) -> dict:
    """Greedy-decode every example and report exact match / token accuracy."""
    em = acc = 0.0
    for ex in examples:
        pred = greedy_decode(backbone, ex.patches, ex.text, adapters, max_len)
        em += exact_match(pred, ex.target)
        acc += token_accuracy(pred, ex.target)
    n = len(examples)
    return {"exact_match": em / n, "token_accuracy": acc / n, "n": n}


# ---------------------------------------------------------------------------
# modality-ablation oracle


def text_majority_accuracy(examples) -> float:
    """Accuracy of the best text-only predictor: majority answer per question."""
    groups: dict[bytes, dict[bytes, int]] = {}
    for ex in examples:
        g = groups.setdefault(ex.text.tobytes(), {})
        key = ex.target.tobytes()
        g[key] = g.get(key, 0) + 1
    hits = sum(max(g.values()) for g in groups.values())
    return hits / len(examples)


def vqa_chance_rate(task: TaskDef, examples, layout: VocabLayout = DEFAULT_LAYOUT) -> float:
    """Expected accuracy of uniform guessing over each question's answer space."""
    n_colors = task.knob("n_colors", layout.n_colors)
    n_shapes = task.knob("n_shapes", layout.n_shapes)
    space = {
        layout.ask_color: n_colors,
        layout.ask_shape: n_shapes,
        layout.ask_both: n_colors * n_shapes,
    }
    return float(np.mean([1.0 / space[int(ex.text[0])] for ex in examples]))


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(data: TaskData, config, path) -> None:
    header = {"header": data.task.to_dict()}
    header["header"]["config_hash"] = data.task.config_hash()
    header["header"]["splits"] = {"train": len(data.train), "val": len(data.val)}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for split_name, split in (("train", data.train), ("val", data.val)):
            for ex in split:
                if not np.all(ex.patches == np.floor(ex.patches)):
                    raise ContractError("dataset format stores integer patch features only")
                rec = {
                    "split": split_name,
                    "patches": ex.patches.astype(np.int64).tolist(),
                    "text": ex.text.tolist(),
                    "target": ex.target.tolist(),
                }
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path) -> TaskData:
    with open(path, encoding="utf-8") as f:
        head = json.loads(f.readline())["header"]
        expected_hash = head.pop("config_hash")
        head.pop("splits")
        task = TaskDef(**head)
        if task.config_hash() != expected_hash:
            raise VerificationError(f"config hash mismatch in {path}")
        train, val = [], []
        for line in f:
            rec = json.loads(line)
            ex = Example(
                np.asarray(rec["patches"], dtype=np.float64),
                np.asarray(rec["text"], dtype=np.int64),
                np.asarray(rec["target"], dtype=np.int64),
            )
            (train if rec["split"] == "train" else val).append(ex)
    return TaskData(task, train, val)
