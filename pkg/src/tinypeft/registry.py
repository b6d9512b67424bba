"""Checkpoint format, the multi-task adapter registry, and baked serving.

Checkpoint container (shared by backbone and adapter files)::

    magic   b"TPCK"
    version u32, little-endian
    hlen    u64, little-endian
    header  UTF-8 canonical JSON of hlen bytes:
            {"kind", "config", "meta", "tensors": [{"name","shape","dtype","offset","nbytes"}]}
    payload raw little-endian float64 buffers, in header order
    digest  sha256 over everything above (32 bytes)

Tensors are sorted by name and the JSON is canonical, so save -> load ->
save reproduces the file byte for byte. The digest is verified on load;
any mismatch, truncation, or unknown version is a hard error.

A registry is a directory: one checkpoint per task plus ``index.json``
mapping task_id to (filename, spec hash). Reads are lock-free against a
snapshot; mutations take a lock and swap the snapshot atomically, so
replacing one task's adapter never stalls inference on another beyond the
swap itself.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from pathlib import Path

import numpy as np

from . import kernels as K
from .autodiff import Tensor
from .adapters import AdaLink, AdapterSet, adapter_state, adapters_from_state
from .errors import CheckpointError, ConfigurationError, ContractError, RoutingError
from .model import Backbone, ModelConfig, backbone_param_shapes

MAGIC = b"TPCK"
VERSION = 1
_INDEX_NAME = "index.json"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, kind: str, config: dict, meta: dict, tensors: dict) -> None:
    entries = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries.append({
            "name": name, "shape": list(arr.shape), "dtype": "<f8",
            "offset": offset, "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    header = _canonical_json(
        {"kind": kind, "config": config, "meta": meta, "tensors": entries})
    digest = hashlib.sha256()
    with open(path, "wb") as f:
        for chunk in (MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header):
            f.write(chunk)
            digest.update(chunk)
        for name in names:
            buf = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8")).tobytes()
            f.write(buf)
            digest.update(buf)
        f.write(digest.digest())


def load_checkpoint(path):
    """Returns (kind, config, meta, tensors); verifies structure and digest."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    body_end = len(raw) - 32
    if 16 + hlen > body_end:
        raise CheckpointError(f"{path}: truncated header")
    digest = hashlib.sha256(raw[:body_end]).digest()
    if digest != raw[body_end:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = raw[16 + hlen:body_end]
    tensors = {}
    for ent in header["tensors"]:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {ent['name']!r} past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype=ent["dtype"]).reshape(ent["shape"])
        tensors[ent["name"]] = arr.astype(np.float64)
    return header["kind"], header["config"], header["meta"], tensors


_OVERRIDE_NAME = "enc_text_override"


def save_backbone(backbone: Backbone, path, meta: dict | None = None) -> None:
    tensors = {name: p.data for name, p in backbone.params.items()}
    if backbone.enc_text_override is not None:
        tensors[_OVERRIDE_NAME] = backbone.enc_text_override.data
    save_checkpoint(path, "backbone", backbone.config.to_dict(), meta or {}, tensors)


def load_backbone(path) -> Backbone:
    kind, config, _meta, tensors = load_checkpoint(path)
    if kind != "backbone":
        raise CheckpointError(f"{path}: expected a backbone checkpoint, found {kind!r}")
    cfg = ModelConfig(**config)
    override = tensors.pop(_OVERRIDE_NAME, None)
    expected = backbone_param_shapes(cfg)
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: parameter names disagree with config")
    bb = Backbone(cfg, seed=0)
    for name, arr in tensors.items():
        if tuple(arr.shape) != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {expected[name]}")
        bb.params[name].data = arr.copy()
    if override is not None:
        bb.enc_text_override = Tensor(override)
    return bb


def save_adapters(aset: AdapterSet, path, meta: dict | None = None) -> None:
    spec_dict, d_emb, tensors = adapter_state(aset)
    config = {"spec": spec_dict, "d_emb": d_emb}
    save_checkpoint(path, "adapter", config, meta or {}, tensors)


def load_adapters(path) -> tuple[AdapterSet, dict]:
    kind, config, meta, tensors = load_checkpoint(path)
    if kind != "adapter":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, found {kind!r}")
    return adapters_from_state(config["spec"], config["d_emb"], tensors), meta


class AdapterRegistry:
    """task_id -> trained adapter set, one checkpoint file per task.

    The frozen backbone lives elsewhere; a registry's storage grows linearly
    with tasks and is independent of backbone depth.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._cache: dict[str, AdapterSet] = {}
        index_path = self.root / _INDEX_NAME
        if index_path.exists():
            self._index = json.loads(index_path.read_text(encoding="utf-8"))
        else:
            self._index = {"version": VERSION, "tasks": {}}

    def _write_index(self):
        (self.root / _INDEX_NAME).write_text(
            json.dumps(self._index, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    def tasks(self) -> list[str]:
        return sorted(self._index["tasks"])

    def add(self, task_id: str, aset: AdapterSet, meta: dict | None = None) -> Path:
        meta = dict(meta or {})
        spec_dict, _, _ = adapter_state(aset)
        meta.setdefault("rank", aset.spec.rank)
        meta.setdefault("scope", aset.spec.scope)
        spec_hash = hashlib.sha256(_canonical_json(spec_dict)).hexdigest()[:16]
        fname = f"{task_id}.tpck"
        with self._lock:
            save_adapters(aset, self.root / fname, meta)
            tasks = dict(self._index["tasks"])
            tasks[task_id] = {"file": fname, "spec_hash": spec_hash, "meta": meta}
            self._index = {"version": VERSION, "tasks": tasks}
            self._write_index()
            cache = dict(self._cache)
            cache.pop(task_id, None)
            self._cache = cache
        return self.root / fname

    def remove(self, task_id: str) -> None:
        with self._lock:
            if task_id not in self._index["tasks"]:
                raise RoutingError(self._unknown_message(task_id))
            entry = self._index["tasks"][task_id]
            tasks = dict(self._index["tasks"])
            del tasks[task_id]
            self._index = {"version": VERSION, "tasks": tasks}
            self._write_index()
            (self.root / entry["file"]).unlink(missing_ok=True)
            cache = dict(self._cache)
            cache.pop(task_id, None)
            self._cache = cache

    def _unknown_message(self, task_id):
        return (f"no adapter for task {task_id!r}; known tasks: "
                f"{self.tasks() or '(none)'}")

    def get(self, task_id: str) -> AdapterSet:
        cached = self._cache.get(task_id)
        if cached is not None:
            return cached
        entry = self._index["tasks"].get(task_id)
        if entry is None:
            raise RoutingError(self._unknown_message(task_id))
        aset, _meta = load_adapters(self.root / entry["file"])
        with self._lock:
            cache = dict(self._cache)
            cache[task_id] = aset
            self._cache = cache
        return aset

    def route(self, batch) -> AdapterSet:
        """Adapter for a single-task batch; mixed-task streams must be split
        by task before forward."""
        return self.get(batch.task_id)

    def stats(self) -> dict:
        per_task = {}
        total = 0
        for task_id, entry in self._index["tasks"].items():
            size = (self.root / entry["file"]).stat().st_size
            per_task[task_id] = {"bytes": size, **entry["meta"]}
            total += size
        return {"tasks": per_task, "total_bytes": total, "n_tasks": len(per_task)}


def route(batch, registry: AdapterRegistry) -> AdapterSet:
    return registry.route(batch)


def bake_text_adalink(backbone: Backbone, module: AdaLink) -> np.ndarray:
    """Fold a text-scope adapter into the vocabulary table.

    Because the adapter acts row-wise and its kernel is row-stable, a
    forward pass using the returned table with no text adapter is
    bit-identical to the live-adapter path, for any input. Costs one full
    table copy per task; only text embeddings are vocabulary-indexed, so
    image-scope modules cannot be baked.
    """
    if module.scope != "text":
        raise ContractError(
            f"can only bake text-scope modules, got scope {module.scope!r}: "
            "image features are not vocabulary-indexed")
    table = backbone.params["token_embedding"].data
    if table.shape[1] != module.d_emb:
        raise ConfigurationError(
            f"module width {module.d_emb} != embedding width {table.shape[1]}")
    delta, _ = K.lowrank_delta_fwd(table, module.w_down.data, module.w_up.data,
                                   module.use_nonlinearity)
    return table + delta


def baked_backbone(backbone: Backbone, module: AdaLink) -> Backbone:
    """Copy of the backbone with the text adapter folded into a dedicated
    encoder-input vocabulary table.

    The original table stays in place for decoder inputs and the tied output
    projection, which is why baking costs a full extra table per task."""
    out = backbone.copy()
    out.enc_text_override = Tensor(bake_text_adalink(backbone, module))
    return out
