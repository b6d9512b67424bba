"""Experiment plumbing shared by the CLI: declarative config files, output
directories with provenance, and the train/eval/ablation runners.

An experiment is one YAML file (see README for a commented example) with
sections ``model``, ``adapter``, ``train``, ``tasks`` plus an output
directory. Every run writes ``resolved.yaml`` — the fully defaulted config —
next to its results; re-running from that file reproduces the run bit for
bit. One experiment per process; concurrent runs need distinct out_dirs.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .adapters import (
    AdapterSpec, build_adapters, count_trainable_params, flops_added,
)
from .errors import ConfigurationError
from .model import Backbone, ModelConfig
from .registry import (
    AdapterRegistry, baked_backbone, load_adapters, load_backbone,
    save_backbone,
)
from .tasks import TaskDef, evaluate, generate, save_dataset
from .training import TrainConfig, train

OUT_ROOT_ENV = "TINYPEFT_OUT_ROOT"

_SECTIONS = ("model", "adapter", "train", "tasks", "out_dir", "backbone", "seed_model")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    adapter: AdapterSpec
    train: TrainConfig
    tasks: list[TaskDef]
    out_dir: str
    backbone: str | None = None
    seed_model: int = 0

    def resolved(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "adapter": self.adapter.to_dict(),
            "train": self.train.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
            "out_dir": self.out_dir,
            "backbone": self.backbone,
            "seed_model": self.seed_model,
        }


def _build_section(cls, data, section):
    try:
        return cls(**(data or {}))
    except TypeError as e:
        raise ConfigurationError(f"config section {section!r}: {e}") from None


def load_experiment_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown config field(s) {sorted(unknown)}")
    tasks = [_build_section(TaskDef, t, f"tasks[{i}]")
             for i, t in enumerate(raw.get("tasks") or [])]
    return ExperimentConfig(
        model=_build_section(ModelConfig, raw.get("model"), "model"),
        adapter=_build_section(AdapterSpec, raw.get("adapter"), "adapter"),
        train=_build_section(TrainConfig, raw.get("train"), "train"),
        tasks=tasks,
        out_dir=str(raw.get("out_dir", "runs/experiment")),
        backbone=raw.get("backbone"),
        seed_model=int(raw.get("seed_model", 0)),
    )


def resolve_out_dir(out_dir) -> Path:
    p = Path(out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_provenance(cfg: ExperimentConfig, out: Path) -> None:
    (out / "resolved.yaml").write_text(
        yaml.safe_dump(cfg.resolved(), sort_keys=True), encoding="utf-8")


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_csv(path, headers, rows) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(headers)
        w.writerows(rows)


def _load_or_init_backbone(cfg: ExperimentConfig) -> Backbone:
    if cfg.backbone:
        bb = load_backbone(cfg.backbone)
        if bb.config != cfg.model:
            raise ConfigurationError(
                f"backbone checkpoint config {bb.config} does not match "
                f"experiment model section {cfg.model}")
        return bb
    return Backbone(cfg.model, seed=cfg.seed_model)


def run_gen_tasks(cfg: ExperimentConfig) -> dict:
    out = resolve_out_dir(cfg.out_dir)
    write_provenance(cfg, out)
    rows = []
    for task in cfg.tasks:
        data = generate(task, cfg.model)  # generation self-verifies
        path = out / f"{task.task_id}.jsonl"
        save_dataset(data, cfg.model, path)
        rows.append((task.task_id, task.kind, len(data.train), len(data.val), path.name))
    return {"rows": rows, "headers": ("task", "kind", "train", "val", "file"),
            "out": out}


def run_train(cfg: ExperimentConfig) -> dict:
    out = resolve_out_dir(cfg.out_dir)
    write_provenance(cfg, out)
    if not cfg.tasks:
        raise ConfigurationError("train needs at least one task")
    bb = _load_or_init_backbone(cfg)
    datasets = [generate(t, cfg.model) for t in cfg.tasks]
    aset = build_adapters(cfg.adapter, bb, seed=cfg.train.seed)
    pre_checksum = bb.checksum()
    report = train(bb, aset, datasets, cfg.train)
    frozen_ok = cfg.adapter.kind == "full" or bb.checksum() == pre_checksum

    report.final_metrics = {}
    eval_rows = []
    for data in datasets:
        m = evaluate(bb, aset, data.val)
        report.final_metrics[data.task.task_id] = m
        eval_rows.append((data.task.task_id, f"{m['exact_match']:.4f}",
                          f"{m['token_accuracy']:.4f}", m["n"]))
    report.write_jsonl(out / "report.jsonl")
    report.write_csv(out / "metrics.csv")
    write_csv(out / "eval.csv", ("task", "exact_match", "token_accuracy", "n"), eval_rows)

    paths = {"report": out / "report.jsonl", "metrics": out / "metrics.csv",
             "eval": out / "eval.csv"}
    if cfg.adapter.kind == "full":
        save_backbone(bb, out / "backbone.tpck",
                      meta={"steps": report.steps, "tasks": [t.task_id for t in cfg.tasks]})
        paths["backbone"] = out / "backbone.tpck"
    else:
        reg = AdapterRegistry(out / "registry")
        for task in cfg.tasks:
            reg.add(task.task_id, aset,
                    meta={"creation_step": report.steps, "kind": cfg.adapter.kind})
        paths["registry"] = out / "registry"
    return {
        "report": report, "frozen_ok": frozen_ok, "eval_rows": eval_rows,
        "eval_headers": ("task", "exact_match", "token_accuracy", "n"),
        "paths": paths, "out": out,
    }


def run_eval(cfg: ExperimentConfig, backbone_path, adapter_path=None,
             registry_dir=None, split="val") -> dict:
    bb = load_backbone(backbone_path)
    rows = []
    reg = AdapterRegistry(registry_dir) if registry_dir else None
    fixed = load_adapters(adapter_path)[0] if adapter_path else None
    for task in cfg.tasks:
        data = generate(task, bb.config)
        aset = fixed if fixed is not None else (reg.get(task.task_id) if reg else None)
        m = evaluate(bb, aset, data.val if split == "val" else data.train)
        rows.append((task.task_id, f"{m['exact_match']:.4f}",
                     f"{m['token_accuracy']:.4f}", m["n"]))
    return {"rows": rows, "headers": ("task", "exact_match", "token_accuracy", "n")}


def run_params(model: ModelConfig, rank: int, n_tasks: int, n_modalities: int,
               prompt_len: int = 64) -> dict:
    rows = []
    for spec in (
        AdapterSpec("adalink", rank=rank, scope="modality"),
        AdapterSpec("adalink", rank=rank, scope="unified"),
        AdapterSpec("prompt", prompt_len=prompt_len),
        AdapterSpec("lora", rank=rank),
        AdapterSpec("full"),
    ):
        c = count_trainable_params(spec, model, n_tasks=n_tasks, n_modalities=n_modalities)
        label = spec.kind if spec.kind != "adalink" else f"adalink/{spec.scope}"
        extra = ",".join(f"{k}={v}" for k, v in sorted(c.components.items()))
        rows.append((label, c.core, c.total, extra))
    return {"rows": rows, "headers": ("method", "core_params", "total_params", "components")}


def run_flops(model: ModelConfig, rank: int, seq_len: int | None = None,
              prompt_len: int = 64) -> dict:
    n = seq_len if seq_len else model.enc_len
    rows = []
    for spec in (
        AdapterSpec("adalink", rank=rank),
        AdapterSpec("prompt", prompt_len=prompt_len),
        AdapterSpec("lora", rank=rank),
        AdapterSpec("full"),
    ):
        rows.append((spec.kind, n, flops_added(spec, n, model)))
    return {"rows": rows, "headers": ("method", "seq_len", "added_macs")}


def run_ablate_rank(cfg: ExperimentConfig, ranks) -> dict:
    rows = []
    for rank in ranks:
        sub = dataclasses.replace(
            cfg,
            adapter=dataclasses.replace(cfg.adapter, rank=rank),
            out_dir=str(Path(cfg.out_dir) / f"rank_{rank}"),
        )
        res = run_train(sub)
        count = count_trainable_params(sub.adapter, cfg.model)
        em = np.mean([float(r[1]) for r in res["eval_rows"]])
        rows.append((rank, count.total, f"{em:.4f}", int(not res["frozen_ok"])))
    return {"rows": rows,
            "headers": ("rank", "trainable_params", "exact_match", "freeze_violations")}


def run_ablate_modality(cfg: ExperimentConfig) -> dict:
    """Modality-split at rank r versus one unified module at rank 2r: the
    parameter budgets match exactly; performance is reported, not gated."""
    rows = []
    variants = (
        ("modality", dataclasses.replace(cfg.adapter, scope="modality")),
        ("unified", dataclasses.replace(cfg.adapter, scope="unified",
                                        rank=2 * cfg.adapter.rank)),
    )
    for label, spec in variants:
        sub = dataclasses.replace(
            cfg, adapter=spec, out_dir=str(Path(cfg.out_dir) / f"scope_{label}"))
        res = run_train(sub)
        count = count_trainable_params(spec, cfg.model)
        em = np.mean([float(r[1]) for r in res["eval_rows"]])
        rows.append((label, spec.rank, count.total, f"{em:.4f}"))
    return {"rows": rows, "headers": ("scope", "rank", "trainable_params", "exact_match")}


def run_bake(backbone_path, adapter_path, out_path, n_check: int = 20) -> dict:
    """Fold a text-scope adapter into the encoder vocabulary table and verify
    the dual paths agree bit for bit on random batches."""
    bb = load_backbone(backbone_path)
    aset, _ = load_adapters(adapter_path)
    if aset.kind != "adalink" or "text" not in aset.adalink_modules \
            or len(aset.adalink_modules) != 1:
        raise ConfigurationError(
            "bake needs a text-scope input adapter checkpoint; image or "
            "modality-scoped adapters cannot be folded into the vocabulary")
    module = aset.adalink_modules["text"]
    baked = baked_backbone(bb, module)

    from .model import example_logits
    from .tasks import Example

    rng = np.random.default_rng(0)
    cfg = bb.config
    mismatches = 0
    for _ in range(n_check):
        ex = Example(
            rng.standard_normal((cfg.n_patches, cfg.patch_feature_dim)),
            rng.integers(0, cfg.vocab_size, size=cfg.max_text_len),
            np.concatenate([
                rng.integers(4, cfg.vocab_size, size=cfg.max_target_len - 1), [2]]),
        )
        live = example_logits(bb, ex, aset).data
        cold = example_logits(baked, ex, None).data
        mismatches += int(not np.array_equal(live, cold))
    save_backbone(baked, out_path, meta={"baked_from": str(adapter_path)})
    return {"mismatches": mismatches, "checked": n_check, "out": Path(out_path)}
