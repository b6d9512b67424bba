"""Optimization harness: Adafactor, the warmup/decay schedule, and the
training loop that updates only the parameters an adapter spec declares.

The loop is single-threaded and fully deterministic given the seed: batch
order, dropout masks and initialization all flow from one generator.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as M
from .errors import ConfigurationError, DivergenceError

ADAFACTOR_CONSTANTS = {
    "decay_exponent": 0.8,   # second-moment decay 1 - t^-0.8
    "eps1": 1e-30,           # added to squared gradients
    "eps2": 1e-3,            # floor for relative step sizing (unused: external schedule)
    "clip_threshold": 1.0,   # update RMS clip
    "momentum": 0.0,
}

DIVERGENCE_LOSS = 1e3


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 0.03          # 0.03 for the PEFT kinds, 1e-4 for full fine-tuning
    warmup_steps: int = 100
    total_steps: int = 500
    batch_size: int = 16
    seed: int = 0
    dropout_rate: float | None = None   # None: model / adapter default
    optimizer: str = "adafactor"        # adafactor | sgd (debug)
    log_every: int = 20

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not (1 <= self.warmup_steps <= self.total_steps):
            raise ConfigurationError(
                f"need 1 <= warmup_steps <= total_steps, got "
                f"{self.warmup_steps}/{self.total_steps}"
            )
        if self.optimizer not in ("adafactor", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then reciprocal square root decay; peak at warmup_steps."""
    if step < 1:
        raise ConfigurationError(f"step must be >= 1, got {step}")
    return cfg.peak_lr * min(step / cfg.warmup_steps, np.sqrt(cfg.warmup_steps / step))


class Adafactor:
    """Factored second-moment optimizer, no momentum, external learning rate.

    2-D parameters keep one row and one column accumulator; 1-D parameters
    keep a full accumulator. Updates are RMS-clipped at `clip_threshold`.
    """

    def __init__(self, params: dict, **overrides):
        self.params = dict(params)
        self.c = {**ADAFACTOR_CONSTANTS, **overrides}
        self.t = 0
        self.state = {}
        for name, p in self.params.items():
            if p.ndim == 2:
                self.state[name] = {
                    "row": np.zeros(p.shape[0]),
                    "col": np.zeros(p.shape[1]),
                }
            else:
                self.state[name] = {"full": np.zeros(p.shape)}

    def step(self, lr: float) -> None:
        self.t += 1
        beta2 = 1.0 - self.t ** (-self.c["decay_exponent"])
        eps1 = self.c["eps1"]
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            sq = g * g + eps1
            st = self.state[name]
            if p.ndim == 2:
                st["row"] = beta2 * st["row"] + (1 - beta2) * sq.mean(axis=1)
                st["col"] = beta2 * st["col"] + (1 - beta2) * sq.mean(axis=0)
                denom = np.sqrt(
                    np.outer(st["row"], st["col"]) / max(st["row"].mean(), eps1)
                )
            else:
                st["full"] = beta2 * st["full"] + (1 - beta2) * sq
                denom = np.sqrt(st["full"])
            update = g / denom
            rms = np.sqrt(np.mean(update * update))
            update /= max(1.0, rms / self.c["clip_threshold"])
            p.data -= lr * update

    def constants(self):
        return dict(self.c)


class SGD:
    """Plain gradient descent, for debugging optimizer-independent behavior."""

    def __init__(self, params: dict):
        self.params = dict(params)

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            p.data -= lr * p.grad

    def constants(self):
        return {}


@dataclass
class TrainReport:
    """Loss curve plus enough provenance to reproduce the run."""

    steps: int = 0
    records: list = field(default_factory=list)  # (step, lr, loss)
    task_histogram: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    aborted: bool = False
    optimizer_constants: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)

    def losses(self):
        return [r[2] for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            meta = {
                "steps": self.steps, "wall_time_s": round(self.wall_time_s, 3),
                "aborted": self.aborted, "task_histogram": self.task_histogram,
                "optimizer_constants": self.optimizer_constants,
                "train_config": self.train_config, "final_metrics": self.final_metrics,
            }
            f.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for step, lr, loss in self.records:
                f.write(json.dumps(
                    {"step": step, "lr": lr, "loss": loss}, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.records:
                w.writerow([step, f"{lr:.8g}", f"{loss:.8g}"])


def collect_trainables(backbone, adapters) -> dict:
    """Name -> tensor map of exactly what this run is allowed to update."""
    for p in backbone.params.values():
        p.requires_grad = False
    if adapters.kind == "full":
        names = backbone.trainable_names(full_finetune=True)
        backbone.set_trainable(names)
        return {n: backbone.params[n] for n in names}
    adapters.mark_trainable()
    return adapters.named_params()


class _RoundRobin:
    """Cycle over tasks; within a task, seeded shuffling, rewound per epoch."""

    def __init__(self, datasets, batch_size, rng):
        self.datasets = list(datasets)
        self.batch_size = batch_size
        self.rng = rng
        self.iters = [iter(()) for _ in self.datasets]
        self.turn = 0

    def next_batch(self):
        ds = self.datasets[self.turn]
        try:
            batch = next(self.iters[self.turn])
        except StopIteration:
            self.iters[self.turn] = ds.batches("train", self.batch_size, self.rng)
            batch = next(self.iters[self.turn])
        self.turn = (self.turn + 1) % len(self.datasets)
        return batch


def train(backbone, adapters, datasets, cfg: TrainConfig) -> TrainReport:
    """Run `cfg.total_steps` of teacher-forced cross entropy.

    Only the parameters declared by the adapter spec move; everything else is
    left bit-identical. Raises DivergenceError (with the partial report
    attached) if the loss exceeds DIVERGENCE_LOSS or goes non-finite.
    """
    from .autodiff import ComputeGraph, clear_grads

    if adapters.kind != "full":
        adapters.validate_for(backbone.config)
    datasets = [datasets] if not isinstance(datasets, (list, tuple)) else list(datasets)
    params = collect_trainables(backbone, adapters)
    opt = Adafactor(params) if cfg.optimizer == "adafactor" else SGD(params)
    rng = np.random.default_rng(cfg.seed)
    batches = _RoundRobin(datasets, cfg.batch_size, rng)
    report = TrainReport(
        optimizer_constants=opt.constants(), train_config=cfg.to_dict(),
    )
    if cfg.dropout_rate is not None:
        # overrides both the model rate and any adapter-kind default
        adapters = _DropoutOverride(adapters, cfg.dropout_rate)
    t0 = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        batch = batches.next_batch()
        report.task_histogram[batch.task_id] = report.task_histogram.get(batch.task_id, 0) + 1
        clear_grads(params.values())
        with ComputeGraph() as graph:
            loss, _ = M.batch_loss(backbone, batch, adapters, train=True, rng=rng)
            loss_val = loss.item()
            if not np.isfinite(loss_val) or loss_val > DIVERGENCE_LOSS:
                report.aborted = True
                report.steps = step
                report.wall_time_s = time.perf_counter() - t0
                raise DivergenceError(
                    f"loss {loss_val} at step {step}", report=report)
            graph.backward(loss)
        lr = lr_at(step, cfg)
        try:
            opt.step(lr)
        except DivergenceError as e:
            report.aborted = True
            report.steps = step
            report.wall_time_s = time.perf_counter() - t0
            e.report = report
            raise
        if step % cfg.log_every == 0 or step == 1 or step == cfg.total_steps:
            report.records.append((step, lr, loss_val))
        report.steps = step
    report.wall_time_s = time.perf_counter() - t0
    return report


class _DropoutOverride:
    """Adapter-set proxy that pins the dropout rate for one run."""

    def __init__(self, inner, rate):
        self._inner = inner
        self._rate = rate

    def dropout_rate(self, config):
        return self._rate

    def __getattr__(self, name):
        return getattr(self._inner, name)
