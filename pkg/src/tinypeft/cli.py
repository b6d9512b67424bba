"""Command-line interface.

Commands: gen-tasks, train, eval, params, flops, ablate-rank,
ablate-modality, bake, registry ls/add/rm. Every command exits 0 only if
the run's declared invariant checks passed, and artifact-producing commands
write a resolved-config provenance file into their output directory.
"""

from __future__ import annotations

import argparse
import sys

from .errors import TinyPeftError
from .experiments import (
    format_table, load_experiment_config, resolve_out_dir, run_ablate_modality,
    run_ablate_rank, run_bake, run_eval, run_flops, run_gen_tasks, run_params,
    run_train, write_csv,
)
from .model import ModelConfig
from .registry import AdapterRegistry, load_adapters


def _print_result(res, out_csv=None):
    print(format_table(res["headers"], res["rows"]))
    if out_csv:
        write_csv(out_csv, res["headers"], res["rows"])
        print(f"wrote {out_csv}")


def cmd_gen_tasks(args) -> int:
    cfg = load_experiment_config(args.config)
    res = run_gen_tasks(cfg)
    _print_result(res)
    print(f"datasets in {res['out']}")
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    res = run_train(cfg)
    report = res["report"]
    print(f"trained {cfg.adapter.kind} for {report.steps} steps "
          f"in {report.wall_time_s:.1f}s; final loss {report.records[-1][2]:.4f}")
    print(format_table(res["eval_headers"], res["eval_rows"]))
    for name, path in res["paths"].items():
        print(f"{name}: {path}")
    if not res["frozen_ok"]:
        print("ERROR: frozen backbone parameters changed during a PEFT run",
              file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    res = run_eval(cfg, args.backbone, adapter_path=args.adapter,
                   registry_dir=args.registry, split=args.split)
    _print_result(res, args.out_csv)
    return 0


def cmd_params(args) -> int:
    if args.config:
        model = load_experiment_config(args.config).model
    else:
        model = ModelConfig()
    if args.d_emb:
        heads = args.d_emb // 64 if args.d_emb % 64 == 0 else 1
        model = ModelConfig(d_emb=args.d_emb, n_heads=heads)
    res = run_params(model, rank=args.rank, n_tasks=args.tasks,
                     n_modalities=args.modalities, prompt_len=args.prompt_len)
    _print_result(res, args.out_csv)
    return 0


def cmd_flops(args) -> int:
    model = load_experiment_config(args.config).model if args.config else ModelConfig()
    res = run_flops(model, rank=args.rank, seq_len=args.seq_len,
                    prompt_len=args.prompt_len)
    _print_result(res, args.out_csv)
    return 0


def cmd_ablate_rank(args) -> int:
    cfg = load_experiment_config(args.config)
    ranks = [int(r) for r in args.ranks.split(",")]
    res = run_ablate_rank(cfg, ranks)
    _print_result(res, args.out_csv or resolve_out_dir(cfg.out_dir) / "rank_ablation.csv")
    return 0 if all(r[3] == 0 for r in res["rows"]) else 1


def cmd_ablate_modality(args) -> int:
    cfg = load_experiment_config(args.config)
    res = run_ablate_modality(cfg)
    _print_result(res, args.out_csv or resolve_out_dir(cfg.out_dir) / "modality_ablation.csv")
    counts = {r[2] for r in res["rows"]}
    if len(counts) != 1:
        print("ERROR: parameter budgets are not matched", file=sys.stderr)
        return 1
    return 0


def cmd_bake(args) -> int:
    res = run_bake(args.backbone, args.adapter, args.out, n_check=args.checks)
    print(f"baked table written to {res['out']}; "
          f"{res['checked'] - res['mismatches']}/{res['checked']} batches bit-identical")
    return 0 if res["mismatches"] == 0 else 1


def cmd_registry(args) -> int:
    reg = AdapterRegistry(args.dir)
    if args.action == "ls":
        stats = reg.stats()
        rows = [
            (tid, info["bytes"], info.get("kind", "?"), info.get("rank", "?"),
             info.get("scope", "?"))
            for tid, info in sorted(stats["tasks"].items())
        ]
        print(format_table(("task", "bytes", "kind", "rank", "scope"), rows))
        print(f"{stats['n_tasks']} task(s), {stats['total_bytes']} bytes total")
        return 0
    if args.action == "add":
        if not (args.task and args.adapter):
            print("registry add needs --task and --adapter", file=sys.stderr)
            return 2
        aset, meta = load_adapters(args.adapter)
        reg.add(args.task, aset, meta)
        print(f"registered {args.task!r} from {args.adapter}")
        return 0
    if not args.task:
        print("registry rm needs --task", file=sys.stderr)
        return 2
    reg.remove(args.task)
    print(f"removed {args.task!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tinypeft",
        description="Train, evaluate, and account for parameter-efficient "
                    "adapters on a tiny frozen multimodal encoder-decoder.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-tasks", help="generate dataset files for the config's tasks")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_gen_tasks)

    sp = sub.add_parser("train", help="train the configured adapter (or full model)")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the config's tasks")
    sp.add_argument("--config", required=True)
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--adapter", default=None, help="adapter checkpoint file")
    sp.add_argument("--registry", default=None, help="registry directory for routing")
    sp.add_argument("--split", default="val", choices=("val", "train"))
    sp.add_argument("--out-csv", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("params", help="trainable-parameter table per method")
    sp.add_argument("--config", default=None)
    sp.add_argument("--d-emb", type=int, default=None)
    sp.add_argument("--rank", type=int, default=64)
    sp.add_argument("--prompt-len", type=int, default=64)
    sp.add_argument("--tasks", type=int, default=1)
    sp.add_argument("--modalities", type=int, default=2)
    sp.add_argument("--out-csv", default=None)
    sp.set_defaults(fn=cmd_params)

    sp = sub.add_parser("flops", help="added multiply-accumulates per method")
    sp.add_argument("--config", default=None)
    sp.add_argument("--rank", type=int, default=64)
    sp.add_argument("--prompt-len", type=int, default=64)
    sp.add_argument("--seq-len", type=int, default=None)
    sp.add_argument("--out-csv", default=None)
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("ablate-rank", help="train at several ranks, table the results")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ranks", default="4,16,64")
    sp.add_argument("--out-csv", default=None)
    sp.set_defaults(fn=cmd_ablate_rank)

    sp = sub.add_parser("ablate-modality",
                        help="modality-split vs unified at a matched budget")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-csv", default=None)
    sp.set_defaults(fn=cmd_ablate_modality)

    sp = sub.add_parser("bake", help="fold a text adapter into the vocabulary table")
    sp.add_argument("--backbone", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checks", type=int, default=20)
    sp.set_defaults(fn=cmd_bake)

    sp = sub.add_parser("registry", help="inspect or edit an adapter registry")
    sp.add_argument("action", choices=("ls", "add", "rm"))
    sp.add_argument("--dir", required=True)
    sp.add_argument("--task", default=None)
    sp.add_argument("--adapter", default=None)
    sp.set_defaults(fn=cmd_registry)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TinyPeftError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
