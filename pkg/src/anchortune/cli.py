"""Command-line entry points for the full pipeline.

Verbs: gen-data, pretrain-hard, train, eval, ablate, export-embeddings.
Every verb takes --config/--set/--seed/--out; outputs land under the run
directory (config.snapshot, run.jsonl, report.json, checkpoints/, plus
figures and TSV tables where a verb reports results). Exit codes: 0 on
success, 2 for configuration problems, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import reporting
from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, describe_schema, load_config
from .data import (
    SPLITS,
    ClipDataset,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_manifest,
    split_records,
)
from .evaluation import export_embeddings
from .prompting import PromptBank
from .training import (
    ModelScorer,
    ensure_backbone,
    ensure_dataset,
    ensure_hard_prompt,
    evaluate_protocol,
    hard_prompt_path,
    load_run_checkpoint,
    make_split,
    pretrain_hard_prompts,
    run_training,
)

COUPLING_AXIS = ("nonlinear", "linear", "additive", "connection_position",
                 "random_position", "none")
REGULARIZER_AXIS = ("cross_entropy", "margin", "off")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchortune",
        description="prompt tuning with generic attribute anchors on a "
                    "synthetic video benchmark")
    parser.add_argument("--describe-config", action="store_true",
                        help="print the config schema and exit")
    sub = parser.add_subparsers(dest="verb")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="regenerate even if a manifest already exists")

    p = sub.add_parser("pretrain-hard", help="pre-train the hard prompt on the source split")
    common(p)

    p = sub.add_parser("train", help="main prompt tuning with anchors")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoints/last.ckpt in --out")

    p = sub.add_parser("eval", help="evaluate a tuning checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint path (default: OUT/checkpoints/best.ckpt)")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("coupling", "anchors", "regularization"))
    p.add_argument("--k", default="0,4,8,16,32,64",
                   help="anchor counts for --axis anchors (comma-separated)")
    p.add_argument("--seeds", type=int, default=5, help="seeds per setting")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel worker processes (1 = sequential)")

    p = sub.add_parser("export-embeddings", help="dump joint-space video features as TSV")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="tuning checkpoint; omit for the vanilla backbone")
    p.add_argument("--split", default="val",
                   help="dataset split to embed (default val)")
    return parser


def resolve_config(args) -> Config:
    return load_config(args.config, args.overrides, args.seed)


def out_dir(args, default_leaf: str) -> Path:
    path = Path(args.out) if args.out else Path("runs") / default_leaf
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_report(out: Path, payload: dict) -> None:
    (out / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, "gen_data")
    (out / "config.snapshot").write_text(cfg.snapshot())
    spec = SyntheticSpec.from_config(cfg)
    manifest = generate_synthetic_dataset(spec, cfg["data.root"], force=args.force)
    records = load_manifest(manifest)
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    write_report(out, {"manifest": str(manifest), "clips": len(records),
                       "splits": counts, "config_hash": cfg.hash()})
    print(f"wrote {len(records)} clips to {cfg['data.root']}")
    return 0


def cmd_pretrain_hard(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, "pretrain_hard")
    (out / "config.snapshot").write_text(cfg.snapshot())
    root = Path(cfg["data.root"])
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, _, _ = ensure_backbone(cfg, records, root)
    path = hard_prompt_path(cfg)
    _, meta = pretrain_hard_prompts(cfg, encoder, records, root, path)
    write_report(out, {"checkpoint": str(path), "provenance": meta["provenance"],
                       "source_labels": meta["source_labels"],
                       "config_hash": cfg.hash()})
    print(f"hard prompt written to {path} ({meta['provenance']})")
    return 0


def _train_figures(out: Path) -> None:
    steps, epochs = [], []
    run_log = out / "run.jsonl"
    if run_log.exists():
        for line in run_log.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("kind") == "step":
                steps.append(rec)
            elif rec.get("kind") == "epoch":
                epochs.append(rec)
    if steps:
        reporting.plot_loss_curve(steps, out / "figures" / "loss_curve.png")
    if epochs:
        reporting.plot_metric_history(epochs, out / "figures" / "metrics.png")


def _report_tables(out: Path, report) -> None:
    rows = []
    for name in sorted(report.results):
        res = report.results[name]
        for cls in sorted(res.per_class):
            rows.append([name, cls, res.per_class[cls], res.class_counts.get(cls)])
    reporting.write_tsv(out / "per_class.tsv",
                        ["result", "class", "top1", "n_clips"], rows)
    reporting.plot_per_class(report, out / "figures" / "per_class.png")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, "train")
    result = run_training(cfg, out, resume=args.resume)
    report = result["report"]
    write_report(out, {"summary": result["summary"], "eval": report.to_dict()})
    _train_figures(out)
    _report_tables(out, report)
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, "eval")
    (out / "config.snapshot").write_text(cfg.snapshot())
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "best.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    root = Path(cfg["data.root"])
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, _, _ = ensure_backbone(cfg, records, root)
    hard, provenance = ensure_hard_prompt(cfg, encoder, records, root)
    bank = PromptBank.from_config(cfg, encoder.config, hard=hard,
                                  hard_provenance=provenance, seed=cfg["seed"])
    load_run_checkpoint(ckpt, bank)
    split = make_split(cfg, records)
    report = evaluate_protocol(cfg, encoder, bank, records, root, split)
    write_report(out, {"checkpoint": str(ckpt), "eval": report.to_dict(),
                       "config_hash": cfg.hash()})
    _report_tables(out, report)
    print(report.table())
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, "export_embeddings")
    (out / "config.snapshot").write_text(cfg.snapshot())
    root = Path(cfg["data.root"])
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, _, _ = ensure_backbone(cfg, records, root)
    bank = None
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise ConfigError(f"no checkpoint at {ckpt}")
        hard, provenance = ensure_hard_prompt(cfg, encoder, records, root)
        bank = PromptBank.from_config(cfg, encoder.config, hard=hard,
                                      hard_provenance=provenance, seed=cfg["seed"])
        load_run_checkpoint(ckpt, bank)
    if args.split not in SPLITS:
        raise ConfigError(f"unknown split {args.split!r} (choose from {SPLITS})")
    chosen = split_records(records, args.split)
    if not chosen:
        raise ConfigError(f"split {args.split!r} has no clips")
    dataset = ClipDataset(root, chosen, frames=cfg["train.frames"])
    scorer = ModelScorer(encoder, bank)
    path = out / "embeddings.tsv"
    rows = export_embeddings(path, scorer, dataset,
                             limit=cfg["eval.embedding_limit"],
                             seed=cfg["seed"], batch_size=cfg["eval.batch_size"])
    write_report(out, {"rows": rows, "file": str(path), "split": args.split,
                       "config_hash": cfg.hash()})
    print(f"wrote {rows} embedding rows to {path}")
    return 0


def _ablation_settings(args) -> list[tuple[str, list[str]]]:
    """(label, overrides) per swept setting."""
    if args.axis == "coupling":
        return [(v, [f"prompt.coupling={v}"]) for v in COUPLING_AXIS]
    if args.axis == "anchors":
        try:
            ks = [int(v) for v in str(args.k).split(",") if v.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"bad --k list {args.k!r}: {exc}") from exc
        if not ks:
            raise ConfigError("--k produced an empty sweep")
        return [(f"k={k}", [f"anchors.k={k}"]) for k in ks]
    settings = []
    for reg in REGULARIZER_AXIS:
        if reg == "off":
            settings.append((reg, ["anchors.k=0"]))
        else:
            settings.append((reg, [f"loss.regularizer={reg}"]))
    return settings


def _run_one_setting(payload: tuple[str, str]) -> dict:
    """Sweep worker: rebuild the config from its snapshot and train."""
    snapshot_path, run_out = payload
    cfg = load_config(snapshot_path)
    result = run_training(cfg, run_out)
    return {"metrics": dict(result["report"].metrics),
            "seed": cfg["seed"], "run_dir": run_out}


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args, f"ablate_{args.axis}")
    (out / "config.snapshot").write_text(cfg.snapshot())
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    settings = _ablation_settings(args)

    # build shared artifacts once so parallel workers never race
    root = Path(cfg["data.root"])
    records = ensure_dataset(SyntheticSpec.from_config(cfg), root)
    encoder, _, _ = ensure_backbone(cfg, records, root)
    if any("prompt.coupling=none" not in ov for _, ov in settings):
        ensure_hard_prompt(cfg, encoder, records, root)

    jobs: list[tuple[str, int, str]] = []
    payloads: list[tuple[str, str]] = []
    base_seed = cfg["seed"]
    for label, overrides in settings:
        for s in range(args.seeds):
            seed = base_seed + s
            run_out = out / "runs" / f"{label}_seed{seed}"
            run_out.mkdir(parents=True, exist_ok=True)
            run_cfg = load_config(args.config, list(args.overrides) + overrides, seed)
            snap = run_out / "config.request"
            snap.write_text(run_cfg.snapshot())
            jobs.append((label, seed, str(run_out)))
            payloads.append((str(snap), str(run_out)))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_run_one_setting, payloads))
    else:
        outcomes = [_run_one_setting(p) for p in payloads]

    by_label: dict[str, list[dict]] = {}
    for (label, seed, _), outcome in zip(jobs, outcomes):
        by_label.setdefault(label, []).append(outcome)

    metric_keys = sorted({k for o in outcomes for k, v in o["metrics"].items()
                          if v is not None})
    rows = []
    detail = {}
    for label, _ in settings:
        outs = by_label[label]
        row: dict = {"setting": label, "n_seeds": len(outs)}
        if args.axis == "anchors":
            row["k"] = int(label.split("=")[1])
        for key in metric_keys:
            vals = [o["metrics"][key] for o in outs if o["metrics"].get(key) is not None]
            row[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{key}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
        detail[label] = [{"seed": o["seed"], **o["metrics"]} for o in outs]

    header = list(rows[0].keys())
    reporting.write_tsv(out / "sweep.tsv", header,
                        [[r.get(h) for h in header] for r in rows])
    table = reporting.aligned_table(header, [[r.get(h) for h in header] for r in rows])
    (out / "sweep.txt").write_text(table + "\n")
    mean_keys = [f"{k}_mean" for k in metric_keys]
    if args.axis == "anchors":
        fig_rows = [{**r, **{k: r.get(f"{k}_mean") for k in metric_keys}} for r in rows]
        reporting.plot_anchor_curve(fig_rows, metric_keys,
                                    out / "figures" / "anchor_curve.png")
    else:
        reporting.plot_grouped_bars(rows, "setting", mean_keys,
                                    out / "figures" / f"{args.axis}_ablation.png",
                                    xlabel=args.axis)
    write_report(out, {"axis": args.axis, "rows": rows, "runs": detail,
                       "config_hash": cfg.hash()})
    print(table)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-hard": cmd_pretrain_hard,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.describe_config:
        print(describe_schema())
        return 0
    if not args.verb:
        parser.print_help()
        return 2
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, FileNotFoundError, FileExistsError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 2 if "no checkpoint at" in str(exc) else 1
    except Exception as exc:  # runtime failures map to exit 1
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
