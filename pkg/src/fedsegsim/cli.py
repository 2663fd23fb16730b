"""Command-line front end.

Subcommands::

    run                one federated training run from a TOML config
    ablate             feature ladder (backbone / +proto / +proto+multicon / full)
    upload-sweep       repeat the run across exemplar upload ratios
    eval               re-evaluate a saved checkpoint on a config's validation data
    gen-data           render a config's synthetic dataset to disk
    export-embeddings  dump per-pixel feature embeddings to CSV

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
Relative output directories are joined to $FEDSEGSIM_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Sequence

import numpy as np

from .config import (
    ExperimentConfig,
    experiment_split,
    load_config,
    resolve_output_dir,
    save_split_to_dir,
    to_toml,
)
from .errors import ConfigError
from .federation import ClientState, evaluate_federation, load_checkpoint, run_federation
from .metrics import evaluate_unseen, export_embeddings
from .models import TwoBranchModel

# Feature ladder for `ablate`: (label, use_proto, use_multicon, use_adv).
ABLATION_LADDER = (
    ("backbone", False, False, False),
    ("proto", True, False, False),
    ("proto_multicon", True, True, False),
    ("full", True, True, True),
)

UPLOAD_RATIOS_DEFAULT = "0.25,0.5,0.75,1.0"


def _archive_config(args, config: ExperimentConfig, out_dir: str) -> None:
    """Copy the input config verbatim; record the effective one when --set
    overrides changed it."""
    os.makedirs(out_dir, exist_ok=True)
    with open(args.config, "rb") as fh:
        original = fh.read()
    with open(os.path.join(out_dir, "config.toml"), "wb") as fh:
        fh.write(original)
    if args.set:
        with open(os.path.join(out_dir, "config.effective.toml"), "w") as fh:
            fh.write(to_toml(config))


def _reseeded(config: ExperimentConfig, seed: int, **federation_changes) -> ExperimentConfig:
    fed = replace(config.federation, seed=seed, **federation_changes)
    return replace(config, seed=seed, federation=fed)


def _progress_hook(enabled: bool):
    if not enabled:
        return None

    def hook(round_idx: int, miou: float) -> float:
        print(f"round {round_idx}: val miou {miou:.4f}", file=sys.stderr)
        return miou

    return hook


def _mean_std(values: Sequence[float]) -> str:
    arr = np.asarray(values, dtype=np.float64)
    return f"{repr(float(arr.mean()))},{repr(float(arr.std()))}"


def _seeded_runs(
    config: ExperimentConfig, n_seeds: int, workers: int, out_base: str, label: str, **federation_changes
) -> List:
    """Run the same experiment under n_seeds consecutive master seeds.

    When data.base_seed is unset the scenario is regenerated per seed, so each
    seed is an independent world; a pinned base_seed keeps the data fixed and
    varies only initialization and training randomness.
    """
    results = []
    for offset in range(n_seeds):
        cfg = _reseeded(config, config.seed + offset, **federation_changes)
        split = experiment_split(cfg)
        run_dir = os.path.join(out_base, f"{label}_seed{cfg.seed}")
        results.append(run_federation(cfg.federation, split, workers=workers, out_dir=run_dir))
    return results


def _summary_row(results: Sequence) -> str:
    mious = [r.reports["fused"].miou for r in results]
    accs = [r.reports["fused"].pixel_acc for r in results]
    return f"{_mean_std(mious)},{_mean_std(accs)}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    config = load_config(args.config, args.set)
    out_dir = resolve_output_dir(config.output_dir)
    _archive_config(args, config, out_dir)
    split = experiment_split(config)
    result = run_federation(
        config.federation,
        split,
        workers=args.workers,
        out_dir=out_dir,
        val_metric_hook=_progress_hook(args.verbose),
    )
    fused = result.reports["fused"]
    rollbacks = sum(rec.rolled_back for rec in result.records)
    print(f"out_dir={out_dir}")
    print(f"rounds={config.federation.rounds}")
    print(f"fused_miou={fused.miou:.6f}")
    print(f"fused_acc={fused.pixel_acc:.6f}")
    print(f"rollbacks={rollbacks}")
    if result.unseen_report is not None:
        print(f"unseen_miou={result.unseen_report.miou:.6f}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    if config.federation.algorithm != "fedsaas":
        raise ConfigError("ablate walks the fedsaas feature ladder; set federation.algorithm = 'fedsaas'")
    out_dir = resolve_output_dir(config.output_dir)
    _archive_config(args, config, out_dir)
    lines = ["method,miou_mean,miou_std,acc_mean,acc_std"]
    for label, use_proto, use_multicon, use_adv in ABLATION_LADDER:
        results = _seeded_runs(
            config,
            args.seeds,
            args.workers,
            os.path.join(out_dir, "runs"),
            label,
            use_proto=use_proto,
            use_multicon=use_multicon,
            use_adv=use_adv,
        )
        lines.append(f"{label},{_summary_row(results)}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_upload_sweep(args) -> int:
    config = load_config(args.config, args.set)
    out_dir = resolve_output_dir(config.output_dir)
    _archive_config(args, config, out_dir)
    try:
        ratios = sorted(float(r) for r in args.ratios.split(","))
    except ValueError as exc:
        raise ConfigError(f"--ratios must be comma-separated numbers: {exc}") from exc
    lines = ["ratio,miou_mean,miou_std,acc_mean,acc_std"]
    for ratio in ratios:
        results = _seeded_runs(
            config,
            args.seeds,
            args.workers,
            os.path.join(out_dir, "runs"),
            f"ratio{ratio:g}",
            upload_ratio=ratio,
        )
        lines.append(f"{repr(ratio)},{_summary_row(results)}")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "upload_sweep.csv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _models_from_checkpoint(ckpt: dict) -> Dict[int, TwoBranchModel]:
    manifest = ckpt["manifest"]
    models = {}
    for cid in manifest["clients"]:
        model = TwoBranchModel(manifest["num_classes"], seed=manifest["seed"], k_ch=manifest["k_ch"])
        model.set_all(ckpt["files"][f"client_{cid}_model.bin"])
        proto = ckpt["files"].get(f"client_{cid}_proto.bin")
        if proto is not None:
            model.proto_rows = proto["rows"].copy()
        models[cid] = model
    return models


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set)
    split = experiment_split(config)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint!r}: {exc}") from exc
    models = _models_from_checkpoint(ckpt)
    split_ids = sorted(c.client_id for c in split.clients)
    if sorted(models) != split_ids:
        raise ConfigError(
            f"checkpoint clients {sorted(models)} do not match the config's clients {split_ids}"
        )
    by_id = {c.client_id: c for c in split.clients}
    states = [
        ClientState(client_id=cid, model=model, disc=None, generator=None, data=by_id[cid])
        for cid, model in sorted(models.items())
    ]
    payload = {
        mode: evaluate_federation(states, mode).to_dict()
        for mode in ("fused", "global_only", "local_only")
    }
    if split.unseen:
        payload["unseen"] = evaluate_unseen(models, split.unseen, "fused").to_dict()
    payload["checkpoint"] = {
        "round": ckpt["manifest"]["round"],
        "metric": ckpt["manifest"]["metric"],
        "hash": ckpt["manifest"]["hash"],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_gen_data(args) -> int:
    config = load_config(args.config, args.set)
    split = experiment_split(config)
    out_dir = args.out or os.path.join(resolve_output_dir(config.output_dir), "dataset")
    save_split_to_dir(split, out_dir)
    n_train = sum(len(c.train) for c in split.clients)
    n_val = sum(len(c.val) for c in split.clients)
    print(f"out_dir={out_dir}")
    print(f"clients={len(split.clients)} train_images={n_train} val_images={n_val}")
    if split.unseen:
        print(f"unseen_images={len(split.unseen)}")
    return 0


def cmd_export_embeddings(args) -> int:
    config = load_config(args.config, args.set)
    split = experiment_split(config)
    by_id = {c.client_id: c for c in split.clients}
    if args.client not in by_id:
        raise ConfigError(f"client {args.client} not in this config (have {sorted(by_id)})")
    if args.checkpoint:
        models = _models_from_checkpoint(load_checkpoint(args.checkpoint))
        if args.client not in models:
            raise ConfigError(f"client {args.client} not in checkpoint (have {sorted(models)})")
        model = models[args.client]
    else:
        model = TwoBranchModel(config.data.num_classes, seed=config.seed, k_ch=config.model.k_ch)
    images = by_id[args.client].train if args.split == "train" else by_id[args.client].val
    out_path = args.out or os.path.join(resolve_output_dir(config.output_dir), "embeddings.csv")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    rows, missing = export_embeddings(
        model, images, args.per_class, out_path, seed=config.seed, branch=args.branch
    )
    print(f"out={out_path}")
    print(f"rows={rows}")
    if missing:
        print(f"classes_without_pixels={missing}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, workers: bool = False) -> None:
    parser.add_argument("--config", required=True, help="experiment TOML file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (dotted path, e.g. federation.rounds=5); repeatable",
    )
    if workers:
        parser.add_argument("--workers", type=int, default=1, help="client threads per round")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsegsim",
        description="Federated semantic-segmentation simulator with class-consistent alignment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one federated training run")
    _add_common(p, workers=True)
    p.add_argument("--verbose", action="store_true", help="print per-round validation mIoU to stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="feature-ladder comparison across seeds")
    _add_common(p, workers=True)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive master seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("upload-sweep", help="repeat the run across exemplar upload ratios")
    _add_common(p, workers=True)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive master seeds")
    p.add_argument("--ratios", default=UPLOAD_RATIOS_DEFAULT, help="comma-separated upload ratios")
    p.set_defaults(func=cmd_upload_sweep)

    p = sub.add_parser("eval", help="re-evaluate a saved checkpoint on the config's validation data")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (manifest.json + *.bin)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="render the config's synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (default: <output_dir>/dataset)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-embeddings", help="dump per-pixel feature embeddings to CSV")
    _add_common(p)
    p.add_argument("--client", type=int, required=True, help="client id whose data to embed")
    p.add_argument("--checkpoint", help="load this client's trained model from a checkpoint directory")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--per-class", type=int, default=64, dest="per_class")
    p.add_argument("--branch", choices=("global", "local"), default="global")
    p.add_argument("--out", help="CSV path (default: <output_dir>/embeddings.csv)")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
