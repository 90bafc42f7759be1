"""Command-line interface: synth, noise, run, transfer, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import DataError, write_csv
from .engine import SubsetMismatchError
from .metrics import evaluate
from .models import CtrModel, predict

log = logging.getLogger("autodenoise")

# flag name -> RunConfig key
_FLAGS = {
    "seed": int,
    "method": str,
    "model": str,
    "epsilon": float,
    "warmup_epochs": int,
    "epochs": int,
    "batch_size": int,
    "dataset": str,
    "schema": str,
    "split_dir": str,
    "flip_rate": float,
    "noise_seed": int,
    "split_seed": int,
    "synth_seed": int,
    "n_users": int,
    "n_items": int,
    "n_interactions": int,
    "teacher_rank": int,
    "embed_dim": int,
    "policy_lr": float,
    "model_lr": float,
    "selection_mode": str,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out-dir", default=".", help="where outputs are written (default: .)")
    for key, typ in _FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--no-plots", action="store_true", help="skip curves.png")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autodenoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV and its schema")
    _common(p)

    p = sub.add_parser("noise", help="split the dataset, flip train labels, write split files and the noise mask")
    _common(p)

    p = sub.add_parser("run", help="run a denoising method (or plain training) and write the report")
    _common(p)

    p = sub.add_parser("transfer", help="train a backbone on an exported subset beside a full-data control")
    _common(p)
    p.add_argument("--subset", required=True, help="subset file written by 'run'")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {key: getattr(args, key) for key in _FLAGS}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        changes[key.strip()] = value.strip()
    if args.no_plots:
        changes["plots"] = False
    return cfg.override(**changes)


def cmd_synth(cfg: RunConfig, out_dir: Path) -> int:
    from .data import synth_generate

    syn = synth_generate(cfg.n_users, cfg.n_items, cfg.n_interactions, cfg.teacher_rank, seed=cfg.synth_seed)
    write_csv(out_dir / "dataset.csv", syn.instances, syn.schema)
    syn.schema.save(out_dir / "schema.json")
    print(f"wrote {len(syn.instances)} rows to {out_dir / 'dataset.csv'} (schema {syn.schema.hash()})")
    return 0


def cmd_noise(cfg: RunConfig, out_dir: Path) -> int:
    from .experiment import prepare_split, write_split_dir

    split = prepare_split(cfg)
    write_split_dir(split, out_dir)
    print(
        f"train={len(split.train)} valid={len(split.valid)} test={len(split.test)} "
        f"flipped={len(split.noise_mask)} dataset_hash={split.dataset_hash()}"
    )
    return 0


def cmd_run(cfg: RunConfig, out_dir: Path) -> int:
    from .experiment import run_experiment

    report = run_experiment(cfg, out_dir)
    best = report["best"]
    line = f"method={cfg.method} model={cfg.model} best_epoch={report['best_epoch']} test_auc={best['test_auc']} test_logloss={best['test_logloss']:.6f}"
    if best.get("noise_precision") is not None:
        line += f" noise_precision={best['noise_precision']:.4f}"
    print(line)
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_transfer(cfg: RunConfig, out_dir: Path, subset: str) -> int:
    from .experiment import run_transfer

    if not Path(subset).is_file():
        print(f"error: subset file not found: {subset}", file=sys.stderr)
        return 1
    rep = run_transfer(cfg, subset, cfg.model, out_dir)
    print(json.dumps({"subset": rep["subset"]["test"], "control": rep["control"]["test"]}, sort_keys=True))
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, which: str) -> int:
    from .experiment import prepare_split

    split = prepare_split(cfg)
    model = load_checkpoint(checkpoint, split.schema)
    if not isinstance(model, CtrModel):
        print(f"error: {checkpoint} is a policy checkpoint, not a CTR model", file=sys.stderr)
        return 1
    part = getattr(split, which)
    rep = evaluate(part.labels, predict(model, part))
    if rep.auc is None:
        print(f"warning: AUC undefined on the {which} split (only one class present)", file=sys.stderr)
    print(json.dumps({"split": which, **rep.to_dict()}, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(cfg, out_dir)
        if args.command == "noise":
            return cmd_noise(cfg, out_dir)
        if args.command == "run":
            return cmd_run(cfg, out_dir)
        if args.command == "transfer":
            return cmd_transfer(cfg, out_dir, args.subset)
        return cmd_eval(cfg, args.checkpoint, args.split)
    except (DataError, CheckpointError, SubsetMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
