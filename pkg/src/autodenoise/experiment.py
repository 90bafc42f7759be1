"""End-to-end pipelines behind the CLI: data preparation, each method, reports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import RceConfig, TceConfig, random_drop, rce_weigher, tce_weigher
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (
    DatasetSplit,
    DataError,
    FieldSchema,
    Instances,
    _atomic_write_text,
    inject_label_noise,
    load_csv,
    split_dataset,
    synth_generate,
    write_csv,
)
from .engine import (
    derive_seed,
    export_subset,
    import_subset,
    noise_quality,
    overall_loop,
    plain_training,
    read_subset,
)
from .metrics import evaluate
from .models import CtrModel, build_model, predict, train_to_convergence
from .policy import PolicyNet

log = logging.getLogger(__name__)

NOISE_MASK_FILE = "noise_mask.txt"


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_schema_and_rows(cfg: RunConfig) -> tuple[Instances, FieldSchema]:
    """The full (unsplit) dataset named by the config, or a synthetic one."""
    if cfg.dataset:
        schema = FieldSchema.load(cfg.schema) if cfg.schema else None
        return load_csv(cfg.dataset, schema)
    syn = synth_generate(cfg.n_users, cfg.n_items, cfg.n_interactions, cfg.teacher_rank, seed=cfg.synth_seed)
    return syn.instances, syn.schema


def _load_split_dir(cfg: RunConfig) -> DatasetSplit:
    d = Path(cfg.split_dir)
    schema = FieldSchema.load(d / "schema.json")
    parts = [load_csv(d / f"{name}.csv", schema)[0] for name in ("train", "valid", "test")]
    mask = np.zeros(0, dtype=np.int64)
    if (d / NOISE_MASK_FILE).exists():
        lines = (d / NOISE_MASK_FILE).read_text(encoding="utf-8").split()
        mask = np.array(sorted(int(x) for x in lines), dtype=np.int64)
        if len(mask) and (mask.min() < 0 or mask.max() >= len(parts[0])):
            raise DataError(f"{d / NOISE_MASK_FILE}: positions outside the training split")
    flipped = np.zeros(len(parts[0]), dtype=bool)
    flipped[mask] = True
    parts[0].flipped = flipped
    return DatasetSplit(schema, *parts, batch_size=cfg.batch_size, noise_mask=mask)


def prepare_split(cfg: RunConfig) -> DatasetSplit:
    """Load or synthesize, split 80/10/10, then flip train labels if asked."""
    if cfg.split_dir:
        return _load_split_dir(cfg)
    rows, schema = load_schema_and_rows(cfg)
    split = split_dataset(rows, schema, seed=cfg.split_seed, batch_size=cfg.batch_size)
    if cfg.flip_rate > 0:
        split = inject_label_noise(split, cfg.flip_rate, cfg.noise_seed)
    return split


def write_split_dir(split: DatasetSplit, out_dir) -> None:
    out = Path(out_dir)
    split.schema.save(out / "schema.json")
    for name in ("train", "valid", "test"):
        write_csv(out / f"{name}.csv", getattr(split, name), split.schema)
    _atomic_write_text(out / NOISE_MASK_FILE, "".join(f"{p}\n" for p in split.noise_mask.tolist()))


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    records: list[dict]
    best_epoch: int
    subset: np.ndarray
    model: CtrModel
    test: dict
    valid: dict
    policy: PolicyNet | None = None
    extra: dict = field(default_factory=dict)


def _record(epoch: int, valid: dict, test: dict, subset, split: DatasetSplit, train_epochs: int) -> dict:
    rec = {
        "epoch": epoch,
        "valid_auc": valid["auc"],
        "valid_logloss": valid["logloss"],
        "test_auc": test["auc"],
        "test_logloss": test["logloss"],
        "subset_size": int(len(subset)),
        "train_epochs": train_epochs,
    }
    if len(split.noise_mask):
        dropped = np.setdiff1d(np.arange(len(split.train)), subset)
        rec.update({k: v for k, v in noise_quality(dropped, split.noise_mask).items() if k.startswith("noise_")})
    return rec


def _backbone(cfg: RunConfig, split: DatasetSplit, kind: str | None = None) -> CtrModel:
    return build_model(kind or cfg.model, split.schema, embed_dim=cfg.embed_dim, seed=derive_seed(cfg.seed, "model"))


def _single(split, subset, res_model, valid, test, train_epochs, **extra) -> Outcome:
    rec = _record(1, valid, test, subset, split, train_epochs)
    return Outcome([rec], 1, subset, res_model, test, valid, extra=extra)


def run_none(cfg: RunConfig, split: DatasetSplit) -> Outcome:
    vr = plain_training(_backbone(cfg, split), split, cfg.denoise_config())
    return _single(split, vr.subset, vr.model, vr.valid, vr.test, vr.train_epochs)


def _weighted_training(cfg: RunConfig, split: DatasetSplit, weigher):
    """Same seeds as the plain control, so neutral weights reproduce it exactly."""
    dcfg = cfg.denoise_config()
    model = _backbone(cfg, split).reinit(dcfg.env_seed("valid", 1))
    tcfg = dcfg.train_config(split.batch_size, derive_seed(cfg.seed, "valid", 1))
    res = train_to_convergence(model, split.train, split.valid, tcfg, weigher=weigher)
    valid = evaluate(split.valid.labels, predict(res.model, split.valid)).to_dict()
    test = evaluate(split.test.labels, predict(res.model, split.test)).to_dict()
    return res, valid, test


def run_tce(cfg: RunConfig, split: DatasetSplit) -> Outcome:
    tcfg = TceConfig(cfg.tce_max_drop, cfg.tce_anneal_steps)
    res, valid, test = _weighted_training(cfg, split, tce_weigher(tcfg))
    # the truncated set of the final training epoch stands in for "dropped"
    dropped = res.last_dropped if res.last_dropped is not None else np.zeros(0, dtype=np.int64)
    subset = np.setdiff1d(np.arange(len(split.train)), dropped)
    return _single(split, subset, res.model, valid, test, len(res.history))


def run_rce(cfg: RunConfig, split: DatasetSplit) -> Outcome:
    res, valid, test = _weighted_training(cfg, split, rce_weigher(RceConfig(cfg.rce_gamma)))
    return _single(split, np.arange(len(split.train)), res.model, valid, test, len(res.history))


def random_subset(split: DatasetSplit, rate: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    kept = [batch.positions[random_drop(len(batch), rate, rng)] for _, batch in split.batches()]
    return np.sort(np.concatenate(kept))


def run_random(cfg: RunConfig, split: DatasetSplit) -> Outcome:
    dcfg = cfg.denoise_config()
    subset = random_subset(split, cfg.random_drop_rate, derive_seed(cfg.seed, "random"))
    model = _backbone(cfg, split).reinit(dcfg.env_seed("valid", 1))
    tcfg = dcfg.train_config(split.batch_size, derive_seed(cfg.seed, "valid", 1))
    res = train_to_convergence(model, split.train.take(subset), split.valid, tcfg)
    valid = evaluate(split.valid.labels, predict(res.model, split.valid)).to_dict()
    test = evaluate(split.test.labels, predict(res.model, split.test)).to_dict()
    return _single(split, subset, res.model, valid, test, len(res.history))


def run_autodenoise(cfg: RunConfig, split: DatasetSplit) -> Outcome:
    run = overall_loop(_backbone(cfg, split), split, cfg.denoise_config())
    return Outcome(
        run.records,
        run.best_epoch,
        run.best_subset,
        run.best_model,
        run.best_test,
        run.best_valid,
        policy=run.best_policy,
    )


METHOD_RUNNERS = {
    "autodenoise": run_autodenoise,
    "tce": run_tce,
    "rce": run_rce,
    "random": run_random,
    "none": run_none,
}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def build_report(cfg: RunConfig, split: DatasetSplit, out: Outcome) -> dict:
    best = dict(next(r for r in out.records if r["epoch"] == out.best_epoch))
    aucs = [r["valid_auc"] for r in out.records if r["valid_auc"] is not None]
    return {
        "kind": "run",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "dataset_hash": split.dataset_hash(),
        "method": cfg.method,
        "model": cfg.model,
        "n_train": len(split.train),
        "n_valid": len(split.valid),
        "n_test": len(split.test),
        "n_flipped": int(len(split.noise_mask)),
        "records": out.records,
        "best_epoch": out.best_epoch,
        "best": best,
        "best_valid_auc": max(aucs) if aucs else None,
    }


def dump_json(path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: RunConfig, out_dir) -> dict:
    """Run the configured method and write report, subset, checkpoints and curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    split = prepare_split(cfg)
    t1 = time.perf_counter()
    outcome = METHOD_RUNNERS[cfg.method](cfg, split)
    t2 = time.perf_counter()

    report = build_report(cfg, split, outcome)
    chash = report["config_hash"]
    dump_json(out_dir / "report.json", report)
    export_subset(
        out_dir / "subset.txt",
        outcome.subset,
        dataset_hash=report["dataset_hash"],
        epsilon=cfg.epsilon,
        seed=cfg.seed,
        epoch=outcome.best_epoch,
        config_hash=chash,
    )
    save_checkpoint(out_dir / "model.npz", outcome.model, config_hash=chash)
    if outcome.policy is not None:
        save_checkpoint(out_dir / "policy.npz", outcome.policy, config_hash=chash)
    if cfg.plots:
        from .plotting import plot_run_curves

        plot_run_curves(outcome.records, out_dir / "curves.png", title=f"{cfg.method} / {cfg.model}")
    dump_json(
        out_dir / "timing.json",
        {"config_hash": chash, "data_seconds": t1 - t0, "method_seconds": t2 - t1, "total_seconds": time.perf_counter() - t0},
    )
    return report


def run_transfer(cfg: RunConfig, subset_path, kind: str, out_dir=None) -> dict:
    """Train ``kind`` from scratch on an imported subset, next to a full-data control."""
    split = prepare_split(cfg)
    meta, positions = read_subset(subset_path)
    sub = import_subset(subset_path, split)
    dcfg = cfg.denoise_config()
    backbone = _backbone(cfg, split, kind)
    model = backbone.reinit(dcfg.env_seed("valid", 1))
    tcfg = dcfg.train_config(split.batch_size, derive_seed(cfg.seed, "valid", 1))
    res = train_to_convergence(model, sub, split.valid, tcfg)
    test = evaluate(split.test.labels, predict(res.model, split.test)).to_dict()
    valid = evaluate(split.valid.labels, predict(res.model, split.valid)).to_dict()
    control = plain_training(backbone, split, dcfg)
    report = {
        "kind": "transfer",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "dataset_hash": split.dataset_hash(),
        "model": kind,
        "subset_file": str(subset_path),
        "subset_config_hash": meta.get("config_hash", ""),
        "subset_size": int(len(positions)),
        "subset": {"valid": valid, "test": test, "train_epochs": len(res.history)},
        "control": {"valid": control.valid, "test": control.test, "train_epochs": control.train_epochs},
    }
    if len(split.noise_mask):
        dropped = np.setdiff1d(np.arange(len(split.train)), positions)
        report["noise"] = noise_quality(dropped, split.noise_mask)
    if out_dir is not None:
        out_dir = Path(out_dir)
        dump_json(out_dir / "transfer_report.json", report)
        save_checkpoint(out_dir / f"transfer_{kind}.npz", res.model, config_hash=cfg.config_hash())
    return report
