"""Two-phase denoising loop.

A warm-up fills a circular matrix of per-instance losses from C plain training
epochs.  Each overall epoch then runs

* a searching epoch: a freshly initialized model is trained batch by batch while
  the policy samples which instances it sees; the policy is updated with
  REINFORCE using, per instance, the gap between its average stored loss and its
  current loss;
* a validation run: the policy scores every batch, the top-k instances per batch
  form a subset, and a fresh model is trained to convergence on it.

The subset whose model scores the best validation AUC is kept.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import make_optimizer
from .data import DatasetSplit, Instances, _atomic_write_text
from .metrics import evaluate
from .models import CtrModel, TrainConfig, batch_loss, model_update, predict, train_to_convergence
from .policy import PolicyNet, reinforce_update, sample_actions, topk_select

log = logging.getLogger(__name__)

SUBSET_MAGIC = "# autodenoise-subset v1"


class StateError(RuntimeError):
    pass


class SubsetMismatchError(ValueError):
    pass


def derive_seed(master: int, *tags) -> int:
    """Deterministic 32-bit seed for a (master seed, tag path) pair."""
    key = tuple(int.from_bytes(hashlib.sha256(str(t).encode()).digest()[:4], "little") for t in tags)
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


@dataclass
class DenoiseConfig:
    warmup_epochs: int = 4
    epochs: int = 50
    epsilon: float = 0.98
    selection_mode: str = "topk"  # validation phase: topk | individual
    policy_lr: float = 1e-4
    model_lr: float = 1e-3
    optimizer: str = "adam"
    mc_samples: int = 1
    reward_scope: str = "all"  # all | selected
    reward_baseline: str = "none"  # none | batch_mean
    warmup_passes: int = 1
    fixed_env_init: bool = True
    max_epochs: int = 30
    patience: int = 3
    policy_embed_dim: int = 16
    policy_hidden: tuple[int, ...] = (16, 16)
    policy_dropout: float = 0.2
    policy_batchnorm: bool = True
    policy_sees_label: bool = True
    select_prior: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must be in (0, 1]")
        if self.selection_mode not in ("topk", "individual"):
            raise ValueError("selection_mode must be 'topk' or 'individual'")
        if self.reward_scope not in ("all", "selected"):
            raise ValueError("reward_scope must be 'all' or 'selected'")
        if self.reward_baseline not in ("none", "batch_mean"):
            raise ValueError("reward_baseline must be 'none' or 'batch_mean'")
        if self.warmup_passes < 1:
            raise ValueError("warmup_passes must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def train_config(self, batch_size: int, seed: int) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=batch_size,
            optimizer=self.optimizer,
            learning_rate=self.model_lr,
            seed=seed,
        )

    def env_seed(self, phase: str, epoch: int) -> int:
        """Seed for the model re-initialization at the start of an epoch."""
        if self.fixed_env_init:
            return derive_seed(self.seed, "env")
        return derive_seed(self.seed, "env", phase, epoch)


# ---------------------------------------------------------------------------
# Loss matrix and reward
# ---------------------------------------------------------------------------


class LossMatrix:
    """Circular store of the last C epochs of per-instance losses."""

    def __init__(self, n_epochs: int, total: int):
        if n_epochs < 1:
            raise ValueError("need at least one stored epoch")
        self.values = np.zeros((n_epochs, total))
        self.filled = np.zeros(n_epochs, dtype=bool)

    @property
    def n_epochs(self) -> int:
        return self.values.shape[0]

    @property
    def total(self) -> int:
        return self.values.shape[1]

    @property
    def filled_epochs(self) -> int:
        return int(self.filled.sum())

    @property
    def is_full(self) -> bool:
        return bool(self.filled.all())

    def slot_for_epoch(self, t: int) -> int:
        """Row overwritten by overall epoch t (1-indexed)."""
        return (t - 1) % self.n_epochs

    def write(self, slot: int, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != (self.total,):
            raise ValueError(f"loss vector has shape {losses.shape}, expected ({self.total},)")
        if not np.all(np.isfinite(losses)):
            raise ValueError("loss vector contains non-finite values")
        self.values[slot] = losses
        self.filled[slot] = True

    def average(self) -> np.ndarray:
        if not self.is_full:
            raise StateError(f"loss matrix has {self.filled_epochs}/{self.n_epochs} epochs filled")
        return self.values.mean(axis=0)


def compute_reward(lmat: LossMatrix, current, position):
    """Average stored loss minus the current loss, per position."""
    if not lmat.is_full:
        raise StateError(f"loss matrix has {lmat.filled_epochs}/{lmat.n_epochs} epochs filled")
    hist = lmat.values[:, position].mean(axis=0)
    return hist - current


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def warmup_train(model: CtrModel, split: DatasetSplit, config: DenoiseConfig) -> LossMatrix:
    """C plain epochs, each from a fresh model; row i holds pre-update eval losses."""
    lmat = LossMatrix(config.warmup_epochs, len(split.train))
    for i in range(config.warmup_epochs):
        m = model.reinit(config.env_seed("warmup", i))
        opt = make_optimizer(config.optimizer, config.model_lr)
        rng = np.random.default_rng(derive_seed(config.seed, "warmup", i))
        row = np.empty(len(split.train))
        for _ in range(config.warmup_passes):
            for n, batch in split.batches():
                row[split.batch_slice(n)] = batch_loss(m, batch).losses
                model_update(m, batch, None, opt, rng=rng)
        lmat.write(i, row)
    return lmat


@dataclass
class SearchResult:
    policy: PolicyNet
    loss_vector: np.ndarray
    init_checksum: str
    mean_reward: float
    select_rate: float
    skipped_batches: int = 0


def search_epoch(
    policy: PolicyNet,
    model: CtrModel,
    split: DatasetSplit,
    lmat: LossMatrix,
    config: DenoiseConfig,
    epoch: int,
    policy_optimizer,
) -> SearchResult:
    """One searching epoch.  ``policy`` is copied; ``policy_optimizer`` is advanced."""
    if not lmat.is_full:
        raise StateError("searching needs a filled loss matrix")
    policy = policy.copy()
    m = model.reinit(config.env_seed("search", epoch))
    init_checksum = m.checksum()
    opt = make_optimizer(config.optimizer, config.model_lr)
    rng = np.random.default_rng(derive_seed(config.seed, "search", epoch))
    hist = lmat.average()
    lvec = np.empty(len(split.train))
    rewards_seen, selected_seen, skipped = 0.0, 0, 0

    for n, batch in split.batches():
        sl = split.batch_slice(n)
        # policy step on sampled actions a1
        probs, tape = policy.forward(batch, mode="train", rng=rng)
        samples = [sample_actions(probs, rng) for _ in range(config.mc_samples)]
        losses = batch_loss(m, batch).losses
        reward = hist[sl] - losses
        if config.reward_baseline == "batch_mean":
            reward = reward - reward.mean()
        actions = np.stack([s.selected for s in samples])
        rewards = np.broadcast_to(reward, actions.shape)
        if config.reward_scope == "selected":
            rewards = np.where(actions, rewards, 0.0)
        reinforce_update(policy, tape, probs, actions, rewards, policy_optimizer)
        rewards_seen += float(reward.sum())

        # model step on actions a2 from the updated policy; W is unchanged since
        # the losses above were computed, so they are the ones recorded
        probs2, _ = policy.forward(batch, mode="train", rng=rng)
        a2 = sample_actions(probs2, rng)
        lvec[sl] = losses
        selected_seen += int(a2.selected.sum())
        if not a2.selected.any():
            skipped += 1
            continue
        model_update(m, batch, a2.selected, opt, rng=rng)

    n_train = len(split.train)
    return SearchResult(policy, lvec, init_checksum, rewards_seen / n_train, selected_seen / n_train, skipped)


def select_subset(policy: PolicyNet, split: DatasetSplit, epsilon: float, mode: str = "topk", rng=None) -> np.ndarray:
    """Score every batch with the frozen policy; return sorted selected positions."""
    chosen = []
    for n, batch in split.batches():
        probs, _ = policy.forward(batch, mode="eval")
        if mode == "topk":
            k = max(1, math.ceil(epsilon * len(batch) - 1e-9))
            mask = topk_select(probs, k)
        else:
            if rng is None:
                raise ValueError("individual selection needs an rng")
            mask = sample_actions(probs, rng).selected
        chosen.append(batch.positions[mask])
    return np.sort(np.concatenate(chosen))


@dataclass
class ValidationResult:
    subset: np.ndarray
    model: CtrModel
    valid: dict
    test: dict
    train_epochs: int
    init_checksum: str


def train_and_evaluate(model: CtrModel, train: Instances, split: DatasetSplit, config: TrainConfig):
    res = train_to_convergence(model, train, split.valid, config)
    valid = evaluate(split.valid.labels, predict(res.model, split.valid)).to_dict()
    test = evaluate(split.test.labels, predict(res.model, split.test)).to_dict()
    return res, valid, test


def validation_run(
    policy: PolicyNet,
    model: CtrModel,
    split: DatasetSplit,
    config: DenoiseConfig,
    epoch: int,
) -> ValidationResult:
    rng = np.random.default_rng(derive_seed(config.seed, "select", epoch))
    subset = select_subset(policy, split, config.epsilon, config.selection_mode, rng)
    m = model.reinit(config.env_seed("valid", epoch))
    checksum = m.checksum()
    tcfg = config.train_config(split.batch_size, derive_seed(config.seed, "valid", epoch))
    res, valid, test = train_and_evaluate(m, split.train.take(subset), split, tcfg)
    return ValidationResult(subset, res.model, valid, test, len(res.history), checksum)


def plain_training(model: CtrModel, split: DatasetSplit, config: DenoiseConfig, epoch: int = 1) -> ValidationResult:
    """Validation-phase training on the full train set (the no-denoising control)."""
    m = model.reinit(config.env_seed("valid", epoch))
    checksum = m.checksum()
    tcfg = config.train_config(split.batch_size, derive_seed(config.seed, "valid", epoch))
    res, valid, test = train_and_evaluate(m, split.train, split, tcfg)
    return ValidationResult(np.arange(len(split.train)), res.model, valid, test, len(res.history), checksum)


# ---------------------------------------------------------------------------
# Overall loop
# ---------------------------------------------------------------------------


def _better(a: dict, b: dict | None) -> bool:
    """Higher validation AUC wins; lower validation logloss breaks ties."""
    if b is None:
        return True
    a_auc = -np.inf if a["auc"] is None else a["auc"]
    b_auc = -np.inf if b["auc"] is None else b["auc"]
    if a_auc != b_auc:
        return a_auc > b_auc
    return a["logloss"] < b["logloss"]


def noise_quality(dropped: np.ndarray, flipped_positions: np.ndarray) -> dict:
    dropped = np.asarray(dropped)
    flipped = np.asarray(flipped_positions)
    hit = len(np.intersect1d(dropped, flipped))
    return {
        "n_dropped": int(len(dropped)),
        "n_flipped": int(len(flipped)),
        "noise_precision": hit / len(dropped) if len(dropped) else None,
        "noise_recall": hit / len(flipped) if len(flipped) else None,
    }


@dataclass
class DenoiseRun:
    config: DenoiseConfig
    dataset_hash: str
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_policy: PolicyNet | None = None
    best_model: CtrModel | None = None
    best_subset: np.ndarray | None = None
    best_valid: dict | None = None
    best_test: dict | None = None
    lmat: LossMatrix | None = None
    lmat_history: list[np.ndarray] = field(default_factory=list)

    @property
    def best_metric(self) -> float | None:
        return None if self.best_valid is None else self.best_valid["auc"]


def overall_loop(model: CtrModel, split: DatasetSplit, config: DenoiseConfig, keep_loss_vectors: bool = False) -> DenoiseRun:
    """Warm-up, then T rounds of searching + validation; keeps the best subset and policy."""
    run = DenoiseRun(config, split.dataset_hash())
    lmat = warmup_train(model, split, config)
    policy = PolicyNet(
        split.schema,
        embed_dim=config.policy_embed_dim,
        hidden=config.policy_hidden,
        dropout=config.policy_dropout,
        batchnorm=config.policy_batchnorm,
        include_label=config.policy_sees_label,
        select_prior=config.select_prior,
        seed=derive_seed(config.seed, "policy"),
    )
    popt = make_optimizer(config.optimizer, config.policy_lr)
    flipped = split.noise_mask

    for t in range(1, config.epochs + 1):
        sr = search_epoch(policy, model, split, lmat, config, t, popt)
        policy = sr.policy
        lmat.write(lmat.slot_for_epoch(t), sr.loss_vector)
        if keep_loss_vectors:
            run.lmat_history.append(sr.loss_vector.copy())
        vr = validation_run(policy, model, split, config, t)
        dropped = np.setdiff1d(np.arange(len(split.train)), vr.subset)
        record = {
            "epoch": t,
            "valid_auc": vr.valid["auc"],
            "valid_logloss": vr.valid["logloss"],
            "test_auc": vr.test["auc"],
            "test_logloss": vr.test["logloss"],
            "subset_size": int(len(vr.subset)),
            "train_epochs": vr.train_epochs,
            "mean_reward": sr.mean_reward,
            "search_select_rate": sr.select_rate,
        }
        if len(flipped):
            record.update({k: v for k, v in noise_quality(dropped, flipped).items() if k.startswith("noise_")})
        run.records.append(record)
        log.info("epoch %d: %s", t, {k: (round(v, 4) if isinstance(v, float) else v) for k, v in record.items()})
        if _better(vr.valid, run.best_valid):
            run.best_epoch = t
            run.best_valid, run.best_test = vr.valid, vr.test
            run.best_subset = vr.subset
            run.best_policy = policy.copy()
            run.best_model = vr.model
    run.lmat = lmat
    return run


# ---------------------------------------------------------------------------
# Subset files
# ---------------------------------------------------------------------------


def export_subset(path, positions, *, dataset_hash: str, epsilon: float, seed: int, epoch: int, config_hash: str = "") -> None:
    positions = np.unique(np.asarray(positions, dtype=np.int64))
    header = [
        SUBSET_MAGIC,
        f"# dataset_hash={dataset_hash}",
        f"# epsilon={epsilon!r}",
        f"# seed={seed}",
        f"# epoch={epoch}",
        f"# config_hash={config_hash}",
        f"# count={len(positions)}",
    ]
    _atomic_write_text(path, "\n".join(header + [str(p) for p in positions.tolist()]) + "\n")


def read_subset(path) -> tuple[dict, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SUBSET_MAGIC:
        raise ValueError(f"{path}: not a subset file")
    meta = {}
    positions = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.strip():
            positions.append(int(line))
    positions = np.array(positions, dtype=np.int64)
    if "count" in meta and int(meta["count"]) != len(positions):
        raise ValueError(f"{path}: truncated subset file")
    return meta, positions


def import_subset(path, split: DatasetSplit) -> Instances:
    """Load a subset file and materialize its instances; refuses a different dataset."""
    meta, positions = read_subset(path)
    expected = split.dataset_hash()
    if meta.get("dataset_hash") != expected:
        raise SubsetMismatchError(
            f"{path}: subset was made for dataset {meta.get('dataset_hash')}, this dataset is {expected}"
        )
    if len(positions) and (positions.min() < 0 or positions.max() >= len(split.train)):
        raise SubsetMismatchError(f"{path}: positions outside the training split")
    return split.train.take(positions)
