"""CTR backbones (FM and a small DeepFM) with hand-written gradients and training loops."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    MlpParams,
    bce_per_instance,
    init_mlp,
    make_optimizer,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    sigmoid,
)
from .data import FieldSchema, Instances
from .metrics import evaluate

log = logging.getLogger(__name__)

INIT_STD = 0.01


class CtrModel:
    """Second-order factorization machine; subclasses add terms to the logit."""

    kind = "fm"

    def __init__(self, schema: FieldSchema, embed_dim: int = 16, seed: int = 0):
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.schema = schema
        self.embed_dim = embed_dim
        self.offsets = schema.offsets
        self.n_features = schema.n_features
        self.n_fields = schema.n_fields
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.w0 = np.zeros(1)
        self.w = rng.normal(0.0, INIT_STD, size=self.n_features)
        self.V = rng.normal(0.0, INIT_STD, size=(self.n_features, embed_dim))
        self._init_extra(rng)

    def _init_extra(self, rng: np.random.Generator) -> None:
        pass

    def config(self) -> dict:
        return {"kind": self.kind, "embed_dim": self.embed_dim}

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "w": self.w, "V": self.V}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def reinit(self, seed: int) -> CtrModel:
        return type(self)(self.schema, **self._ctor_kwargs(), seed=seed)

    def _ctor_kwargs(self) -> dict:
        return {"embed_dim": self.embed_dim}

    def copy(self) -> CtrModel:
        return copy.deepcopy(self)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted({**self.parameters(), **self.buffers()}.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _global(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields, dtype=np.int64)
        if fields.ndim == 1:
            fields = fields[None, :]
        if fields.shape[1] != self.n_fields:
            raise ValueError(f"expected {self.n_fields} fields, got {fields.shape[1]}")
        if (fields < 0).any() or (fields >= self.schema.vocab_sizes).any():
            raise IndexError("feature index out of range for this schema")
        return fields + self.offsets

    def forward(self, fields, mode: str = "eval", rng=None, masks=None):
        """Return ``(probabilities, logits, tape)`` for a (n, F) array of field values."""
        idx = self._global(fields)
        emb = self.V[idx]  # (n, F, d)
        s = emb.sum(axis=1)
        pair = 0.5 * (s * s - (emb * emb).sum(axis=1)).sum(axis=1)
        logit = self.w0[0] + self.w[idx].sum(axis=1) + pair
        tape = {"idx": idx, "emb": emb, "s": s}
        logit = logit + self._extra_forward(emb, tape, mode, rng, masks)
        return sigmoid(logit), logit, tape

    def _extra_forward(self, emb, tape, mode, rng, masks):
        return 0.0

    def backward(self, tape, grad_logit: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logit) per instance."""
        idx, emb, s = tape["idx"], tape["emb"], tape["s"]
        g = np.asarray(grad_logit, dtype=np.float64)
        grads = {"w0": np.array([g.sum()])}
        dw = np.zeros_like(self.w)
        np.add.at(dw, idx.ravel(), np.repeat(g, idx.shape[1]))
        grads["w"] = dw
        demb = g[:, None, None] * (s[:, None, :] - emb)
        demb = demb + self._extra_backward(tape, g, grads)
        dV = np.zeros_like(self.V)
        np.add.at(dV, idx.ravel(), demb.reshape(-1, self.embed_dim))
        grads["V"] = dV
        return grads

    def _extra_backward(self, tape, g, grads):
        return 0.0


FM = CtrModel


class DeepFMLite(CtrModel):
    """FM logit plus an MLP over the concatenated field embeddings (shared with FM)."""

    kind = "deepfm"

    def __init__(
        self,
        schema: FieldSchema,
        embed_dim: int = 16,
        seed: int = 0,
        hidden: tuple[int, ...] = (16, 16),
        dropout: float = 0.2,
        batchnorm: bool = False,
    ):
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.batchnorm = batchnorm
        super().__init__(schema, embed_dim=embed_dim, seed=seed)

    def _init_extra(self, rng):
        dims = [self.n_fields * self.embed_dim, *self.hidden, 1]
        self.mlp: MlpParams = init_mlp(dims, rng, batchnorm=self.batchnorm, dropout_rate=self.dropout)

    def _ctor_kwargs(self):
        return {"embed_dim": self.embed_dim, "hidden": self.hidden, "dropout": self.dropout, "batchnorm": self.batchnorm}

    def config(self):
        return {**super().config(), "hidden": list(self.hidden), "dropout": self.dropout, "batchnorm": self.batchnorm}

    def parameters(self):
        return {**super().parameters(), **self.mlp.named_arrays("mlp.")}

    def buffers(self):
        return self.mlp.named_buffers("mlp.")

    def _extra_forward(self, emb, tape, mode, rng, masks):
        x = emb.reshape(emb.shape[0], -1)
        out, mtape = mlp_forward(self.mlp, x, mode=mode, rng=rng, masks=masks)
        tape["mlp"] = mtape
        return out[:, 0]

    def _extra_backward(self, tape, g, grads):
        mgrads, gx = mlp_backward(self.mlp, tape["mlp"], g[:, None], prefix="mlp.")
        grads.update(mgrads)
        return gx.reshape(tape["emb"].shape)


MODEL_KINDS = {"fm": CtrModel, "deepfm": DeepFMLite}


def build_model(kind: str, schema: FieldSchema, embed_dim: int = 16, seed: int = 0, **kwargs) -> CtrModel:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(schema, embed_dim=embed_dim, seed=seed, **kwargs)


def reinit(model: CtrModel, seed: int) -> CtrModel:
    """Fresh parameters for the same architecture, deterministic in ``seed``."""
    return model.reinit(seed)


def model_forward(model: CtrModel, fields, mode="eval", rng=None):
    return model.forward(fields, mode=mode, rng=rng)


def predict(model: CtrModel, instances: Instances) -> np.ndarray:
    """Eval-mode probabilities for a whole instance set."""
    if len(instances) == 0:
        return np.zeros(0)
    return model.forward(instances.fields, mode="eval")[0]


@dataclass
class BatchLoss:
    losses: np.ndarray
    mean: float
    n_selected: int

    @property
    def empty_selection(self) -> bool:
        return self.n_selected == 0


def batch_loss(model: CtrModel, batch: Instances, mask=None, mode="eval", rng=None) -> BatchLoss:
    """Per-instance BCE for every instance; the objective averages over ``mask`` only."""
    probs = model.forward(batch.fields, mode=mode, rng=rng)[0]
    losses = bce_per_instance(batch.labels, probs)
    mask = np.ones(len(batch), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_sel = int(mask.sum())
    mean = float(losses[mask].mean()) if n_sel else 0.0
    return BatchLoss(losses, mean, n_sel)


def model_update(
    model: CtrModel,
    batch: Instances,
    mask,
    optimizer,
    rng: np.random.Generator | None = None,
    weights=None,
) -> BatchLoss:
    """One optimizer step on the mean loss over selected instances.

    ``weights`` multiplies each instance's gradient (reweighting baselines).
    Returns the train-mode per-instance losses computed before the step; an
    empty selection skips the step.
    """
    mask = np.ones(len(batch), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n_sel = int(mask.sum())
    if n_sel == 0:
        log.debug("empty selection, skipping model update")
        return BatchLoss(np.zeros(len(batch)), 0.0, 0)
    probs, _, tape = model.forward(batch.fields, mode="train", rng=rng)
    losses = bce_per_instance(batch.labels, probs)
    coef = mask.astype(np.float64)
    if weights is not None:
        coef = coef * np.asarray(weights, dtype=np.float64)
    grad_logit = coef * (probs - batch.labels) / n_sel
    grads = model.backward(tape, grad_logit)
    optimizer_step(optimizer, model.parameters(), grads)
    return BatchLoss(losses, float(losses[mask].mean()), n_sel)


def loss_gradients(model: CtrModel, batch: Instances, mask=None, masks=None, mode="eval"):
    """Analytic gradient of the selected-mean loss (used by tests and diagnostics)."""
    mask = np.ones(len(batch), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    probs, _, tape = model.forward(batch.fields, mode=mode, masks=masks)
    n_sel = max(int(mask.sum()), 1)
    return model.backward(tape, mask * (probs - batch.labels) / n_sel)


@dataclass
class TrainConfig:
    max_epochs: int = 30
    patience: int = 3
    batch_size: int = 256
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True when it is the new best."""
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, self.epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainResult:
    model: CtrModel
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    last_dropped: np.ndarray | None = None


def train_to_convergence(
    model: CtrModel,
    train: Instances,
    valid: Instances,
    config: TrainConfig,
    weigher=None,
) -> TrainResult:
    """Train on seeded-shuffled batches with early stopping on validation logloss.

    ``weigher(batch, probs, step, rng) -> (mask, weights)`` lets baselines
    truncate or reweight instances per batch.  Returns the parameters from the
    epoch with the best validation logloss.
    """
    if len(train) == 0:
        raise ValueError("empty training data")
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    model = model.copy()
    best = model.copy()
    stopper = EarlyStopping(config.patience)
    history = []
    step = 0
    last_dropped = None
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        dropped = []
        for start in range(0, len(order), config.batch_size):
            batch = train.take(order[start : start + config.batch_size])
            mask, weights = None, None
            if weigher is not None:
                probs = model.forward(batch.fields, mode="eval")[0]
                mask, weights = weigher(batch, probs, step, rng)
                if mask is not None:
                    dropped.append(batch.positions[~np.asarray(mask, dtype=bool)])
            res = model_update(model, batch, mask, optimizer, rng=rng, weights=weights)
            total += res.mean * res.n_selected
            count += res.n_selected
            step += 1
        rep = evaluate(valid.labels, predict(model, valid)) if len(valid) else None
        val_loss = rep.logloss if rep else total / max(count, 1)
        history.append(
            {
                "epoch": epoch,
                "train_logloss": total / max(count, 1),
                "valid_logloss": val_loss,
                "valid_auc": rep.auc if rep else None,
            }
        )
        if dropped:
            last_dropped = np.sort(np.concatenate(dropped))
        if stopper.update(val_loss):
            best = model.copy()
        elif stopper.should_stop:
            break
    return TrainResult(best, stopper.best_epoch, history, last_dropped)
