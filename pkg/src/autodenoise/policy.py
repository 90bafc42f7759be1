"""Instance-selection policy: embeddings -> MLP -> 2-way softmax, trained with REINFORCE."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from .core import PROB_EPS, init_mlp, mlp_backward, mlp_forward, optimizer_step
from .data import FieldSchema, Instances

DESELECT, SELECT = 0, 1


class PolicyNet:
    """Scores each instance of a batch with (p_deselect, p_select).

    The state of an instance is the concatenation of one embedding per field.
    With ``include_label`` the observed label is embedded as one more field,
    since a flipped label is invisible from the features alone.
    """

    def __init__(
        self,
        schema: FieldSchema,
        embed_dim: int = 16,
        hidden: tuple[int, ...] = (16, 16),
        dropout: float = 0.2,
        batchnorm: bool = True,
        include_label: bool = True,
        select_prior: float = 0.5,
        seed: int = 0,
    ):
        if not 0.0 < select_prior < 1.0:
            raise ValueError("select_prior must be in (0, 1)")
        self.schema = schema
        self.embed_dim = embed_dim
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.batchnorm = batchnorm
        self.include_label = include_label
        self.select_prior = select_prior
        self.offsets = schema.offsets
        self.n_fields = schema.n_fields
        n_rows = schema.n_features + (2 if include_label else 0)
        n_inputs = self.n_fields + (1 if include_label else 0)
        rng = np.random.default_rng(seed)
        self.A = rng.normal(0.0, 0.01, size=(n_rows, embed_dim))
        self.mlp = init_mlp(
            [n_inputs * embed_dim, *self.hidden, 2],
            rng,
            batchnorm=batchnorm,
            dropout_rate=dropout,
            output_activation="softmax",
        )
        self.mlp.layers[-1].bias[SELECT] = np.log(select_prior / (1.0 - select_prior))

    def config(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden": list(self.hidden),
            "dropout": self.dropout,
            "batchnorm": self.batchnorm,
            "include_label": self.include_label,
            "select_prior": self.select_prior,
        }

    def parameters(self) -> dict[str, np.ndarray]:
        return {"A": self.A, **self.mlp.named_arrays("mlp.")}

    def buffers(self) -> dict[str, np.ndarray]:
        return self.mlp.named_buffers("mlp.")

    def copy(self) -> PolicyNet:
        return copy.deepcopy(self)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted({**self.parameters(), **self.buffers()}.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _rows(self, batch: Instances) -> np.ndarray:
        fields = np.asarray(batch.fields, dtype=np.int64)
        if fields.ndim != 2 or fields.shape[1] != self.n_fields:
            raise ValueError(f"batch has {fields.shape[-1]} fields, policy expects {self.n_fields}")
        if (fields < 0).any() or (fields >= self.schema.vocab_sizes).any():
            raise IndexError("feature index out of range for the policy schema")
        idx = fields + self.offsets
        if self.include_label:
            idx = np.concatenate([idx, self.schema.n_features + batch.labels[:, None]], axis=1)
        return idx

    def forward(self, batch: Instances, mode: str = "eval", rng=None, masks=None, update_stats=True):
        """Return the (M, 2) probability matrix and a tape for ``backward``."""
        idx = self._rows(batch)
        x = self.A[idx].reshape(len(idx), -1)
        probs, mtape = mlp_forward(self.mlp, x, mode=mode, rng=rng, masks=masks, update_stats=update_stats)
        return probs, {"idx": idx, "mlp": mtape}

    def backward(self, tape, grad_probs: np.ndarray) -> dict[str, np.ndarray]:
        grads, gx = mlp_backward(self.mlp, tape["mlp"], grad_probs, prefix="mlp.")
        idx = tape["idx"]
        dA = np.zeros_like(self.A)
        np.add.at(dA, idx.ravel(), gx.reshape(-1, self.embed_dim))
        grads["A"] = dA
        return grads


def policy_forward(policy: PolicyNet, batch: Instances, mode="eval", rng=None, masks=None):
    return policy.forward(batch, mode=mode, rng=rng, masks=masks)


@dataclass
class ActionBatch:
    p_select: np.ndarray
    selected: np.ndarray  # bool
    log_prob: np.ndarray

    def __len__(self) -> int:
        return len(self.selected)


def action_log_prob(probs: np.ndarray, selected: np.ndarray) -> np.ndarray:
    p_sel = np.clip(probs[:, SELECT], PROB_EPS, 1.0 - PROB_EPS)
    return np.where(selected, np.log(p_sel), np.log1p(-p_sel))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> ActionBatch:
    """Independent Bernoulli(p_select) action per instance."""
    probs = np.asarray(probs, dtype=np.float64)
    p_sel = probs[:, SELECT]
    selected = rng.random(len(p_sel)) < p_sel
    return ActionBatch(p_sel, selected, action_log_prob(probs, selected))


def topk_select(p_select, k: int) -> np.ndarray:
    """Mask of the k largest select probabilities; ties go to the lower slot."""
    p = np.asarray(p_select, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, SELECT]
    if not 1 <= k <= len(p):
        raise ValueError(f"k must be in [1, {len(p)}], got {k}")
    order = np.argsort(-p, kind="stable")
    mask = np.zeros(len(p), dtype=bool)
    mask[order[:k]] = True
    return mask


def surrogate_grad_probs(probs: np.ndarray, actions, rewards) -> np.ndarray:
    """d/d(probs) of -(1/M) * sum_m R_m * log pi(a_m).

    ``actions``/``rewards`` may be (M,) or (T, M) for T Monte-Carlo samples,
    which are averaged.
    """
    sel = np.atleast_2d(np.asarray(actions, dtype=bool))
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if sel.shape != r.shape or sel.shape[1] != len(probs):
        raise ValueError(f"actions {sel.shape} / rewards {r.shape} do not match batch of {len(probs)}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    n_samples, m = sel.shape
    p_sel = probs[:, SELECT]
    inside = (p_sel > PROB_EPS) & (p_sel < 1.0 - PROB_EPS)
    grad = np.zeros_like(probs)
    scale = 1.0 / (m * n_samples)
    # d log p_sel / d p_sel = 1/p_sel ; d log(1 - p_sel) / d p_deselect = 1/p_deselect
    # outside the clamp the log-prob is constant; guard the division so p == 0 gives 0, not nan
    safe_sel = np.where(inside, p_sel, 1.0)
    safe_des = np.where(inside, probs[:, DESELECT], 1.0)
    grad[:, SELECT] = -scale * np.where(sel, r, 0.0).sum(axis=0) * inside / safe_sel
    grad[:, DESELECT] = -scale * np.where(sel, 0.0, r).sum(axis=0) * inside / safe_des
    return grad


def surrogate(probs: np.ndarray, actions, rewards) -> float:
    """(1/M) * mean over samples of sum_m R_m * log pi(a_m)."""
    sel = np.atleast_2d(np.asarray(actions, dtype=bool))
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    total = sum(float((rt * action_log_prob(probs, st)).sum()) for st, rt in zip(sel, r))
    return total / (sel.shape[1] * sel.shape[0])


def reinforce_update(policy: PolicyNet, tape, probs, actions, rewards, optimizer) -> dict[str, np.ndarray]:
    """One ascent step on the REINFORCE surrogate (a descent step on its negative).

    ``tape``/``probs`` must come from the forward pass that produced the actions.
    """
    grad_probs = surrogate_grad_probs(probs, actions, rewards)
    grads = policy.backward(tape, grad_probs)
    optimizer_step(optimizer, policy.parameters(), grads)
    return grads
