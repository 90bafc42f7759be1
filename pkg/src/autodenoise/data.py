"""Datasets of categorical interactions: schema, CSV I/O, splitting, noise, synthesis.

Instances are stored column-wise in numpy arrays.  Within a split each instance
carries a ``position`` that never changes after the split is made; the training
batch plan is a pure function of those positions and the batch size, which is
what lets per-instance losses be compared across epochs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import sigmoid

LABEL_COLUMNS = ("label", "rating")


class DataError(ValueError):
    pass


def binarize_rating(r) -> int:
    """Ratings above 3 count as a click."""
    r_int = int(r)
    if r_int != float(r) or not 1 <= r_int <= 5:
        raise DataError(f"rating must be an integer in [1, 5], got {r!r}")
    return 1 if r_int > 3 else 0


@dataclass(frozen=True)
class FieldSchema:
    names: tuple[str, ...]
    vocabularies: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.vocabularies):
            raise DataError("one vocabulary per field is required")
        if any(len(v) == 0 for v in self.vocabularies):
            raise DataError("empty vocabulary")

    @property
    def n_fields(self) -> int:
        return len(self.names)

    @property
    def vocab_sizes(self) -> np.ndarray:
        return np.array([len(v) for v in self.vocabularies], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        sizes = self.vocab_sizes
        return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def n_features(self) -> int:
        return int(self.vocab_sizes.sum())

    def global_index(self, fields: np.ndarray) -> np.ndarray:
        """Map per-field local indices (n, F) to global feature indices."""
        return np.asarray(fields, dtype=np.int64) + self.offsets

    def to_dict(self) -> dict:
        return {"fields": [{"name": n, "vocabulary": list(v)} for n, v in zip(self.names, self.vocabularies)]}

    @classmethod
    def from_dict(cls, d: dict) -> FieldSchema:
        fields = d["fields"]
        return cls(
            names=tuple(f["name"] for f in fields),
            vocabularies=tuple(tuple(str(x) for x in f["vocabulary"]) for f in fields),
        )

    def save(self, path) -> None:
        _atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> FieldSchema:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureInstance:
    field_values: tuple[int, ...]
    label: int
    global_position: int
    noise_flag: str | None = None  # "clean" | "flipped" | None


@dataclass
class Instances:
    fields: np.ndarray  # (n, F) local indices
    labels: np.ndarray  # (n,) 0/1
    positions: np.ndarray  # (n,)
    flipped: np.ndarray | None = None  # (n,) bool, ground truth when known

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.fields.ndim != 2 or len(self.fields) != len(self.labels) or len(self.labels) != len(self.positions):
            raise DataError("inconsistent instance array shapes")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> Instances:
        idx = np.asarray(idx)
        return Instances(
            self.fields[idx],
            self.labels[idx],
            self.positions[idx],
            None if self.flipped is None else self.flipped[idx],
        )

    def instance(self, i: int) -> FeatureInstance:
        flag = None
        if self.flipped is not None:
            flag = "flipped" if self.flipped[i] else "clean"
        return FeatureInstance(tuple(int(v) for v in self.fields[i]), int(self.labels[i]), int(self.positions[i]), flag)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.fields, self.labels, self.positions):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass
class DatasetSplit:
    schema: FieldSchema
    train: Instances
    valid: Instances
    test: Instances
    batch_size: int = 256
    noise_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not np.array_equal(self.train.positions, np.arange(len(self.train))):
            raise DataError("train positions must be 0..n-1 in storage order")

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self.train) / self.batch_size)

    def batch_slice(self, n: int) -> slice:
        if not 0 <= n < self.n_batches:
            raise IndexError(f"batch {n} out of range")
        start = n * self.batch_size
        return slice(start, min(start + self.batch_size, len(self.train)))

    def batches(self):
        """Fixed batch plan: yields ``(n, Instances)`` in order."""
        for n in range(self.n_batches):
            yield n, self.train.take(np.arange(len(self.train))[self.batch_slice(n)])

    def with_batch_size(self, batch_size: int) -> DatasetSplit:
        return replace(self, batch_size=batch_size)

    def dataset_hash(self) -> str:
        h = hashlib.sha256(self.schema.hash().encode())
        for part in (self.train, self.valid, self.test):
            h.update(part.checksum().encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_csv(path, schema: FieldSchema | None = None) -> tuple[Instances, FieldSchema]:
    """Read categorical columns plus a ``label`` (0/1) or ``rating`` (1-5) column.

    Without ``schema`` the vocabulary is inferred in order of first appearance;
    with one, unknown values are an error.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        label_cols = [i for i, h in enumerate(header) if h in LABEL_COLUMNS]
        if len(label_cols) != 1:
            raise DataError(f"{path}: need exactly one 'label' or 'rating' column, header is {header}")
        li = label_cols[0]
        is_rating = header[li] == "rating"
        field_cols = [i for i in range(len(header)) if i != li]
        names = tuple(header[i] for i in field_cols)
        if not names:
            raise DataError(f"{path}: no categorical columns")

        if schema is not None:
            if schema.names != names:
                raise DataError(f"{path}: columns {names} do not match schema fields {schema.names}")
            lookups = [{v: j for j, v in enumerate(voc)} for voc in schema.vocabularies]
        else:
            lookups = [{} for _ in names]

        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            raw = row[li].strip()
            try:
                if is_rating:
                    y = binarize_rating(float(raw))
                else:
                    y = int(raw)
                    if y not in (0, 1):
                        raise ValueError
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad {header[li]} value {raw!r}") from None
            vals = []
            for f, ci in enumerate(field_cols):
                v = row[ci].strip()
                idx = lookups[f].get(v)
                if idx is None:
                    if schema is not None:
                        raise DataError(f"{path}:{lineno}: unknown value {v!r} for field {names[f]!r}")
                    idx = lookups[f][v] = len(lookups[f])
                vals.append(idx)
            rows.append(vals)
            labels.append(y)

    if schema is None:
        if not rows:
            raise DataError(f"{path}: no data rows")
        schema = FieldSchema(names, tuple(tuple(lk) for lk in lookups))
    fields = np.array(rows, dtype=np.int64).reshape(len(rows), len(names))
    return Instances(fields, np.array(labels, dtype=np.int64), np.arange(len(rows))), schema


def write_csv(path, instances: Instances, schema: FieldSchema) -> None:
    lines = [",".join(schema.names) + ",label"]
    vocab = schema.vocabularies
    for row, y in zip(instances.fields.tolist(), instances.labels.tolist()):
        lines.append(",".join(vocab[f][v] for f, v in enumerate(row)) + f",{y}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Splitting and noise
# ---------------------------------------------------------------------------


def split_dataset(
    instances: Instances,
    schema: FieldSchema,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
    batch_size: int = 256,
) -> DatasetSplit:
    """Seeded shuffle into train/valid/test; valid and test get floor(r*n), train the rest."""
    n = len(instances)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_valid = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    for idx in (perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]):
        part = instances.take(idx)
        part.positions = np.arange(len(part), dtype=np.int64)
        parts.append(part)
    return DatasetSplit(schema, *parts, batch_size=batch_size)


def inject_label_noise(split: DatasetSplit, flip_rate: float, seed: int) -> DatasetSplit:
    """Flip exactly round(flip_rate * |train|) train labels chosen by a seeded shuffle."""
    if not 0.0 <= flip_rate <= 1.0:
        raise DataError(f"flip_rate must be in [0, 1], got {flip_rate}")
    n = len(split.train)
    k = int(math.floor(flip_rate * n + 0.5))
    chosen = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    flipped = np.zeros(n, dtype=bool)
    flipped[chosen] = True
    labels = split.train.labels.copy()
    labels[flipped] = 1 - labels[flipped]
    train = Instances(split.train.fields.copy(), labels, split.train.positions.copy(), flipped)
    return replace(split, train=train, noise_mask=split.train.positions[chosen])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthResult:
    instances: Instances
    schema: FieldSchema
    teacher_probs: np.ndarray


def synth_generate(
    n_users: int,
    n_items: int,
    n_interactions: int,
    teacher_rank: int = 8,
    seed: int = 0,
    *,
    bias_scale: float = 1.0,
    factor_scale: float | None = None,
) -> SynthResult:
    """Sample (user, item) pairs without replacement and label them from a hidden FM teacher.

    Teacher factors are Normal with variance 1/sqrt(rank), so the interaction
    term has unit variance; user and item biases are Normal(0, bias_scale^2).
    """
    if min(n_users, n_items, teacher_rank) < 1 or n_interactions < 1:
        raise DataError("sizes must be positive")
    if n_interactions > n_users * n_items:
        raise DataError(f"cannot draw {n_interactions} distinct pairs from {n_users}x{n_items}")
    rng = np.random.default_rng(seed)
    std = (teacher_rank ** -0.25) if factor_scale is None else factor_scale
    u = rng.normal(0.0, std, size=(n_users, teacher_rank))
    v = rng.normal(0.0, std, size=(n_items, teacher_rank))
    bu = rng.normal(0.0, bias_scale, size=n_users) if bias_scale > 0 else np.zeros(n_users)
    bi = rng.normal(0.0, bias_scale, size=n_items) if bias_scale > 0 else np.zeros(n_items)
    pairs = rng.choice(n_users * n_items, size=n_interactions, replace=False)
    users, items = np.divmod(pairs, n_items)
    logits = np.einsum("nk,nk->n", u[users], v[items]) + bu[users] + bi[items]
    probs = sigmoid(logits)
    labels = (rng.random(n_interactions) < probs).astype(np.int64)
    schema = FieldSchema(
        ("user", "item"),
        (tuple(str(i) for i in range(n_users)), tuple(str(i) for i in range(n_items))),
    )
    inst = Instances(np.stack([users, items], axis=1), labels, np.arange(n_interactions))
    return SynthResult(inst, schema, probs)
