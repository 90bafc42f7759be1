import numpy as np
import pytest

from autodenoise.data import (
    DataError,
    DatasetSplit,
    FieldSchema,
    Instances,
    binarize_rating,
    inject_label_noise,
    load_csv,
    split_dataset,
    synth_generate,
    write_csv,
)
from autodenoise.metrics import auc

from conftest import random_instances, random_schema


@pytest.mark.parametrize("r,y", [(4, 1), (3, 0), (5, 1), (1, 0), (2, 0)])
def test_binarize_rating(r, y):
    assert binarize_rating(r) == y


@pytest.mark.parametrize("r", [0, 6, -1])
def test_binarize_rating_out_of_range(r):
    with pytest.raises(DataError):
        binarize_rating(r)


def test_load_csv_counts_vocab(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("gender,genre,label\nm,drama,1\nf,drama,0\nm,comedy,1\n")
    inst, schema = load_csv(p)
    assert len(inst) == 3
    assert schema.names == ("gender", "genre")
    assert list(schema.vocab_sizes) == [2, 2]
    assert list(inst.labels) == [1, 0, 1]


def test_load_csv_rating_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("user,item,rating\na,x,3\nb,y,4\n")
    inst, _ = load_csv(p)
    assert list(inst.labels) == [0, 1]


def test_load_csv_unknown_value_under_schema(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("user,label\na,1\nzzz,0\n")
    schema = FieldSchema(("user",), (("a", "b"),))
    with pytest.raises(DataError):
        load_csv(p, schema)


@pytest.mark.parametrize(
    "text",
    ["", "user,item\na,b\n", "user,label\na\n", "user,label\na,2\n", "label\n1\n"],
)
def test_load_csv_rejects_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        load_csv(p)


def test_csv_round_trip(tmp_path, rng):
    schema = random_schema(rng, n_fields=4)
    inst = random_instances(rng, schema, 300)
    write_csv(tmp_path / "d.csv", inst, schema)
    schema.save(tmp_path / "schema.json")
    loaded = FieldSchema.load(tmp_path / "schema.json")
    assert loaded == schema and loaded.hash() == schema.hash()
    back, _ = load_csv(tmp_path / "d.csv", loaded)
    np.testing.assert_array_equal(back.fields, inst.fields)
    np.testing.assert_array_equal(back.labels, inst.labels)


def test_schema_offsets_and_global_index():
    schema = FieldSchema(("a", "b", "c"), (("0", "1"), ("0", "1", "2"), ("x",)))
    assert list(schema.offsets) == [0, 2, 5]
    assert schema.n_features == 6
    np.testing.assert_array_equal(schema.global_index(np.array([[1, 2, 0]])), [[1, 4, 5]])


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (11, (9, 1, 1)), (1000, (800, 100, 100))])
def test_split_sizes(rng, n, sizes):
    schema = random_schema(rng)
    split = split_dataset(random_instances(rng, schema, n), schema, seed=0)
    assert (len(split.train), len(split.valid), len(split.test)) == sizes
    for part in (split.train, split.valid, split.test):
        np.testing.assert_array_equal(part.positions, np.arange(len(part)))


def test_split_deterministic_and_partitioning(rng):
    schema = random_schema(rng)
    inst = random_instances(rng, schema, 200)
    inst.positions = np.arange(200)
    a = split_dataset(inst, schema, seed=5)
    b = split_dataset(inst, schema, seed=5)
    assert a.dataset_hash() == b.dataset_hash()
    c = split_dataset(inst, schema, seed=6)
    assert a.dataset_hash() != c.dataset_hash()


def test_split_rejects_bad_ratios(rng):
    schema = random_schema(rng)
    with pytest.raises(DataError):
        split_dataset(random_instances(rng, schema, 10), schema, ratios=(0.5, 0.1, 0.1))


def test_batch_plan_stable_and_keeps_short_batch(rng):
    schema = random_schema(rng)
    split = split_dataset(random_instances(rng, schema, 250), schema, seed=0, batch_size=64)
    assert split.n_batches == 4
    first = [b.positions.copy() for _, b in split.batches()]
    second = [b.positions.copy() for _, b in split.batches()]
    assert all(np.array_equal(x, y) for x, y in zip(first, second))
    assert [len(x) for x in first] == [64, 64, 64, 8]
    np.testing.assert_array_equal(np.concatenate(first), np.arange(200))


def _split(rng, n_train):
    schema = random_schema(rng)
    n = int(n_train / 0.8)
    split = split_dataset(random_instances(rng, schema, n), schema, seed=0)
    assert len(split.train) == n_train
    return split


def test_noise_rate_zero_is_identity(rng):
    split = _split(rng, 1000)
    noisy = inject_label_noise(split, 0.0, seed=1)
    np.testing.assert_array_equal(noisy.train.labels, split.train.labels)
    assert len(noisy.noise_mask) == 0


def test_noise_rate_one_flips_all(rng):
    split = _split(rng, 1000)
    noisy = inject_label_noise(split, 1.0, seed=1)
    np.testing.assert_array_equal(noisy.train.labels, 1 - split.train.labels)


def test_noise_exact_count_and_mask_consistency(rng):
    split = _split(rng, 1000)
    noisy = inject_label_noise(split, 0.2, seed=1)
    assert len(noisy.noise_mask) == 200
    changed = np.flatnonzero(noisy.train.labels != split.train.labels)
    np.testing.assert_array_equal(changed, noisy.noise_mask)
    np.testing.assert_array_equal(np.flatnonzero(noisy.train.flipped), noisy.noise_mask)
    assert noisy.train.instance(int(changed[0])).noise_flag == "flipped"
    np.testing.assert_array_equal(noisy.valid.labels, split.valid.labels)
    np.testing.assert_array_equal(noisy.test.labels, split.test.labels)


def test_split_requires_canonical_train_positions(rng):
    schema = random_schema(rng)
    inst = random_instances(rng, schema, 10)
    inst.positions = inst.positions[::-1].copy()
    with pytest.raises(DataError):
        DatasetSplit(schema, inst, inst.take([0]), inst.take([1]))


def test_synth_deterministic_and_sized():
    a = synth_generate(50, 40, 1000, seed=4)
    b = synth_generate(50, 40, 1000, seed=4)
    np.testing.assert_array_equal(a.instances.fields, b.instances.fields)
    np.testing.assert_array_equal(a.instances.labels, b.instances.labels)
    assert len(a.instances) == 1000
    pairs = a.instances.fields[:, 0] * 40 + a.instances.fields[:, 1]
    assert len(np.unique(pairs)) == 1000
    assert list(a.schema.vocab_sizes) == [50, 40]


def test_synth_zero_teacher_positive_rate_half():
    n = 10_000
    syn = synth_generate(200, 100, n, seed=0, bias_scale=0.0, factor_scale=0.0)
    rate = syn.instances.labels.mean()
    assert abs(rate - 0.5) < 3 * np.sqrt(0.25 / n)


def test_synth_teacher_beats_random_scores():
    syn = synth_generate(200, 100, 10_000, teacher_rank=8, seed=1)
    labels = syn.instances.labels
    random_scores = np.random.default_rng(0).random(len(labels))
    assert auc(labels, syn.teacher_probs) > auc(labels, random_scores)
    assert auc(labels, syn.teacher_probs) > 0.7


def test_synth_rejects_impossible_sizes():
    with pytest.raises(DataError):
        synth_generate(2, 2, 5)


def test_instances_shape_check():
    with pytest.raises(DataError):
        Instances(np.zeros((3, 2)), np.zeros(2), np.arange(3))
