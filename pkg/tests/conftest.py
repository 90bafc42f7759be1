import numpy as np
import pytest

from autodenoise.data import FieldSchema, Instances, inject_label_noise, split_dataset, synth_generate


def random_schema(rng, n_fields=3, max_vocab=6):
    sizes = rng.integers(2, max_vocab + 1, size=n_fields)
    return FieldSchema(
        tuple(f"f{i}" for i in range(n_fields)),
        tuple(tuple(f"v{j}" for j in range(s)) for s in sizes),
    )


def random_instances(rng, schema, n):
    fields = np.stack([rng.integers(0, s, size=n) for s in schema.vocab_sizes], axis=1)
    return Instances(fields, rng.integers(0, 2, size=n), np.arange(n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_split():
    """~480-instance noisy synthetic split with 64-instance batches."""
    syn = synth_generate(40, 30, 600, teacher_rank=4, seed=3)
    split = split_dataset(syn.instances, syn.schema, seed=1, batch_size=64)
    return inject_label_noise(split, 0.2, seed=2)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    # floor keeps exactly-zero gradients (e.g. a bias feeding batchnorm) from
    # turning finite-difference round-off into a huge relative error
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-5)
    return np.linalg.norm(a - b) / denom


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
