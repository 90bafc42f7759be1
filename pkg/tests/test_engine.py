from fractions import Fraction

import numpy as np
import pytest

from autodenoise import engine
from autodenoise.core import make_optimizer, sigmoid
from autodenoise.data import inject_label_noise, split_dataset, synth_generate
from autodenoise.engine import (
    DenoiseConfig,
    LossMatrix,
    StateError,
    SubsetMismatchError,
    compute_reward,
    derive_seed,
    export_subset,
    import_subset,
    noise_quality,
    overall_loop,
    plain_training,
    read_subset,
    search_epoch,
    select_subset,
    validation_run,
    warmup_train,
)
from autodenoise.models import CtrModel, DeepFMLite, TrainConfig, model_update, train_to_convergence
from autodenoise.policy import SELECT, PolicyNet

FAST = dict(max_epochs=3, patience=1)


def _cfg(**kw):
    base = dict(warmup_epochs=2, epochs=2, epsilon=0.9, **FAST)
    base.update(kw)
    return DenoiseConfig(**base)


def _policy(split, cfg, seed=0):
    return PolicyNet(split.schema, embed_dim=cfg.policy_embed_dim, seed=seed)


# -- reward arithmetic ----------------------------------------------------------------------


def _filled(rows):
    lm = LossMatrix(len(rows), len(rows[0]))
    for i, r in enumerate(rows):
        lm.write(i, np.array(r, dtype=float))
    return lm


def test_reward_hand_cases():
    assert compute_reward(_filled([[0.6], [0.8]]), 0.5, 0) == pytest.approx(float(Fraction(1, 5)), abs=1e-15)
    assert compute_reward(_filled([[0.3]]), 0.4, 0) == pytest.approx(-0.1, abs=1e-15)
    lm = _filled([[0.25, 1.0], [0.75, 3.0]])
    np.testing.assert_array_equal(compute_reward(lm, np.array([0.5, 2.0]), np.array([0, 1])), [0.0, 0.0])


def test_reward_needs_filled_matrix():
    lm = LossMatrix(3, 2)
    lm.write(0, np.ones(2))
    with pytest.raises(StateError):
        compute_reward(lm, 0.1, 0)
    with pytest.raises(StateError):
        lm.average()


def test_loss_matrix_rejects_bad_vectors():
    lm = LossMatrix(2, 3)
    with pytest.raises(ValueError):
        lm.write(0, np.ones(4))
    with pytest.raises(ValueError):
        lm.write(0, np.array([1.0, np.inf, 0.0]))


@pytest.mark.parametrize("C", [2, 4])
def test_circular_overwrite_against_shadow(C):
    rng = np.random.default_rng(C)
    lm = LossMatrix(C, 5)
    for i in range(C):
        lm.write(i, rng.random(5))
    shadow = [lm.values[i].copy() for i in range(C)]  # oldest first
    for t in range(1, 11):
        vec = rng.random(5)
        slot = lm.slot_for_epoch(t)
        assert slot == (t - 1) % C
        lm.write(slot, vec)
        shadow = shadow[1:] + [vec]
        assert sorted(map(tuple, lm.values)) == sorted(map(tuple, shadow))
        # same rows in a different order: equal up to summation rounding
        np.testing.assert_allclose(lm.average(), np.mean(shadow, axis=0), rtol=0, atol=1e-15)


# -- warm-up -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_batch_split():
    syn = synth_generate(12, 10, 100, teacher_rank=3, seed=9)
    split = split_dataset(syn.instances, syn.schema, seed=0, batch_size=40)
    assert split.n_batches == 2
    return split


def _fm_losses(model, split):
    """Forward-only brute-force FM loss per instance (independent of CtrModel.forward)."""
    out = np.empty(len(split.train))
    for i, (row, y) in enumerate(zip(split.train.fields, split.train.labels)):
        idx = row + split.schema.offsets
        z = model.w0[0] + model.w[idx].sum()
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                z += model.V[idx[a]] @ model.V[idx[b]]
        p = min(max(sigmoid(z), 1e-7), 1 - 1e-7)
        out[i] = -np.log(p) if y == 1 else -np.log(1 - p)
    return out


def test_warmup_row_matches_forward_only_replay(two_batch_split):
    split = two_batch_split
    cfg = _cfg(warmup_epochs=1)
    model = CtrModel(split.schema, seed=0)
    lm = warmup_train(model, split, cfg)
    # replay: snapshot parameters before each batch, score the batch from the snapshot
    m = model.reinit(cfg.env_seed("warmup", 0))
    opt = make_optimizer(cfg.optimizer, cfg.model_lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "warmup", 0))
    expected = np.empty(len(split.train))
    for n, batch in split.batches():
        snap = m.copy()
        sl = split.batch_slice(n)
        expected[sl] = _fm_losses(snap, split)[sl]
        model_update(m, batch, None, opt, rng=rng)
    np.testing.assert_allclose(lm.values[0], expected, rtol=0, atol=1e-12)


def test_warmup_rows_positive_and_deterministic(tiny_split):
    cfg = _cfg(warmup_epochs=3)
    m = DeepFMLite(tiny_split.schema, seed=0)
    a = warmup_train(m, tiny_split, cfg)
    b = warmup_train(m, tiny_split, cfg)
    assert a.is_full and np.all(np.isfinite(a.values)) and np.all(a.values > 0)
    np.testing.assert_array_equal(a.values, b.values)


# -- searching ------------------------------------------------------------------------------


def test_search_covers_every_position_and_changes_policy(tiny_split):
    cfg = _cfg()
    model = DeepFMLite(tiny_split.schema, seed=0)
    lm = warmup_train(model, tiny_split, cfg)
    pol = _policy(tiny_split, cfg)
    sr = search_epoch(pol, model, tiny_split, lm, cfg, 1, make_optimizer("adam", cfg.policy_lr))
    assert sr.loss_vector.shape == (len(tiny_split.train),)
    assert np.all(np.isfinite(sr.loss_vector)) and np.all(sr.loss_vector > 0)
    assert sr.policy.checksum() != pol.checksum()
    assert sr.init_checksum == model.reinit(cfg.env_seed("search", 1)).checksum()


def test_search_needs_filled_matrix(tiny_split):
    cfg = _cfg()
    with pytest.raises(StateError):
        search_epoch(_policy(tiny_split, cfg), CtrModel(tiny_split.schema), tiny_split, LossMatrix(2, len(tiny_split.train)),
                     cfg, 1, make_optimizer("adam", 1e-4))


def test_frozen_all_select_policy_replays_warmup_epoch(tiny_split, monkeypatch):
    cfg = _cfg(warmup_epochs=1)
    model = CtrModel(tiny_split.schema, seed=0)
    lm = warmup_train(model, tiny_split, cfg)
    pol = _policy(tiny_split, cfg)
    pol.mlp.layers[-1].weight[:] = 0
    pol.mlp.layers[-1].bias[:] = [-1e3, 1e3]  # p_select == 1.0 exactly
    monkeypatch.setattr(engine, "reinforce_update", lambda *a, **k: {})
    sr = search_epoch(pol, model, tiny_split, lm, cfg, 1, make_optimizer("adam", cfg.policy_lr))
    np.testing.assert_array_equal(sr.loss_vector, lm.values[0])
    assert sr.select_rate == 1.0


def test_empty_a2_selection_skips_updates(tiny_split):
    cfg = _cfg(warmup_epochs=1)
    model = CtrModel(tiny_split.schema, seed=0)
    lm = warmup_train(model, tiny_split, cfg)
    pol = _policy(tiny_split, cfg)
    pol.mlp.layers[-1].weight[:] = 0
    pol.mlp.layers[-1].bias[:] = [1e3, -1e3]  # never select
    sr = search_epoch(pol, model, tiny_split, lm, cfg, 1, make_optimizer("sgd", 1e-12))
    assert sr.skipped_batches == tiny_split.n_batches
    # the model never moved, so every batch is scored by the initial parameters
    init = model.reinit(cfg.env_seed("search", 1))
    from autodenoise.models import batch_loss

    np.testing.assert_array_equal(sr.loss_vector, batch_loss(init, tiny_split.train).losses)


# -- validation ----------------------------------------------------------------------------------


def test_topk_counts_per_batch():
    syn = synth_generate(40, 30, 1000, seed=0)
    split = split_dataset(syn.instances, syn.schema, seed=0, batch_size=100)
    pol = PolicyNet(split.schema, seed=0)
    subset = select_subset(pol, split, 0.98)
    counts = np.bincount(subset // 100, minlength=split.n_batches)
    assert list(counts) == [98] * split.n_batches
    assert np.all(np.diff(subset) > 0)


def test_select_subset_short_batch_ceil(tiny_split):
    pol = _policy(tiny_split, _cfg())
    subset = select_subset(pol, tiny_split, 0.8)
    sizes = [len(b) for _, b in tiny_split.batches()]
    expect = sum(int(np.ceil(0.8 * s)) for s in sizes)
    assert len(subset) == expect


def test_epsilon_one_equals_plain_training(tiny_split):
    cfg = _cfg(epsilon=1.0)
    model = DeepFMLite(tiny_split.schema, seed=0)
    pol = _policy(tiny_split, cfg)
    vr = validation_run(pol, model, tiny_split, cfg, 1)
    ctrl = plain_training(model, tiny_split, cfg, 1)
    np.testing.assert_array_equal(vr.subset, np.arange(len(tiny_split.train)))
    assert vr.valid == ctrl.valid and vr.test == ctrl.test
    assert vr.model.checksum() == ctrl.model.checksum()
    assert vr.init_checksum == model.reinit(cfg.env_seed("valid", 1)).checksum()


def test_individual_selection_mode_runs(tiny_split):
    cfg = _cfg(epochs=1, selection_mode="individual")
    run = overall_loop(DeepFMLite(tiny_split.schema, seed=0), tiny_split, cfg)
    assert len(run.records) == 1 and 0 < len(run.best_subset) <= len(tiny_split.train)


# -- overall loop ------------------------------------------------------------------------------


def test_single_epoch_run(tiny_split):
    run = overall_loop(DeepFMLite(tiny_split.schema, seed=0), tiny_split, _cfg(epochs=1))
    assert len(run.records) == 1 and run.best_epoch == 1 and run.best_subset is not None
    assert {"noise_precision", "noise_recall"} <= set(run.records[0])


def test_loop_overwrites_first_warmup_row(tiny_split):
    cfg = _cfg(warmup_epochs=2, epochs=3)
    run = overall_loop(CtrModel(tiny_split.schema, seed=0), tiny_split, cfg, keep_loss_vectors=True)
    # t=1 -> slot 0, t=2 -> slot 1, t=3 = C+1 -> slot 0 again
    np.testing.assert_array_equal(run.lmat.values[0], run.lmat_history[2])
    np.testing.assert_array_equal(run.lmat.values[1], run.lmat_history[1])


def test_loop_best_epoch_and_determinism(tiny_split):
    cfg = _cfg(epochs=3)
    a = overall_loop(DeepFMLite(tiny_split.schema, seed=0), tiny_split, cfg)
    b = overall_loop(DeepFMLite(tiny_split.schema, seed=0), tiny_split, cfg)
    assert a.records == b.records
    np.testing.assert_array_equal(a.best_subset, b.best_subset)
    best = max(a.records, key=lambda r: (r["valid_auc"], -r["valid_logloss"]))
    assert a.best_epoch == best["epoch"]
    assert a.best_metric == max(r["valid_auc"] for r in a.records)


def test_noise_quality_definitions():
    q = noise_quality(np.array([1, 2, 3, 4]), np.array([2, 4, 9]))
    assert q["noise_precision"] == 0.5 and q["noise_recall"] == pytest.approx(2 / 3)
    assert noise_quality(np.array([], dtype=int), np.array([1]))["noise_precision"] is None


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a", 1), derive_seed(0, "a", 2), derive_seed(1, "a", 1), derive_seed(0, "b", 1)}) == 4


def test_env_seed_modes():
    assert _cfg().env_seed("search", 1) == _cfg().env_seed("valid", 7)
    free = _cfg(fixed_env_init=False)
    assert free.env_seed("search", 1) != free.env_seed("search", 2)


# -- subset files -----------------------------------------------------------------------------


def test_subset_round_trip(tmp_path, tiny_split):
    pos = np.array([5, 1, 3, 3, 40])
    path = tmp_path / "s.txt"
    export_subset(path, pos, dataset_hash=tiny_split.dataset_hash(), epsilon=0.9, seed=1, epoch=2, config_hash="abc")
    meta, back = read_subset(path)
    np.testing.assert_array_equal(back, [1, 3, 5, 40])
    assert meta["epoch"] == "2" and meta["config_hash"] == "abc"
    inst = import_subset(path, tiny_split)
    np.testing.assert_array_equal(inst.fields, tiny_split.train.fields[[1, 3, 5, 40]])
    np.testing.assert_array_equal(inst.labels, tiny_split.train.labels[[1, 3, 5, 40]])


def test_subset_hash_mismatch(tmp_path, tiny_split):
    path = tmp_path / "s.txt"
    export_subset(path, [0, 1], dataset_hash="0000", epsilon=0.9, seed=0, epoch=1)
    with pytest.raises(SubsetMismatchError):
        import_subset(path, tiny_split)
    other = inject_label_noise(tiny_split, 0.3, seed=99)
    export_subset(path, [0, 1], dataset_hash=tiny_split.dataset_hash(), epsilon=0.9, seed=0, epoch=1)
    with pytest.raises(SubsetMismatchError):
        import_subset(path, other)


def test_subset_out_of_range(tmp_path, tiny_split):
    path = tmp_path / "s.txt"
    export_subset(path, [10**6], dataset_hash=tiny_split.dataset_hash(), epsilon=0.9, seed=0, epoch=1)
    with pytest.raises(SubsetMismatchError):
        import_subset(path, tiny_split)


def test_truncated_subset_file(tmp_path, tiny_split):
    path = tmp_path / "s.txt"
    export_subset(path, [0, 1, 2], dataset_hash=tiny_split.dataset_hash(), epsilon=0.9, seed=0, epoch=1)
    path.write_text(path.read_text().rsplit("\n", 2)[0] + "\n")
    with pytest.raises(ValueError):
        read_subset(path)


def test_fm_subset_trains_deepfm(tmp_path, tiny_split):
    run = overall_loop(CtrModel(tiny_split.schema, seed=0), tiny_split, _cfg(epochs=1))
    path = tmp_path / "fm.txt"
    export_subset(path, run.best_subset, dataset_hash=tiny_split.dataset_hash(), epsilon=0.9, seed=0, epoch=run.best_epoch)
    sub = import_subset(path, tiny_split)
    res = train_to_convergence(DeepFMLite(tiny_split.schema, seed=1), sub, tiny_split.valid, TrainConfig(max_epochs=2))
    assert len(res.history) >= 1


def test_config_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=1.5), dict(warmup_epochs=0), dict(selection_mode="x"), dict(reward_scope="x")):
        with pytest.raises(ValueError):
            DenoiseConfig(**bad)
