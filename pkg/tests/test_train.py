import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaze_emb.data import synth_dataset
from gaze_emb.net import NetConfig
from gaze_emb.prep import VelocityWindow, WindowSource, preprocess_recording
from gaze_emb.train import (
    AdamState,
    FoldAssignment,
    MSLossHParams,
    TrainConfig,
    TrainError,
    adam_step,
    assign_folds,
    fold_loads,
    lr_at,
    ms_loss,
    sample_batch,
    train_fold,
    write_train_log,
)
from oracles import central_difference, greedy_loads, ms_loss_by_pairs

HP = MSLossHParams()


# --- folds


def test_assign_folds_equal_counts():
    counts = {f"s{i:02d}": 10 for i in range(20)}
    fa = assign_folds(counts, 4)
    sizes = [len(fa.subjects_in(f)) for f in range(4)]
    assert sizes == [5, 5, 5, 5]
    assert assign_folds(counts, 4) == fa


def test_assign_folds_greedy_loads():
    counts = dict(zip("abcdef", [9, 5, 5, 5, 4, 4]))
    fa = assign_folds(counts, 2)
    loads = fold_loads(fa, counts)
    assert loads == greedy_loads(counts, 2) == [18, 14]
    assert max(loads) - min(loads) <= max(counts.values())


def test_assign_folds_excludes_held_out():
    counts = {f"s{i}": i + 1 for i in range(10)}
    fa = assign_folds(counts, 4, held_out=["s0", "s9"])
    assert "s0" not in fa.fold_of_subject and "s9" not in fa.fold_of_subject
    assert fa.held_out == {"s0", "s9"}


def test_assign_folds_errors():
    with pytest.raises(TrainError):
        assign_folds({"a": 1, "b": 1, "c": 1}, 4)
    with pytest.raises(TrainError):
        assign_folds({f"s{i}": 1 for i in range(8)}, 4, held_out=["zz"])
    with pytest.raises(TrainError):
        FoldAssignment(2, {"a": 0}, frozenset({"a"}))


@settings(max_examples=60, deadline=None)
@given(
    st.dictionaries(st.text("abcdefgh0123", min_size=1, max_size=6), st.integers(1, 40), min_size=4, max_size=80),
    st.integers(2, 4),
    st.data(),
)
def test_fold_hygiene_property(counts, k, data):
    ids = sorted(counts)
    held = data.draw(st.lists(st.sampled_from(ids), unique=True, max_size=len(ids) - k))
    fa = assign_folds(counts, k, held)
    assert set(fa.fold_of_subject) | set(held) == set(counts)
    assert not set(fa.fold_of_subject) & set(held)
    for f in range(k):
        assert not fa.training_subjects(f) & fa.subjects_in(f)
        assert not fa.training_subjects(f) & fa.held_out
    pool = {s: c for s, c in counts.items() if s not in held}
    loads = fold_loads(fa, pool)
    assert max(loads) - min(loads) <= max(pool.values())
    assert loads == greedy_loads(pool, k)


# --- batches


def _by_class(n_classes, per_class):
    return {f"c{c}": [(c, i) for i in range(per_class)] for c in range(n_classes)}


def test_sample_batch_composition():
    items, labels = sample_batch(_by_class(10, 20), np.random.default_rng(0))
    assert len(items) == 64
    assert len(set(labels)) == 8
    assert all(np.sum(labels == l) == 8 for l in set(labels))
    # no repeats when the class is large enough
    for l in set(labels):
        picked = [it for it, lab in zip(items, labels) if lab == l]
        assert len(set(picked)) == 8
        assert len({c for c, _ in picked}) == 1


def test_sample_batch_small_class_repeats():
    pools = _by_class(8, 20)
    pools["c3"] = pools["c3"][:3]
    items, labels = sample_batch(pools, np.random.default_rng(0))
    picked = [it for it in items if it[0] == 3]
    assert len(picked) == 8 and len(set(picked)) <= 3


def test_sample_batch_deterministic_and_errors():
    a = sample_batch(_by_class(10, 20), np.random.default_rng(5))
    b = sample_batch(_by_class(10, 20), np.random.default_rng(5))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    with pytest.raises(TrainError):
        sample_batch(_by_class(7, 20), np.random.default_rng(0))


# --- multi-similarity loss


def test_ms_loss_no_mined_pairs():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss, grad = ms_loss(emb, [0, 0, 1, 1], MSLossHParams(epsilon=0.1))
    assert loss == 0.0
    assert np.all(grad == 0)


def test_ms_loss_single_class_closed_form():
    emb = np.tile([0.3, -1.2, 0.5], (5, 1))
    loss, _ = ms_loss(emb, [7] * 5, HP)
    expected = math.log(1 + 4 * math.exp(-HP.alpha * (1 - HP.base))) / HP.alpha
    assert loss == pytest.approx(expected, abs=1e-12)


def test_ms_loss_four_embeddings_at_angles():
    angles = np.radians([0.0, 40.0, 30.0, 75.0])
    emb = np.stack([np.cos(angles), np.sin(angles)], axis=1) * [[1.0], [2.0], [0.5], [3.0]]
    labels = [0, 0, 1, 1]
    loss, grad = ms_loss(emb, labels, HP)
    assert loss > 0
    assert loss == pytest.approx(ms_loss_by_pairs(emb, labels, HP.alpha, HP.beta, HP.base, HP.epsilon), abs=1e-9)
    fd = central_difference(lambda e: ms_loss(e, labels, HP)[0], emb, 1e-6)
    np.testing.assert_allclose(grad, fd, atol=1e-6)


def test_ms_loss_random_batches_match_oracle():
    rng = np.random.default_rng(42)
    for _ in range(40):
        n = int(rng.integers(2, 12))
        dim = int(rng.integers(2, 6))
        labels = rng.integers(0, 3, size=n)
        labels[1] = labels[0]
        emb = rng.normal(size=(n, dim))
        loss, grad = ms_loss(emb, labels, HP)
        assert loss >= 0
        assert loss == pytest.approx(ms_loss_by_pairs(emb, labels, HP.alpha, HP.beta, HP.base, HP.epsilon), abs=1e-9)
        fd = central_difference(lambda e: ms_loss(e, labels, HP)[0], emb, 1e-6)
        np.testing.assert_allclose(grad, fd, atol=1e-6)


def test_ms_loss_scale_invariant():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(6, 4))
    labels = [0, 0, 1, 1, 2, 2]
    assert ms_loss(emb, labels)[0] == pytest.approx(ms_loss(3.7 * emb, labels)[0], abs=1e-12)


def test_ms_loss_requires_positive_pair():
    with pytest.raises(TrainError):
        ms_loss(np.eye(3), [0, 1, 2])
    with pytest.raises(TrainError):
        ms_loss(np.eye(3)[:1], [0])


# --- schedule


def test_lr_anchors():
    cfg = TrainConfig()
    spe = 17
    assert lr_at(0, cfg, spe) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(30 * spe, cfg, spe) == pytest.approx(1e-2, rel=1e-12)
    assert lr_at(100 * spe, cfg, spe) == pytest.approx(1e-7, rel=1e-12)


def test_lr_shape():
    cfg = TrainConfig()
    spe = 5
    lrs = np.array([lr_at(s, cfg, spe) for s in range(0, 100 * spe + 1)])
    peak = 30 * spe
    assert int(np.argmax(lrs)) == peak
    assert np.all(np.diff(lrs[:peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)
    # continuity: no jump larger than the biggest cosine step
    assert np.max(np.abs(np.diff(lrs))) < 1e-2 * math.pi / (2 * peak) * 1.01


# --- Adam


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    out, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(out["w"], p["w"]) and state.t == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([3.0, -0.01, 1e-3])
    out, _ = adam_step(p, {"w": g}, AdamState(), 0.01)
    np.testing.assert_allclose(out["w"] - p["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_blocks_independent_and_pure():
    p = {"a": np.ones(3), "b": np.ones(3)}
    g = np.array([0.1, -0.2, 0.3])
    state = AdamState()
    out, s1 = adam_step(p, {"a": g, "b": g.copy()}, state, 0.05)
    assert np.array_equal(out["a"], out["b"])
    assert state.t == 0 and np.all(p["a"] == 1)
    out2, s2 = adam_step(out, {"a": g, "b": g}, s1, 0.05)
    assert s2.t == 2 and np.array_equal(out2["a"], out2["b"])


def test_adam_rejects_non_finite():
    with pytest.raises(TrainError, match="'b'"):
        adam_step({"a": np.ones(2), "b": np.ones(2)}, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, AdamState(), 0.1)


# --- fold training


@pytest.fixture(scope="module")
def toy_windows():
    recs = synth_dataset(8, tasks=("RAN",), duration_s=10.0, seed=3, eyes="monocular_left")
    return [w for r in recs for w in preprocess_recording(r)]


TOY_NET = NetConfig(in_channels=2, n_conv_layers=2, growth=4, dilations=(1, 2), embed_dim=16)
TOY_TRAIN = TrainConfig(epochs=10, batch_size=16, classes_per_batch=4, samples_per_class=4, peak_epoch=3,
                        lr_peak=1e-2, seed=1, val_batches=1)


def test_train_fold_reduces_loss(toy_windows):
    fa = assign_folds({f"{i:03d}": 2 for i in range(1, 9)}, k=2)
    ckpt, history = train_fold(toy_windows, fa, 0, TOY_NET, TOY_TRAIN)
    assert len(history) == 10 and ckpt.fold_index == 0
    losses = [h.train_loss for h in history]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])
    assert all(np.isfinite(h.val_loss) for h in history)


def test_train_fold_deterministic(toy_windows, tmp_path):
    fa = assign_folds({f"{i:03d}": 2 for i in range(1, 9)}, k=2)
    cfg = TrainConfig(**{**TOY_TRAIN.__dict__, "epochs": 2, "peak_epoch": 1})
    a, ha = train_fold(toy_windows, fa, 1, TOY_NET, cfg)
    b, hb = train_fold(toy_windows, fa, 1, TOY_NET, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert ha == hb
    path = write_train_log(ha, tmp_path / "log.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "fold,epoch,step,lr,train_loss,val_loss" and len(lines) == 3


def test_train_fold_bad_index(toy_windows):
    fa = assign_folds({f"{i:03d}": 2 for i in range(1, 9)}, k=4)
    with pytest.raises(TrainError):
        train_fold(toy_windows, fa, 5, TOY_NET, TOY_TRAIN)


def test_train_fold_empty_training_set():
    fa = assign_folds({f"s{i}": 1 for i in range(4)}, k=2)
    w = VelocityWindow(np.zeros((2, 10)), 0.0, WindowSource("other", 1, 1, "TEX", 0))
    with pytest.raises(TrainError):
        train_fold([w], fa, 0, TOY_NET, TOY_TRAIN)


def test_train_config_validation():
    with pytest.raises(TrainError):
        TrainConfig(batch_size=60)
    with pytest.raises(TrainError):
        TrainConfig(peak_epoch=100)
