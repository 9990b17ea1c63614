import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaze_emb.data import synth_dataset
from gaze_emb.evaluate import (
    EvalError,
    EvalProtocol,
    ScoreSets,
    build_score_sets,
    centroid,
    cosine_similarity,
    d_prime,
    eer,
    ensemble_embed,
    evaluate,
    far_resolution_limited,
    frr_at_far,
    read_roc,
    read_scores,
    report_json,
    roc,
    write_report,
)
from gaze_emb.net import ModelCheckpoint, NetConfig, init_model
from gaze_emb.prep import preprocess_recording
from oracles import sweep_eer, sweep_frr_at_far, sweep_rates

SMALL = NetConfig(in_channels=2, n_conv_layers=2, growth=4, dilations=(1, 2), embed_dim=8)


def checkpoints(config=SMALL, n=4, seed=0):
    return [ModelCheckpoint(config, seed + f, init_model(config, seed + f), fold_index=f) for f in range(n)]


# --- embeddings and similarity


def test_ensemble_concatenates_and_normalizes():
    cks = checkpoints()
    x = np.random.default_rng(0).normal(size=(2, 300)) * 50
    emb = ensemble_embed(cks, x)
    assert emb.shape == (32,)
    assert abs(np.linalg.norm(emb) - 1) < 1e-9
    single = ensemble_embed(cks[:1], x)
    assert single.shape == (8,) and abs(np.linalg.norm(single) - 1) < 1e-9


def test_ensemble_ordered_by_fold_index():
    cks = checkpoints()
    x = np.random.default_rng(1).normal(size=(2, 300)) * 50
    assert np.array_equal(ensemble_embed(cks, x), ensemble_embed(cks[::-1], x))
    assert np.array_equal(ensemble_embed(cks, x), ensemble_embed([cks[2], cks[0], cks[3], cks[1]], x))


def test_ensemble_duplicate_fold_index():
    cks = checkpoints()
    cks[1] = ModelCheckpoint(SMALL, 9, init_model(SMALL, 9), fold_index=0)
    with pytest.raises(EvalError):
        ensemble_embed(cks, np.ones((2, 50)))


def test_centroid_examples():
    v = np.array([0.6, 0.8, 0.0])
    assert np.allclose(centroid([v] * 9), v, atol=1e-15)
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    assert np.allclose(centroid([e1, e2]), (e1 + e2) / math.sqrt(2), atol=1e-15)
    with pytest.raises(EvalError):
        centroid([v, -v])


def test_cosine_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(np.eye(2)[0], np.eye(2)[1]) == 0.0
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(EvalError):
        cosine_similarity(v, np.zeros(3))
    with pytest.raises(EvalError):
        cosine_similarity(v, np.ones(2))


# --- score sets


def test_score_set_counts():
    rng = np.random.default_rng(0)
    enroll = {f"s{i}": rng.normal(size=4) for i in range(10)}
    probe = {f"s{i}": rng.normal(size=4) for i in range(10)}
    sc = build_score_sets(enroll, probe)
    assert len(sc.genuine) == 10 and len(sc.imposter) == 90
    assert all(e == p for e, p in sc.genuine_pairs)
    assert all(e != p for e, p in sc.imposter_pairs)
    assert not set(sc.genuine_pairs) & set(sc.imposter_pairs)


def test_score_set_drops_unshared():
    rng = np.random.default_rng(0)
    enroll = {f"s{i}": rng.normal(size=4) for i in range(5)}
    probe = {f"s{i}": rng.normal(size=4) for i in range(1, 5)}
    sc = build_score_sets(enroll, probe)
    assert len(sc.genuine) == 4 and len(sc.imposter) == 12
    assert all("s0" not in pair for pair in sc.imposter_pairs)
    with pytest.raises(EvalError):
        build_score_sets({"a": np.ones(2)}, {"a": np.ones(2)})


def test_identical_embeddings_all_ones():
    v = np.array([0.3, 0.4])
    sc = build_score_sets({s: v for s in "abc"}, {s: v for s in "abc"})
    assert np.allclose(sc.genuine, 1) and np.allclose(sc.imposter, 1)


# --- ROC and rates


def test_roc_separated_point():
    curve = roc(ScoreSets([0.9], [0.1]))
    i = int(np.searchsorted(curve.thresholds, 0.5))
    assert curve.far[i] == 0 and curve.frr[i] == 0
    assert curve.thresholds[0] == -np.inf and curve.thresholds[-1] == np.inf


def test_roc_matches_sweep_oracle():
    rng = np.random.default_rng(3)
    gen = np.round(rng.normal(0.6, 0.2, 100), 2)
    imp = np.round(rng.normal(0.3, 0.2, 100), 2)
    curve = roc(ScoreSets(gen, imp))
    t, far, frr = sweep_rates(gen, imp)
    assert np.array_equal(curve.thresholds, t)
    assert np.array_equal(curve.far, far) and np.array_equal(curve.frr, frr)


def test_eer_examples():
    assert eer(roc(ScoreSets([0.9, 0.8], [0.1, 0.2]))) == 0.0
    same = [0.1, 0.4, 0.7]
    assert eer(roc(ScoreSets(same, same))) == pytest.approx(0.5)
    gen, imp = [0.9, 0.6, 0.4], [0.5, 0.3, 0.1]
    assert eer(roc(ScoreSets(gen, imp))) == sweep_eer(gen, imp)


def test_frr_at_far_examples():
    rng = np.random.default_rng(0)
    imp = rng.uniform(-1, 0.5, 100_000)
    assert frr_at_far(roc(ScoreSets(rng.uniform(0.6, 1, 50), imp))) == 0.0
    imp = rng.uniform(0, 0.5, 100)
    gen = np.array([0.2, 0.49, 0.51, 0.9])
    curve = roc(ScoreSets(gen, imp))
    expected = np.mean(gen <= imp.max())
    assert frr_at_far(curve, 1e-4) == expected
    assert far_resolution_limited(100, 1e-4) and not far_resolution_limited(10_000, 1e-4)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(-20, 20), min_size=1, max_size=60),
    st.lists(st.integers(-20, 20), min_size=1, max_size=60),
)
def test_rates_match_oracle_with_ties(g, i):
    gen, imp = np.array(g) / 20, np.array(i) / 20
    curve = roc(ScoreSets(gen, imp))
    assert np.all(np.diff(curve.far) <= 0) and np.all(np.diff(curve.frr) >= 0)
    assert eer(curve) == sweep_eer(gen, imp)
    for target in (1e-4, 0.05, 0.3):
        assert frr_at_far(curve, target) == sweep_frr_at_far(gen, imp, target)


def test_eer_rank_invariant():
    rng = np.random.default_rng(5)
    gen, imp = rng.normal(0.5, 0.2, 80), rng.normal(0.2, 0.2, 120)
    base = eer(roc(ScoreSets(gen, imp)))
    for f in (np.tanh, lambda s: s ** 3, lambda s: 7 * s + 2):
        assert eer(roc(ScoreSets(f(gen), f(imp)))) == pytest.approx(base, abs=1e-15)


def test_d_prime_examples():
    assert d_prime(ScoreSets([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])) == 0.0
    # two points at +-1/sqrt(2) have sample variance exactly 1
    spread = np.array([-1.0, 1.0]) / math.sqrt(2)
    assert d_prime(ScoreSets(3 + spread, 1 + spread)) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(EvalError):
        d_prime(ScoreSets([1.0, 1.0], [0.0, 0.0]))
    with pytest.raises(EvalError):
        d_prime(ScoreSets([1.0], [0.0, 0.5]))


def test_d_prime_affine_invariant():
    rng = np.random.default_rng(2)
    gen, imp = rng.normal(0.5, 0.2, 50), rng.normal(0.1, 0.3, 70)
    base = d_prime(ScoreSets(gen, imp))
    assert d_prime(ScoreSets(3 * gen - 1, 3 * imp - 1)) == pytest.approx(base, rel=1e-12)


def test_empty_sets():
    with pytest.raises(EvalError):
        roc(ScoreSets([], [0.1]))


# --- full evaluation on untrained models


@pytest.fixture(scope="module")
def eval_windows():
    recs = synth_dataset(4, tasks=("TEX",), duration_s=50.0, seed=2, eyes="monocular_left", n_long_term=2)
    return [w for r in recs for w in preprocess_recording(r)]


def test_evaluate_report_shape(eval_windows, tmp_path):
    cks = checkpoints()
    rep = evaluate(cks, eval_windows, EvalProtocol.short_term("TEX", "monocular_left"))
    assert rep.subjects == ["001", "002", "003", "004"]
    assert len(rep.scores.genuine) == 4 and len(rep.scores.imposter) == 12
    assert 0 <= rep.eer <= 1 and 0 <= rep.frr_at_far <= 1
    assert len(rep.per_model) == 4 and rep.flags["far_resolution_limited"]
    assert rep.frr_std == pytest.approx(np.std([m["frr_at_far"] for m in rep.per_model]))
    paths = write_report(rep, tmp_path)
    data = json.loads(paths["report"].read_text())
    assert data["counts"] == {"subjects": 4, "genuine": 4, "imposter": 12}
    assert np.array_equal(read_scores(paths["genuine"]), rep.scores.genuine)
    assert np.array_equal(read_scores(paths["imposter"]), rep.scores.imposter)
    back = read_roc(paths["roc"])
    assert np.array_equal(back.far, rep.roc.far) and np.array_equal(back.thresholds, rep.roc.thresholds)
    again = evaluate(cks, eval_windows, EvalProtocol.short_term("TEX", "monocular_left"))
    assert report_json(again) == report_json(rep)


def test_evaluate_long_term_subset(eval_windows):
    rep = evaluate(checkpoints(), eval_windows, EvalProtocol.long_term("TEX", 3, "monocular_left"))
    assert rep.subjects == ["003", "004"]
    assert rep.dropped_subjects == ["001", "002"]


def test_evaluate_self_match(eval_windows):
    proto = EvalProtocol("short", "TEX", "monocular_left", (1, 1), (1, 1))
    with pytest.raises(EvalError):
        evaluate(checkpoints(), eval_windows, proto)
    rep = evaluate(checkpoints(), eval_windows, proto, allow_self_match=True)
    assert np.all(rep.scores.genuine == 1.0)


def test_evaluate_missing_recordings(eval_windows):
    proto = EvalProtocol("long", "TEX", "monocular_left", (1, 1), (5, 1))
    with pytest.raises(EvalError, match="probe round 5 session 1"):
        evaluate(checkpoints(), eval_windows, proto)


def test_evaluate_channel_mismatch(eval_windows):
    with pytest.raises(EvalError):
        evaluate(checkpoints(), eval_windows, EvalProtocol.short_term("TEX", "binocular"))
