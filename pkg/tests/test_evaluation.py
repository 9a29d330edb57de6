import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellomaps.classifier import PredictionRecord
from cellomaps.errors import (
    EmptyInput,
    InsufficientPatients,
    LengthMismatch,
    MalformedInput,
    StratificationFailed,
)
from cellomaps.evaluation import (
    SplitPlan,
    compute_metrics,
    confusion_matrix,
    macro_f1_score,
    make_split,
    rank_auc,
    read_plan,
    summarize_repeats,
    write_plan,
)
from cellomaps.tiler import PATTERNS, ManifestRow


def pair_count_auc(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def manifest(patient_labels, tiles_each=3):
    rows = []
    for p, labels in patient_labels.items():
        for j, lab in enumerate(labels):
            for k in range(tiles_each):
                rows.append(ManifestRow(f"{p}-s", p, 10 * j, 10 * k, 10, PATTERNS[lab]))
    return rows


def random_manifest(rng, n_patients):
    pl = {f"p{i:02d}": sorted(set(rng.integers(0, 6, rng.integers(1, 4)).tolist())) for i in range(n_patients)}
    return manifest(pl, int(rng.integers(1, 4)))


# AUC

def test_auc_matches_pair_count():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), 1)  # coarse rounding forces ties
        pos = rng.random(n) < 0.5
        if pos.all() or not pos.any():
            continue
        assert rank_auc(scores, pos) == pytest.approx(pair_count_auc(scores, pos), abs=1e-12)


def test_auc_constant_scores_and_degenerate():
    assert rank_auc(np.ones(10), np.arange(10) < 4) == 0.5
    assert np.isnan(rank_auc([0.1, 0.2], [True, True]))


def test_perfect_predictions():
    truths = [PATTERNS[i % 6] for i in range(30)]
    probs = np.eye(6)[[i % 6 for i in range(30)]] * 0.9 + 0.1 / 6
    rep = compute_metrics([PredictionRecord("s", i, 0, p) for i, p in enumerate(probs)], truths)
    assert rep.accuracy == rep.macro_f1 == rep.macro_auc_roc == 1.0
    assert rep.support == [5] * 6 and rep.f1_skipped == [] == rep.auc_skipped


def test_metrics_invariants_and_permutation():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(6), 50)
    truths = rng.integers(0, 5, 50)  # Normal absent
    rep = compute_metrics(probs, truths.tolist())
    cm = np.array(rep.confusion_matrix)
    assert cm.sum(axis=1).tolist() == rep.support
    assert rep.accuracy == pytest.approx(np.trace(cm) / 50)
    assert rep.f1_skipped == ["Normal"] and rep.auc_skipped == ["Normal"]
    assert rep.macro_f1 == pytest.approx(np.mean(rep.per_class_f1[:5]))
    perm = rng.permutation(50)
    rep2 = compute_metrics(probs[perm], truths[perm].tolist())
    assert rep2.to_dict() == rep.to_dict()
    json.dumps(rep.to_dict())  # NaN-free
    assert "macro-F1" in rep.table()


def test_f1_zero_when_never_right():
    cm = confusion_matrix([0, 0, 1], [1, 1, 0], 2)
    assert cm.tolist() == [[0, 2], [1, 0]]
    assert macro_f1_score([0, 0, 1], [1, 1, 0], 2) == 0.0


def test_metrics_errors():
    with pytest.raises(LengthMismatch):
        compute_metrics(np.ones((2, 6)) / 6, [0])
    with pytest.raises(EmptyInput):
        compute_metrics([], [])


def test_summarize_repeats():
    reps = [compute_metrics(np.eye(6)[[0, 1]], [0, a]) for a in (1, 0)]
    s = summarize_repeats(reps)
    assert s["runs"] == 2 and s["accuracy"]["mean"] == 0.75
    assert s["accuracy"]["std"] == pytest.approx(np.std([1.0, 0.5], ddof=1))


# splitting

def test_two_patients_one_test():
    plan = make_split(manifest({"a": [0, 1], "b": [0, 1]}), "patient", 1, seed=0)
    test_p = {t.split("-")[0] for t in plan.test}
    train_p = {t.split("-")[0] for t in plan.train + plan.val}
    assert test_p == set(plan.test_patients) and not test_p & train_p


def test_split_determinism_and_roundtrip(tmp_path):
    rows = random_manifest(np.random.default_rng(3), 12)
    a = make_split(rows, "patient_level", 3, seed=5, max_retries=5000)
    b = make_split(rows, "patient_level", 3, seed=5, max_retries=5000)
    assert a == b
    write_plan(a, tmp_path / "plan.json")
    assert read_plan(tmp_path / "plan.json") == a
    write_plan(b, tmp_path / "b.json")
    assert (tmp_path / "plan.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 3))
def test_patient_split_properties(seed, n_patients, k):
    rng = np.random.default_rng(seed)
    rows = random_manifest(rng, n_patients)
    k = min(k, n_patients - 1)
    try:
        plan = make_split(rows, "patient", k, 0.2, seed)
    except StratificationFailed:
        return
    by_id = {r.tile_id: r.patient_id for r in rows}
    test_p = {by_id[t] for t in plan.test}
    rest_p = {by_id[t] for t in plan.train + plan.val}
    assert not test_p & rest_p
    assert sorted(plan.train + plan.val + plan.test) == sorted(by_id)
    assert {r.label for r in rows if r.tile_id in set(plan.test)} == {r.label for r in rows}


def test_stratification_exhaustive():
    """A class owned by one patient forces that patient into test, or fails."""
    rng = np.random.default_rng(11)
    for trial in range(40):
        n = int(rng.integers(3, 6))
        pl = {f"p{i}": [0] for i in range(n)}
        owner = f"p{int(rng.integers(n))}"
        pl[owner] = [0, 5]
        k = int(rng.integers(1, n))
        rows = manifest(pl)
        plan = make_split(rows, "patient", k, seed=trial)
        assert owner in plan.test_patients
    # two single-owner classes with k = 1 cannot both be covered
    rows = manifest({"a": [0, 1], "b": [2], "c": [0]})
    with pytest.raises(StratificationFailed):
        make_split(rows, "patient", 1)
    # exhaustive: every subset checked, so failure is exact
    valid = [c for c in itertools.combinations("abc", 2) if {"a", "b"} <= set(c)]
    assert make_split(rows, "patient", 2).test_patients == list(valid[0])


def test_tile_mode_partitions():
    rows = random_manifest(np.random.default_rng(4), 8)
    plan = make_split(rows, "tile", 2, 0.25, seed=1)
    ids = [r.tile_id for r in rows]
    assert sorted(plan.train + plan.val + plan.test) == sorted(ids)
    assert len(plan.test) == round(len(ids) * 2 / 8)
    assert plan.test_patients == []


def test_split_errors():
    rows = manifest({"a": [0], "b": [1]})
    with pytest.raises(InsufficientPatients):
        make_split(rows, "patient", 2)
    with pytest.raises(MalformedInput):
        make_split(rows, "slide", 1)
    with pytest.raises(EmptyInput):
        make_split([], "patient", 1)
    with pytest.raises(MalformedInput):
        SplitPlan.from_dict({"mode": "x", "seed": 0, "train": [], "val": [], "test": []})
