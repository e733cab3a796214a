"""Accuracy metrics, similarity tables, and overlap analysis."""

import numpy as np
import pytest

from fedtickets.data import ImageDataset
from fedtickets.errors import EmptyAsrSetError, EmptyDatasetError
from fedtickets.metrics import (
    SimilarityEntry,
    asr,
    cda,
    evaluate,
    overlap_curve,
    per_class_accuracy,
    similarity_table,
    spearman_trend,
)
from fedtickets.tickets import extract_mask
from helpers import make_model, mask_of, model_with_gammas


def _zero_model(classes=3):
    # all-zero weights predict the lowest class index everywhere
    model = make_model(widths=(4,), classes=classes, seed=0)
    for store in (model.weights, model.biases, model.gammas):
        for arr in store:
            if arr is not None:
                arr.fill(0.0)
    return model


def _dataset(labels, classes=3):
    labels = np.asarray(labels)
    images = np.random.default_rng(0).random((len(labels), 8, 8, 1))
    return ImageDataset(images=images, labels=labels, split="test", classes=classes)


def test_cda_exact_fraction():
    ds = _dataset([0] * 7 + [1] * 3)
    assert cda(_zero_model(), None, ds) == 70.0


def test_cda_balanced_dataset_uniform_predictor():
    ds = _dataset([0, 1, 2, 3] * 5, classes=4)
    assert cda(_zero_model(classes=4), None, ds) == 25.0


def test_cda_order_invariant():
    labels = [0, 1, 2, 0, 0, 1]
    ds = _dataset(labels)
    perm = [5, 3, 0, 2, 4, 1]
    shuffled = ds.subset(perm)
    assert cda(_zero_model(), None, ds) == cda(_zero_model(), None, shuffled)


def test_cda_empty_dataset():
    empty = ImageDataset(images=np.zeros((0, 8, 8, 1)), labels=np.zeros(0, dtype=int))
    with pytest.raises(EmptyDatasetError):
        cda(_zero_model(), None, empty)


def test_asr_counts_hits_on_target():
    hits = _dataset([0] * 10)  # relabeled trigger set, target 0
    assert asr(_zero_model(), None, hits) == 100.0
    misses = _dataset([1] * 10)  # target 1, but the model predicts 0
    assert asr(_zero_model(), None, misses) == 0.0


def test_asr_empty_set():
    empty = ImageDataset(
        images=np.zeros((0, 8, 8, 1)), labels=np.zeros(0, dtype=int), split="asr"
    )
    with pytest.raises(EmptyAsrSetError):
        asr(_zero_model(), None, empty)


def test_per_class_accuracy_zero_model():
    ds = _dataset([0, 0, 1, 2])
    acc = per_class_accuracy(_zero_model(), None, ds)
    assert acc == {0: 100.0, 1: 0.0, 2: 0.0}


def test_per_class_skips_absent_classes():
    ds = _dataset([0, 0, 2], classes=3)
    acc = per_class_accuracy(_zero_model(), None, ds)
    assert 1 not in acc
    assert set(acc) == {0, 2}


def test_evaluate_report_fields():
    clean = _dataset([0] * 4 + [1] * 4 + [2] * 2)
    trigger_set = _dataset([0] * 6)
    rep = evaluate(_zero_model(), None, clean, trigger_set, rate=0.5, scenario="demo")
    assert rep.cda == 40.0
    assert rep.asr == 100.0
    assert rep.n_clean == 10
    assert rep.n_asr == 6
    assert rep.rate == 0.5
    assert rep.scenario == "demo"
    no_asr = evaluate(_zero_model(), None, clean)
    assert no_asr.asr is None
    assert no_asr.n_asr == 0


def test_similarity_table_grouping():
    entries = [
        SimilarityEntry("white-square", 0.5, 90.0, baseline=False),
        SimilarityEntry("white-square", 0.5, 94.0, baseline=False),
        SimilarityEntry("white-square", 0.5, 100.0, baseline=True),
        SimilarityEntry("random-square", 0.3, 80.0, baseline=False),
    ]
    rows = similarity_table(entries)
    assert len(rows) == 3
    ws = next(r for r in rows if r["setting"] == "white-square" and not r["baseline"])
    assert ws["mean_similarity"] == 92.0
    assert ws["avg_decrease"] == 8.0
    assert ws["pairs"] == 2
    base = next(r for r in rows if r["baseline"])
    assert base["mean_similarity"] == 100.0
    assert base["avg_decrease"] == 0.0


def test_overlap_curve_at_zero_rate_is_retention_fraction():
    benign = model_with_gammas(list(np.arange(1.0, 11.0)))
    backdoor = mask_of([True] * 7 + [False] * 3)
    curve = overlap_curve(benign, backdoor, [0.0])
    assert curve == [(0.0, 70.0)]


def test_overlap_curve_same_model_nests():
    model = model_with_gammas(list(np.arange(1.0, 11.0)))
    backdoor = extract_mask(model, 0.3)
    curve = overlap_curve(model, backdoor, [0.3, 0.5, 0.7])
    assert [v for _, v in curve] == [100.0, 100.0, 100.0]
    shallow = overlap_curve(model, backdoor, [0.0])[0][1]
    assert shallow == 70.0  # 7 of 10 units retained by the backdoor mask


def test_spearman_trend_signs():
    assert spearman_trend([(0.0, 10.0), (0.3, 20.0), (0.5, 30.0)]) == 1.0
    assert spearman_trend([(0.0, 30.0), (0.3, 20.0), (0.5, 10.0)]) == -1.0
