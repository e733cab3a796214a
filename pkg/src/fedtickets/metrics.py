"""Accuracy metrics and derived analyses.

CDA (clean data accuracy) is plain test accuracy. ASR (attack success rate)
is accuracy on a triggered test set relabeled to the attack target, which by
construction excludes samples whose true label already was the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import nn
from .data import ImageDataset
from .errors import EmptyAsrSetError, EmptyDatasetError
from .tickets import PruneMask, extract_mask, neuron_overlap


@dataclass
class EvalReport:
    cda: float
    asr: float | None
    per_class: dict
    n_clean: int
    n_asr: int
    rate: float | None = None
    scenario: str = ""


def cda(model: nn.ModelParams, mask, dataset: ImageDataset) -> float:
    """Percent of clean test samples classified correctly."""
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy needs at least one sample")
    pred = nn.predict(model, mask, dataset.images)
    return 100.0 * float(np.mean(pred == dataset.labels))


def asr(model: nn.ModelParams, mask, asr_set: ImageDataset) -> float:
    """Percent of triggered non-target samples classified as the target."""
    if len(asr_set) == 0:
        raise EmptyAsrSetError("attack-success set is empty")
    pred = nn.predict(model, mask, asr_set.images)
    return 100.0 * float(np.mean(pred == asr_set.labels))


def per_class_accuracy(model: nn.ModelParams, mask, dataset: ImageDataset) -> dict:
    pred = nn.predict(model, mask, dataset.images)
    out = {}
    for c in range(dataset.classes):
        sel = dataset.labels == c
        if sel.any():
            out[c] = 100.0 * float(np.mean(pred[sel] == c))
    return out


def evaluate(
    model: nn.ModelParams,
    mask,
    clean: ImageDataset,
    asr_set: ImageDataset | None = None,
    rate: float | None = None,
    scenario: str = "",
) -> EvalReport:
    return EvalReport(
        cda=cda(model, mask, clean),
        asr=None if asr_set is None else asr(model, mask, asr_set),
        per_class=per_class_accuracy(model, mask, clean),
        n_clean=len(clean),
        n_asr=0 if asr_set is None else len(asr_set),
        rate=rate,
        scenario=scenario,
    )


@dataclass(frozen=True)
class SimilarityEntry:
    """One pairwise mask comparison tagged with its experimental setting."""

    setting: str
    rate: float
    similarity: float
    baseline: bool  # True when both masks come from benign runs


def similarity_table(entries) -> list:
    """Group pairwise similarities by (setting, rate, baseline) and report
    the mean similarity and mean decrease from perfect agreement."""
    groups: dict = {}
    for e in entries:
        groups.setdefault((e.setting, e.rate, e.baseline), []).append(e.similarity)
    rows = []
    for (setting, rate, baseline), sims in sorted(groups.items()):
        mean_sim = float(np.mean(sims))
        rows.append(
            {
                "setting": setting,
                "rate": rate,
                "baseline": baseline,
                "mean_similarity": mean_sim,
                "avg_decrease": 100.0 - mean_sim,
                "pairs": len(sims),
            }
        )
    return rows


def overlap_curve(benign_model: nn.ModelParams, backdoor_mask: PruneMask, rates) -> list:
    """Key-neuron overlap versus benign prune rate.

    For each rate r', extract a benign mask at r' from the benign model and
    report which fraction of its retained units the backdoor mask also
    retains. At r' = 0 the benign mask keeps everything, so the overlap is
    exactly the backdoor mask's retention fraction.
    """
    out = []
    for r in rates:
        bm = extract_mask(benign_model, r)
        out.append((float(r), neuron_overlap(bm, backdoor_mask)))
    return out


def spearman_trend(pairs) -> float:
    """Spearman rank correlation of overlap against prune rate."""
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    rho = stats.spearmanr(xs, ys).statistic
    return float(rho)
