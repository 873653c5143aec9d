"""Segment / artery / patient decision hierarchy and its metrics.

Per-view class -> majority vote per branch (segment) -> max over an
artery's branches -> max over a patient's arteries.  Ground truth above the
segment level is built with the same max rule from the branch truths.
"""
import csv
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from cass.reports import StenosisClass

NUM_CLASSES = 3
LEVELS = ("segment", "artery", "patient")


class ConsistencyError(ValueError):
    """Predictions and labels describe different branch sets."""


def predicted_class(probs):
    """Argmax with exact ties going to the more severe class."""
    probs = np.asarray(probs)
    return StenosisClass(len(probs) - 1 - int(np.argmax(probs[::-1])))


@dataclass(frozen=True)
class ViewPrediction:
    branch: tuple
    view_index: int
    probs: tuple

    def __post_init__(self):
        if len(self.probs) != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} probabilities, got {len(self.probs)}")
        if abs(sum(self.probs) - 1) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")

    @property
    def predicted(self):
        return predicted_class(self.probs)


def _as_class(p):
    return p.predicted if isinstance(p, ViewPrediction) else StenosisClass(int(p))


def majority_vote(preds):
    """Most frequent class among the views; ties go to the more severe class."""
    if not preds:
        raise ValueError("majority_vote needs at least one prediction")
    counts = Counter(_as_class(p) for p in preds)
    return max(counts, key=lambda c: (counts[c], c))


def max_aggregate(classes):
    if not classes:
        raise ValueError("max_aggregate needs at least one class")
    return StenosisClass(max(int(c) for c in classes))


# -- metrics ---------------------------------------------------------------------

def confusion_counts(pairs):
    m = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for t, p in pairs:
        m[int(t), int(p)] += 1
    return m


def confusion(pairs):
    """Row-normalised confusion matrix (rows = truth); absent classes give zero rows."""
    m = confusion_counts(pairs).astype(float)
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)


def per_class_f1(pairs):
    m = confusion_counts(pairs)
    tp = np.diag(m).astype(float)
    pred_pos, true_pos = m.sum(axis=0), m.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(NUM_CLASSES), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(NUM_CLASSES), where=true_pos > 0)
    s = precision + recall
    return np.divide(2 * precision * recall, s, out=np.zeros(NUM_CLASSES), where=s > 0)


def weighted_f1(pairs):
    """Per-class F1 averaged with weights ``support_i / total``."""
    if not pairs:
        raise ValueError("weighted_f1 of an empty pair list")
    support = confusion_counts(pairs).sum(axis=1)
    return float(per_class_f1(pairs) @ (support / support.sum()))


@dataclass
class MetricsReport:
    level: str
    accuracy: float
    per_class_f1: list
    weighted_f1: float
    confusion: list
    support: list
    counts: list

    @classmethod
    def from_pairs(cls, level, pairs):
        if not pairs:
            raise ValueError(f"no ({level}) pairs to score")
        counts = confusion_counts(pairs)
        return cls(
            level=level,
            accuracy=float(np.trace(counts) / counts.sum()),
            per_class_f1=per_class_f1(pairs).tolist(),
            weighted_f1=weighted_f1(pairs),
            confusion=confusion(pairs).tolist(),
            support=counts.sum(axis=1).tolist(),
            counts=counts.tolist(),
        )

    def to_json(self):
        return dict(self.__dict__)


def hierarchy_of(branches):
    """``{patient: {artery: [branch_key, ...]}}`` from ``(patient, artery, section)`` keys."""
    tree = defaultdict(lambda: defaultdict(list))
    for key in sorted(branches):
        tree[key[0]][key[1]].append(key)
    return {p: dict(a) for p, a in tree.items()}


def level_pairs(truths, verdicts, hierarchy):
    """``{level: [(truth, predicted), ...]}`` for branch verdicts under ``hierarchy``."""
    pairs = {level: [] for level in LEVELS}
    for patient in sorted(hierarchy):
        art_truth, art_pred = [], []
        for artery in sorted(hierarchy[patient]):
            keys = hierarchy[patient][artery]
            bt = [truths[k] for k in keys]
            bp = [verdicts[k] for k in keys]
            pairs["segment"].extend(zip(bt, bp))
            art_truth.append(max_aggregate(bt))
            art_pred.append(max_aggregate(bp))
        pairs["artery"].extend(zip(art_truth, art_pred))
        pairs["patient"].append((max_aggregate(art_truth), max_aggregate(art_pred)))
    return pairs


def evaluate(truths, views, hierarchy=None):
    """Metrics per level.

    ``truths`` maps branch key -> class, ``views`` maps branch key -> list of
    ``ViewPrediction`` (or bare classes).  Branch keys are
    ``(patient, artery, section)`` tuples; ``hierarchy`` defaults to the one
    implied by the keys of ``views``.
    """
    if hierarchy is None:
        hierarchy = hierarchy_of(views)
    keys = {k for arts in hierarchy.values() for ks in arts.values() for k in ks}
    no_truth = sorted(set(views) - set(truths))
    if no_truth:
        raise ConsistencyError(f"branches with predictions but no truth: {no_truth[:5]}")
    no_preds = sorted(keys - set(views))
    if no_preds:
        raise ConsistencyError(f"branches without predictions: {no_preds[:5]}")
    verdicts = {k: majority_vote(views[k]) for k in keys}
    pairs = level_pairs({k: StenosisClass(int(truths[k])) for k in keys}, verdicts, hierarchy)
    return {level: MetricsReport.from_pairs(level, p) for level, p in pairs.items()}


# -- JSON / CSV surfaces ----------------------------------------------------------

def views_from_json(records):
    """Prediction records ``{patient, artery, branch, view, probs}`` -> branch views."""
    views = defaultdict(list)
    for r in records:
        key = (str(r["patient"]), str(r["artery"]), str(r["branch"]))
        views[key].append(ViewPrediction(key, int(r["view"]), tuple(float(p) for p in r["probs"])))
    return dict(views)


def truths_from_json(doc):
    """Branch truths from a dataset manifest or a flat ``[{patient, artery, branch, class}]`` list."""
    truths = {}
    if isinstance(doc, dict) and "patients" in doc:
        for patient in doc["patients"]:
            for b in patient["branches"]:
                truths[(patient["patient_id"], b["artery"], b["section"])] = StenosisClass(b["class"])
    elif isinstance(doc, list):
        for r in doc:
            truths[(str(r["patient"]), str(r["artery"]), str(r["branch"]))] = StenosisClass(r["class"])
    else:
        raise ValueError("labels must be a manifest with 'patients' or a list of branch records")
    return truths


def write_confusion_csv(report, path):
    names = [c.name for c in StenosisClass]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([report.level] + names)
        for name, row in zip(names, report.confusion):
            w.writerow([name] + [f"{v:.6f}" for v in row])
