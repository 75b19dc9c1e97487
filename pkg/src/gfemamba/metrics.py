"""Binary classification metrics, ROC analysis and cross-validation splits."""
from dataclasses import dataclass, field, asdict
import math

import numpy as np

from .errors import ValidationError

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "RocCurve",
    "confusion_counts",
    "compute_metrics",
    "roc_auc",
    "mean_roc",
    "kfold_split",
    "confusion_matrix_normalized",
    "aggregate_reports",
]

FPR_GRID = np.linspace(0.0, 1.0, 101)
BAND_SIGMAS = 1.5


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    mcc: float
    undefined: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self):
        return [[float(a), float(b)] for a, b in zip(self.fpr, self.tpr)]


def confusion_counts(predictions, labels):
    p = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise ValidationError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValidationError("confusion_counts on empty input")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def compute_metrics(c):
    """Precision, recall, F1, accuracy and MCC; zero denominators give 0 and a flag."""
    if c.total <= 0:
        raise ValidationError("compute_metrics needs at least one sample")
    precision, u_p = _ratio(c.tp, c.tp + c.fp)
    recall, u_r = _ratio(c.tp, c.tp + c.fn)
    f1, u_f = _ratio(2 * precision * recall, precision + recall)
    accuracy, u_a = _ratio(c.tp + c.tn, c.total)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc, u_m = _ratio(c.tp * c.tn - c.fp * c.fn, math.sqrt(den))
    flags = {"precision": u_p, "recall": u_r, "f1": u_f, "accuracy": u_a, "mcc": u_m}
    return MetricsReport(precision, recall, f1, accuracy, mcc, {k: v for k, v in flags.items() if v})


def roc_auc(scores, labels):
    """ROC over every distinct score threshold; tied scores move together.

    AUC is the trapezoidal area, which equals the probability that a
    random positive outscores a random negative with ties counted 1/2.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ValidationError(f"length mismatch: {s.size} scores vs {y.size} labels")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.diff(s) != 0, True]  # final index of each tie block
    tps = np.r_[0, np.cumsum(y)[last]]
    fps = np.r_[0, np.cumsum(1 - y)[last]]
    # trapezoids in integer counts: twice the concordant-pair count plus ties,
    # so one rounding at the final division
    twice = int(np.sum(np.diff(fps).astype(object) * (tps[1:] + tps[:-1]).astype(object)))
    auc = twice / (2 * n_pos * n_neg)
    return RocCurve(fps / n_neg, tps / n_pos, auc)


def mean_roc(curves, grid=FPR_GRID, band=BAND_SIGMAS):
    """Interpolate fold curves on a fixed FPR grid; mean and ±band·std envelope."""
    tprs = []
    for c in curves:
        t = np.interp(grid, c.fpr, c.tpr)
        t[0] = 0.0
        tprs.append(t)
    tprs = np.array(tprs)
    mean = tprs.mean(axis=0)
    mean[-1] = 1.0
    std = tprs.std(axis=0)
    aucs = np.array([c.auc for c in curves])
    return {
        "fpr": grid,
        "mean_tpr": mean,
        "lower": np.clip(mean - band * std, 0.0, 1.0),
        "upper": np.clip(mean + band * std, 0.0, 1.0),
        "mean_auc": float(aucs.mean()),
        "std_auc": float(aucs.std()),
    }


def kfold_split(n, k=7, groups=None, labels=None, seed=0):
    """Deterministic k-fold partition of ``range(n)``.

    With ``groups`` every group stays inside one test fold. With
    ``labels`` the folds are filled class by class so each keeps roughly
    the overall class ratio.

    Returns
    -------
    list of (train_idx, test_idx) integer arrays.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValidationError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    if groups is None:
        groups = np.arange(n)
    groups = np.asarray(groups)
    if groups.shape[0] != n:
        raise ValidationError("groups length differs from n")
    uniq, inverse = np.unique(groups, return_inverse=True)
    if uniq.size < k:
        raise ValidationError(f"cannot split {uniq.size} groups into {k} folds")
    members = [np.flatnonzero(inverse == g) for g in range(uniq.size)]
    perm = rng.permutation(uniq.size)
    if labels is None:
        strata = np.zeros(uniq.size, dtype=int)
    else:
        y = np.asarray(labels).astype(int)
        strata = np.array([int(round(y[m].mean())) for m in members])
    fold_of = np.empty(uniq.size, dtype=int)
    sizes = np.zeros(k, dtype=int)
    per_class = np.zeros((2, k), dtype=int)
    # larger groups first, then a seeded shuffle; each goes to the fold with
    # the fewest samples of its class, then the fewest samples overall
    order = sorted(perm, key=lambda g: (strata[g], -len(members[g])))
    for g in order:
        st = strata[g]
        fold = min(range(k), key=lambda f: (per_class[st, f], sizes[f], f))
        fold_of[g] = fold
        sizes[fold] += len(members[g])
        per_class[st, fold] += len(members[g])
    splits = []
    all_idx = np.arange(n)
    for f in range(k):
        test = np.sort(np.concatenate([members[g] for g in np.flatnonzero(fold_of == f)]))
        splits.append((np.setdiff1d(all_idx, test), test))
    return splits


def confusion_matrix_normalized(c):
    """Row-stochastic [[TN, FP], [FN, TP]]; an empty true-class row stays zero and is flagged."""
    m = np.array([[c.tn, c.fp], [c.fn, c.tp]], dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    empty = rows[:, 0] == 0
    out = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    return out, {"empty_rows": [int(i) for i in np.flatnonzero(empty)]}


def aggregate_reports(reports):
    """Mean and population std of each metric across folds."""
    keys = ("precision", "recall", "f1", "accuracy", "mcc")
    out = {}
    for key in keys:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
