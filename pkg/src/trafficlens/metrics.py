"""Multi-class reliability statistics computed from a prediction set.

Covers agreement beyond chance (Cohen's kappa), the generalized Matthews
correlation, the macro Youden index, macro precision/recall/F1, balanced
accuracy, Hamming loss, one-vs-rest ROC/AUC, log loss, and a
normal-approximation standard error / 95% confidence interval for a
proportion-type metric.

Conventions for degenerate inputs are explicit and warned about:
per-class precision/recall with a zero denominator count as 0; Youden
terms and AUCs that are undefined for a class are excluded from the
macro average; kappa/MCC raise :class:`UndefinedMetricError` when their
denominators vanish (reported as null downstream).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, UndefinedMetricError, TrafficLensWarning

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass
class PredictionSet:
    """Per-sample class-probability rows paired with true labels."""

    probs: np.ndarray  # (N, K)
    true_labels: np.ndarray  # (N,)
    class_names: list[str]

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.probs.ndim != 2:
            raise DataError("probs must be (N, K)")
        n, k = self.probs.shape
        if n < 1:
            raise DataError("prediction set needs at least one sample")
        if k != len(self.class_names):
            raise DataError(f"{k} probability columns but {len(self.class_names)} class names")
        if len(self.true_labels) != n:
            raise DataError("true_labels length does not match probs")
        if self.true_labels.min() < 0 or self.true_labels.max() >= k:
            raise DataError("true label outside [0, K)")
        row_sums = self.probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-6):
            worst = float(np.abs(row_sums - 1.0).max())
            raise DataError(f"probability rows must sum to 1 (worst deviation {worst:.3g})")

    @property
    def n_samples(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def predicted_labels(self) -> np.ndarray:
        """Argmax per row; ties resolve to the lowest class index."""
        return self.probs.argmax(axis=1)


@dataclass
class ConfusionMatrix:
    """K x K counts with rows = true class, columns = predicted class."""

    counts: np.ndarray
    class_names: list[str]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise DataError(f"confusion counts must be ({k}, {k}), got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def true_totals(self) -> np.ndarray:
        """t_k: row sums, total true instances per class."""
        return self.counts.sum(axis=1)

    @property
    def predicted_totals(self) -> np.ndarray:
        """p_k: column sums, total predicted instances per class."""
        return self.counts.sum(axis=0)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.counts)


def confusion(preds: PredictionSet) -> ConfusionMatrix:
    """Tally argmax predictions against true labels."""
    k = preds.n_classes
    pred = preds.predicted_labels()
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (preds.true_labels, pred), 1)
    return ConfusionMatrix(counts=counts, class_names=list(preds.class_names))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n == 0:
        raise DataError("empty confusion matrix")
    return float(cm.diagonal.sum() / cm.n)


def hamming(cm: ConfusionMatrix) -> float:
    """Single-label Hamming loss: fraction misclassified, exactly 1 - accuracy."""
    return 1.0 - accuracy(cm)


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa: (P_o - P_e) / (1 - P_e).

    P_o is the observed agreement (overall accuracy) and P_e the chance
    agreement sum_k (t_k/N)(p_k/N).

    Raises:
        UndefinedMetricError: P_e = 1 (single-class degenerate case).
    """
    n = cm.n
    if n == 0:
        raise DataError("empty confusion matrix")
    p_o = cm.diagonal.sum() / n
    p_e = float(np.sum((cm.true_totals / n) * (cm.predicted_totals / n)))
    if 1.0 - p_e == 0.0:
        raise UndefinedMetricError("kappa undefined: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def mcc_multiclass(cm: ConfusionMatrix) -> float:
    """Generalized Matthews correlation for a K-class confusion matrix.

    Equals the correlation cov(X,Y)/sqrt(cov(X,X) cov(Y,Y)) of the one-hot
    indicator encodings of truth and prediction; computed here in the
    closed marginal form (c*s - sum t_k p_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2)).

    Raises:
        UndefinedMetricError: truth or prediction is single-class.
    """
    t = cm.true_totals.astype(np.float64)
    p = cm.predicted_totals.astype(np.float64)
    s = float(cm.n)
    c = float(cm.diagonal.sum())
    num = c * s - float(t @ p)
    den_t = s * s - float(t @ t)
    den_p = s * s - float(p @ p)
    if den_t <= 0.0 or den_p <= 0.0:
        raise UndefinedMetricError("mcc undefined: all samples share one class")
    return float(num / np.sqrt(den_p * den_t))


def _one_vs_rest_rates(cm: ConfusionMatrix, k: int) -> tuple[float | None, float | None]:
    n = cm.n
    t_k = int(cm.true_totals[k])
    p_k = int(cm.predicted_totals[k])
    tp = int(cm.counts[k, k])
    tpr = tp / t_k if t_k > 0 else None
    negatives = n - t_k
    tnr = (n - t_k - p_k + tp) / negatives if negatives > 0 else None
    return tpr, tnr


def youden_macro(cm: ConfusionMatrix) -> float:
    """Macro Youden index: mean over classes of TPR_k + TNR_k - 1.

    Classes whose TPR or TNR is undefined (no positives or no negatives)
    are excluded with a warning and the average runs over the rest.

    Raises:
        UndefinedMetricError: no class has both rates defined.
    """
    terms = []
    skipped = []
    for k in range(len(cm.class_names)):
        tpr, tnr = _one_vs_rest_rates(cm, k)
        if tpr is None or tnr is None:
            skipped.append(cm.class_names[k])
            continue
        terms.append(tpr + tnr - 1.0)
    if skipped:
        warnings.warn(
            f"youden: classes without defined rates excluded: {skipped}",
            TrafficLensWarning,
            stacklevel=2,
        )
    if not terms:
        raise UndefinedMetricError("youden undefined for every class")
    return float(np.mean(terms))


def macro_prf(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Unweighted macro precision, recall, and F1.

    A class with zero predicted (or true) instances contributes precision
    (or recall) 0, with a warning; F1 is 0 when precision + recall is 0.
    """
    k = len(cm.class_names)
    precisions = np.zeros(k)
    recalls = np.zeros(k)
    f1s = np.zeros(k)
    degenerate = []
    for i in range(k):
        tp = float(cm.counts[i, i])
        p_i = float(cm.predicted_totals[i])
        t_i = float(cm.true_totals[i])
        if p_i == 0 or t_i == 0:
            degenerate.append(cm.class_names[i])
        precisions[i] = tp / p_i if p_i > 0 else 0.0
        recalls[i] = tp / t_i if t_i > 0 else 0.0
        denom = precisions[i] + recalls[i]
        f1s[i] = 2.0 * precisions[i] * recalls[i] / denom if denom > 0 else 0.0
    if degenerate:
        warnings.warn(
            f"macro P/R: zero-denominator classes counted as 0: {degenerate}",
            TrafficLensWarning,
            stacklevel=2,
        )
    return float(precisions.mean()), float(recalls.mean()), float(f1s.mean())


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class true positive rate (classes without positives count 0)."""
    k = len(cm.class_names)
    t = cm.true_totals
    tprs = np.zeros(k)
    missing = []
    for i in range(k):
        if t[i] > 0:
            tprs[i] = cm.counts[i, i] / t[i]
        else:
            missing.append(cm.class_names[i])
    if missing:
        warnings.warn(
            f"balanced accuracy: classes without true samples counted as 0: {missing}",
            TrafficLensWarning,
            stacklevel=2,
        )
    return float(tprs.mean())


@dataclass
class RocCurve:
    class_name: str
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class RocResult:
    curves: list[RocCurve]
    macro_auc: float
    skipped_classes: list[str] = field(default_factory=list)


def _binary_roc(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    # Threshold sweep over descending scores, collapsing tied scores.
    order = np.argsort(-scores, kind="stable")
    pos_sorted = positive[order].astype(np.float64)
    scores_sorted = scores[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(1.0 - pos_sorted)
    distinct = np.flatnonzero(np.diff(scores_sorted) != 0.0)
    idx = np.concatenate([distinct, [len(scores_sorted) - 1]])
    n_pos = pos_sorted.sum()
    n_neg = len(pos_sorted) - n_pos
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return fpr, tpr, auc


def roc_auc(preds: PredictionSet) -> RocResult:
    """One-vs-rest ROC curve and AUC per class, plus the unweighted macro AUC.

    Classes without both positive and negative samples are excluded from
    the macro average with a warning.
    """
    curves = []
    skipped = []
    for k, name in enumerate(preds.class_names):
        positive = preds.true_labels == k
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == preds.n_samples:
            skipped.append(name)
            continue
        fpr, tpr, auc = _binary_roc(preds.probs[:, k], positive)
        curves.append(RocCurve(class_name=name, fpr=fpr, tpr=tpr, auc=auc))
    if skipped:
        warnings.warn(
            f"roc_auc: classes without both positives and negatives excluded: {skipped}",
            TrafficLensWarning,
            stacklevel=2,
        )
    if not curves:
        raise UndefinedMetricError("AUC undefined for every class")
    macro = float(np.mean([c.auc for c in curves]))
    return RocResult(curves=curves, macro_auc=macro, skipped_classes=skipped)


def log_loss(preds: PredictionSet) -> float:
    """Mean negative log probability of the true class, clipped to [1e-12, 1]."""
    p_true = preds.probs[np.arange(preds.n_samples), preds.true_labels]
    return float(-np.mean(np.log(np.clip(p_true, 1e-12, 1.0))))


def se_and_ci(metric: float, n: int) -> tuple[float, tuple[float, float]]:
    """Normal-approximation SE and 95% CI for a proportion-type metric.

    SE = sqrt(m (1 - m) / N); the interval is m +/- 1.96 SE clipped to [0, 1].

    Raises:
        DataError: N = 0 or metric outside [0, 1].
    """
    if n <= 0:
        raise DataError("sample count must be positive for SE/CI")
    if not 0.0 <= metric <= 1.0:
        raise DataError(f"proportion-type metric must lie in [0, 1], got {metric}")
    se = float(np.sqrt(metric * (1.0 - metric) / n))
    lo = max(0.0, metric - Z_95 * se)
    hi = min(1.0, metric + Z_95 * se)
    return se, (lo, hi)


@dataclass
class MetricsReport:
    """Full statistic set for one model's predictions."""

    model: str
    n_samples: int
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    auc_macro: float | None
    per_class_auc: dict[str, float]
    se: float
    ci95: tuple[float, float]
    ci_metric: str
    kappa: float | None
    hamming_loss: float
    mcc: float | None
    balanced_accuracy: float
    log_loss: float
    youden_macro: float | None

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        out["ci95"] = list(self.ci95)
        return out

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        raw = dict(raw)
        raw["ci95"] = tuple(raw["ci95"])
        return cls(**raw)


_CI_METRICS = ("macro_f1", "accuracy", "macro_precision", "macro_recall", "balanced_accuracy")


def compute_report(
    preds: PredictionSet,
    model: str = "model",
    ci_metric: str = "macro_f1",
) -> tuple[MetricsReport, ConfusionMatrix, RocResult]:
    """Compute every reported statistic in one pass.

    ``ci_metric`` selects which proportion-type metric the SE and 95% CI
    bracket (default macro F1). Metrics that are undefined for the given
    confusion matrix come back as None rather than raising.
    """
    if ci_metric not in _CI_METRICS:
        raise DataError(f"ci_metric must be one of {_CI_METRICS}, got {ci_metric!r}")
    cm = confusion(preds)
    acc = accuracy(cm)
    prec, rec, f1 = macro_prf(cm)
    bal = balanced_accuracy(cm)

    def _maybe(fn) -> float | None:
        try:
            return fn(cm)
        except UndefinedMetricError:
            return None

    kap = _maybe(kappa)
    mcc = _maybe(mcc_multiclass)
    youden = _maybe(youden_macro)
    try:
        roc = roc_auc(preds)
        auc_macro: float | None = roc.macro_auc
    except UndefinedMetricError:
        roc = RocResult(curves=[], macro_auc=float("nan"), skipped_classes=list(preds.class_names))
        auc_macro = None

    chosen = {
        "macro_f1": f1,
        "accuracy": acc,
        "macro_precision": prec,
        "macro_recall": rec,
        "balanced_accuracy": bal,
    }[ci_metric]
    se, ci = se_and_ci(chosen, preds.n_samples)

    report = MetricsReport(
        model=model,
        n_samples=preds.n_samples,
        accuracy=acc,
        precision_macro=prec,
        recall_macro=rec,
        f1_macro=f1,
        auc_macro=auc_macro,
        per_class_auc={c.class_name: c.auc for c in roc.curves},
        se=se,
        ci95=ci,
        ci_metric=ci_metric,
        kappa=kap,
        hamming_loss=hamming(cm),
        mcc=mcc,
        balanced_accuracy=bal,
        log_loss=log_loss(preds),
        youden_macro=youden,
    )
    return report, cm, roc
