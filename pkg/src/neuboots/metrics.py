"""Uncertainty-quantification metrics: calibration, coverage, diversity, OOD detection, F1."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, xlogy

LOG_EPS = 1e-12


def _check_probs(probs, labels):
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty (m, k) array")
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {probs.shape[0]} predictions")
    return probs, labels.astype(np.intp)


def confidence_bins(confidence, n_bins: int = 15) -> np.ndarray:
    """Equal-width bin index in ``[0, n_bins)``; bin ``b`` covers ``(b/n, (b+1)/n]``, 0 goes to bin 0."""
    # searching the edges b / n_bins avoids ceil(c * n) rounding a bin edge upward
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, np.asarray(confidence, dtype=float), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def bin_stats(probs, labels, n_bins: int = 15):
    """Per-bin (mean confidence, accuracy, count); empty bins report NaN means."""
    probs, labels = _check_probs(probs, labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    b = confidence_bins(conf, n_bins)
    counts = np.bincount(b, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf_mean = np.bincount(b, weights=conf, minlength=n_bins) / counts
        acc = np.bincount(b, weights=correct, minlength=n_bins) / counts
    return conf_mean, acc, counts


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error on max-probability confidence, as a fraction."""
    conf_mean, acc, counts = bin_stats(probs, labels, n_bins)
    live = counts > 0
    return float(np.sum(counts[live] / counts.sum() * np.abs(acc[live] - conf_mean[live])))


def nll(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, LOG_EPS))))


def brier(probs, labels) -> float:
    """Mean over samples of ``sum_k (p_k - onehot_k)^2``."""
    probs, labels = _check_probs(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def error_rate(probs, labels) -> float:
    probs, labels = _check_probs(probs, labels)
    return float(np.mean(probs.argmax(axis=1) != labels))


@dataclass
class CalibrationReport:
    error_rate: float  # percent
    ece: float  # percent
    nll: float  # nats
    brier: float  # 100 * mean sum_k (p_k - onehot_k)^2
    bin_confidence: list = field(default_factory=list)
    bin_accuracy: list = field(default_factory=list)
    bin_count: list = field(default_factory=list)

    def row(self) -> dict:
        return {"error_rate": self.error_rate, "ece": self.ece, "nll": self.nll, "brier": self.brier}


def calibration_report(probs, labels, n_bins: int = 15) -> CalibrationReport:
    conf_mean, acc, counts = bin_stats(probs, labels, n_bins)
    nan_to_none = lambda a: [None if math.isnan(v) else float(v) for v in a]  # noqa: E731
    return CalibrationReport(
        error_rate=100 * error_rate(probs, labels),
        ece=100 * ece(probs, labels, n_bins),
        nll=nll(probs, labels),
        brier=100 * brier(probs, labels),
        bin_confidence=nan_to_none(conf_mean),
        bin_accuracy=nan_to_none(acc),
        bin_count=[int(c) for c in counts],
    )


def coverage_rate(lower, upper, truth):
    """Per-grid-point fraction of replications whose band contains the truth.

    ``lower``/``upper`` are ``(R, G)`` (or ``(G,)`` for one replication) and
    ``truth`` is ``(G,)``. Returns ``(indicator, per_point, mean)``.
    """
    lower, upper = np.atleast_2d(lower), np.atleast_2d(upper)
    hit = (lower <= truth) & (truth <= upper)
    per_point = hit.mean(axis=0)
    return hit, per_point, float(per_point.mean())


# -- ensemble diversity ------------------------------------------------------

@dataclass
class DiversityReport:
    """Pairwise diversity averaged over member pairs.

    Each measure skips the pairs where its own denominator vanishes; the
    number skipped is recorded and the measure is None if every pair was.
    ``ratio_error`` is ``(N10 + N01) / N00``; the others are fractions.
    """

    ratio_error: float | None
    q_statistic: float | None
    correlation: float | None
    disagreement: float
    n_pairs: int
    skipped: dict

    def row(self) -> dict:
        pct = lambda v: None if v is None else 100 * v  # noqa: E731
        return {"ratio_error": pct(self.ratio_error), "q_statistic": pct(self.q_statistic),
                "correlation": pct(self.correlation), "disagreement": pct(self.disagreement)}


def contingency(pred_a, pred_b, truth):
    """``(N11, N10, N01, N00)``: 1 = correct, first index = member a."""
    ca = np.asarray(pred_a) == truth
    cb = np.asarray(pred_b) == truth
    return (int(np.sum(ca & cb)), int(np.sum(ca & ~cb)), int(np.sum(~ca & cb)), int(np.sum(~ca & ~cb)))


def pair_measures(n11, n10, n01, n00):
    """Ratio-error, Q-statistic and correlation for one pair; None when undefined."""
    ratio = (n10 + n01) / n00 if n00 else None
    q_den = n11 * n00 + n01 * n10
    q = (n11 * n00 - n01 * n10) / q_den if q_den else None
    r_den = (n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)
    corr = (n11 * n00 - n01 * n10) / math.sqrt(r_den) if r_den else None
    return ratio, q, corr


def diversity(member_predictions, truth) -> DiversityReport:
    """``member_predictions`` is ``(B, m)`` hard labels (argmax, lowest-index ties)."""
    preds = np.asarray(member_predictions)
    truth = np.asarray(truth)
    if preds.ndim != 2 or preds.shape[0] < 2:
        raise ValueError("diversity needs at least two members")
    sums = {"ratio_error": [], "q_statistic": [], "correlation": []}
    disagree = []
    for a, b in itertools.combinations(range(preds.shape[0]), 2):
        measures = pair_measures(*contingency(preds[a], preds[b], truth))
        for key, value in zip(sums, measures):
            if value is not None:
                sums[key].append(value)
        disagree.append(float(np.mean(preds[a] != preds[b])))
    n_pairs = len(disagree)
    mean = lambda v: float(np.mean(v)) if v else None  # noqa: E731
    return DiversityReport(
        ratio_error=mean(sums["ratio_error"]),
        q_statistic=mean(sums["q_statistic"]),
        correlation=mean(sums["correlation"]),
        disagreement=float(np.mean(disagree)),
        n_pairs=n_pairs,
        skipped={k: n_pairs - len(v) for k, v in sums.items()},
    )


# -- out-of-distribution detection ------------------------------------------

OOD_FEATURE_NAMES = ("max_predictive_mean", "logit_std", "expected_entropy", "predictive_entropy")


def entropy(p, axis=-1):
    return -np.sum(xlogy(p, p), axis=axis)


def ood_features(probs, logits) -> np.ndarray:
    """Four uncertainty statistics per input from ``(B, m, k)`` samples.

    Columns follow :data:`OOD_FEATURE_NAMES`: max of the mean probability
    vector, mean over classes of the per-class logit std across samples,
    mean per-sample entropy and entropy of the mean probability vector.
    """
    probs = np.asarray(probs, dtype=float)
    logits = np.asarray(logits, dtype=float)
    if probs.ndim == 2:
        probs, logits = probs[:, None, :], logits[:, None, :]
    mean_p = probs.mean(axis=0)
    return np.column_stack([
        mean_p.max(axis=-1),
        logits.std(axis=0).mean(axis=-1),
        entropy(probs).mean(axis=0),
        entropy(mean_p),
    ])


@dataclass
class DetectorModel:
    """Logistic regression on standardized features; predicts P(in-distribution)."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    iterations: int
    l2: float

    def decision(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=float) - self.mean) / self.scale
        return z @ self.weights + self.bias

    def score(self, features) -> np.ndarray:
        return expit(self.decision(features))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def _logistic_objective(w, X, t, l2):
    z = X @ w
    # log(1 + e^z) - t z, with the bias column (last) unpenalized
    value = np.mean(np.logaddexp(0.0, z) - t * z) + 0.5 * l2 * np.sum(w[:-1] ** 2)
    p = expit(z)
    g = X.T @ (p - t) / len(t)
    g[:-1] += l2 * w[:-1]
    return value, g, p


def fit_detector(features_in, features_out, *, l2: float = 1e-4, tol: float = 1e-8,
                 max_iter: int = 100) -> DetectorModel:
    """L2-regularized logistic regression fit by Newton's method (in = 1, out = 0)."""
    fin = np.atleast_2d(np.asarray(features_in, dtype=float))
    fout = np.atleast_2d(np.asarray(features_out, dtype=float))
    if fin.shape[0] == 0 or fout.shape[0] == 0:
        raise ValueError("both in- and out-distribution feature sets must be non-empty")
    F = np.vstack([fin, fout])
    t = np.concatenate([np.ones(len(fin)), np.zeros(len(fout))])
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale == 0] = 1.0
    X = np.column_stack([(F - mean) / scale, np.ones(len(F))])
    w = np.zeros(X.shape[1])
    ridge = np.full(X.shape[1], l2)
    ridge[-1] = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        value, g, p = _logistic_objective(w, X, t, l2)
        if np.linalg.norm(g) < tol:
            it -= 1
            break
        H = (X * (p * (1 - p))[:, None]).T @ X / len(t) + np.diag(ridge)
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        # backtracking keeps Newton monotone when the data are (nearly) separable
        lr = 1.0
        while lr > 1e-10:
            if _logistic_objective(w - lr * step, X, t, l2)[0] <= value:
                break
            lr *= 0.5
        w = w - lr * step
    return DetectorModel(weights=w[:-1], bias=float(w[-1]), mean=mean, scale=scale, iterations=it, l2=l2)


@dataclass
class DetectionMetrics:
    tnr_at_tpr95: float
    auroc: float
    aupr_in: float
    aupr_out: float
    detection_accuracy: float

    def row(self) -> dict:
        return {k: 100 * v for k, v in asdict(self).items()}


def _sweep(pos, neg):
    """TPR/FPR at every distinct threshold, descending; predict positive iff score >= t."""
    scores = np.concatenate([pos, neg])
    thresholds = np.unique(scores)[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    return thresholds, tp, fp


def _aupr(pos, neg):
    _, tp, fp = _sweep(pos, neg)
    recall = np.concatenate([[0.0], tp / len(pos)])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    return float(np.trapezoid(precision, recall))


def detection_metrics(scores_in, scores_out) -> DetectionMetrics:
    """Threshold-sweep detection metrics with in-distribution as the positive class.

    Higher scores mean "more in-distribution". TNR is read at the largest
    threshold whose TPR reaches 0.95.
    """
    s_in = np.asarray(scores_in, dtype=float).ravel()
    s_out = np.asarray(scores_out, dtype=float).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("both score sets must be non-empty")
    _, tp, fp = _sweep(s_in, s_out)
    tpr = np.concatenate([[0.0], tp / s_in.size])
    fpr = np.concatenate([[0.0], fp / s_out.size])
    auroc = float(np.trapezoid(tpr, fpr))
    first = np.argmax(tpr >= 0.95)
    tnr95 = float(1.0 - fpr[first])
    det_acc = float(np.max(0.5 * (tpr + 1.0 - fpr)))
    return DetectionMetrics(
        tnr_at_tpr95=tnr95,
        auroc=auroc,
        aupr_in=_aupr(s_in, s_out),
        aupr_out=_aupr(-s_out, -s_in),
        detection_accuracy=det_acc,
    )


def per_class_f1(predictions, labels, k: int) -> np.ndarray:
    """One-vs-rest F1 per class; 0 when precision or recall is undefined."""
    if k < 2:
        raise ValueError("per-class F1 needs k >= 2")
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    f1 = np.zeros(k)
    for c in range(k):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        if tp:
            f1[c] = 2 * tp / (2 * tp + fp + fn)
    return f1
