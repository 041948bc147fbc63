"""Fast correlation-based filter (FCBF) on symmetrical uncertainty."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .errors import AlignmentError, ValidationError

log = logging.getLogger(__name__)

N_BINS = 10
SU_THRESHOLD = 0.85
MISSING_CODE = -1


def discretize(x, n_bins: int = N_BINS) -> np.ndarray:
    """Integer codes for ``x``.

    Integer, boolean and non-numeric inputs are treated as categorical.
    Floats are cut into ``n_bins`` equal-frequency bins; NaN gets its own code.
    """
    x = np.asarray(x)
    if x.dtype.kind in "biuUSO":
        _, codes = np.unique(x, return_inverse=True)
        return codes.astype(np.int64)
    x = x.astype(float)
    codes = np.full(x.size, MISSING_CODE, dtype=np.int64)
    ok = np.isfinite(x)
    if ok.any():
        v = x[ok]
        edges = np.quantile(v, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
        codes[ok] = np.searchsorted(edges, v, side="right")
    return codes


def _entropy(counts) -> float:
    c = np.sort(np.asarray(counts, dtype=float))  # fixed order keeps SU exactly symmetric
    p = c[c > 0] / c.sum()
    return float(-np.sum(p * np.log2(p)))


def _su_codes(a: np.ndarray, b: np.ndarray) -> float:
    ha = _entropy(np.unique(a, return_counts=True)[1])
    hb = _entropy(np.unique(b, return_counts=True)[1])
    if ha == 0.0 or hb == 0.0:
        return 0.0
    _, joint = np.unique(np.stack([a, b]), axis=1, return_counts=True)
    hab = _entropy(joint)
    total = ha + hb
    su = 2.0 * (total - hab) / total
    return float(min(1.0, max(0.0, su)))


def symmetrical_uncertainty(x, y, n_bins: int = N_BINS) -> float:
    """SU = 2 IG(x; y) / (H(x) + H(y)) in bits; 0 if either entropy is 0."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise AlignmentError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 10:
        raise ValidationError("symmetrical uncertainty needs at least 10 samples")
    return _su_codes(discretize(x, n_bins), discretize(y, n_bins))


@dataclass(frozen=True)
class SUMatrix:
    su_feature_class: np.ndarray
    su_feature_feature: np.ndarray


def su_matrix(X, y, n_bins: int = N_BINS) -> SUMatrix:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValidationError("X must be 2-D (samples x features)")
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise AlignmentError(f"length mismatch: {X.shape[0]} vs {y.shape[0]}")
    if X.shape[0] < 10:
        raise ValidationError("symmetrical uncertainty needs at least 10 samples")
    codes = [discretize(X[:, j], n_bins) for j in range(X.shape[1])]
    yc = discretize(y, n_bins)
    k = len(codes)
    sc = np.array([_su_codes(c, yc) for c in codes])
    sf = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            sf[i, j] = sf[j, i] = _su_codes(codes[i], codes[j])
    return SUMatrix(sc, sf)


def fcbf_from_su(su_class, su_ff, threshold: float = SU_THRESHOLD) -> list:
    """FCBF rules applied to precomputed SU values; returns ordered indices.

    Features with SU to the class above ``threshold`` are ranked by that SU
    (ties by index). Walking the ranking, each kept feature removes any later
    feature whose SU with it is >= that feature's SU with the class.
    """
    su_class = np.asarray(su_class, dtype=float)
    su_ff = np.asarray(su_ff, dtype=float)
    ranked = [int(i) for i in np.argsort(-su_class, kind="stable") if su_class[i] > threshold]
    kept = []
    remaining = ranked
    while remaining:
        p = remaining[0]
        kept.append(p)
        remaining = [q for q in remaining[1:] if su_ff[p, q] < su_class[q]]
    return kept


def fcbf(features, labels, threshold: float = SU_THRESHOLD, n_bins: int = N_BINS) -> list:
    """FCBF selection from a list of feature series (or a samples x features array)."""
    X = np.asarray(features)
    if X.ndim == 1:
        X = X[:, None]
    elif isinstance(features, (list, tuple)):
        X = np.column_stack([np.asarray(f) for f in features])
    if X.shape[1] < 1:
        raise ValidationError("fcbf needs at least one feature")
    m = su_matrix(X, labels, n_bins)
    return fcbf_from_su(m.su_feature_class, m.su_feature_feature, threshold)


class FCBFSelector(SelectorMixin, BaseEstimator):
    """Scikit-learn selector wrapping :func:`fcbf`.

    Parameters
    ----------
    threshold : float
        SU to the class a feature must exceed.
    n_bins : int
        Equal-frequency bins for continuous features.
    empty_fallback : bool
        If the threshold leaves nothing, rerun at threshold 0 so that only
        redundancy elimination applies. ``fallback_used_`` records it.
    """

    def __init__(self, threshold: float = SU_THRESHOLD, n_bins: int = N_BINS,
                 empty_fallback: bool = False):
        self.threshold = threshold
        self.n_bins = n_bins
        self.empty_fallback = empty_fallback

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_all_finite="allow-nan")
        m = su_matrix(X, y, self.n_bins)
        self.su_class_ = m.su_feature_class
        self.su_features_ = m.su_feature_feature
        self.selected_ = fcbf_from_su(self.su_class_, self.su_features_, self.threshold)
        self.fallback_used_ = False
        if not self.selected_ and self.empty_fallback:
            log.info("no feature above SU threshold %.3f; using redundancy-only ranking",
                     self.threshold)
            self.selected_ = fcbf_from_su(self.su_class_, self.su_features_, 0.0)
            self.fallback_used_ = True
        self.n_features_in_ = X.shape[1]
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "selected_")
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.selected_] = True
        return mask

    def transform(self, X):
        # keep the ranked order rather than column order
        check_is_fitted(self, "selected_")
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X[:, self.selected_]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.allow_nan = True
        return tags


def write_su_report(path, names, su_class, selected) -> None:
    """CSV with columns feature, su_class, selected, rank (blank if unselected)."""
    rank = {j: r + 1 for r, j in enumerate(selected)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "su_class", "selected", "rank"])
        for j, name in enumerate(names):
            w.writerow([name, repr(float(su_class[j])), int(j in rank), rank.get(j, "")])
