"""Epoching, event-level scoring, metrics, PR curves and LOSO cross-validation.

Confusion counts are hybrid: a FOG episode is one true-positive or
false-negative event, while each NORMAL epoch is one true-negative or
false-positive. Precision therefore mixes event and epoch counts.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .characterize import bonferroni, wilcoxon_signed_rank
from .errors import AlignmentError, InsufficientDataError, ValidationError
from .model import (FOG_CLASS, NORMAL, EpochDataset, ModelParams, predict_scores,
                    train_rusboost)
from .select import SU_THRESHOLD, FCBFSelector
from .signalio import FOG, OTHER_STOP

log = logging.getLogger(__name__)

WINDOW_S = 2.56
OVERLAP = 0.5
BUFFER_S = 3.0
TAU = 0.5
UNLABELED = -1


# ------------------------------------------------------------------ epoching

def epoch_grid(n_samples: int, rate_hz: float, window_s: float = WINDOW_S,
               overlap: float = OVERLAP) -> tuple:
    """(window length, hop, number of epochs) in samples."""
    if not 0 <= overlap < 1:
        raise ValidationError("overlap must lie in [0, 1)")
    if window_s <= 0:
        raise ValidationError("window_s must be positive")
    win = int(round(window_s * rate_hz))
    hop = int(round(window_s * (1.0 - overlap) * rate_hz))
    n = 0 if n_samples < win else (n_samples - win) // hop + 1
    return win, hop, n


def epoch_means(values, win: int, hop: int, max_missing: float = 0.5) -> np.ndarray:
    """Per-window mean of finite values; NaN when more than ``max_missing`` is missing."""
    v = np.asarray(values, dtype=float)
    if v.size < win:
        return np.zeros(0)
    w = sliding_window_view(v, win)[::hop]
    ok = np.isfinite(w)
    cnt = ok.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(ok, w, 0.0).sum(axis=1) / cnt
    return np.where((win - cnt) > max_missing * win, np.nan, mean)


def epochize(features: dict, subject_id: str = "", window_s: float = WINDOW_S,
             overlap: float = OVERLAP, names=None, max_missing: float = 0.5) -> EpochDataset:
    """Average each feature over 50%-overlapping windows.

    A feature is missing in an epoch when more than half its samples are
    missing there; an epoch is dropped only when every feature is missing.
    """
    names = tuple(features) if names is None else tuple(names)
    if not names:
        raise ValidationError("no features to epochize")
    series = [features[n] for n in names]
    rate = series[0].rate_hz
    n = series[0].values.size
    for s in series[1:]:
        if s.rate_hz != rate or s.values.size != n:
            raise AlignmentError("features must share one clock to be epochized")
    win, hop, n_ep = epoch_grid(n, rate, window_s, overlap)
    if n_ep == 0:
        return EpochDataset(np.zeros((0, len(names))), np.zeros(0, int), np.zeros(0, object),
                            np.zeros(0), names, window_s)
    X = np.column_stack([epoch_means(s.values, win, hop, max_missing) for s in series])
    starts = np.arange(n_ep) * hop / rate
    keep = ~np.all(np.isnan(X), axis=1)
    return EpochDataset(X[keep], np.full(keep.sum(), UNLABELED), np.full(keep.sum(), subject_id, object),
                        starts[keep], names, window_s)


def _intersects(start, end, a, b):
    # half-open epoch [start, end) against closed region [a, b]; positive-length overlap
    return (start < b) & (end > a)


def _regions(ann, label, buffer_s=0.0):
    return [(e.onset_s - buffer_s, e.offset_s) for e in ann.episodes if e.label == label]


def label_epochs(data: EpochDataset, ann, buffer_s: float = BUFFER_S) -> EpochDataset:
    """FOG if the window meets [onset - buffer, offset] of a FOG episode.

    Remaining epochs meeting an OTHER_STOP episode are dropped; the rest are
    NORMAL.
    """
    start, end = data.start_s, data.end_s
    fog = np.zeros(len(data), dtype=bool)
    for a, b in _regions(ann, FOG, buffer_s):
        fog |= _intersects(start, end, a, b)
    stop = np.zeros(len(data), dtype=bool)
    for a, b in _regions(ann, OTHER_STOP):
        stop |= _intersects(start, end, a, b)
    y = np.where(fog, FOG_CLASS, NORMAL)
    keep = fog | ~stop
    return data.with_labels(y).subset(keep)


def label_all(data: EpochDataset, annotations: dict, buffer_s: float = BUFFER_S) -> EpochDataset:
    parts = [label_epochs(data.subset(data.subject_id == sid), annotations[sid], buffer_s)
             for sid in data.subjects()]
    return EpochDataset.concat(parts) if parts else data


# ------------------------------------------------------------- event scoring

@dataclass(frozen=True)
class ConfusionCounts:
    tp_events: int
    fn_events: int
    tn_epochs: int
    fp_epochs: int

    def __post_init__(self):
        if min(self.tp_events, self.fn_events, self.tn_epochs, self.fp_epochs) < 0:
            raise ValidationError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp_events + other.tp_events, self.fn_events + other.fn_events,
                               self.tn_epochs + other.tn_epochs, self.fp_epochs + other.fp_epochs)


def _episode_membership(data: EpochDataset, ann, buffer_s: float) -> list:
    """For each FOG episode, the boolean mask of epochs meeting its buffered span."""
    return [_intersects(data.start_s, data.end_s, a, b) for a, b in _regions(ann, FOG, buffer_s)]


def score_events(predictions, data: EpochDataset, ann, buffer_s: float = BUFFER_S) -> ConfusionCounts:
    pred = np.asarray(predictions).astype(bool)
    if pred.size != len(data):
        raise AlignmentError("predictions and epochs differ in length")
    members = _episode_membership(data, ann, buffer_s)
    tp = sum(bool(np.any(pred & m)) for m in members)
    normal = data.y == NORMAL
    return ConfusionCounts(tp, len(members) - tp, int(np.sum(normal & ~pred)),
                           int(np.sum(normal & pred)))


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> dict:
    """Sensitivity, specificity, precision and MCC; 0/0 yields 0 and is flagged."""
    tp, fn, tn, fp = c.tp_events, c.fn_events, c.tn_epochs, c.fp_epochs
    deg = []
    out = {
        "sensitivity": _ratio(tp, tp + fn, "sensitivity", deg),
        "specificity": _ratio(tn, tn + fp, "specificity", deg),
        "precision": _ratio(tp, tp + fp, "precision", deg),
    }
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    out["mcc"] = _ratio(tp * tn - fp * fn, math.sqrt(den), "mcc", deg)
    out["degenerate"] = tuple(deg)
    return out


# ----------------------------------------------------------------- PR curves

@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    auc: float
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    achievable: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (tp, fp) per threshold

    @property
    def points(self) -> list:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def interpolate_pr(tp, fp, n_pos: int) -> tuple:
    """TP-parameterized interpolation between achievable (tp, fp) points.

    Between (tp_a, fp_a) and (tp_b, fp_b) every intermediate true-positive
    count tp_a + x gets fp_a + x * (fp_b - fp_a) / (tp_b - tp_a) false
    positives. Points with no true positive take the precision of the first
    point that has one.
    """
    tp = np.asarray(tp, dtype=float)
    fp = np.asarray(fp, dtype=float)
    rec, prec = [], []
    for i in range(len(tp)):
        if i > 0 and tp[i] > tp[i - 1]:
            slope = (fp[i] - fp[i - 1]) / (tp[i] - tp[i - 1])
            for x in range(1, int(tp[i] - tp[i - 1])):
                t = tp[i - 1] + x
                f = fp[i - 1] + slope * x
                rec.append(t / n_pos)
                prec.append(t / (t + f))
        rec.append(tp[i] / n_pos)
        prec.append(tp[i] / (tp[i] + fp[i]) if tp[i] + fp[i] > 0 else np.nan)
    rec, prec = np.array(rec), np.array(prec)
    has_tp = rec > 0
    if has_tp.any():
        first = prec[np.argmax(has_tp)]
        prec = np.where(has_tp, prec, first)
        rec = np.concatenate([[0.0], rec[has_tp]])
        prec = np.concatenate([[first], prec[has_tp]])
    else:
        rec, prec = np.array([0.0, 1.0]), np.array([0.0, 0.0])
    return rec, prec


def pr_from_membership(scores, members: list, normal_mask) -> PRCurve:
    scores = np.asarray(scores, dtype=float)
    n_pos = len(members)
    if n_pos == 0:
        raise InsufficientDataError("PR curve undefined without positive episodes")
    # an episode is detected once the threshold falls to its best epoch score
    best = np.array([scores[m].max() if np.any(m) else -np.inf for m in members])
    neg = np.sort(scores[np.asarray(normal_mask, dtype=bool)])
    best_sorted = np.sort(best)
    thr = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    tp = best_sorted.size - np.searchsorted(best_sorted, thr, side="left")
    fp = neg.size - np.searchsorted(neg, thr, side="left")
    rec, prec = interpolate_pr(tp, fp, n_pos)
    auc = float(np.trapezoid(prec, rec))
    return PRCurve(rec, prec, min(1.0, max(0.0, auc)), thr, np.column_stack([tp, fp]))


def pr_curve(scores, data: EpochDataset, ann, buffer_s: float = BUFFER_S) -> PRCurve:
    scores = np.asarray(scores, dtype=float)
    if scores.size != len(data):
        raise AlignmentError("scores and epochs differ in length")
    return pr_from_membership(scores, _episode_membership(data, ann, buffer_s), data.y == NORMAL)


# ------------------------------------------------------------------ reports

METRIC_NAMES = ("sensitivity", "specificity", "precision", "mcc")


@dataclass
class MetricsReport:
    per_subject: dict                  # subject -> metrics dict (plus counts)
    skipped: list = field(default_factory=list)

    def _column(self, name) -> np.ndarray:
        return np.array([m[name] for m in self.per_subject.values()], dtype=float)

    def mean(self, name: str) -> float:
        return float(np.mean(self._column(name))) if self.per_subject else float("nan")

    def std(self, name: str) -> float:
        return float(np.std(self._column(name))) if self.per_subject else float("nan")

    def summary(self) -> dict:
        return {n: (self.mean(n), self.std(n)) for n in METRIC_NAMES}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", *METRIC_NAMES, "pr_auc", "tp_events", "fn_events", "tn_epochs",
                        "fp_epochs", "degenerate"])
            for sid, m in self.per_subject.items():
                c = m["counts"]
                w.writerow([sid, *(repr(float(m[n])) for n in METRIC_NAMES),
                            repr(float(m.get("pr_auc", float("nan")))), c.tp_events, c.fn_events,
                            c.tn_epochs, c.fp_epochs, ";".join(m["degenerate"])])
            for label, fn in (("mean", self.mean), ("std", self.std)):
                aucs = [m.get("pr_auc", float("nan")) for m in self.per_subject.values()]
                agg = float(np.mean(aucs)) if label == "mean" else float(np.std(aucs))
                w.writerow([label, *(repr(fn(n)) for n in METRIC_NAMES), repr(agg), "", "", "", "", ""])


def write_pr_curves(path, curves: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "recall", "precision", "auc"])
        for sid, c in curves.items():
            for r, p in zip(c.recall, c.precision):
                w.writerow([sid, repr(float(r)), repr(float(p)), repr(c.auc)])


# ---------------------------------------------------------------------- LOSO

@dataclass(frozen=True)
class LosoParams:
    threshold: float = SU_THRESHOLD
    n_bins: int = 10
    selection: str = "per_fold"        # or "global" (all subjects) or "none" (every column)
    empty_fallback: bool = True
    model: ModelParams = ModelParams()
    tau: float = TAU
    buffer_s: float = BUFFER_S
    n_jobs: int = 1


@dataclass
class FoldResult:
    subject: str
    model: object
    selected: tuple
    fallback_used: bool
    scores: np.ndarray
    counts: ConfusionCounts
    curve: PRCurve


@dataclass
class LosoResult:
    report: MetricsReport
    curves: dict
    folds: dict

    def pr_aucs(self) -> dict:
        return {s: c.auc for s, c in self.curves.items()}


def select_features(train: EpochDataset, params: LosoParams) -> tuple:
    lab = train.y >= 0
    sel = FCBFSelector(params.threshold, params.n_bins, params.empty_fallback)
    sel.fit(train.X[lab], train.y[lab])
    return tuple(sel.selected_), sel.fallback_used_


def train_fold(train: EpochDataset, params: LosoParams, selected=None):
    """Feature selection (unless ``selected`` is given) then RUSBoost on ``train``."""
    fallback = False
    if selected is None:
        selected, fallback = select_features(train, params)
    if not selected:
        raise InsufficientDataError("feature selection left no features")
    model = train_rusboost(train, params.model, selected,
                           meta={"fallback_used": fallback, "selection": params.selection})
    return model, selected, fallback


def _run_fold(args):
    data, ann, sid, params, global_sel = args
    held = data.subject_id == sid
    train = data.subset(~held)
    test = data.subset(held)
    model, selected, fallback = train_fold(train, params, global_sel)
    scores = predict_scores(model, test)
    counts = score_events(scores >= params.tau, test, ann, params.buffer_s)
    curve = pr_curve(scores, test, ann, params.buffer_s)
    return FoldResult(sid, model, selected, fallback, scores, counts, curve)


def loso_cv(data: EpochDataset, annotations: dict, params: LosoParams = LosoParams()) -> LosoResult:
    """Leave-one-subject-out evaluation of selection + RUSBoost.

    ``data`` must already be labeled. Subjects without FOG episodes are
    skipped and reported in ``report.skipped``.
    """
    subjects = data.subjects()
    if len(subjects) < 2:
        raise InsufficientDataError("LOSO needs at least 2 subjects")
    if params.selection not in ("per_fold", "global", "none"):
        raise ValidationError("selection must be 'per_fold', 'global' or 'none'")
    global_sel = None
    if params.selection == "none":
        global_sel = tuple(range(len(data.feature_names)))
    elif params.selection == "global":
        global_sel, fb = select_features(data, params)
        if not global_sel:
            raise InsufficientDataError("feature selection left no features")
    jobs, skipped = [], []
    for sid in subjects:
        ann = annotations[sid]
        if not any(e.label == FOG for e in ann.episodes):
            log.warning("subject %s has no FOG episodes; skipped", sid)
            skipped.append(sid)
            continue
        jobs.append((data, ann, sid, params, global_sel))
    if params.n_jobs and params.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=params.n_jobs) as ex:
            results = list(ex.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    per_subject, curves, folds = {}, {}, {}
    for r in results:
        m = metrics(r.counts)
        m["counts"] = r.counts
        m["pr_auc"] = r.curve.auc
        per_subject[r.subject] = m
        curves[r.subject] = r.curve
        folds[r.subject] = r
    return LosoResult(MetricsReport(per_subject, skipped), curves, folds)


# -------------------------------------------------------------- comparisons

def compare_systems(mcc_multi, mcc_single: dict) -> dict:
    """Wilcoxon signed-rank of multi vs. each single system, Bonferroni over systems.

    All-zero differences give p = 1.0. Fewer than 5 nonzero pairs otherwise
    give p = None with a warning.
    """
    multi = np.asarray(mcc_multi, dtype=float)
    m = len(mcc_single)
    out = {}
    for name, single in mcc_single.items():
        single = np.asarray(single, dtype=float)
        if single.shape != multi.shape:
            raise AlignmentError(f"{name}: paired arrays differ in length")
        d = multi - single
        nz = int(np.count_nonzero(d))
        if nz == 0:
            p = 1.0
        elif nz < 5:
            log.warning("%s: only %d nonzero pairs; p not reported", name, nz)
            p = None
        else:
            p = wilcoxon_signed_rank(d)
        out[name] = {"p_raw": p, "p_bonferroni": None if p is None else bonferroni(p, m),
                     "n_nonzero": nz}
    return out


def __getattr__(name):
    # the streaming detector lives in its own module; expose it here lazily
    if name in ("stream_detect", "StreamDetector"):
        from . import streaming
        return getattr(streaming, name)
    raise AttributeError(name)
