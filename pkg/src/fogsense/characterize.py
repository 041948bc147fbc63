"""Freezing vs. normal-turning segment statistics.

Segments span 10 s before to 3 s after an anchor. Freezing segments are
anchored at isolated FOG onsets; controls are anchored in FOG-free stretches
where the turning phase at relative -10 s matches the freezing segment's.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from itertools import groupby

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, ParameterError, ValidationError
from .signalio import FOG

log = logging.getLogger(__name__)

FREEZING = "FREEZING"
NORMAL_TURNING = "NORMAL_TURNING"
PRE_S = 10.0
POST_S = 3.0
PHASE_TOL = 0.1


@dataclass(frozen=True)
class Segment:
    group: str
    feature_kind: str
    values: np.ndarray
    anchor_s: float
    rate_hz: float
    subject_id: str = ""
    pair_anchor_s: float | None = None  # controls: anchor of their freezing partner
    constant: bool = False

    def __post_init__(self):
        if self.group not in (FREEZING, NORMAL_TURNING):
            raise ValidationError(f"unknown segment group {self.group!r}")

    @property
    def relative_times(self) -> np.ndarray:
        return relative_grid(self.rate_hz, self.values.size)


def relative_grid(rate_hz: float, n: int | None = None) -> np.ndarray:
    pre = int(round(PRE_S * rate_hz))
    n = segment_length(rate_hz) if n is None else n
    return (np.arange(n) - pre) / rate_hz


def segment_length(rate_hz: float) -> int:
    return int(round(PRE_S * rate_hz)) + int(round(POST_S * rate_hz)) + 1


def _window(anchor_idx: int, rate_hz: float) -> tuple:
    return anchor_idx - int(round(PRE_S * rate_hz)), anchor_idx + int(round(POST_S * rate_hz))


def _fog_spans(ann) -> list:
    return [(e.onset_s, e.offset_s) for e in ann.episodes if e.label == FOG]


def _overlaps(spans, start_s, end_s) -> bool:
    return any(on <= end_s and off >= start_s for on, off in spans)


def extract_freezing_segments(fs, ann, subject_id: str = "") -> list:
    """One segment per FOG episode whose window holds no other FOG episode."""
    spans = _fog_spans(ann)
    rate, n = fs.rate_hz, fs.values.size
    out = []
    for i, (onset, _) in enumerate(spans):
        a = int(round(onset * rate))
        lo, hi = _window(a, rate)
        if lo < 0 or hi > n - 1:
            continue
        others = spans[:i] + spans[i + 1:]
        if _overlaps(others, lo / rate, hi / rate):
            continue
        out.append(Segment(FREEZING, fs.kind, fs.values[lo:hi + 1].copy(), a / rate, rate,
                           subject_id))
    return out


def _wrap(x):
    return np.angle(np.exp(1j * np.asarray(x)))


def _fog_free_starts(ann, rate: float, n: int) -> np.ndarray:
    """Boolean per window-start index: window [start, start + 13 s] lies in range and is FOG-free."""
    length = segment_length(rate)
    n_starts = n - length + 1
    if n_starts <= 0:
        return np.zeros(0, dtype=bool)
    ok = np.ones(n_starts, dtype=bool)
    starts_s = np.arange(n_starts) / rate
    ends_s = (np.arange(n_starts) + length - 1) / rate
    for on, off in _fog_spans(ann):
        ok &= ~((on <= ends_s) & (off >= starts_s))
    return ok


def match_control_segments(fs, turning_phase, freezing_segments, ann, tol: float = PHASE_TOL,
                           subject_id: str | None = None) -> list:
    """Phase-matched normal-turning controls, at most one per freezing segment.

    Candidate window starts form contiguous runs where the phase lies within
    ``tol`` of the target; each run contributes its best-matching start, and
    the run nearest in time to the freezing anchor wins. Runs already used by
    an earlier control are skipped. Unmatched freezing segments are logged.
    """
    phase = np.asarray(turning_phase, dtype=float)
    rate, n = fs.rate_hz, fs.values.size
    if phase.size != n:
        raise ValidationError("turning phase and feature series differ in length")
    pre = int(round(PRE_S * rate))
    length = segment_length(rate)
    free = _fog_free_starts(ann, rate, n)
    used_runs = set()
    out = []
    for seg in freezing_segments:
        start_f = int(round(seg.anchor_s * rate)) - pre
        target = phase[start_f]
        dist = np.abs(_wrap(phase[: free.size] - target))
        cand = free & (dist <= tol)
        best = None
        idx = np.flatnonzero(cand)
        # split candidates into contiguous runs
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1) if idx.size else []
        for run in runs:
            key = int(run[0])
            if key in used_runs:
                continue
            pick = int(run[np.argmin(dist[run])])
            gap = abs(pick - start_f)
            if best is None or gap < best[0]:
                best = (gap, pick, key)
        if best is None:
            log.warning("no phase-matched control for freezing segment at %.3f s", seg.anchor_s)
            continue
        _, pick, key = best
        used_runs.add(key)
        out.append(Segment(NORMAL_TURNING, fs.kind, fs.values[pick:pick + length].copy(),
                           (pick + pre) / rate, rate,
                           seg.subject_id if subject_id is None else subject_id,
                           pair_anchor_s=seg.anchor_s))
    return out


def unmatched_segments(freezing_segments, controls) -> list:
    paired = {c.pair_anchor_s for c in controls}
    return [s for s in freezing_segments if s.anchor_s not in paired]


def normalize_segments(segments) -> list:
    """Z-score each subject's segments by that subject's pooled mean and SD."""
    segments = list(segments)
    if len(segments) < 2:
        raise InsufficientDataError("normalization needs at least 2 segments")
    out = [None] * len(segments)
    keyed = sorted(range(len(segments)), key=lambda i: (segments[i].subject_id, segments[i].feature_kind))
    for _, grp in groupby(keyed, key=lambda i: (segments[i].subject_id, segments[i].feature_kind)):
        grp = list(grp)
        pooled = np.concatenate([segments[i].values for i in grp])
        mu = np.nanmean(pooled) if np.any(np.isfinite(pooled)) else 0.0
        sd = np.nanstd(pooled) if np.any(np.isfinite(pooled)) else 0.0
        for i in grp:
            s = segments[i]
            if not sd > 0:
                out[i] = replace(s, values=np.where(np.isnan(s.values), np.nan, 0.0), constant=True)
            else:
                out[i] = replace(s, values=(s.values - mu) / sd)
    return out


@dataclass
class TTestBand:
    relative_time_s: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    se_a: np.ndarray
    se_b: np.ndarray
    t: np.ndarray
    df: np.ndarray
    p_value: np.ndarray
    n_a: np.ndarray
    n_b: np.ndarray
    z: float = 1.96
    meta: dict = field(default_factory=dict)

    @property
    def ci95_a(self):
        return self.mean_a - self.z * self.se_a, self.mean_a + self.z * self.se_a

    @property
    def ci95_b(self):
        return self.mean_b - self.z * self.se_b, self.mean_b + self.z * self.se_b

    def separated(self) -> np.ndarray:
        """True where the two CI95 bands do not overlap."""
        lo_a, hi_a = self.ci95_a
        lo_b, hi_b = self.ci95_b
        return (hi_a < lo_b) | (hi_b < lo_a)

    def p_bonferroni(self) -> np.ndarray:
        finite = np.isfinite(self.p_value)
        out = np.full(self.p_value.shape, np.nan)
        out[finite] = bonferroni(self.p_value[finite], int(finite.sum()))
        return out

    def to_csv(self, path) -> None:
        lo_a, hi_a = self.ci95_a
        lo_b, hi_b = self.ci95_b
        p_adj = self.p_bonferroni()
        cols = (self.relative_time_s, self.mean_a, lo_a, hi_a, self.mean_b, lo_b, hi_b,
                self.p_value, p_adj)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["relative_time_s", "meanA", "loA", "hiA", "meanB", "loB", "hiB", "p",
                        "p_bonferroni"])
            for row in zip(*cols):
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    v = float(v)
    return "NA" if math.isnan(v) else repr(v)


def _stack(segments) -> np.ndarray:
    lengths = {s.values.size for s in segments}
    if len(lengths) != 1:
        raise ValidationError("segments differ in length")
    return np.vstack([s.values for s in segments])


def _moments(x):
    n = np.sum(np.isfinite(x), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(x, axis=0) / n
        dev = np.where(np.isfinite(x), x - mean, 0.0)
        var = np.sum(dev * dev, axis=0) / (n - 1)
    return mean, var, n


def pointwise_ttest(group_a, group_b) -> TTestBand:
    """Welch two-sided t-test at each relative-time sample, with CI95 bands."""
    group_a, group_b = list(group_a), list(group_b)
    if len(group_a) < 2 or len(group_b) < 2:
        raise InsufficientDataError("pointwise t-test needs at least 2 segments per group")
    xa, xb = _stack(group_a), _stack(group_b)
    if xa.shape[1] != xb.shape[1]:
        raise ValidationError("groups have different segment lengths")
    ma, va, na = _moments(xa)
    mb, vb, nb = _moments(xb)
    with np.errstate(invalid="ignore", divide="ignore"):
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        diff = ma - mb
        t = diff / np.sqrt(se2)
        df = se2 * se2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    zero = se2 == 0
    t = np.where(zero & (diff == 0), 0.0, t)
    p = np.where(zero, np.where(diff == 0, 1.0, 0.0), p)
    small = (na < 2) | (nb < 2)
    p = np.where(small, np.nan, np.clip(p, 0.0, 1.0))
    rate = group_a[0].rate_hz
    return TTestBand(relative_grid(rate, xa.shape[1]), ma, mb, np.sqrt(qa), np.sqrt(qb), t, df, p,
                     na, nb)


# ----------------------------------------------------------------- rank tests

def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> tuple:
    """P(W <= w) and P(W >= w) for the signed-rank statistic on doubled ranks."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    prob = counts / counts.sum()
    return prob[: w2 + 1].sum(), prob[w2:].sum()


def wilcoxon_signed_rank(diffs, exact_max_n: int = 20) -> float:
    """Two-sided Wilcoxon signed-rank p-value.

    Zero differences are dropped. All-zero input returns 1.0 by convention.
    Exact enumeration is used for n <= ``exact_max_n``, otherwise the normal
    approximation with tie and continuity corrections.
    """
    d = np.asarray(diffs, dtype=float)
    if np.any(~np.isfinite(d)):
        raise ValidationError("differences must be finite")
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    n = d.size
    if n < 5:
        raise InsufficientDataError(f"wilcoxon needs >= 5 nonzero differences, got {n}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    if n <= exact_max_n:
        ranks2 = np.round(ranks * 2).astype(int)
        w2 = int(round(w_plus * 2))
        lower, upper = _exact_upper_tail(ranks2, w2)
        return float(min(1.0, 2.0 * min(lower, upper)))
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(abs(w_plus - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def bonferroni(p_values, m: int):
    """``min(1, p * m)`` element-wise; scalars in, scalar out."""
    p = np.asarray(p_values, dtype=float)
    if m < max(p.size, 1):
        raise ParameterError(f"m={m} is smaller than the number of p-values ({p.size})")
    adj = np.minimum(1.0, p * m)
    return float(adj) if p.ndim == 0 else adj


# ------------------------------------------------------------- orchestration

def characterize_feature(per_subject, tol: float = PHASE_TOL, normalize: bool = True) -> dict:
    """Freezing vs. control band for one feature pooled over subjects.

    ``per_subject`` yields ``(subject_id, FeatureSeries, turning_phase, ann)``.
    Returns ``{"band", "freezing", "controls", "unmatched"}``.
    """
    freezing, controls, unmatched = [], [], []
    for sid, fs, phase, ann in per_subject:
        fz = extract_freezing_segments(fs, ann, sid)
        ct = match_control_segments(fs, phase, fz, ann, tol, sid)
        freezing += fz
        controls += ct
        unmatched += unmatched_segments(fz, ct)
    if normalize:
        both = normalize_segments(freezing + controls)
        freezing, controls = both[: len(freezing)], both[len(freezing):]
    band = pointwise_ttest(freezing, controls)
    band.meta.update(n_freezing=len(freezing), n_controls=len(controls), n_unmatched=len(unmatched))
    return {"band": band, "freezing": freezing, "controls": controls, "unmatched": unmatched}
