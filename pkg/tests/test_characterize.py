import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fogsense.characterize import (
    FREEZING, NORMAL_TURNING, Segment, bonferroni, extract_freezing_segments,
    match_control_segments, normalize_segments, pointwise_ttest, segment_length,
    wilcoxon_signed_rank,
)
from fogsense.errors import InsufficientDataError
from fogsense.features import SPV, FeatureSeries
from fogsense.signalio import AnnotationTrack, Episode

RATE = 10.0


def series(duration_s, rate=RATE, values=None):
    n = int(duration_s * rate)
    v = np.arange(n, dtype=float) if values is None else values
    return FeatureSeries(SPV, "spv", rate, v)


def track(*spans):
    return AnnotationTrack("adjudicated", tuple(Episode(a, b) for a, b in spans))


def brute_isolated(spans, duration_s):
    keep = []
    for i, (on, _) in enumerate(spans):
        lo, hi = on - 10.0, on + 3.0
        if lo < 0 or hi > duration_s - 1 / RATE:
            continue
        if any(a <= hi and b >= lo for j, (a, b) in enumerate(spans) if j != i):
            continue
        keep.append(on)
    return keep


# ------------------------------------------------------------------ segmentation

def test_segment_grid_length():
    assert segment_length(500.0) == 13 * 500 + 1
    seg = extract_freezing_segments(series(120), track((60.0, 63.0)))[0]
    assert seg.values.size == 131
    assert seg.relative_times[0] == -10.0 and seg.relative_times[-1] == 3.0


def test_isolated_episode_one_segment():
    fs = series(120)
    segs = extract_freezing_segments(fs, track((60.0, 63.0)))
    assert len(segs) == 1
    assert segs[0].anchor_s == 60.0
    assert segs[0].values[100] == fs.values[600]


def test_nearby_episodes_literal_window_rule():
    # onsets 5 s apart: the later window reaches back over the earlier episode,
    # the earlier window ends before the later onset
    segs = extract_freezing_segments(series(120), track((50.0, 51.0), (55.0, 56.0)))
    assert [s.anchor_s for s in segs] == [50.0]
    segs = extract_freezing_segments(series(120), track((50.0, 51.0), (52.0, 53.0)))
    assert segs == []


def test_window_outside_recording_excluded():
    assert extract_freezing_segments(series(30), track((5.0, 6.0), (28.0, 29.0))) == []


@given(st.integers(0, 2 ** 16))
def test_segments_match_brute_force_scan(seed):
    rng = np.random.default_rng(seed)
    duration = 300.0
    onsets = np.sort(rng.choice(np.arange(2.0, 290.0, 0.5), size=20, replace=False))
    spans, last = [], -1.0
    for on in onsets:
        if on <= last:
            continue
        off = min(on + rng.uniform(0.5, 4.0), duration - 1)
        spans.append((float(on), float(off)))
        last = off + 0.1
    segs = extract_freezing_segments(series(duration), track(*spans))
    assert [s.anchor_s for s in segs] == brute_isolated(spans, duration)


# ------------------------------------------------------------------ controls

def periodic_phase(n, rate=RATE, period_s=8.0):
    t = np.arange(n) / rate
    return np.angle(np.exp(1j * 2 * np.pi * t / period_s))


def test_control_anchored_at_matching_phase():
    fs = series(200)
    phase = periodic_phase(fs.values.size)
    ann = track((100.0, 103.0))
    fz = extract_freezing_segments(fs, ann)
    ct = match_control_segments(fs, phase, fz, ann)
    assert len(ct) == 1
    start = int(round(ct[0].anchor_s * RATE)) - 100
    target = phase[int(round(fz[0].anchor_s * RATE)) - 100]
    assert abs(np.angle(np.exp(1j * (phase[start] - target)))) <= 0.1
    assert ct[0].group == NORMAL_TURNING and ct[0].pair_anchor_s == 100.0


def test_no_fog_free_window_gives_no_controls():
    fs = series(40)
    # FOG every few seconds: no 13 s FOG-free window anywhere
    ann = track((0.0, 1.0), (12.0, 13.0), (20.0, 21.0), (27.0, 28.0), (33.0, 34.0))
    fz = [Segment(FREEZING, SPV, np.zeros(131), 12.0, RATE)]
    assert match_control_segments(fs, periodic_phase(400), fz, ann) == []


@given(st.integers(0, 2 ** 16))
def test_controls_never_overlap_fog(seed):
    rng = np.random.default_rng(seed)
    duration = 400.0
    onsets = np.sort(rng.uniform(15, 380, size=6))
    spans = []
    for on in onsets:
        if spans and on <= spans[-1][1] + 0.1:
            continue
        spans.append((float(on), float(on + rng.uniform(1, 5))))
    ann = track(*spans)
    fs = series(duration)
    phase = periodic_phase(fs.values.size, period_s=rng.uniform(4, 12))
    fz = extract_freezing_segments(fs, ann)
    ct = match_control_segments(fs, phase, fz, ann)
    for c in ct:
        lo, hi = c.anchor_s - 10.0, c.anchor_s + 3.0
        assert all(not (a <= hi and b >= lo) for a, b in spans)
    again = match_control_segments(fs, phase, fz, ann)
    assert [c.anchor_s for c in again] == [c.anchor_s for c in ct]


# ------------------------------------------------------------------ normalization

def seg(values, group=FREEZING, sid="S01"):
    return Segment(group, SPV, np.asarray(values, dtype=float), 0.0, RATE, sid)


def test_normalize_constant_flagged():
    out = normalize_segments([seg(np.full(131, 4.0)), seg(np.full(131, 4.0), NORMAL_TURNING)])
    assert all(s.constant and np.array_equal(s.values, np.zeros(131)) for s in out)


@given(st.floats(0.1, 10), st.floats(-10, 10), st.integers(0, 2 ** 16))
def test_normalize_affine_invariant(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    raw = [rng.normal(size=131) for _ in range(4)]
    a = normalize_segments([seg(v) for v in raw])
    b = normalize_segments([seg(alpha * v + beta) for v in raw])
    for x, y in zip(a, b):
        assert np.allclose(x.values, y.values, rtol=0, atol=1e-9)


def test_normalize_pooled_moments_per_subject():
    rng = np.random.default_rng(2)
    segs = [seg(rng.normal(3, 2, 131), sid=s) for s in ("A", "A", "B", "B", "B")]
    out = normalize_segments(segs)
    for sid in ("A", "B"):
        pooled = np.concatenate([s.values for s in out if s.subject_id == sid])
        assert abs(pooled.mean()) < 1e-9
        assert abs(pooled.std() - 1.0) < 1e-9


def test_normalize_needs_two():
    with pytest.raises(InsufficientDataError):
        normalize_segments([seg(np.zeros(131))])


# ------------------------------------------------------------------ t-test bands

def test_ttest_identical_groups():
    rng = np.random.default_rng(0)
    g = [seg(rng.normal(size=131)) for _ in range(10)]
    band = pointwise_ttest(g, g)
    assert np.all(band.p_value == 1.0) and np.all(band.t == 0.0)


def test_ttest_far_apart_groups():
    rng = np.random.default_rng(1)
    a = [seg(1e-3 * rng.normal(size=131)) for _ in range(30)]
    b = [seg(5 + 1e-3 * rng.normal(size=131)) for _ in range(30)]
    band = pointwise_ttest(a, b)
    assert np.all(band.p_value < 1e-6)
    assert band.separated().all()


def test_ttest_ci_half_width_closed_form():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(100, 5))
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)  # sample sd exactly 1
    a = [seg(r) for r in x]
    band = pointwise_ttest(a, a)
    lo, hi = band.ci95_a
    assert np.allclose((hi - lo) / 2, 0.196, atol=1e-6)


def test_ttest_matches_scipy_welch():
    rng = np.random.default_rng(3)
    xa = rng.normal(0, 1, size=(12, 20))
    xb = rng.normal(0.5, 2, size=(9, 20))
    band = pointwise_ttest([seg(r) for r in xa], [seg(r) for r in xb])
    ref = stats.ttest_ind(xa, xb, axis=0, equal_var=False)
    assert np.allclose(band.p_value, ref.pvalue, rtol=1e-10)
    assert np.allclose(band.t, ref.statistic, rtol=1e-10)


@given(st.integers(0, 2 ** 16))
def test_ttest_symmetry_and_separation_implies_significance(seed):
    rng = np.random.default_rng(seed)
    a = [seg(rng.normal(0, 1, 40)) for _ in range(int(rng.integers(2, 15)))]
    b = [seg(rng.normal(rng.uniform(0, 2), 1, 40)) for _ in range(int(rng.integers(2, 15)))]
    ab, ba = pointwise_ttest(a, b), pointwise_ttest(b, a)
    assert np.array_equal(ab.p_value, ba.p_value)
    assert np.array_equal(ab.t, -ba.t)
    assert np.all((ab.p_value >= 0) & (ab.p_value <= 1))
    # disjoint bands give |t| > 1.96 * (se_a + se_b) / hypot(se_a, se_b) >= 1.96; that
    # implies p < 0.05 wherever the Welch critical value is below that bound
    sep = ab.separated()
    bound = 1.96 * (ab.se_a + ab.se_b) / np.hypot(ab.se_a, ab.se_b)
    assert np.all(np.abs(ab.t[sep]) >= bound[sep])
    covered = sep & (stats.t.ppf(0.975, ab.df) < bound)
    assert np.all(ab.p_value[covered] < 0.05)


def test_ttest_needs_two_per_group():
    with pytest.raises(InsufficientDataError):
        pointwise_ttest([seg(np.zeros(5))], [seg(np.zeros(5)), seg(np.ones(5))])


# ------------------------------------------------------------------ Wilcoxon, Bonferroni

def test_wilcoxon_six_positive_exact():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5, 6]) == pytest.approx(2 / 64, abs=1e-15)


def test_wilcoxon_antisymmetric():
    assert wilcoxon_signed_rank([1, -1, 2, -2, 3, -3]) == 1.0


def test_wilcoxon_all_zero_convention():
    assert wilcoxon_signed_rank([0, 0, 0, 0, 0]) == 1.0


def test_wilcoxon_too_few():
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank([1, 2, 3])


def brute_wilcoxon(d):
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    r = stats.rankdata(np.abs(d))
    w = r[d > 0].sum()
    n = d.size
    signs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    ws = (signs * r).sum(axis=1)
    lo, hi = np.mean(ws <= w + 1e-9), np.mean(ws >= w - 1e-9)
    return min(1.0, 2 * min(lo, hi))


@given(st.lists(st.integers(-6, 6), min_size=5, max_size=12))
def test_wilcoxon_exact_matches_enumeration(d):
    if np.count_nonzero(d) < 5:
        return
    assert wilcoxon_signed_rank(d) == pytest.approx(brute_wilcoxon(d), abs=1e-12)


def test_wilcoxon_normal_approx_near_exact():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.normal(size=30)
        approx = wilcoxon_signed_rank(d)
        exact = stats.wilcoxon(d, method="exact").pvalue
        assert abs(approx - exact) < 0.01


def test_bonferroni():
    assert bonferroni(0.01, 5) == pytest.approx(0.05)
    assert bonferroni(0.5, 5) == 1.0
    p = np.array([0.001, 0.02, 0.3])
    assert np.array_equal(bonferroni(p, 5), np.array([bonferroni(x, 5) for x in p]))
