import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fft_band_power, sine
from fogsense import dsp
from fogsense.dsp import (
    BANDPASS, CAUSAL, LOWPASS, CausalFilter, FilterSpec, apply_filter, hilbert_phase, kmeans,
    median_filter, morlet_band_energy, morlet_band_power, wavelet_baseline_remove,
)
from fogsense.errors import ParameterError, ValidationError

RATE = 500.0


def amplitude(x, freq, rate):
    """Amplitude of the ``freq`` component by projection on sin/cos."""
    t = np.arange(x.size) / rate
    c = 2 * np.mean(x * np.cos(2 * np.pi * freq * t))
    s = 2 * np.mean(x * np.sin(2 * np.pi * freq * t))
    return float(np.hypot(c, s))


# ------------------------------------------------------------------ filtering

def test_bandpass_rejects_dc():
    x = np.full(5000, 3.0)
    y = apply_filter(x, RATE, FilterSpec(BANDPASS, (0.5, 45.0)))
    assert np.max(np.abs(y[1000:-1000])) < 1e-3 * 3.0


def test_lowpass_preserves_passband_sine():
    x = sine(10.0, RATE, 4.0)
    y = apply_filter(x, RATE, FilterSpec(LOWPASS, 30.0))
    assert abs(amplitude(y, 10.0, RATE) - 1.0) < 0.02


def test_lowpass_attenuates_stopband_sine():
    x = sine(100.0, RATE, 4.0)
    y = apply_filter(x, RATE, FilterSpec(LOWPASS, 30.0, order=4))
    assert 20 * np.log10(amplitude(y, 100.0, RATE)) <= -20


def test_corner_at_nyquist_rejected():
    with pytest.raises(ParameterError):
        apply_filter(np.zeros(1000), RATE, FilterSpec(LOWPASS, 250.0))
    with pytest.raises(ParameterError):
        FilterSpec(LOWPASS, 30.0, order=0)


def test_zero_phase_filter_twice_is_nearly_idempotent():
    x = sine(8.0, RATE, 4.0)
    spec = FilterSpec(LOWPASS, 30.0)
    once = apply_filter(x, RATE, spec)
    twice = apply_filter(once, RATE, spec)
    assert abs(amplitude(twice, 8.0, RATE) / amplitude(once, 8.0, RATE) - 1.0) <= 0.01


def test_zero_phase_has_no_delay():
    x = sine(5.0, RATE, 4.0)
    y = apply_filter(x, RATE, FilterSpec(LOWPASS, 30.0))
    mid = slice(500, 1500)
    assert np.max(np.abs(y[mid] - x[mid])) < 1e-3


@given(st.integers(1, 400), st.integers(0, 2 ** 16))
def test_causal_filter_chunking_equals_batch(split, seed):
    x = np.random.default_rng(seed).normal(size=800)
    spec = FilterSpec(LOWPASS, 30.0, phase=CAUSAL)
    batch = apply_filter(x, RATE, spec)
    f = CausalFilter(spec, RATE)
    streamed = np.concatenate([f.process(x[:split]), f.process(x[split:])])
    assert np.allclose(streamed, batch, rtol=0, atol=1e-12)


def test_causal_filter_ignores_future():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1000)
    y = x.copy()
    y[600:] = 1e6
    spec = FilterSpec(LOWPASS, 30.0, phase=CAUSAL)
    assert np.array_equal(apply_filter(x, RATE, spec)[:600], apply_filter(y, RATE, spec)[:600])


# ------------------------------------------------------------------ median

def brute_median(x, w):
    h = w // 2
    return np.array([np.median(x[max(0, i - h): i + h + 1]) for i in range(x.size)])


def test_median_constant_unchanged():
    x = np.full(200, 2.5)
    assert np.array_equal(median_filter(x, RATE, 50.0), x)


def test_median_removes_spike():
    x = np.ones(200)
    x[100] = 50.0
    assert dsp.median_window_samples(RATE, 50.0) == 25
    assert np.array_equal(median_filter(x, RATE, 50.0), np.ones(200))


@given(st.integers(0, 2 ** 16), st.integers(1, 80))
def test_median_matches_brute_force(seed, window_ms):
    x = np.random.default_rng(seed).normal(size=150)
    w = dsp.median_window_samples(RATE, window_ms)
    assert w % 2 == 1
    assert np.array_equal(median_filter(x, RATE, window_ms), brute_median(x, w))


def test_causal_median_matches_trailing_brute_force():
    x = np.random.default_rng(5).normal(size=120)
    w = dsp.median_window_samples(RATE, 50.0)
    oracle = np.array([np.median(x[max(0, i - w + 1): i + 1]) for i in range(x.size)])
    assert np.array_equal(dsp.causal_median_filter(x, RATE, 50.0), oracle)


# ------------------------------------------------------------------ wavelet baseline

def test_wavelet_removes_slow_ramp():
    t = np.arange(int(60 * RATE)) / RATE
    ramp = 0.05 * t
    res = wavelet_baseline_remove(ramp, 10)
    assert np.mean(res ** 2) < 0.01 * np.mean(ramp ** 2)


def test_wavelet_zero_in_zero_out():
    assert np.array_equal(wavelet_baseline_remove(np.zeros(4096), 10), np.zeros(4096))


def test_wavelet_keeps_fast_component():
    t = np.arange(int(60 * RATE)) / RATE
    x = 0.05 * t + np.sin(2 * np.pi * 5.0 * t)
    res = wavelet_baseline_remove(x, 10)
    mid = slice(5000, -5000)
    assert abs(amplitude(res[mid], 5.0, RATE) - 1.0) < 0.05
    assert abs(res[mid].mean()) < 0.05


def test_wavelet_short_signal_rejected():
    with pytest.raises(ParameterError):
        wavelet_baseline_remove(np.zeros(1000), 10)


# ------------------------------------------------------------------ Morlet power

def test_morlet_5hz_sine_band_contrast():
    x = sine(5.0, RATE, 10.0)
    hi = morlet_band_power(x, RATE, (3.0, 8.0)).mean()
    lo = morlet_band_power(x, RATE, (0.5, 3.0)).mean()
    assert hi >= 20 * lo


def test_morlet_1hz_sine_out_of_band():
    x = sine(1.0, RATE, 20.0)
    theta = morlet_band_power(x, RATE, (4.0, 7.0)).mean()
    loco = morlet_band_power(x, RATE, (0.5, 3.0)).mean()
    assert theta < 0.05 * loco


def test_morlet_zero_signal():
    assert np.array_equal(morlet_band_power(np.zeros(2000), RATE, (4.0, 7.0)), np.zeros(2000))


def test_morlet_band_outside_nyquist():
    with pytest.raises(ParameterError):
        morlet_band_power(np.zeros(2000), RATE, (100.0, 300.0))
    with pytest.raises(ParameterError):
        morlet_band_power(np.zeros(2000), RATE, (4.0, 7.0), cycles=2)


@given(st.floats(0.01, 100.0), st.integers(0, 2 ** 16))
def test_morlet_scale_equivariant(alpha, seed):
    x = np.random.default_rng(seed).normal(size=1500)
    p = morlet_band_power(x, RATE, (4.0, 7.0))
    q = morlet_band_power(alpha * x, RATE, (4.0, 7.0))
    assert np.allclose(q, alpha ** 2 * p, rtol=1e-9, atol=0)
    assert np.all(p >= 0)


@pytest.mark.parametrize("freq", [1.0, 1.5, 2.0])
def test_band_energy_tone_reads_mean_square(freq):
    # tones at least three wavelet bandwidths (f / cycles) inside the band edges
    x = sine(freq, RATE, 40.0, amp=2.0)
    e = morlet_band_energy(x, RATE, (0.5, 3.0))[5000:-5000].mean()
    oracle = fft_band_power(x, RATE, (0.5, 3.0))
    assert abs(e / oracle - 1.0) < 0.05


def test_band_energy_white_noise_matches_fft():
    x = np.random.default_rng(3).normal(size=int(60 * RATE))
    e = morlet_band_energy(x, RATE, (3.0, 8.0)).mean()
    oracle = fft_band_power(x, RATE, (3.0, 8.0))
    assert abs(e / oracle - 1.0) < 0.1


# ------------------------------------------------------------------ Hilbert phase

def test_hilbert_phase_slope():
    t = np.arange(int(60 * RATE)) / RATE
    ph = np.unwrap(hilbert_phase(np.cos(2 * np.pi * 0.25 * t)))
    n = t.size
    mid = slice(n // 10, n - n // 10)
    slope = np.polyfit(t[mid], ph[mid], 1)[0]
    assert abs(slope / (2 * np.pi * 0.25) - 1.0) < 0.01


def test_hilbert_quadrature_offset():
    t = np.arange(int(20 * RATE)) / RATE
    a = hilbert_phase(np.cos(2 * np.pi * t))
    b = hilbert_phase(np.sin(2 * np.pi * t))
    d = np.angle(np.exp(1j * (a - b)))[2000:-2000]
    assert np.max(np.abs(d - np.pi / 2)) < 0.02


def test_hilbert_phase_wrapped_range():
    ph = hilbert_phase(sine(3.0, RATE, 4.0))
    assert np.all(ph > -np.pi) and np.all(ph <= np.pi)


def test_hilbert_zero_signal_error():
    with pytest.raises(ValidationError):
        hilbert_phase(np.zeros(100))
    with pytest.raises(ParameterError):
        hilbert_phase(np.ones(8))


@given(st.integers(0, 2 ** 16))
def test_hilbert_amplitude_invariant(seed):
    x = np.random.default_rng(seed).normal(size=256)
    assert np.allclose(hilbert_phase(2 * x), hilbert_phase(x), rtol=0, atol=1e-9)


# ------------------------------------------------------------------ k-means

def test_kmeans_separated_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, size=(50, 2))
    b = rng.normal(10, 1, size=(50, 2))
    res = kmeans(np.vstack([a, b]), 2, seed=1)
    truth = np.r_[np.zeros(50), np.ones(50)]
    agree = max(np.mean(res.labels == truth), np.mean(res.labels != truth))
    assert agree == 1.0


def test_kmeans_single_cluster_is_mean():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    res = kmeans(pts, 1, seed=0)
    assert np.allclose(res.centroids[0], pts.mean(axis=0))


def test_kmeans_duplicate_points_repair():
    res = kmeans(np.ones((10, 2)), 2, seed=0)
    assert res.n_repairs == 1
    assert res.inertia == 0.0


def test_kmeans_k_exceeds_n():
    with pytest.raises(ParameterError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


@given(st.integers(0, 2 ** 16), st.integers(2, 5))
def test_kmeans_inertia_non_increasing_and_deterministic(seed, k):
    pts = np.random.default_rng(seed).normal(size=(60, 2))
    res = kmeans(pts, k, seed=seed)
    h = np.asarray(res.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    again = kmeans(pts, k, seed=seed)
    assert np.array_equal(res.labels, again.labels)
