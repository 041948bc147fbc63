"""Numeric kernels shared by the feature extractors.

Filtering, sliding median, wavelet baseline removal, Morlet time-frequency
power, analytic-signal phase and a small seeded k-means.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pywt
from scipy import fft as sp_fft
from scipy import integrate, ndimage, signal

from .errors import ParameterError, ValidationError

LOWPASS = "lowpass"
BANDPASS = "bandpass"
HIGHPASS = "highpass"
ZERO_PHASE = "zero_phase"
CAUSAL = "causal"


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth filter description.

    ``order`` is the Butterworth prototype order; a band-pass therefore has
    twice as many poles.
    """

    kind: str
    cutoff_hz: tuple
    order: int = 4
    phase: str = ZERO_PHASE

    def __post_init__(self):
        cut = self.cutoff_hz
        cut = (float(cut),) if np.isscalar(cut) else tuple(float(c) for c in cut)
        object.__setattr__(self, "cutoff_hz", cut)
        if self.kind not in (LOWPASS, BANDPASS, HIGHPASS):
            raise ParameterError(f"unknown filter kind {self.kind!r}")
        if self.phase not in (ZERO_PHASE, CAUSAL):
            raise ParameterError(f"unknown filter phase {self.phase!r}")
        if self.order < 1:
            raise ParameterError("filter order must be >= 1")
        need = 2 if self.kind == BANDPASS else 1
        if len(cut) != need:
            raise ParameterError(f"{self.kind} filter needs {need} corner frequencies")
        if need == 2 and not cut[0] < cut[1]:
            raise ParameterError("band-pass corners must be increasing")

    def sos(self, rate_hz: float) -> np.ndarray:
        nyq = rate_hz / 2.0
        for c in self.cutoff_hz:
            if not 0 < c < nyq:
                raise ParameterError(
                    f"corner {c} Hz outside (0, {nyq}) for rate {rate_hz} Hz"
                )
        wn = self.cutoff_hz[0] if len(self.cutoff_hz) == 1 else self.cutoff_hz
        return signal.butter(self.order, wn, btype=self.kind, fs=rate_hz, output="sos")


def apply_filter(x, rate_hz: float, spec: FilterSpec) -> np.ndarray:
    """Filter ``x`` forward-backward (zero phase) or forward only (causal)."""
    x = np.asarray(x, dtype=float)
    sos = spec.sos(rate_hz)
    if x.size <= 3 * spec.order:
        raise ParameterError(f"signal of {x.size} samples too short for order {spec.order}")
    if spec.phase == CAUSAL:
        return signal.sosfilt(sos, x)
    padlen = min(3 * (2 * len(sos) + 1), x.size - 1)
    return signal.sosfiltfilt(sos, x, padlen=padlen)


class CausalFilter:
    """Stateful causal filter; feeding chunks equals filtering the concatenation."""

    def __init__(self, spec: FilterSpec, rate_hz: float):
        self.sos = spec.sos(rate_hz)
        self.reset()

    def reset(self):
        self.zi = np.zeros((self.sos.shape[0], 2))

    def process(self, chunk) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=float)
        if chunk.size == 0:
            return chunk
        y, self.zi = signal.sosfilt(self.sos, chunk, zi=self.zi)
        return y


def median_window_samples(rate_hz: float, window_ms: float) -> int:
    n = max(1, math.ceil(window_ms * rate_hz / 1000.0 - 1e-9))
    return n if n % 2 else n + 1


def median_filter(x, rate_hz: float, window_ms: float) -> np.ndarray:
    """Centered sliding median; the window is truncated at the signal edges."""
    x = np.asarray(x, dtype=float)
    w = median_window_samples(rate_hz, window_ms)
    h = w // 2
    if w == 1 or x.size == 0:
        return x.copy()
    out = ndimage.median_filter(x, size=w, mode="nearest")
    n = x.size
    for i in range(min(h, n)):
        out[i] = np.median(x[: min(n, i + h + 1)])
    for i in range(max(h, n - h), n):
        out[i] = np.median(x[max(0, i - h):])
    return out


def causal_median_filter(x, rate_hz: float, window_ms: float) -> np.ndarray:
    """Trailing-window median (only past and present samples)."""
    x = np.asarray(x, dtype=float)
    w = median_window_samples(rate_hz, window_ms)
    if w == 1 or x.size == 0:
        return x.copy()
    # origin shifts the footprint so sample i sees x[i-w+1 .. i]
    out = ndimage.median_filter(x, size=w, mode="nearest", origin=w // 2)
    for i in range(min(w - 1, x.size)):
        out[i] = np.median(x[: i + 1])
    return out


def wavelet_baseline(x, level: int = 10, wavelet: str = "db4") -> np.ndarray:
    """Approximation-only reconstruction at ``level``: the slow baseline of ``x``."""
    x = np.array(x, dtype=float)  # pywt rejects read-only buffers
    if level < 1:
        raise ParameterError("wavelet level must be >= 1")
    if x.size < 2 ** level:
        raise ParameterError(f"signal of {x.size} samples shorter than 2**{level}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coeffs = pywt.wavedec(x, wavelet, level=level, mode="symmetric")
        coeffs = [coeffs[0]] + [np.zeros_like(c) for c in coeffs[1:]]
        base = pywt.waverec(coeffs, wavelet, mode="symmetric")
    return base[: x.size]


def wavelet_baseline_remove(x, level: int = 10, wavelet: str = "db4") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x - wavelet_baseline(x, level, wavelet)


# ------------------------------------------------------------------ Morlet power

@dataclass(frozen=True)
class TimeFreqPower:
    freqs_hz: np.ndarray
    times_s: np.ndarray
    power: np.ndarray  # (freq, time), squared signal units

    def __post_init__(self):
        if self.power.shape != (self.freqs_hz.size, self.times_s.size):
            raise ValidationError("power matrix shape does not match freqs x times")


def log_freqs(f_lo: float, f_hi: float, n_freqs: int) -> np.ndarray:
    return np.geomspace(f_lo, f_hi, n_freqs)


def _check_band(band, rate_hz, cycles):
    f_lo, f_hi = float(band[0]), float(band[1])
    if not 0 < f_lo < f_hi < rate_hz / 2:
        raise ParameterError(f"band {band} outside (0, {rate_hz / 2}) Hz")
    if cycles < 3:
        raise ParameterError("Morlet cycles must be >= 3")
    return f_lo, f_hi


def morlet_power(x, rate_hz: float, freqs_hz, cycles: float = 6.0) -> TimeFreqPower:
    """Per-sample Morlet power at each frequency.

    The wavelet has unit gain at its center frequency, and power is
    ``2 |W|^2`` so a sinusoid of amplitude A at the center frequency reads
    A**2 / 2 (its mean square). Edges use reflected padding.
    """
    x = np.asarray(x, dtype=float)
    freqs = np.asarray(freqs_hz, dtype=float)
    n = x.size
    sigma_t = cycles / (2 * np.pi * freqs.min())
    pad = min(n - 1, int(math.ceil(5 * sigma_t * rate_hz)))
    xp = np.pad(x, pad, mode="reflect") if pad > 0 else x
    nfft = sp_fft.next_fast_len(xp.size)
    spec = sp_fft.fft(xp, nfft)
    f_axis = sp_fft.fftfreq(nfft, 1.0 / rate_hz)
    power = np.empty((freqs.size, n))
    for i, fc in enumerate(freqs):
        sigma_f = fc / cycles
        gain = np.where(f_axis > 0, np.exp(-0.5 * ((f_axis - fc) / sigma_f) ** 2), 0.0)
        w = sp_fft.ifft(spec * gain)[pad: pad + n]
        power[i] = 2.0 * (w.real ** 2 + w.imag ** 2)
    return TimeFreqPower(freqs, np.arange(n) / rate_hz, power)


def morlet_band_power(x, rate_hz: float, band, n_freqs: int = 20, cycles: float = 6.0) -> np.ndarray:
    """Mean Morlet power across ``n_freqs`` log-spaced frequencies in ``band``."""
    f_lo, f_hi = _check_band(band, rate_hz, cycles)
    tf = morlet_power(x, rate_hz, log_freqs(f_lo, f_hi, n_freqs), cycles)
    return tf.power.mean(axis=0)


@lru_cache(maxsize=None)
def _log_gain_integral(cycles: float) -> float:
    # Integral over log-frequency of the squared wavelet gain seen by a fixed tone.
    val, _ = integrate.quad(lambda v: math.exp(-(cycles ** 2) * (math.exp(v) - 1.0) ** 2),
                            -3.0, 3.0, limit=200)
    return val


def morlet_band_energy(x, rate_hz: float, band, n_freqs: int = 20, cycles: float = 6.0) -> np.ndarray:
    """Absolute power inside ``band`` per sample.

    Integrates Morlet power over log-frequency and divides by the constant
    log-frequency footprint of the wavelet family, so a tone inside the band
    reads its mean square and broadband noise reads its in-band variance.
    """
    f_lo, f_hi = _check_band(band, rate_hz, cycles)
    freqs = log_freqs(f_lo, f_hi, n_freqs)
    tf = morlet_power(x, rate_hz, freqs, cycles)
    du = math.log(f_hi / f_lo) / (n_freqs - 1)
    weights = np.full(n_freqs, du)
    weights[[0, -1]] *= 0.5
    return weights @ tf.power / _log_gain_integral(float(cycles))


# ---------------------------------------------------------------- Hilbert phase

def hilbert_phase(x) -> np.ndarray:
    """Instantaneous phase of the analytic signal, wrapped to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    if x.size < 16:
        raise ParameterError("hilbert_phase needs at least 16 samples")
    if not np.any(x):
        raise ValidationError("degenerate amplitude: signal is identically zero")
    phase = np.angle(signal.hilbert(x))
    phase[phase <= -np.pi] = np.pi
    return phase


# ---------------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    n_repairs: int
    inertia_history: list = field(default_factory=list)


def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers, dtype=float)


def _assign(points, centroids, current=None):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)  # first minimum = lowest index
    if current is not None:
        keep = d2[np.arange(points.shape[0]), current] <= d2[np.arange(points.shape[0]), labels]
        labels = np.where(keep, current, labels)
    return labels, d2


def kmeans(points, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Lloyd's k-means with seeded k-means++ initialisation.

    Assignment ties go to the lowest cluster index, except that a point keeps
    its current cluster when that cluster is among the tied nearest. An empty
    cluster is reseeded at the point farthest from its own centroid.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > n:
        raise ParameterError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(pts, k, rng)
    labels, d2 = _assign(pts, centroids)
    history = []
    repairs = 0
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        empty = [j for j in range(k) if not np.any(labels == j)]
        if empty:
            own = d2[np.arange(n), labels].copy()
            for j in empty:
                far = int(np.argmax(own))
                labels[far] = j
                own[far] = -1.0
                repairs += 1
        centroids = np.array([pts[labels == j].mean(axis=0) for j in range(k)])
        inertia = float(((pts - centroids[labels]) ** 2).sum())
        history.append(inertia)
        new_labels, d2 = _assign(pts, centroids, labels)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(((pts - centroids[labels]) ** 2).sum())
    return KMeansResult(labels, centroids, inertia, n_iter, repairs, history)
