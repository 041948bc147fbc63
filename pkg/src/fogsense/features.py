"""Per-sample physiological features for each modality.

Every extractor returns a :class:`FeatureSeries` on the clock of its source
channels. Missing samples are NaN and reported through ``missing``; no
extractor fills gaps with zeros.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from . import dsp
from .errors import AlignmentError, ConfigError, ParameterError, ValidationError
from .signalio import ACCEL, ACCEL_AXES, ECG, EEG, EOG, FEET, FOOTSWITCH, PLACEMENTS, Channel

log = logging.getLogger(__name__)

THETA_POWER = "THETA_POWER"
SPV = "SPV"
HEART_RATE = "HEART_RATE"
FREEZE_INDEX = "FREEZE_INDEX"
STRIDE_DURATION = "STRIDE_DURATION"

UNITS = {
    THETA_POWER: "uV^2",
    SPV: "signal-units/s",
    HEART_RATE: "bpm",
    FREEZE_INDEX: "ratio",
    STRIDE_DURATION: "s",
}


@dataclass(eq=False)
class FeatureSeries:
    kind: str
    name: str
    rate_hz: float
    values: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        v = self.values[~np.isnan(self.values)]
        if self.kind == FREEZE_INDEX and np.any(v < 0):
            raise ValidationError("freeze index must be non-negative")
        if self.kind == HEART_RATE and np.any((v <= 20) | (v >= 250)):
            raise ValidationError("heart rate outside (20, 250) bpm")
        if self.kind == STRIDE_DURATION and np.any(v <= 0):
            raise ValidationError("stride duration must be positive")

    @property
    def units(self) -> str:
        return UNITS[self.kind]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def __len__(self):
        return self.values.size

    def times(self) -> np.ndarray:
        return np.arange(self.values.size) / self.rate_hz


@dataclass(frozen=True)
class KeySwitchSet:
    """Switch indices whose activation marks floor contact, per foot."""

    left: tuple
    right: tuple

    def __post_init__(self):
        object.__setattr__(self, "left", tuple(int(i) for i in self.left))
        object.__setattr__(self, "right", tuple(int(i) for i in self.right))
        if not self.left or not self.right:
            raise ValidationError("each foot needs at least one key switch")

    def for_foot(self, foot: str) -> tuple:
        return self.left if foot == "left" else self.right


@dataclass(frozen=True)
class FootswitchConfig:
    keys: KeySwitchSet
    thresholds: dict  # (foot, switch_index) -> volts

    def threshold(self, foot: str, index: int) -> float:
        try:
            return self.thresholds[(foot, int(index))]
        except KeyError:
            raise ConfigError(f"no threshold for {foot} switch {index}") from None

    def to_dict(self) -> dict:
        return {
            "key_switches": {"left": list(self.keys.left), "right": list(self.keys.right)},
            "thresholds": {
                foot: {str(i): v for (f, i), v in sorted(self.thresholds.items()) if f == foot}
                for foot in FEET
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FootswitchConfig":
        try:
            keys = KeySwitchSet(d["key_switches"]["left"], d["key_switches"]["right"])
            thr = {
                (foot, int(i)): float(v)
                for foot in FEET
                for i, v in d["thresholds"][foot].items()
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed footswitch config: {exc}") from exc
        return cls(keys, thr)


def load_footswitch_configs(path) -> dict:
    """Read ``{subject_id: FootswitchConfig}`` from a JSON file."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return {sid: FootswitchConfig.from_dict(d) for sid, d in data.items()}


def write_footswitch_configs(configs: dict, path) -> None:
    data = {sid: cfg.to_dict() for sid, cfg in sorted(configs.items())}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _same_clock(*channels):
    ref = channels[0]
    for c in channels[1:]:
        if c.rate_hz != ref.rate_hz or c.n_samples != ref.n_samples:
            raise AlignmentError(
                f"channels {ref.label!r} and {c.label!r} differ in rate or length"
            )


# --------------------------------------------------------------------- EEG theta

def theta_power(fz: Channel, cz: Channel, band=(4.0, 7.0), prefilter=(0.5, 45.0),
                n_freqs: int = 20, cycles: float = 6.0) -> FeatureSeries:
    """Theta-band Morlet power of the Fz - Cz derivation, in uV^2."""
    _same_clock(fz, cz)
    diff = fz.samples - cz.samples
    if not np.any(diff):
        return FeatureSeries(THETA_POWER, "theta", fz.rate_hz, np.zeros(diff.size))
    spec = dsp.FilterSpec(dsp.BANDPASS, prefilter, order=4)
    y = dsp.apply_filter(diff, fz.rate_hz, spec) * 1e6
    p = dsp.morlet_band_power(y, fz.rate_hz, band, n_freqs, cycles)
    return FeatureSeries(THETA_POWER, "theta", fz.rate_hz, p)


# ------------------------------------------------------------------ EOG velocity

def preprocess_eog(x, rate_hz: float, lowpass_hz: float = 30.0, median_ms: float = 50.0,
                   baseline_level: int = 10) -> np.ndarray:
    """30 Hz low-pass, 50 ms median filter, then wavelet baseline removal."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 ** baseline_level:
        raise ParameterError(f"EOG of {x.size} samples shorter than 2**{baseline_level}")
    y = dsp.apply_filter(x, rate_hz, dsp.FilterSpec(dsp.LOWPASS, lowpass_hz, order=4))
    y = dsp.median_filter(y, rate_hz, median_ms)
    return dsp.wavelet_baseline_remove(y, baseline_level)


def central_velocity(y, rate_hz: float) -> np.ndarray:
    return np.gradient(np.asarray(y, dtype=float)) * rate_hz


def cluster_slow_phases(velocity, rate_hz: float, seed: int = 0, blink_pct: float = 99.5,
                        guard_ms: float = 50.0, min_speed: float = 1e-9) -> np.ndarray:
    """Boolean mask of slow-phase samples from two-cluster k-means.

    Clusters |velocity| and |acceleration| (each scaled by its standard
    deviation). Samples above the ``blink_pct`` velocity percentile never count
    as slow, and the fast cluster is widened by ``guard_ms`` on each side.
    A fast cluster whose mean speed is below ``min_speed`` is round-off, not
    quick phases.
    """
    v = np.asarray(velocity, dtype=float)
    speed = np.abs(v)
    accel = np.abs(np.gradient(v) * rate_hz)
    blink = speed > np.percentile(speed, blink_pct)
    keep = ~blink
    feats = np.column_stack([speed, accel])[keep]
    scale = feats.std(axis=0)
    scale[scale == 0] = 1.0
    feats = feats / scale
    slow = np.zeros(v.size, dtype=bool)
    if feats.shape[0] < 2:
        return slow
    res = dsp.kmeans(feats, 2, seed)
    means = [speed[keep][res.labels == j].mean() for j in range(2)]
    slow_label = int(np.argmin(means))
    fast_mean, slow_mean = max(means), min(means)
    if fast_mean < 2.0 * slow_mean or fast_mean <= min_speed:
        # no separable quick phases: everything but blinks is slow
        slow[keep] = True
    else:
        slow[np.flatnonzero(keep)[res.labels == slow_label]] = True
    guard = int(round(guard_ms * rate_hz / 1000.0))
    if guard > 0:
        fast = ndimage.binary_dilation(~slow, structure=np.ones(2 * guard + 1, dtype=bool))
        slow &= ~fast
    return slow


def eog_velocity(eog_h: Channel) -> np.ndarray:
    """Central-difference velocity of the preprocessed horizontal EOG."""
    return central_velocity(preprocess_eog(eog_h.samples, eog_h.rate_hz), eog_h.rate_hz)


def slow_phase_velocity(eog_h: Channel, seed: int = 0) -> FeatureSeries:
    """Eye velocity on slow-phase samples; quick phases and blinks are missing."""
    if eog_h.kind != EOG:
        raise ValidationError(f"channel {eog_h.label!r} is not EOG")
    vel = eog_velocity(eog_h)
    slow = cluster_slow_phases(vel, eog_h.rate_hz, seed)
    out = np.where(slow, vel, np.nan)
    return FeatureSeries(SPV, "spv", eog_h.rate_hz, out)


def turn_direction(velocity, rate_hz: float, window_s: float = 2.0) -> np.ndarray:
    """+1 (clockwise) / -1 (counter-clockwise) from the sign of the centered median velocity."""
    v = np.asarray(velocity, dtype=float)
    w = dsp.median_window_samples(rate_hz, window_s * 1000.0)
    med = ndimage.median_filter(np.nan_to_num(v), size=w, mode="nearest")
    return np.where(med < 0, -1, 1).astype(np.int8)


def merge_turn_directions(spv: FeatureSeries, direction) -> FeatureSeries:
    """Negate SPV during counter-clockwise turning so both directions share a sign."""
    d = np.asarray(direction)
    if d.shape != spv.values.shape:
        raise AlignmentError("direction series not aligned with SPV")
    vals = np.where(d < 0, -spv.values, spv.values)
    return FeatureSeries(spv.kind, spv.name, spv.rate_hz, vals, dict(spv.flags))


def turning_oscillation(spv_signed: FeatureSeries, cutoff_hz: float = 1.0) -> np.ndarray:
    """Smooth turning oscillation from signed SPV (gaps interpolated, low-passed)."""
    v = spv_signed.values
    ok = ~np.isnan(v)
    if ok.sum() < 2:
        raise ValidationError("too few SPV samples to derive turning oscillation")
    idx = np.arange(v.size)
    filled = np.interp(idx, idx[ok], v[ok])
    spec = dsp.FilterSpec(dsp.LOWPASS, cutoff_hz, order=4)
    return dsp.apply_filter(filled, spv_signed.rate_hz, spec)


def turning_phase(spv_signed: FeatureSeries, cutoff_hz: float = 1.0) -> np.ndarray:
    return dsp.hilbert_phase(turning_oscillation(spv_signed, cutoff_hz))


# ------------------------------------------------------------------ ECG heart rate

def _pt_stages(ecg, rate_hz):
    bp = dsp.apply_filter(ecg, rate_hz, dsp.FilterSpec(dsp.BANDPASS, (5.0, 15.0), order=2))
    kernel = np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * rate_hz / 8.0
    der = np.convolve(bp, kernel, mode="same")
    sq = der ** 2
    win = max(1, int(round(0.150 * rate_hz)))
    mwi = ndimage.uniform_filter1d(sq, win, mode="nearest")
    return bp, der, mwi


def pan_tompkins(ecg, rate_hz: float) -> np.ndarray:
    """R-peak sample indices by the Pan-Tompkins procedure.

    Band-pass 5-15 Hz, derivative, squaring and 150 ms moving integration,
    followed by dual adaptive thresholds with T-wave rejection and search-back.
    Filters run forward-backward, so no group-delay correction is needed.
    """
    x = np.asarray(ecg, dtype=float)
    if x.size < int(rate_hz) or not np.any(x - x.mean()):
        return np.array([], dtype=int)
    bp, der, mwi = _pt_stages(x, rate_hz)
    refractory = int(round(0.2 * rate_hz))
    peaks, _ = signal.find_peaks(mwi, distance=refractory)
    if peaks.size == 0:
        return np.array([], dtype=int)
    init = mwi[: int(2 * rate_hz)]
    spki = init.max() / 3.0
    npki = init.mean() / 2.0
    half = int(round(0.075 * rate_hz))

    def slope(p):
        return np.abs(der[max(0, p - half): p + half + 1]).max()

    qrs = []
    rr_hist = []
    last_slope = None
    pending = []  # (index, height) of sub-threshold peaks since the last QRS
    for p in peaks:
        h = mwi[p]
        if qrs and rr_hist:
            rr_avg = np.mean(rr_hist[-8:])
            if p - qrs[-1] > 1.66 * rr_avg and pending:
                th2 = 0.5 * (npki + 0.25 * (spki - npki))
                cands = [(ph, pi) for pi, ph in pending if pi - qrs[-1] > refractory and ph > th2]
                if cands:
                    ph, pi = max(cands)
                    rr_hist.append(pi - qrs[-1])
                    qrs.append(pi)
                    last_slope = slope(pi)
                    spki = 0.25 * ph + 0.75 * spki
                    pending = [(qi, qh) for qi, qh in pending if qi > pi]
        th1 = npki + 0.25 * (spki - npki)
        if h > th1:
            s = slope(p)
            if qrs and p - qrs[-1] < 0.36 * rate_hz and last_slope is not None and s < 0.5 * last_slope:
                npki = 0.125 * h + 0.875 * npki
                pending.append((p, h))
                continue
            if qrs:
                rr_hist.append(p - qrs[-1])
            qrs.append(p)
            last_slope = s
            spki = 0.125 * h + 0.875 * spki
            pending = []
        else:
            npki = 0.125 * h + 0.875 * npki
            pending.append((p, h))
    # place each detection on the band-passed QRS extremum
    search = int(round(0.1 * rate_hz))
    r = []
    for p in qrs:
        lo, hi = max(0, p - search), min(x.size, p + search + 1)
        r.append(lo + int(np.argmax(np.abs(bp[lo:hi]))))
    r = np.unique(np.asarray(r, dtype=int))
    if r.size > 1:
        keep = np.concatenate([[True], np.diff(r) > refractory])
        r = r[keep]
    return r


def instantaneous_hr(r_peaks, n_samples: int, rate_hz: float, min_bpm: float = 20.0,
                     max_bpm: float = 250.0) -> np.ndarray:
    """60/RR held over each RR interval; NaN outside detected beats."""
    hr = np.full(n_samples, np.nan)
    r = np.asarray(r_peaks, dtype=int)
    for a, b in zip(r[:-1], r[1:]):
        bpm = 60.0 * rate_hz / (b - a)
        if min_bpm < bpm < max_bpm:
            hr[a:b] = bpm
    return hr


def combine_leads(per_lead) -> np.ndarray:
    """Per-sample median across leads, ignoring missing leads."""
    stack = np.vstack([np.asarray(v, dtype=float) for v in per_lead])
    out = np.full(stack.shape[1], np.nan)
    ok = ~np.all(np.isnan(stack), axis=0)
    out[ok] = np.nanmedian(stack[:, ok], axis=0)
    return out


def heart_rate(ecg_leads, baseline_level: int = 9) -> FeatureSeries:
    """Median instantaneous heart rate across ECG leads, in bpm."""
    leads = list(ecg_leads)
    if not leads:
        raise ValidationError("heart_rate needs at least one ECG lead")
    _same_clock(*leads)
    rate = leads[0].rate_hz
    per_lead = []
    for lead in leads:
        x = lead.samples
        if x.size >= 2 ** baseline_level:
            x = dsp.wavelet_baseline_remove(x, baseline_level)
        r = pan_tompkins(x, rate)
        if r.size < 2:
            log.info("lead %s: no R-peaks detected", lead.label)
        per_lead.append(instantaneous_hr(r, x.size, rate))
    return FeatureSeries(HEART_RATE, "hr", rate, combine_leads(per_lead))


# ------------------------------------------------------------- accel freeze index

LOCOMOTION_BAND = (0.5, 3.0)
TREMBLING_BAND = (3.0, 8.0)


def freeze_index(axes, window_s: float = 2.0, loco_band=LOCOMOTION_BAND,
                 trem_band=TREMBLING_BAND, n_freqs: int = 20, cycles: float = 6.0,
                 floor: float = 1e-6) -> FeatureSeries:
    """Freeze index: trembling-band over locomotion-band power in a centered window.

    Band powers are summed over the three axes (the power of the 3-D
    acceleration vector). Samples within half a window of either edge are
    missing; windows whose locomotion power falls below ``floor`` times the
    total are capped and flagged in ``flags['saturated']``.
    """
    axes = list(axes)
    if len(axes) != 3:
        raise ValidationError("freeze_index needs the x, y and z channels of one placement")
    _same_clock(*axes)
    rate = axes[0].rate_hz
    placement = axes[0].meta.get("placement", "unknown")
    trem = np.zeros(axes[0].n_samples)
    loco = np.zeros(axes[0].n_samples)
    for ch in axes:
        x = ch.samples - ch.samples.mean()
        trem += dsp.morlet_band_energy(x, rate, trem_band, n_freqs, cycles)
        loco += dsp.morlet_band_energy(x, rate, loco_band, n_freqs, cycles)
    w = int(round(window_s * rate)) | 1
    trem_w = ndimage.uniform_filter1d(trem, w, mode="nearest")
    loco_w = ndimage.uniform_filter1d(loco, w, mode="nearest")
    eps = floor * (trem_w + loco_w)
    saturated = loco_w < eps
    denom = np.where(saturated, eps, loco_w)
    with np.errstate(invalid="ignore", divide="ignore"):
        fi = np.where(denom > 0, trem_w / denom, np.nan)
    half = w // 2
    fi[:half] = np.nan
    fi[fi.size - half:] = np.nan
    saturated[:half] = False
    saturated[saturated.size - half:] = False
    return FeatureSeries(FREEZE_INDEX, f"fi_{placement}", rate, fi, {"saturated": saturated})


# ------------------------------------------------------------- footswitch strides

def _debounce(contact: np.ndarray, n: int) -> np.ndarray:
    """Drop contact changes shorter than ``n`` samples."""
    if n <= 1:
        return contact
    st = np.ones(n, dtype=bool)
    padded = np.pad(contact, n, mode="edge")
    out = ndimage.binary_opening(ndimage.binary_closing(padded, st), st)
    return out[n:-n]


def foot_contact(switches, foot: str, cfg: FootswitchConfig, rate_hz: float,
                 debounce_ms: float = 40.0) -> np.ndarray:
    keys = cfg.keys.for_foot(foot)
    active = None
    for ch in switches:
        if ch.meta.get("foot") != foot or int(ch.meta.get("switch_index")) not in keys:
            continue
        on = ch.samples > cfg.threshold(foot, ch.meta["switch_index"])
        active = on if active is None else (active | on)
    if active is None:
        raise ConfigError(f"no key switch channels present for {foot} foot")
    return _debounce(active, int(round(debounce_ms * rate_hz / 1000.0)))


def strike_indices(contact: np.ndarray) -> np.ndarray:
    c = contact.astype(np.int8)
    return np.flatnonzero(np.diff(c) == 1) + 1


def stride_duration(switches, cfg: FootswitchConfig, debounce_ms: float = 40.0) -> FeatureSeries:
    """Stride duration per sample: the strike-to-strike interval containing it.

    Each foot gives its own series; the output is their per-sample mean.
    """
    switches = [c for c in switches if c.kind == FOOTSWITCH]
    if not switches:
        raise ValidationError("stride_duration needs footswitch channels")
    _same_clock(*switches)
    rate = switches[0].rate_hz
    n = switches[0].n_samples
    per_foot = []
    for foot in FEET:
        contact = foot_contact(switches, foot, cfg, rate, debounce_ms)
        s = strike_indices(contact)
        vals = np.full(n, np.nan)
        for a, b in zip(s[:-1], s[1:]):
            vals[a:b] = (b - a) / rate
        per_foot.append(vals)
    stack = np.vstack(per_foot)
    out = np.full(n, np.nan)
    ok = ~np.all(np.isnan(stack), axis=0)
    out[ok] = np.nanmean(stack[:, ok], axis=0)
    return FeatureSeries(STRIDE_DURATION, "stride", rate, out)


# ---------------------------------------------------------------- orchestration

@dataclass(frozen=True)
class FeatureParams:
    rate_hz: float = 500.0
    theta_band: tuple = (4.0, 7.0)
    eeg_prefilter: tuple = (0.5, 45.0)
    n_freqs: int = 20
    cycles: float = 6.0
    fi_window_s: float = 2.0
    seed: int = 0


FEATURE_ORDER = ("theta", "spv", "hr") + tuple(f"fi_{p}" for p in PLACEMENTS) + ("stride",)


def extract_all(rec, footswitch: FootswitchConfig | None, params: FeatureParams = FeatureParams()) -> dict:
    """Every feature available in ``rec``, resampled to ``params.rate_hz``.

    Returns ``{name: FeatureSeries}``; signed SPV and turn direction are kept
    under ``spv_signed`` and ``direction`` for downstream phase matching.
    """
    from .signalio import resample_recording

    rec = resample_recording(rec, params.rate_hz)
    out = {}
    fz = rec.select(EEG, electrode="Fz")
    cz = rec.select(EEG, electrode="Cz")
    if fz and cz:
        out["theta"] = theta_power(fz[0], cz[0], params.theta_band, params.eeg_prefilter,
                                   params.n_freqs, params.cycles)
    eog = rec.select(EOG, axis="horizontal")
    if eog:
        vel = eog_velocity(eog[0])
        slow = cluster_slow_phases(vel, eog[0].rate_hz, params.seed)
        signed = FeatureSeries(SPV, "spv", eog[0].rate_hz, np.where(slow, vel, np.nan))
        direction = turn_direction(vel, eog[0].rate_hz)
        out["spv_signed"] = signed
        out["direction"] = direction
        out["spv"] = merge_turn_directions(signed, direction)
    leads = rec.select(ECG)
    if leads:
        out["hr"] = heart_rate(leads)
    for placement in PLACEMENTS:
        chans = {c.meta["axis"]: c for c in rec.select(ACCEL, placement=placement)}
        if all(a in chans for a in ACCEL_AXES):
            out[f"fi_{placement}"] = freeze_index(
                [chans[a] for a in ACCEL_AXES], params.fi_window_s,
                n_freqs=params.n_freqs, cycles=params.cycles)
    switches = rec.select(FOOTSWITCH)
    if switches and footswitch is not None:
        out["stride"] = stride_duration(switches, footswitch)
    return out
