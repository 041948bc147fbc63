"""Deterministic synthetic multi-modal turning recordings with freezing episodes.

Each subject performs alternating in-place turns. A shared turning rhythm
drives the EOG nystagmus, and a shared gait phase drives the accelerometers
and footswitches. Freezing episodes switch the motion regime exactly at their
annotated onset and offset; turning (and with it the slow-phase velocity)
slows down a configurable lead time before onset. ECG and EEG carry no
freezing-locked change unless an effect is configured.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError
from .features import FootswitchConfig, KeySwitchSet, write_footswitch_configs
from .signalio import (ACCEL, ACCEL_AXES, ECG, EEG, EOG, FOG, FOOTSWITCH, OTHER_STOP,
                       PLACEMENTS, AnnotationTrack, Channel, Episode, Recording,
                       write_annotations, write_recording)

ADJUDICATED = "adjudicated"
SWITCH_INDICES = (1, 2, 3, 4)  # heel, ball medial, ball lateral, toe
BALL_SWITCHES = (2, 3)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 15
    task_duration_s: float = 120.0
    eeg_rate_hz: float = 500.0
    porti_rate_hz: float = 512.0
    turn_period_s: float = 5.0
    fog_rate_per_min: float = 3.0
    fog_median_s: float = 3.0
    fog_min_s: float = 1.0
    fog_max_s: float = 120.0
    fog_sigma: float = 0.8
    other_stop_rate_per_min: float = 0.5
    min_gap_s: float = 1.0
    edge_margin_s: float = 3.0
    fi_drop: float = 0.9
    spv_slowdown: float = 0.8
    spv_slowdown_lead_s: float = 6.0
    spv_ramp_s: float = 1.0
    stride_inflation: float = 4.0
    gait_cadence_cv: float = 0.04
    gait_shape_cv: float = 0.25
    hr_effect: float = 0.0
    theta_effect: float = 0.0
    effect_dropout: float = 0.25
    fog_tremor: bool = False
    eeg_noise_uv: float = 10.0
    eog_noise_uv: float = 5.0
    ecg_noise_mv: float = 0.02
    accel_noise_g: float = 0.005
    footswitch_noise_v: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        for name in ("task_duration_s", "eeg_rate_hz", "porti_rate_hz", "turn_period_s",
                     "fog_median_s", "fog_min_s", "fog_max_s", "fog_sigma", "stride_inflation"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.fog_min_s <= self.fog_median_s <= self.fog_max_s:
            raise ConfigError("fog_median_s must lie within [fog_min_s, fog_max_s]")
        for name in ("fog_rate_per_min", "other_stop_rate_per_min", "min_gap_s",
                     "edge_margin_s", "spv_slowdown_lead_s", "spv_ramp_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("fi_drop", "spv_slowdown", "effect_dropout", "gait_cadence_cv",
                     "gait_shape_cv"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown synth keys: {unknown}")
        kwargs = {}
        for k, v in d.items():
            typ = type(getattr(cls(), k))
            if typ is bool and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            kwargs[k] = typ(v)
        return cls(**kwargs)


@dataclass
class SyntheticSubject:
    recording: Recording
    annotation: AnnotationTrack
    raters: list
    footswitch: FootswitchConfig
    truth: dict = field(default_factory=dict)

    @property
    def subject_id(self) -> str:
        return self.recording.subject_id

    def __iter__(self):
        yield self.recording
        yield self.annotation


# ----------------------------------------------------------------- episodes

def _place_episodes(cfg: SynthConfig, rng: np.random.Generator) -> list:
    T = cfg.task_duration_s
    n_fog = rng.poisson(cfg.fog_rate_per_min * T / 60.0)
    n_stop = rng.poisson(cfg.other_stop_rate_per_min * T / 60.0)
    if cfg.fog_rate_per_min > 0:
        n_fog = max(1, n_fog)
    durs = np.exp(rng.normal(math.log(cfg.fog_median_s), cfg.fog_sigma, n_fog))
    durs = np.clip(durs, cfg.fog_min_s, cfg.fog_max_s)
    stop_durs = rng.uniform(1.0, 3.0, n_stop)
    labels = [FOG] * n_fog + [OTHER_STOP] * n_stop
    all_durs = np.concatenate([durs, stop_durs])
    order = rng.permutation(len(labels))
    labels = [labels[i] for i in order]
    all_durs = np.round(all_durs[order], 3)
    n = len(labels)
    free = T - 2 * cfg.edge_margin_s - all_durs.sum() - max(n - 1, 0) * cfg.min_gap_s
    if n and free < 0:
        raise ConfigError(
            f"infeasible episode density: {n} episodes totalling {all_durs.sum():.1f} s "
            f"do not fit in {T} s"
        )
    gaps = rng.dirichlet(np.ones(n + 1)) * free if n else np.array([])
    episodes = []
    t = cfg.edge_margin_s
    for i in range(n):
        t += gaps[i] + (cfg.min_gap_s if i else 0.0)
        onset = round(float(t), 3)
        offset = round(onset + float(all_durs[i]), 3)
        episodes.append(Episode(onset, offset, labels[i]))
        t = offset
    return episodes


def _effects(episodes, cfg, rng) -> list:
    """Per FOG episode: (motion effect present, SPV effect present)."""
    flags = []
    for e in episodes:
        if e.label != FOG:
            flags.append((True, True))
            continue
        while True:
            motion = rng.random() >= cfg.effect_dropout
            spv = rng.random() >= cfg.effect_dropout
            if motion or spv:
                break
        flags.append((motion, spv))
    return flags


def _regime_mask(t, episodes, flags, which: int, label=FOG) -> np.ndarray:
    m = np.zeros(t.size, dtype=bool)
    for e, f in zip(episodes, flags):
        if e.label == label and f[which]:
            m |= (t >= e.onset_s) & (t < e.offset_s)
    return m


def _any_mask(t, episodes, label) -> np.ndarray:
    m = np.zeros(t.size, dtype=bool)
    for e in episodes:
        if e.label == label:
            m |= (t >= e.onset_s) & (t < e.offset_s)
    return m


def _turn_speed(t, episodes, flags, cfg) -> np.ndarray:
    """Turning speed envelope in [0, 1]."""
    s = np.ones(t.size)
    low = 1.0 - cfg.spv_slowdown
    for e, (_, spv) in zip(episodes, flags):
        if e.label == FOG and spv:
            start = e.onset_s - cfg.spv_slowdown_lead_s
            ramp = max(cfg.spv_ramp_s, 1e-9)
            down = np.clip((t - start) / ramp, 0.0, 1.0)
            up = np.clip((t - e.offset_s) / 0.5, 0.0, 1.0)
            env = 1.0 - (1.0 - low) * down * (1.0 - up)
        elif e.label == OTHER_STOP:
            down = np.clip((t - e.onset_s) / 0.3, 0.0, 1.0)
            up = np.clip((t - e.offset_s) / 0.5, 0.0, 1.0)
            env = 1.0 - 0.8 * down * (1.0 - up)
        else:
            continue
        s = np.minimum(s, env)
    return s


# ------------------------------------------------------------------ modalities

def _colored_noise(rng, n, rate, exponent=1.0, band=None):
    white = rng.normal(size=n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / rate)
    shape = np.ones_like(f)
    shape[1:] = 1.0 / f[1:] ** (exponent / 2.0)
    shape[0] = 0.0
    if band is not None:
        shape *= (f >= band[0]) & (f <= band[1])
    x = np.fft.irfft(spec * shape, n)
    sd = x.std()
    return x / sd if sd > 0 else x


def _eog(t, rate, turn_phase, speed, cfg, rng, subj):
    """Horizontal and vertical EOG (volts) plus slow-phase eye velocity (deg/s)."""
    omega_max = 180.0 * math.pi / cfg.turn_period_s  # deg/s so each half cycle turns 180 deg
    head = omega_max * speed * np.sin(turn_phase)
    slow_v = -subj["vor_gain"] * head
    bound = subj["eye_bound"]
    sacc_n = max(1, int(round(0.03 * rate)))
    dt = 1.0 / rate
    pos = np.empty(t.size)
    e = 0.0
    sacc_left = 0
    sacc_v = 0.0
    for i in range(t.size):
        v = slow_v[i]
        if sacc_left > 0:
            v += sacc_v
            sacc_left -= 1
        elif abs(e) > bound and e * v > 0:
            target = -math.copysign(0.6 * bound, e)
            sacc_v = (target - e) / (sacc_n * dt)
            sacc_left = sacc_n - 1
            v += sacc_v
        e += v * dt
        pos[i] = e
    uv_per_deg = subj["eog_gain"]
    drift = np.cumsum(rng.normal(0, 1, t.size))
    drift = signal.sosfiltfilt(signal.butter(2, 0.05, fs=rate, output="sos"), drift)
    drift = 60.0 * drift / max(drift.std(), 1e-12)
    eog_h = (pos * uv_per_deg + drift + cfg.eog_noise_uv * rng.normal(size=t.size)) * 1e-6
    blinks = np.zeros(t.size)
    for bt in np.arange(rng.uniform(1, 4), t[-1], 4.0):
        blinks += 200.0 * np.exp(-0.5 * ((t - bt - rng.uniform(-1, 1)) / 0.05) ** 2)
    eog_v = (blinks + cfg.eog_noise_uv * rng.normal(size=t.size)) * 1e-6
    return eog_h, eog_v, slow_v


GAIT_VAR_BAND = (0.02, 0.3)  # stride-to-stride fluctuations, Hz


def _gait_phase(t, rate, episodes, flags, cfg, subj, rng):
    jitter = cfg.gait_cadence_cv * _colored_noise(rng, t.size, rate, 0.0, GAIT_VAR_BAND)
    cadence = np.clip(1.0 + jitter, 0.5, 1.5)
    cadence[_regime_mask(t, episodes, flags, 0)] = 1.0 / cfg.stride_inflation
    cadence[_any_mask(t, episodes, OTHER_STOP)] = 0.0
    return subj["gait_phase0"] + 2 * math.pi * subj["stride_hz"] * np.cumsum(cadence) / rate


HARMONICS = np.array([1.0, 0.8, 0.5, 0.45, 0.4, 0.35, 0.3, 0.2])


def _leg_waveform(psi, phases, shape=None):
    """Sum of gait harmonics; ``shape`` rows scale each harmonic over time."""
    out = np.zeros(psi.size)
    for k, (a, ph) in enumerate(zip(HARMONICS, phases), start=1):
        gain = a if shape is None else a * shape[k - 1]
        out += gain * np.sin(k * psi + ph)
    return out


def _accel(t, rate, psi, episodes, flags, cfg, rng, subj):
    motion_fog = _regime_mask(t, episodes, flags, 0)
    stop = _any_mask(t, episodes, OTHER_STOP)
    amp = np.ones(t.size)
    amp[motion_fog] = 1.0 - cfg.fi_drop
    amp[stop] = 0.1
    quiet = motion_fog | stop
    chans = {}
    for placement in PLACEMENTS:
        side = placement.split("_")[0]
        A = 0.3 if placement.endswith("ankle") else 0.15
        leg_psi = psi + (0.0 if side == "left" else math.pi)
        phases = subj["harm_phase"][placement]
        shape = np.clip(1.0 + cfg.gait_shape_cv * np.vstack(
            [_colored_noise(rng, t.size, rate, 0.0, GAIT_VAR_BAND) for _ in HARMONICS]), 0.0, None)
        vert = A * amp * _leg_waveform(leg_psi, phases, shape)
        ap = 0.5 * A * amp * _leg_waveform(leg_psi + 0.7, phases[::-1], shape[::-1])
        sway = 0.15 * A * _colored_noise(rng, t.size, rate, 0.0, (0.5, 2.0)) * quiet
        if cfg.fog_tremor:
            trem = 0.6 * A * np.sin(2 * math.pi * 5.5 * t) * motion_fog
        else:
            trem = 0.0
        body = np.vstack([ap + 0.5 * sway, 0.3 * ap + sway, vert + sway + trem])
        body[2] += 1.0  # gravity on the vertical axis
        tilted = subj["tilt"][placement] @ body
        for i, axis in enumerate(ACCEL_AXES):
            chans[(placement, axis)] = tilted[i] + cfg.accel_noise_g * rng.normal(size=t.size)
    return chans


def _footswitches(t, psi, cfg, rng, subj):
    duty = 0.6
    chans = {}
    for side, offset in (("left", 0.0), ("right", math.pi)):
        ph = np.mod(psi + offset, 2 * math.pi) / (2 * math.pi)
        contact = ph < duty
        keys = subj["keys"].for_foot(side)
        for idx in SWITCH_INDICES:
            if idx in keys:
                on = contact
            elif idx == 1:
                on = contact & (ph < 0.3 * duty)  # heel: early stance only
            elif idx == 4:
                on = contact & (ph > 0.7 * duty)  # toe: late stance only
            else:
                on = np.ones(t.size, dtype=bool)  # unused ball switch reads stuck-high
            v = np.where(on, subj["fsw_high"], 0.1)
            chans[(side, idx)] = v + cfg.footswitch_noise_v * rng.normal(size=t.size)
    return chans


def _beat_times(duration, hr_fn, rng):
    times = []
    t = rng.uniform(0.1, 0.6)
    while t < duration:
        times.append(t)
        t += 60.0 / hr_fn(t)
    return np.array(times)


ECG_WAVES = (  # (offset s, amplitude mV, width s)
    (-0.20, 0.15, 0.025),
    (-0.03, -0.10, 0.010),
    (0.00, 1.00, 0.012),
    (0.03, -0.25, 0.010),
    (0.25, 0.30, 0.040),
)


def synth_ecg(t, beats, gain=1.0, t_gain=1.0):
    """Sum-of-Gaussians ECG in mV with R waves at ``beats``."""
    out = np.zeros(t.size)
    rate = 1.0 / (t[1] - t[0])
    half = int(0.45 * rate)
    for b in beats:
        i0 = int(round(b * rate))
        lo, hi = max(0, i0 - half), min(t.size, i0 + half)
        if lo >= hi:
            continue
        tt = t[lo:hi] - b
        seg = np.zeros(hi - lo)
        for off, amp, w in ECG_WAVES:
            a = amp * (t_gain if off > 0.1 else 1.0)
            seg += a * np.exp(-0.5 * ((tt - off) / w) ** 2)
        out[lo:hi] += gain * seg
    return out


def _ecg(t, rate, episodes, flags, cfg, rng, subj):
    base = subj["hr_base"]
    fog_spans = [(e.onset_s, e.offset_s) for e in episodes if e.label == FOG]
    # slow random HR drift (0.01-0.1 Hz) plus respiratory sinus arrhythmia
    grid_rate = 10.0
    n_grid = int(math.ceil((t[-1] + 2.0) * grid_rate)) + 1
    drift = 2.5 * _colored_noise(rng, n_grid, grid_rate, 0.0, (0.01, 0.1))
    ph = rng.uniform(0, 2 * math.pi)

    def hr_fn(x):
        h = base + drift[min(int(x * grid_rate), n_grid - 1)]
        h += 1.5 * math.sin(2 * math.pi * 0.25 * x + ph)
        if cfg.hr_effect and any(a <= x < b for a, b in fog_spans):
            h += cfg.hr_effect
        return h

    beats = _beat_times(t[-1] + 1.0 / rate, hr_fn, rng)
    leads = []
    wander = _colored_noise(rng, t.size, rate, 2.0, (0.05, 0.5))
    for gain, t_gain in ((1.0, 1.0), (0.6, 1.4), (1.3, 0.8)):
        x = synth_ecg(t, beats, gain, t_gain) + 0.15 * wander
        x += cfg.ecg_noise_mv * rng.normal(size=t.size)
        leads.append(x * 1e-3)
    return leads, beats


def _eeg(t, rate, episodes, cfg, rng):
    n = t.size
    common = 20.0 * _colored_noise(rng, n, rate, 1.0, (0.3, 100.0))
    alpha = 6.0 * _colored_noise(rng, n, rate, 0.0, (9.0, 11.0))
    theta = 3.0 * _colored_noise(rng, n, rate, 0.0, (4.0, 7.0))
    if cfg.theta_effect:
        theta = theta * (1.0 + cfg.theta_effect * _any_mask(t, episodes, FOG))
    s = cfg.eeg_noise_uv
    fz = common + theta + s * _colored_noise(rng, n, rate, 1.0, (0.3, 100.0))
    cz = common + alpha + s * _colored_noise(rng, n, rate, 1.0, (0.3, 100.0))
    return fz * 1e-6, cz * 1e-6


def _rotation(rng, max_deg=15.0):
    a = np.radians(rng.uniform(-max_deg, max_deg, 3))
    cx, cy, cz = np.cos(a)
    sx, sy, sz = np.sin(a)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _subject_params(rng) -> dict:
    keys = KeySwitchSet(
        tuple(sorted(rng.choice(BALL_SWITCHES, rng.integers(1, 3), replace=False))),
        tuple(sorted(rng.choice(BALL_SWITCHES, rng.integers(1, 3), replace=False))),
    )
    return {
        "vor_gain": rng.uniform(0.6, 0.8),
        "eye_bound": rng.uniform(15.0, 25.0),
        "eog_gain": rng.uniform(12.0, 18.0),
        "turn_phase0": rng.uniform(0, 2 * math.pi),
        "gait_phase0": rng.uniform(0, 2 * math.pi),
        "stride_hz": rng.uniform(0.8, 1.0),
        "harm_phase": {p: rng.uniform(0, 2 * math.pi, HARMONICS.size) for p in PLACEMENTS},
        "tilt": {p: _rotation(rng) for p in PLACEMENTS},
        "keys": keys,
        "fsw_high": rng.uniform(1.8, 2.2),
        "thresholds": {(f, i): round(float(rng.uniform(0.8, 1.2)), 3)
                       for f in ("left", "right") for i in SWITCH_INDICES},
        "hr_base": rng.uniform(62.0, 88.0),
    }


def _jitter_track(track, rater_id, rng, sd=0.15, miss=0.05):
    eps = []
    for e in track.episodes:
        if rng.random() < miss:
            continue
        on = round(max(0.0, e.onset_s + rng.normal(0, sd)), 3)
        off = round(max(on + 0.2, e.offset_s + rng.normal(0, sd)), 3)
        if eps and on < eps[-1].offset_s:
            continue
        eps.append(Episode(on, off, e.label))
    return AnnotationTrack(rater_id, tuple(eps))


def generate_subject(cfg: SynthConfig, index: int, rng: np.random.Generator) -> SyntheticSubject:
    sid = f"S{index + 1:02d}"
    subj = _subject_params(rng)
    episodes = _place_episodes(cfg, rng)
    flags = _effects(episodes, cfg, rng)
    T = cfg.task_duration_s

    t_e = np.arange(int(round(T * cfg.eeg_rate_hz))) / cfg.eeg_rate_hz
    t_p = np.arange(int(round(T * cfg.porti_rate_hz))) / cfg.porti_rate_hz
    re, rp = cfg.eeg_rate_hz, cfg.porti_rate_hz

    turn_phase = subj["turn_phase0"] + 2 * math.pi * t_e / cfg.turn_period_s
    speed = _turn_speed(t_e, episodes, flags, cfg)
    eog_h, eog_v, slow_v = _eog(t_e, re, turn_phase, speed, cfg, rng, subj)
    fz, cz = _eeg(t_e, re, episodes, cfg, rng)
    psi = _gait_phase(t_p, rp, episodes, flags, cfg, subj, rng)
    acc = _accel(t_p, rp, psi, episodes, flags, cfg, rng, subj)
    fsw = _footswitches(t_p, psi, cfg, rng, subj)
    ecg, beats = _ecg(t_p, rp, episodes, flags, cfg, rng, subj)

    def q(x, decimals):
        return np.round(x, decimals)

    chans = [
        Channel("EEG_Fz", EEG, re, q(fz, 10), {"electrode": "Fz"}),
        Channel("EEG_Cz", EEG, re, q(cz, 10), {"electrode": "Cz"}),
        Channel("EOG_H", EOG, re, q(eog_h, 10), {"axis": "horizontal"}),
        Channel("EOG_V", EOG, re, q(eog_v, 10), {"axis": "vertical"}),
    ]
    for i, lead in enumerate(ecg, start=1):
        chans.append(Channel(f"ECG_{i}", ECG, rp, q(lead, 9), {"lead": str(i)}))
    for placement in PLACEMENTS:
        for axis in ACCEL_AXES:
            chans.append(Channel(f"ACC_{placement}_{axis}", ACCEL, rp, q(acc[(placement, axis)], 6),
                                 {"placement": placement, "axis": axis}))
    for side in ("left", "right"):
        for idx in SWITCH_INDICES:
            chans.append(Channel(f"FSW_{side}_{idx}", FOOTSWITCH, rp, q(fsw[(side, idx)], 5),
                                 {"foot": side, "switch_index": idx}))
    rec = Recording(sid, tuple(chans), T)
    truth_track = AnnotationTrack(ADJUDICATED, tuple(episodes))
    raters = [_jitter_track(truth_track, "rater_a", rng), _jitter_track(truth_track, "rater_b", rng)]
    footswitch = FootswitchConfig(subj["keys"], subj["thresholds"])
    truth = {
        "effects": flags,
        "motion_regime_eeg_clock": _regime_mask(t_e, episodes, flags, 0),
        "motion_regime_porti_clock": _regime_mask(t_p, episodes, flags, 0),
        "turn_speed": speed,
        "turn_phase": turn_phase,
        "slow_phase_velocity_deg": slow_v,
        "eye_direction": np.where(slow_v < 0, -1, 1),
        "beats_s": beats,
        "hr_base": subj["hr_base"],
        "stride_hz": subj["stride_hz"],
    }
    return SyntheticSubject(rec, truth_track, raters, footswitch, truth)


def generate_dataset(cfg: SynthConfig = SynthConfig()) -> list:
    """One :class:`SyntheticSubject` per configured subject; deterministic in ``cfg.seed``."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    return [generate_subject(cfg, i, np.random.default_rng(c)) for i, c in enumerate(children)]


FOOTSWITCH_FILE = "footswitch.json"
SYNTH_CONFIG_FILE = "synth_config.json"


def annotation_path(data_dir, subject_id) -> Path:
    return Path(data_dir) / f"{subject_id}.annotations.json"


def write_dataset(subjects, out_dir, cfg: SynthConfig | None = None) -> list:
    """Write recordings, annotations and the footswitch config; return written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in subjects:
        csv = out / f"{s.subject_id}.csv"
        write_recording(s.recording, csv)
        write_annotations([s.annotation] + list(s.raters), annotation_path(out, s.subject_id))
        written += [csv, csv.with_suffix(".json"), annotation_path(out, s.subject_id)]
    fs_path = out / FOOTSWITCH_FILE
    write_footswitch_configs({s.subject_id: s.footswitch for s in subjects}, fs_path)
    written.append(fs_path)
    if cfg is not None:
        p = out / SYNTH_CONFIG_FILE
        p.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written
