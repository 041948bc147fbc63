"""Recording and annotation data model, file I/O, resampling and rater agreement."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from .errors import FormatError, ValidationError

EEG = "EEG"
EOG = "EOG"
ECG = "ECG"
ACCEL = "ACCEL"
FOOTSWITCH = "FOOTSWITCH"
CHANNEL_KINDS = (EEG, EOG, ECG, ACCEL, FOOTSWITCH)

PLACEMENTS = ("left_knee", "right_knee", "left_ankle", "right_ankle")
ACCEL_AXES = ("x", "y", "z")
EOG_AXES = ("horizontal", "vertical")
FEET = ("left", "right")

FOG = "FOG"
OTHER_STOP = "OTHER_STOP"
EPISODE_LABELS = (FOG, OTHER_STOP)

# Frame codes used when annotations are rasterized.
FRAME_NONE, FRAME_FOG, FRAME_OTHER = 0, 1, 2

# Keys each channel kind must carry in its sidecar entry.
_KIND_KEYS = {
    EEG: ("electrode",),
    EOG: ("axis",),
    ECG: ("lead",),
    ACCEL: ("placement", "axis"),
    FOOTSWITCH: ("foot", "switch_index"),
}


@dataclass(frozen=True, eq=False)
class Channel:
    label: str
    kind: str
    rate_hz: float
    samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValidationError(f"channel {self.label!r}: unknown kind {self.kind!r}")
        if not (self.rate_hz > 0 and math.isfinite(self.rate_hz)):
            raise ValidationError(f"channel {self.label!r}: rate_hz must be > 0, got {self.rate_hz}")
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1:
            raise ValidationError(f"channel {self.label!r}: samples must be 1-D")
        bad = np.flatnonzero(~np.isfinite(x))
        if bad.size:
            raise ValidationError(
                f"channel {self.label!r}: non-finite sample at index {int(bad[0])}"
            )
        for key in _KIND_KEYS[self.kind]:
            if key not in self.meta:
                raise ValidationError(f"channel {self.label!r}: {self.kind} needs {key!r}")
        if self.kind == ACCEL:
            if self.meta["placement"] not in PLACEMENTS or self.meta["axis"] not in ACCEL_AXES:
                raise ValidationError(f"channel {self.label!r}: bad accel placement/axis")
        if self.kind == EOG and self.meta["axis"] not in EOG_AXES:
            raise ValidationError(f"channel {self.label!r}: bad EOG axis")
        if self.kind == FOOTSWITCH and self.meta["foot"] not in FEET:
            raise ValidationError(f"channel {self.label!r}: bad foot")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    @property
    def n_samples(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate_hz

    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.rate_hz

    def __eq__(self, other):
        if not isinstance(other, Channel):
            return NotImplemented
        return (
            self.label == other.label
            and self.kind == other.kind
            and self.rate_hz == other.rate_hz
            and self.meta == other.meta
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Recording:
    subject_id: str
    channels: tuple
    duration_s: float

    def __post_init__(self):
        chans = tuple(self.channels)
        labels = [c.label for c in chans]
        dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
        if dupes:
            raise ValidationError(f"duplicate channel labels: {dupes}")
        if not self.duration_s > 0:
            raise ValidationError("duration_s must be positive")
        for c in chans:
            expected = round(self.duration_s * c.rate_hz)
            if abs(c.n_samples - expected) > 1:
                raise ValidationError(
                    f"channel {c.label!r}: {c.n_samples} samples, expected {expected} "
                    f"for {self.duration_s} s at {c.rate_hz} Hz"
                )
        object.__setattr__(self, "channels", chans)

    def __getitem__(self, label: str) -> Channel:
        for c in self.channels:
            if c.label == label:
                return c
        raise KeyError(label)

    def labels(self) -> list:
        return [c.label for c in self.channels]

    def select(self, kind: str, **meta) -> list:
        """Channels of one kind whose metadata match every keyword given."""
        return [
            c for c in self.channels
            if c.kind == kind and all(c.meta.get(k) == v for k, v in meta.items())
        ]

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.duration_s == other.duration_s
            and self.channels == other.channels
        )

    __hash__ = None


@dataclass(frozen=True)
class Episode:
    onset_s: float
    offset_s: float
    label: str = FOG

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class AnnotationTrack:
    rater_id: str
    episodes: tuple = ()

    def __post_init__(self):
        eps = tuple(
            e if isinstance(e, Episode) else Episode(float(e[0]), float(e[1]), *e[2:])
            for e in self.episodes
        )
        for e in eps:
            if e.label not in EPISODE_LABELS:
                raise ValidationError(f"unknown episode label {e.label!r}")
            if not e.onset_s < e.offset_s:
                raise ValidationError(f"episode onset {e.onset_s} not before offset {e.offset_s}")
        for prev, cur in zip(eps, eps[1:]):
            if cur.onset_s < prev.onset_s:
                raise ValidationError("episodes must be sorted by onset")
            if cur.onset_s < prev.offset_s:
                raise ValidationError(
                    f"overlapping episodes at {prev.onset_s}-{prev.offset_s} and {cur.onset_s}"
                )
        object.__setattr__(self, "episodes", eps)

    def fog(self) -> list:
        return [e for e in self.episodes if e.label == FOG]

    def other_stops(self) -> list:
        return [e for e in self.episodes if e.label == OTHER_STOP]

    def to_dict(self) -> dict:
        return {
            "rater_id": self.rater_id,
            "episodes": [
                {"onset_s": e.onset_s, "offset_s": e.offset_s, "label": e.label}
                for e in self.episodes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationTrack":
        try:
            eps = [Episode(float(e["onset_s"]), float(e["offset_s"]), e.get("label", FOG))
                   for e in d["episodes"]]
            return cls(str(d["rater_id"]), tuple(eps))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed annotation track: {exc}") from exc


# --------------------------------------------------------------------------- I/O

def sidecar_path_for(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def _channel_entry(c: Channel) -> dict:
    entry = {"label": c.label, "kind": c.kind, "rate_hz": c.rate_hz}
    entry.update(c.meta)
    return entry


def write_recording(rec: Recording, csv_path, sidecar_path=None) -> None:
    """Write ``rec`` as a CSV plus JSON sidecar.

    Channels share one table; the time column follows the fastest channel and
    slower channels leave their trailing cells empty. Floats are written with
    the shortest representation that round-trips exactly.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else sidecar_path_for(csv_path)
    n_rows = max(c.n_samples for c in rec.channels)
    top_rate = max(c.rate_hz for c in rec.channels)
    cols = {"time_s": np.arange(n_rows) / top_rate}
    for c in rec.channels:
        col = np.full(n_rows, np.nan)
        col[: c.n_samples] = c.samples
        cols[c.label] = col
    pd.DataFrame(cols).to_csv(csv_path, index=False, na_rep="", lineterminator="\n")
    side = {
        "subject_id": rec.subject_id,
        "duration_s": rec.duration_s,
        "channels": [_channel_entry(c) for c in rec.channels],
    }
    sidecar_path.write_text(json.dumps(side, indent=2) + "\n")


def _parse_sidecar(path: Path) -> dict:
    try:
        side = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON sidecar ({exc})") from exc
    for key in ("subject_id", "channels"):
        if key not in side:
            raise FormatError(f"{path}: sidecar missing {key!r}")
    labels = [ch.get("label") for ch in side["channels"]]
    dupes = sorted({lab for lab in labels if labels.count(lab) > 1})
    if dupes:
        raise ValidationError(f"{path}: duplicate channel labels {dupes}")
    for ch in side["channels"]:
        for key in ("label", "kind", "rate_hz"):
            if key not in ch:
                raise FormatError(f"{path}: channel entry missing {key!r}")
        if not float(ch["rate_hz"]) > 0:
            raise ValidationError(f"channel {ch['label']!r}: rate_hz must be > 0")
    return side


def load_recording(csv_path, sidecar_path=None) -> Recording:
    """Load a recording written by :func:`write_recording`.

    Raises
    ------
    FormatError
        Header does not match the sidecar, or a column has gaps.
    ValidationError
        Non-positive rate, NaN sample, duplicate labels or inconsistent lengths.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else sidecar_path_for(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(csv_path)
    side = _parse_sidecar(sidecar_path)
    try:
        df = pd.read_csv(csv_path, float_precision="round_trip", dtype=float)
    except ValueError as exc:
        raise FormatError(f"{csv_path}: unparseable CSV ({exc})") from exc
    header = list(df.columns)
    if not header or header[0] != "time_s":
        raise FormatError(f"{csv_path}: first column must be 'time_s'")
    declared = [ch["label"] for ch in side["channels"]]
    if header[1:] != declared:
        raise FormatError(f"{csv_path}: header {header[1:]} does not match sidecar {declared}")
    raw_rates = [float(ch["rate_hz"]) for ch in side["channels"]]
    duration = side.get("duration_s")
    if duration is None:
        duration = len(df) / max(raw_rates)
    channels = []
    for ch in side["channels"]:
        rate = float(ch["rate_hz"])
        n = int(round(duration * rate))
        col = df[ch["label"]].to_numpy()
        tail = col[n:]
        if tail.size and not np.all(np.isnan(tail)):
            raise FormatError(f"channel {ch['label']!r}: more samples than declared")
        values = col[:n]
        bad = np.flatnonzero(np.isnan(values))
        if bad.size:
            raise ValidationError(f"channel {ch['label']!r}: NaN sample at index {int(bad[0])}")
        meta = {k: v for k, v in ch.items() if k not in ("label", "kind", "rate_hz")}
        channels.append(Channel(ch["label"], ch["kind"], rate, values, meta))
    return Recording(str(side["subject_id"]), tuple(channels), float(duration))


def write_annotations(tracks, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tracks], indent=2) + "\n")


def load_annotations(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid annotation JSON ({exc})") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON list of tracks")
    return [AnnotationTrack.from_dict(d) for d in data]


# -------------------------------------------------------------------- resampling

def _antialias_taps(up: int, down: int, rate_in: float, rate_out: float) -> np.ndarray:
    # Designed at the upsampled rate; cutoff at 0.45 x the lower of the two rates.
    fs_up = rate_in * up
    cutoff = 0.45 * min(rate_in, rate_out)
    transition = 0.05 * min(rate_in, rate_out)
    n_taps, beta = signal.kaiserord(80.0, transition / (0.5 * fs_up))
    n_taps |= 1
    taps = signal.firwin(n_taps, cutoff, window=("kaiser", beta), fs=fs_up)
    return taps  # resample_poly applies the gain of up itself


def resample_channel(ch: Channel, target_hz: float) -> Channel:
    """Downsample ``ch`` to ``target_hz`` by rational polyphase resampling."""
    if target_hz > ch.rate_hz:
        raise ValidationError(
            f"channel {ch.label!r}: upsampling {ch.rate_hz} -> {target_hz} Hz is unsupported"
        )
    if target_hz == ch.rate_hz:
        return ch
    ratio = Fraction(str(target_hz)) / Fraction(str(ch.rate_hz))
    up, down = ratio.numerator, ratio.denominator
    taps = _antialias_taps(up, down, ch.rate_hz, target_hz)
    y = signal.resample_poly(ch.samples, up, down, window=taps)
    n_out = int(round(ch.n_samples * target_hz / ch.rate_hz))
    return Channel(ch.label, ch.kind, float(target_hz), y[:n_out], dict(ch.meta))


def resample_recording(rec: Recording, target_hz: float) -> Recording:
    chans = tuple(
        resample_channel(c, target_hz) if c.rate_hz != target_hz else c for c in rec.channels
    )
    return replace(rec, channels=chans)


# ------------------------------------------------------------ annotation frames

def rasterize(track: AnnotationTrack, frame_s: float, duration_s: float) -> np.ndarray:
    """Frame codes (0 none, 1 FOG, 2 other stop) on a grid of ``frame_s``.

    A frame takes the label of the episode containing its center.
    """
    if frame_s <= 0:
        raise ValidationError("frame_s must be positive")
    n = int(round(duration_s / frame_s))
    centers = (np.arange(n) + 0.5) * frame_s
    frames = np.zeros(n, dtype=np.int8)
    for e in track.episodes:
        inside = (centers >= e.onset_s) & (centers < e.offset_s)
        frames[inside] = FRAME_FOG if e.label == FOG else FRAME_OTHER
    return frames


def frames_to_track(frames: np.ndarray, frame_s: float, rater_id: str) -> AnnotationTrack:
    episodes = []
    codes = np.asarray(frames)
    edges = np.flatnonzero(np.diff(codes)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [codes.size]])
    for a, b in zip(starts, stops):
        code = codes[a]
        if code == FRAME_NONE:
            continue
        label = FOG if code == FRAME_FOG else OTHER_STOP
        episodes.append(Episode(round(a * frame_s, 9), round(b * frame_s, 9), label))
    return AnnotationTrack(rater_id, tuple(episodes))


def _track_span(*tracks) -> float:
    ends = [e.offset_s for t in tracks for e in t.episodes]
    return max(ends) if ends else 0.0


def interrater_stats(a: AnnotationTrack, b: AnnotationTrack, frame_s: float = 0.1,
                     duration_s: float | None = None) -> dict:
    """Percent agreement and Cohen's kappa on binary FOG / non-FOG frames."""
    if duration_s is None:
        duration_s = _track_span(a, b)
    fa = rasterize(a, frame_s, duration_s) == FRAME_FOG
    fb = rasterize(b, frame_s, duration_s) == FRAME_FOG
    if fa.size == 0:
        raise ValidationError("annotation span is empty")
    p_o = float(np.mean(fa == fb))
    pa, pb = fa.mean(), fb.mean()
    p_e = float(pa * pb + (1 - pa) * (1 - pb))
    if p_e == 1.0:
        if p_o == 1.0:
            kappa = 1.0
        else:
            raise ValidationError("degenerate marginals: kappa undefined")
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return {"percent_agreement": p_o, "kappa": float(kappa)}


def adjudicate(a: AnnotationTrack, b: AnnotationTrack, tiebreak: AnnotationTrack,
               frame_s: float = 0.1, duration_s: float | None = None,
               rater_id: str = "adjudicated") -> AnnotationTrack:
    """Frame-wise agreement of ``a`` and ``b``; the third rater settles disagreements."""
    if duration_s is None:
        duration_s = _track_span(a, b, tiebreak)
    fa = rasterize(a, frame_s, duration_s)
    fb = rasterize(b, frame_s, duration_s)
    ft = rasterize(tiebreak, frame_s, duration_s)
    out = np.where(fa == fb, fa, ft)
    return frames_to_track(out, frame_s, rater_id)
