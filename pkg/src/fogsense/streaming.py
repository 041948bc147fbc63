"""Causal epoch features and the streaming detector.

Every channel is processed at its native rate by stateful causal stages
(forward-only filters, trailing medians, confirm-after-n debouncing). Epoch
features are computed from the processed samples whose timestamps fall in
``[start, end)``. The offline causal pipeline feeds whole channels through
the same stages, so stream and offline scores agree to rounding.

Wire protocol (newline-delimited JSON):
    in:  {"t": seconds, "channel": label, "value": number}
    out: {"t_epoch_end": seconds, "score": number, "detected": bool}
         {"gap": true, "t": seconds}
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .errors import ConfigError, ValidationError
from .evaluate import OVERLAP, TAU, WINDOW_S
from .features import LOCOMOTION_BAND, TREMBLING_BAND, cluster_slow_phases
from .model import EpochDataset, predict_scores
from .signalio import ACCEL, ACCEL_AXES, EEG, EOG, FEET, FOOTSWITCH, PLACEMENTS

EOG_LOWPASS_HZ = 30.0
EOG_MEDIAN_MS = 50.0
EEG_PREFILTER = (0.5, 45.0)
THETA_BAND = (4.0, 7.0)
DEBOUNCE_MS = 40.0
FI_FLOOR = 1e-6
STREAMABLE = ("theta", "spv", "stride") + tuple(f"fi_{p}" for p in PLACEMENTS)


# ------------------------------------------------------------ causal stages

class CausalMedian:
    """Trailing median whose chunked output equals the whole-signal output."""

    def __init__(self, rate_hz: float, window_ms: float):
        self.rate_hz = rate_hz
        self.window_ms = window_ms
        self.w = dsp.median_window_samples(rate_hz, window_ms)
        self.reset()

    def reset(self):
        self.history = np.zeros(0)

    def process(self, chunk) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=float)
        if chunk.size == 0:
            return chunk
        x = np.concatenate([self.history, chunk])
        y = dsp.causal_median_filter(x, self.rate_hz, self.window_ms)[self.history.size:]
        self.history = x[-(self.w - 1):] if self.w > 1 else np.zeros(0)
        return y


class BackwardDifference:
    def __init__(self, rate_hz: float):
        self.rate_hz = rate_hz
        self.reset()

    def reset(self):
        self.prev = None

    def process(self, chunk) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=float)
        if chunk.size == 0:
            return chunk
        prev = chunk[0] if self.prev is None else self.prev
        out = np.diff(np.concatenate([[prev], chunk])) * self.rate_hz
        self.prev = chunk[-1]
        return out


class ConfirmDebounce:
    """A new contact state is accepted after ``n`` consecutive samples hold it."""

    def __init__(self, n: int):
        self.n = max(1, int(n))
        self.reset()

    def reset(self):
        self.state = None
        self.run = 0

    def process(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=bool)
        out = np.empty(raw.size, dtype=bool)
        state, run = self.state, self.run
        for i, r in enumerate(raw):
            if state is None:
                state = bool(r)
            elif r != state:
                run += 1
                if run >= self.n:
                    state, run = bool(r), 0
            else:
                run = 0
            out[i] = state
        self.state, self.run = state, run
        return out


# -------------------------------------------------------------- processors

class _Processor:
    """Per-feature causal chain: raw timed samples in, processed timed samples out."""

    channels: tuple

    def reset(self):
        raise NotImplementedError

    def process(self, t: np.ndarray, cols: dict) -> dict:
        raise NotImplementedError


class EOGProcessor(_Processor):
    def __init__(self, label: str, rate_hz: float):
        self.channels = (label,)
        self.rate_hz = rate_hz
        self.lowpass = dsp.CausalFilter(dsp.FilterSpec(dsp.LOWPASS, EOG_LOWPASS_HZ, 4, dsp.CAUSAL), rate_hz)
        self.median = CausalMedian(rate_hz, EOG_MEDIAN_MS)
        self.diff = BackwardDifference(rate_hz)

    def reset(self):
        for s in (self.lowpass, self.median, self.diff):
            s.reset()

    def process(self, t, cols):
        x = cols[self.channels[0]]
        return {"velocity": self.diff.process(self.median.process(self.lowpass.process(x)))}


class EEGProcessor(_Processor):
    def __init__(self, fz: str, cz: str, rate_hz: float):
        self.channels = (fz, cz)
        self.rate_hz = rate_hz
        self.filt = dsp.CausalFilter(dsp.FilterSpec(dsp.BANDPASS, EEG_PREFILTER, 4, dsp.CAUSAL), rate_hz)

    def reset(self):
        self.filt.reset()

    def process(self, t, cols):
        return {"fzcz": self.filt.process(cols[self.channels[0]] - cols[self.channels[1]])}


class AccelProcessor(_Processor):
    def __init__(self, labels: tuple, rate_hz: float):
        self.channels = tuple(labels)
        self.rate_hz = rate_hz

    def reset(self):
        pass

    def process(self, t, cols):
        return {ax: np.asarray(cols[lab], dtype=float) for ax, lab in zip(ACCEL_AXES, self.channels)}


class FootswitchProcessor(_Processor):
    def __init__(self, switches: dict, footswitch, rate_hz: float):
        # switches: label -> (foot, switch_index) for key switches only
        self.switches = switches
        self.channels = tuple(switches)
        self.footswitch = footswitch
        self.rate_hz = rate_hz
        n = int(round(DEBOUNCE_MS * rate_hz / 1000.0))
        self.debounce = {f: ConfirmDebounce(n) for f in FEET}
        self.reset()

    def reset(self):
        for d in self.debounce.values():
            d.reset()
        self.prev = {f: None for f in FEET}

    def process(self, t, cols):
        out = {}
        for foot in FEET:
            raw = None
            for lab, (f, idx) in self.switches.items():
                if f != foot:
                    continue
                on = np.asarray(cols[lab]) > self.footswitch.threshold(foot, idx)
                raw = on if raw is None else (raw | on)
            contact = self.debounce[foot].process(raw)
            prev = self.prev[foot]
            before = np.concatenate([[contact[0] if prev is None else prev], contact[:-1]])
            out[f"strike_{foot}"] = (contact & ~before).astype(float)
            if contact.size:
                self.prev[foot] = bool(contact[-1])
        return out


# ---------------------------------------------------------- epoch features

def band_power_fft(x, rate_hz: float, band) -> float:
    """Hann-windowed periodogram power in ``band`` (a sine of amplitude A gives A**2/2)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    w = np.hanning(n)
    X = np.fft.rfft((x - x.mean()) * w)
    f = np.fft.rfftfreq(n, 1.0 / rate_hz)
    dens = 2.0 * np.abs(X) ** 2 / (n * np.sum(w * w))
    m = (f >= band[0]) & (f <= band[1])
    return float(np.sum(dens[m]))


def epoch_spv(velocity, rate_hz: float, seed: int = 0) -> float:
    v = np.asarray(velocity, dtype=float)
    if v.size < 4 or not np.all(np.isfinite(v)):
        return math.nan
    slow = cluster_slow_phases(v, rate_hz, seed)
    if not slow.any():
        return math.nan
    direction = -1.0 if np.median(v) < 0 else 1.0
    return float(np.mean(v[slow]) * direction)


def epoch_freeze_index(axes: dict, rate_hz: float) -> float:
    if any(a.size < 8 or not np.all(np.isfinite(a)) for a in axes.values()):
        return math.nan
    trem = sum(band_power_fft(a, rate_hz, TREMBLING_BAND) for a in axes.values())
    loco = sum(band_power_fft(a, rate_hz, LOCOMOTION_BAND) for a in axes.values())
    floor = FI_FLOOR * (trem + loco)
    if trem + loco == 0:
        return math.nan
    return float(trem / max(loco, floor))


def epoch_theta(x, rate_hz: float) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 8 or not np.all(np.isfinite(x)):
        return math.nan
    return band_power_fft(x * 1e6, rate_hz, THETA_BAND)


def epoch_stride(strikes: dict, t_end: float) -> float:
    """Mean over feet of max(last completed stride, time since the last strike)."""
    vals = []
    for foot in FEET:
        s = [x for x in strikes[foot] if x < t_end]
        if not s:
            continue
        since = t_end - s[-1]
        last = s[-1] - s[-2] if len(s) >= 2 else 0.0
        vals.append(max(last, since))
    return float(np.mean(vals)) if vals else math.nan


# ----------------------------------------------------------------- layout

@dataclass(frozen=True)
class ChannelInfo:
    label: str
    kind: str
    rate_hz: float
    meta: dict = field(default_factory=dict)


def channel_infos(rec_or_sidecar) -> dict:
    """``{label: ChannelInfo}`` from a Recording or a sidecar dict."""
    if hasattr(rec_or_sidecar, "channels"):
        return {c.label: ChannelInfo(c.label, c.kind, c.rate_hz, dict(c.meta))
                for c in rec_or_sidecar.channels}
    out = {}
    for e in rec_or_sidecar["channels"]:
        meta = {k: v for k, v in e.items() if k not in ("label", "kind", "rate_hz")}
        out[e["label"]] = ChannelInfo(e["label"], e["kind"], float(e["rate_hz"]), meta)
    return out


def build_processors(names, infos: dict, footswitch) -> dict:
    """``{feature: processor}`` for each requested streamable feature."""
    procs = {}

    def find(kind, **meta):
        return [i for i in infos.values() if i.kind == kind
                and all(str(i.meta.get(k)) == str(v) for k, v in meta.items())]

    for name in names:
        if name not in STREAMABLE:
            raise ConfigError(f"feature {name!r} has no causal streaming implementation")
        if name == "spv":
            ch = find(EOG, axis="horizontal")
            if not ch:
                raise ConfigError("spv needs a horizontal EOG channel")
            procs[name] = EOGProcessor(ch[0].label, ch[0].rate_hz)
        elif name == "theta":
            fz, cz = find(EEG, electrode="Fz"), find(EEG, electrode="Cz")
            if not fz or not cz or fz[0].rate_hz != cz[0].rate_hz:
                raise ConfigError("theta needs Fz and Cz EEG channels on one clock")
            procs[name] = EEGProcessor(fz[0].label, cz[0].label, fz[0].rate_hz)
        elif name.startswith("fi_"):
            placement = name[3:]
            labels = []
            for ax in ACCEL_AXES:
                ch = find(ACCEL, placement=placement, axis=ax)
                if not ch:
                    raise ConfigError(f"{name} needs accelerometer axis {ax}")
                labels.append(ch[0])
            if len({c.rate_hz for c in labels}) != 1:
                raise ConfigError(f"{name}: accelerometer axes on different clocks")
            procs[name] = AccelProcessor(tuple(c.label for c in labels), labels[0].rate_hz)
        elif name == "stride":
            if footswitch is None:
                raise ConfigError("stride needs a footswitch configuration")
            sw = {}
            for i in find(FOOTSWITCH):
                foot, idx = i.meta["foot"], int(i.meta["switch_index"])
                if idx in footswitch.keys.for_foot(foot):
                    sw[i.label] = (foot, idx)
            if {f for f, _ in sw.values()} != set(FEET):
                raise ConfigError("stride needs key switches for both feet")
            rates = {infos[lab].rate_hz for lab in sw}
            if len(rates) != 1:
                raise ConfigError("footswitch channels on different clocks")
            procs[name] = FootswitchProcessor(sw, footswitch, rates.pop())
    return procs


class _FeatureState:
    """Processed samples and strike history for one feature."""

    def __init__(self, name: str, proc: _Processor):
        self.name = name
        self.proc = proc
        self.t = np.zeros(0)
        self.data = {}
        self.strikes = {f: [] for f in FEET}

    def append(self, t: np.ndarray, cols: dict):
        out = self.proc.process(t, cols)
        if self.name == "stride":
            for foot in FEET:
                hits = t[out[f"strike_{foot}"] > 0]
                self.strikes[foot].extend(hits.tolist())
            self.t = np.concatenate([self.t, t])
            return
        self.t = np.concatenate([self.t, t])
        for k, v in out.items():
            self.data[k] = np.concatenate([self.data.get(k, np.zeros(0)), v])

    def feature(self, start: float, end: float, seed: int) -> float:
        rate = self.proc.rate_hz
        if self.name == "stride":
            return epoch_stride(self.strikes, end)
        m = (self.t >= start) & (self.t < end)
        if self.name == "spv":
            return epoch_spv(self.data["velocity"][m], rate, seed)
        if self.name == "theta":
            return epoch_theta(self.data["fzcz"][m], rate)
        return epoch_freeze_index({k: v[m] for k, v in self.data.items()}, rate)

    def trim(self, before: float):
        keep = self.t >= before
        self.t = self.t[keep]
        for k in self.data:
            self.data[k] = self.data[k][keep]
        for foot in FEET:
            s = self.strikes[foot]
            if len(s) > 2:
                # two strikes suffice for the last completed stride
                self.strikes[foot] = [x for x in s[:-2] if x >= before] + s[-2:]


def _model_names(model) -> list:
    return [model.feature_names[i] for i in model.selected_features]


# ----------------------------------------------------------- offline causal

def causal_epoch_features(rec, footswitch, names, window_s: float = WINDOW_S,
                          overlap: float = OVERLAP, seed: int = 0, subject_id: str = "",
                          compute=None) -> EpochDataset:
    """Epoch features from whole channels run through the causal stages.

    ``compute`` limits which of ``names`` are evaluated (default: every
    streamable one); the remaining columns are NaN.
    """
    names = tuple(names)
    compute = [n for n in names if n in STREAMABLE] if compute is None else list(compute)
    infos = channel_infos(rec)
    procs = build_processors(compute, infos, footswitch)
    states = {}
    last_t = []
    for name, proc in procs.items():
        st = _FeatureState(name, proc)
        chans = [rec[lab] for lab in proc.channels]
        t = np.arange(chans[0].n_samples) / chans[0].rate_hz
        st.append(t, {c.label: c.samples for c in chans})
        states[name] = st
        last_t.append(t[-1])
    hop = window_s * (1.0 - overlap)
    rows, starts = [], []
    k = 0
    horizon = min(last_t) if last_t else -math.inf
    while True:
        start = k * hop
        end = start + window_s
        if end > horizon:
            break
        rows.append([states[n].feature(start, end, seed) if n in states else math.nan for n in names])
        starts.append(start)
        k += 1
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return EpochDataset(X, np.full(len(rows), -1), np.full(len(rows), subject_id, object),
                        np.array(starts), names, window_s)


def offline_causal_scores(model, rec, footswitch, window_s: float = WINDOW_S,
                          overlap: float = OVERLAP, seed: int = 0) -> tuple:
    """(epoch end times, scores) from the offline causal pipeline."""
    ds = causal_epoch_features(rec, footswitch, model.feature_names, window_s, overlap, seed,
                               compute=_model_names(model))
    return ds.end_s, predict_scores(model, ds)


# ----------------------------------------------------------------- streaming

class StreamDetector:
    """Sequential state machine turning timed samples into epoch scores.

    ``push`` returns the events completed by that sample. A channel jump
    longer than one window resets all state and yields one gap event; the
    epoch grid then restarts at the first sample after the gap.
    """

    def __init__(self, model, infos: dict, footswitch=None, tau: float = TAU,
                 window_s: float = WINDOW_S, overlap: float = OVERLAP, seed: int = 0):
        self.model = model
        self.tau = tau
        self.window_s = window_s
        self.hop = window_s * (1.0 - overlap)
        self.seed = seed
        self.names = tuple(model.feature_names)
        selected = _model_names(model)
        unsupported = [n for n in selected if n not in STREAMABLE]
        if unsupported:
            raise ConfigError(f"model uses features without a causal implementation: {unsupported}")
        self.procs = build_processors(selected, infos, footswitch)
        self.channel_owner = {}
        for name, p in self.procs.items():
            for lab in p.channels:
                self.channel_owner.setdefault(lab, []).append(name)
        self.latencies = []
        self.reset()

    def reset(self):
        for p in self.procs.values():
            p.reset()
        self.states = {n: _FeatureState(n, p) for n, p in self.procs.items()}
        self.pending = {lab: ([], []) for lab in self.channel_owner}
        self.last_t = {lab: None for lab in self.channel_owner}
        self.origin = None
        self.k = 0

    def _next_end(self) -> float:
        return self.origin + self.k * self.hop + self.window_s

    def push(self, t: float, channel: str, value: float) -> list:
        if channel not in self.channel_owner:
            return []
        t = float(t)
        events = []
        prev = self.last_t[channel]
        if prev is not None and t < prev:
            raise ValidationError(f"channel {channel!r}: timestamps must increase")
        if prev is not None and t - prev > self.window_s:
            events.append({"gap": True, "t": t})
            self.reset()
        if self.origin is None:
            self.origin = t
        self.last_t[channel] = t
        ts, vs = self.pending[channel]
        ts.append(t)
        vs.append(float(value))
        arrived = time.perf_counter()
        while all(v is not None and v >= self._next_end() for v in self.last_t.values()):
            events.append(self._close_epoch(arrived))
        return events

    def _flush_pending(self, end: float):
        # hand every feature its complete multi-channel rows with t < end
        for name, st in self.states.items():
            chans = st.proc.channels
            n = min(sum(1 for x in self.pending[c][0] if x < end) for c in chans)
            if n == 0:
                continue
            t = np.array(self.pending[chans[0]][0][:n])
            cols = {c: np.array(self.pending[c][1][:n]) for c in chans}
            st.append(t, cols)
        for c in self.pending:
            ts, vs = self.pending[c]
            # consumed once every owner has taken them; owners share prefixes
            n = sum(1 for x in ts if x < end)
            del ts[:n]
            del vs[:n]

    def _close_epoch(self, arrived: float) -> dict:
        start = self.origin + self.k * self.hop
        end = start + self.window_s
        self._flush_pending(end)
        row = np.full((1, len(self.names)), np.nan)
        for name, st in self.states.items():
            row[0, self.names.index(name)] = st.feature(start, end, self.seed)
        ds = EpochDataset(row, [-1], [""], [start], self.names, self.window_s)
        score = float(predict_scores(self.model, ds)[0])
        self.k += 1
        nxt = self.origin + self.k * self.hop
        for st in self.states.values():
            st.trim(nxt)
        self.latencies.append(time.perf_counter() - arrived)
        return {"t_epoch_end": end, "score": score, "detected": bool(score >= self.tau)}


def stream_detect(model, feed, infos: dict, footswitch=None, tau: float = TAU, **kwargs):
    """Yield events for an iterable of ``{"t", "channel", "value"}`` samples."""
    det = StreamDetector(model, infos, footswitch, tau, **kwargs)
    for msg in feed:
        yield from det.push(msg["t"], msg["channel"], msg["value"])


def recording_feed(rec, t_offset: float = 0.0):
    """Time-ordered sample messages for every channel of ``rec``."""
    ts, chans, vals = [], [], []
    for c in rec.channels:
        ts.append(np.arange(c.n_samples) / c.rate_hz + t_offset)
        chans.append(np.full(c.n_samples, c.label, dtype=object))
        vals.append(c.samples)
    t = np.concatenate(ts)
    ch = np.concatenate(chans)
    v = np.concatenate(vals)
    order = np.argsort(t, kind="stable")
    for i in order:
        yield {"t": float(t[i]), "channel": ch[i], "value": float(v[i])}


def run_ndjson(model, infos: dict, footswitch, tau: float, lines, out) -> int:
    """Drive the detector from NDJSON ``lines``; write events to ``out``. Returns event count."""
    det = StreamDetector(model, infos, footswitch, tau)
    n = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            t, ch, v = msg["t"], msg["channel"], msg["value"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"line {lineno}: malformed sample ({exc})") from exc
        for ev in det.push(t, ch, v):
            out.write(json.dumps(ev) + "\n")
            n += 1
        if hasattr(out, "flush"):
            out.flush()
    return n
