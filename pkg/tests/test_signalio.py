import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import sine
from fogsense.errors import FormatError, ValidationError
from fogsense.signalio import (
    EEG, FOG, OTHER_STOP, AnnotationTrack, Channel, Episode, Recording, adjudicate,
    interrater_stats, load_annotations, load_recording, rasterize, resample_channel,
    write_annotations, write_recording,
)
from fogsense.synth import SynthConfig, generate_dataset


def eeg(label, x, rate=500.0):
    return Channel(label, EEG, rate, x, {"electrode": label})


def test_minimal_two_channel_recording(tmp_path):
    rng = np.random.default_rng(0)
    rec = Recording("S01", (eeg("Fz", rng.normal(size=500)), eeg("Cz", rng.normal(size=500))), 1.0)
    write_recording(rec, tmp_path / "r.csv")
    back = load_recording(tmp_path / "r.csv")
    assert [c.n_samples for c in back.channels] == [500, 500]
    assert back == rec


def test_duplicate_label_rejected(tmp_path):
    x = np.zeros(500)
    with pytest.raises(ValidationError):
        Recording("S01", (eeg("Fz", x), eeg("Fz", x)), 1.0)
    rec = Recording("S01", (eeg("Fz", x), eeg("Cz", x)), 1.0)
    write_recording(rec, tmp_path / "r.csv")
    side = json.loads((tmp_path / "r.json").read_text())
    side["channels"][1]["label"] = "Fz"
    (tmp_path / "r.json").write_text(json.dumps(side))
    with pytest.raises(ValidationError):
        load_recording(tmp_path / "r.csv")


def test_header_mismatch_is_format_error(tmp_path):
    rec = Recording("S01", (eeg("Fz", np.ones(500)),), 1.0)
    write_recording(rec, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().replace("Fz", "Oz", 1)
    (tmp_path / "r.csv").write_text(text)
    with pytest.raises(FormatError):
        load_recording(tmp_path / "r.csv")


def test_nan_sample_rejected():
    x = np.zeros(500)
    x[10] = np.nan
    with pytest.raises(ValidationError, match="index 10"):
        eeg("Fz", x)


def test_mixed_rate_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    a = eeg("Fz", rng.normal(size=1000), 500.0)
    b = eeg("Cz", rng.normal(size=1024), 512.0)
    rec = Recording("S02", (a, b), 2.0)
    write_recording(rec, tmp_path / "r.csv")
    assert load_recording(tmp_path / "r.csv") == rec


@pytest.mark.slow
def test_synthetic_dataset_round_trip(tmp_path):
    subjects = generate_dataset(SynthConfig(n_subjects=15, task_duration_s=60.0, seed=3))
    for s in subjects:
        path = tmp_path / f"{s.subject_id}.csv"
        write_recording(s.recording, path)
        back = load_recording(path)
        assert back == s.recording
    assert len(list(tmp_path.glob("*.csv"))) == 15


def test_annotation_round_trip(tmp_path):
    tracks = [AnnotationTrack("a", (Episode(1.0, 2.5), Episode(4.0, 5.0, OTHER_STOP))),
              AnnotationTrack("b", ())]
    write_annotations(tracks, tmp_path / "a.json")
    assert load_annotations(tmp_path / "a.json") == tracks


def test_overlapping_episodes_rejected():
    with pytest.raises(ValidationError):
        AnnotationTrack("a", (Episode(1.0, 3.0), Episode(2.0, 4.0)))


# ------------------------------------------------------------------ resampling

def test_resample_sine_amplitude():
    x = sine(10.0, 512.0, 4.0)
    ch = Channel("Fz", EEG, 512.0, x, {"electrode": "Fz"})
    out = resample_channel(ch, 500.0)
    assert out.n_samples == 2000
    ref = sine(10.0, 500.0, 4.0)
    mid = slice(250, 1750)
    amp = np.sqrt(2 * np.mean(out.samples[mid] ** 2))
    assert abs(amp - 1.0) < 0.01
    assert np.max(np.abs(out.samples[mid] - ref[mid])) < 0.01


def test_resample_identity_is_bitwise():
    ch = eeg("Fz", np.random.default_rng(0).normal(size=512), 512.0)
    assert resample_channel(ch, 512.0) is ch


def test_resample_rejects_upsampling():
    with pytest.raises(ValidationError):
        resample_channel(eeg("Fz", np.zeros(500)), 512.0)


def test_resample_band_limits_white_noise():
    x = np.random.default_rng(2).normal(size=512 * 20)
    out = resample_channel(eeg("Fz", x, 512.0), 500.0).samples
    f = np.fft.rfftfreq(out.size, 1 / 500.0)
    p = np.abs(np.fft.rfft(out)) ** 2
    passband = p[(f > 10) & (f < 200)].mean()
    edge = p[f >= 240].mean()
    assert 10 * np.log10(edge / passband) < -40


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_resample_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 1024))
    r = lambda v: resample_channel(eeg("Fz", v, 512.0), 500.0).samples  # noqa: E731
    lhs = r(alpha * x + beta * y)
    rhs = alpha * r(x) + beta * r(y)
    scale = max(1.0, np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


# ------------------------------------------------------------------ raters

def frames_track(frames, frame_s=0.1, rid="r"):
    from fogsense.signalio import frames_to_track
    return frames_to_track(np.asarray(frames, dtype=np.int8), frame_s, rid)


def test_identical_tracks_agree():
    t = AnnotationTrack("a", (Episode(1.0, 2.0), Episode(5.0, 7.5)))
    s = interrater_stats(t, t, duration_s=10.0)
    assert s == {"percent_agreement": 1.0, "kappa": 1.0}


def test_complete_disagreement_kappa_minus_one():
    a = frames_track([1] * 50 + [0] * 50)
    b = frames_track([0] * 50 + [1] * 50)
    s = interrater_stats(a, b, duration_s=10.0)
    assert s["percent_agreement"] == 0.0
    assert s["kappa"] == pytest.approx(-1.0, abs=1e-12)


def test_contingency_table_kappa():
    # A: 30 FOG frames, B: 20, overlap 15, out of 100 frames
    a = np.zeros(100, int)
    b = np.zeros(100, int)
    a[:30] = 1
    b[15:35] = 1
    s = interrater_stats(frames_track(a), frames_track(b), duration_s=10.0)
    # table: both 15, A only 15, B only 5, neither 65 -> p_o 0.80, p_e 0.62
    assert s["percent_agreement"] == pytest.approx(0.80, abs=1e-12)
    assert s["kappa"] == pytest.approx(9 / 19, abs=1e-12)


def test_kappa_one_iff_perfect_agreement():
    a = frames_track([0, 1, 1, 0, 1] * 20)
    b = frames_track([0, 1, 1, 0, 0] * 20)
    assert interrater_stats(a, a, duration_s=10.0)["kappa"] == 1.0
    assert interrater_stats(a, b, duration_s=10.0)["kappa"] < 1.0


def test_adjudicate_agreement_dominates():
    a = AnnotationTrack("a", (Episode(1.0, 2.0),))
    tie = AnnotationTrack("t", (Episode(5.0, 6.0),))
    out = adjudicate(a, a, tie, duration_s=10.0)
    assert out.episodes == a.episodes


def test_adjudicate_tiebreak():
    a = AnnotationTrack("a", (Episode(2.0, 4.0),))
    b = AnnotationTrack("b", ())
    out = adjudicate(a, b, a, duration_s=10.0)
    assert out.episodes == (Episode(2.0, 4.0, FOG),)


@given(st.integers(0, 2 ** 16))
def test_adjudicate_matches_framewise_oracle(seed):
    rng = np.random.default_rng(seed)
    tracks = [frames_track(rng.choice([0, 1, 2], size=60, p=[0.6, 0.3, 0.1])) for _ in range(3)]
    out = adjudicate(*tracks, duration_s=6.0)
    fa, fb, ft = (rasterize(t, 0.1, 6.0) for t in tracks)
    oracle = np.array([x if x == y else z for x, y, z in zip(fa, fb, ft)])
    assert np.array_equal(rasterize(out, 0.1, 6.0), oracle)
