"""Glue between stages: dataset loading, per-subject features and epoch sets."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .characterize import characterize_feature
from .errors import FormatError
from .evaluate import BUFFER_S, OVERLAP, WINDOW_S, epochize, label_epochs
from .features import FEATURE_ORDER, FeatureParams, extract_all, load_footswitch_configs, turning_phase
from .model import EpochDataset
from .signalio import load_annotations, load_recording

log = logging.getLogger(__name__)

ADJUDICATED = "adjudicated"
FOOTSWITCH_FILE = "footswitch.json"


@dataclass
class SubjectData:
    subject_id: str
    recording: object
    annotation: object
    footswitch: object = None


def _pick_track(tracks, path):
    for t in tracks:
        if t.rater_id == ADJUDICATED:
            return t
    if len(tracks) == 1:
        return tracks[0]
    raise FormatError(f"{path}: no adjudicated track among {[t.rater_id for t in tracks]}")


def load_dataset(data_dir) -> list:
    """Every ``<subject>.csv`` in ``data_dir`` with its annotations and footswitch config."""
    d = Path(data_dir)
    fs_path = d / FOOTSWITCH_FILE
    footswitch = load_footswitch_configs(fs_path) if fs_path.exists() else {}
    out = []
    for csv_path in sorted(d.glob("*.csv")):
        rec = load_recording(csv_path)
        ann_path = d / f"{rec.subject_id}.annotations.json"
        if not ann_path.exists():
            raise FormatError(f"missing annotations for {rec.subject_id}: {ann_path}")
        ann = _pick_track(load_annotations(ann_path), ann_path)
        out.append(SubjectData(rec.subject_id, rec, ann, footswitch.get(rec.subject_id)))
    if not out:
        raise FormatError(f"no recordings found in {d}")
    return out


def _features_job(args):
    rec, fsw, params = args
    return extract_all(rec, fsw, params)


def compute_features(subjects, params: FeatureParams = FeatureParams(), n_jobs: int = 1) -> dict:
    """``{subject_id: {feature name: FeatureSeries}}``."""
    jobs = [(s.recording, s.footswitch, params) for s in subjects]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            feats = list(ex.map(_features_job, jobs))
    else:
        feats = [_features_job(j) for j in jobs]
    return {s.subject_id: f for s, f in zip(subjects, feats)}


def detection_names(features: dict) -> tuple:
    """Detection features present for every subject, in canonical order."""
    common = set.intersection(*(set(f) for f in features.values()))
    return tuple(n for n in FEATURE_ORDER if n in common)


def build_epochs(features: dict, annotations: dict, names=None, window_s: float = WINDOW_S,
                 overlap: float = OVERLAP, buffer_s: float = BUFFER_S) -> EpochDataset:
    names = detection_names(features) if names is None else tuple(names)
    parts = []
    for sid in sorted(features):
        ep = epochize(features[sid], sid, window_s, overlap, names)
        parts.append(label_epochs(ep, annotations[sid], buffer_s))
    return EpochDataset.concat(parts)


CHARACTERIZED = ("theta", "spv", "hr") + tuple(f"fi_{p}" for p in
                                                ("left_knee", "right_knee", "left_ankle",
                                                 "right_ankle")) + ("stride",)


def characterize_all(features: dict, annotations: dict, names=CHARACTERIZED) -> dict:
    """``{feature: characterize_feature result}`` pooled across subjects."""
    phases = {sid: turning_phase(f["spv_signed"]) for sid, f in features.items()
              if "spv_signed" in f}
    out = {}
    for name in names:
        items = [(sid, f[name], phases[sid], annotations[sid])
                 for sid, f in sorted(features.items()) if name in f and sid in phases]
        if items:
            out[name] = characterize_feature(items)
    return out
