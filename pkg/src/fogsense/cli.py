"""Command-line entry point.

Subcommands: synth, features, characterize, select, train, evaluate, stream.
Every command that writes under ``--out`` also writes ``manifest.json`` with
the canonical config, its hash, the seed, library versions and a digest of
each output file. There are no timestamps, so identical inputs give
identical manifests.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import ConfigError, FogSenseError

log = logging.getLogger("fogsense")

DEFAULT_CONFIG = "default"
MANIFEST_FILE = "manifest.json"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
COMMANDS = ("synth", "features", "characterize", "select", "train", "evaluate", "stream")
INF = math.inf


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class Key:
    type: type
    default: object
    lo: float = -INF
    hi: float = INF
    choices: tuple = ()


def _synth_keys() -> dict:
    from .synth import SynthConfig

    bounds = {
        "n_subjects": (1, 1000), "task_duration_s": (10, 3600), "eeg_rate_hz": (100, 5000),
        "porti_rate_hz": (100, 5000), "turn_period_s": (1, 60), "fog_rate_per_min": (0, 30),
        "fog_median_s": (0.1, 120), "fog_min_s": (0.1, 120), "fog_max_s": (0.1, 600),
        "fog_sigma": (0.01, 5), "other_stop_rate_per_min": (0, 30), "min_gap_s": (0, 60),
        "edge_margin_s": (0, 60), "fi_drop": (0, 1), "spv_slowdown": (0, 1),
        "spv_slowdown_lead_s": (0, 30), "spv_ramp_s": (0, 10), "stride_inflation": (1, 20),
        "gait_cadence_cv": (0, 0.5), "gait_shape_cv": (0, 1),
        "hr_effect": (-60, 60), "theta_effect": (-10, 10), "effect_dropout": (0, 1),
        "eeg_noise_uv": (0, 1000), "eog_noise_uv": (0, 1000), "ecg_noise_mv": (0, 10),
        "accel_noise_g": (0, 10), "footswitch_noise_v": (0, 10),
    }
    out = {}
    for f in dataclasses.fields(SynthConfig):
        if f.name == "seed":
            continue
        lo, hi = bounds.get(f.name, (-INF, INF))
        out[f.name] = Key(type(f.default), f.default, lo, hi)
    return out


SCHEMA = {
    "paths": {
        "data_dir": Key(str, ""),
        "out_dir": Key(str, ""),
    },
    "features": {
        "rate_hz": Key(float, 500.0, 50, 5000),
        "theta_lo_hz": Key(float, 4.0, 0.1, 100),
        "theta_hi_hz": Key(float, 7.0, 0.1, 100),
        "eeg_prefilter_lo_hz": Key(float, 0.5, 0.01, 100),
        "eeg_prefilter_hi_hz": Key(float, 45.0, 1, 200),
        "n_freqs": Key(int, 20, 2, 200),
        "cycles": Key(float, 6.0, 3, 20),
        "fi_window_s": Key(float, 2.0, 0.5, 10),
    },
    "select": {
        "threshold": Key(float, 0.85, 0, 1),
        "n_bins": Key(int, 10, 2, 100),
        "mode": Key(str, "per_fold", choices=("per_fold", "global", "none")),
        "empty_fallback": Key(bool, True),
    },
    "model": {
        "n_rounds": Key(int, 100, 1, 10000),
        "max_depth": Key(int, 3, 1, 32),
        "undersample_ratio": Key(float, 1.0, 0.01, INF),
    },
    "evaluate": {
        "window_s": Key(float, 2.56, 0.1, 60),
        "overlap": Key(float, 0.5, 0, 0.95),
        "buffer_s": Key(float, 3.0, 0, 60),
        "tau": Key(float, 0.5, 0, 1),
        "n_jobs": Key(int, 1, 1, 256),
    },
    "run": {
        "seed": Key(int, 0, 0, 2 ** 32 - 1),
    },
}
SCHEMA["synth"] = _synth_keys()


def _parse_value(section: str, name: str, key: Key, raw):
    where = f"[{section}] {name}"
    if key.type is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if key.type is str:
        v = str(raw).strip()
        if key.choices and v not in key.choices:
            raise ConfigError(f"{where}: must be one of {list(key.choices)}, got {v!r}")
        return v
    try:
        if key.type is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError
            v = int(f)
        else:
            v = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {key.type.__name__}, got {raw!r}") from None
    if not math.isfinite(v) or not key.lo <= v <= key.hi:
        raise ConfigError(f"{where} = {raw!r} out of range [{key.lo}, {key.hi}]")
    return v


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted, range-checked run configuration."""

    values: dict  # section -> {key: value}

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def serialize(self) -> str:
        """Canonical INI text: sections and keys in schema order."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for name in keys:
                lines.append(f"{name} = {_fmt_value(self.values[section][name])}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def replace(self, section: str, **changes) -> "RunConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, raw in changes.items():
            vals[section][k] = _parse_value(section, k, SCHEMA[section][k], raw)
        return _checked(vals)

    # typed views for the pipeline stages

    def synth_config(self):
        from .synth import SynthConfig

        return SynthConfig(**self.values["synth"], seed=self.seed)

    def feature_params(self):
        from .features import FeatureParams

        f = self.values["features"]
        return FeatureParams(rate_hz=f["rate_hz"], theta_band=(f["theta_lo_hz"], f["theta_hi_hz"]),
                             eeg_prefilter=(f["eeg_prefilter_lo_hz"], f["eeg_prefilter_hi_hz"]),
                             n_freqs=f["n_freqs"], cycles=f["cycles"], fi_window_s=f["fi_window_s"],
                             seed=self.seed)

    def model_params(self):
        from .model import ModelParams

        m = self.values["model"]
        return ModelParams(n_rounds=m["n_rounds"], max_depth=m["max_depth"],
                           undersample_ratio=m["undersample_ratio"], seed=self.seed)

    def loso_params(self):
        from .evaluate import LosoParams

        s, e = self.values["select"], self.values["evaluate"]
        return LosoParams(threshold=s["threshold"], n_bins=s["n_bins"], selection=s["mode"],
                          empty_fallback=s["empty_fallback"], model=self.model_params(),
                          tau=e["tau"], buffer_s=e["buffer_s"], n_jobs=e["n_jobs"])


def _checked(vals: dict) -> RunConfig:
    f, syn = vals["features"], vals["synth"]
    if not f["theta_lo_hz"] < f["theta_hi_hz"]:
        raise ConfigError("[features] theta_lo_hz must be below theta_hi_hz")
    if not f["eeg_prefilter_lo_hz"] < f["eeg_prefilter_hi_hz"]:
        raise ConfigError("[features] eeg_prefilter_lo_hz must be below eeg_prefilter_hi_hz")
    if not syn["fog_min_s"] <= syn["fog_median_s"] <= syn["fog_max_s"]:
        raise ConfigError("[synth] need fog_min_s <= fog_median_s <= fog_max_s")
    return RunConfig(vals)


def default_config() -> RunConfig:
    return RunConfig({s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()})


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    vals = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for name, raw in parser.items(section):
            if name not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key [{section}] {name}")
            vals[section][name] = _parse_value(section, name, SCHEMA[section][name], raw)
    return _checked(vals)


def validate_config(path) -> RunConfig:
    """Load an INI config (``"default"`` gives the built-in defaults)."""
    if path is None or str(path) == DEFAULT_CONFIG:
        return default_config()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


# ---------------------------------------------------------------- manifests

def library_versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "scikit-learn", "pandas", "PyWavelets"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs, extra: dict | None = None):
    files = sorted({Path(p).resolve() for p in outputs})
    root = out_dir.resolve()
    manifest = {
        "command": command,
        "config": cfg.values,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": library_versions(),
        "outputs": {str(p.relative_to(root)) if p.is_relative_to(root) else p.name: _digest(p)
                    for p in files},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _num(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


# ----------------------------------------------------------------- commands

def _resolve_dirs(args, cfg: RunConfig, need_data: bool = True) -> tuple:
    data = getattr(args, "data", None) or cfg["paths"]["data_dir"] or None
    out = args.out or cfg["paths"]["out_dir"] or None
    if need_data:
        if data is None:
            raise ConfigError("no data directory: pass --data or set [paths] data_dir")
        if not Path(data).is_dir():
            raise ConfigError(f"data directory not found: {data}")
    if out is None:
        raise ConfigError("no output directory: pass --out or set [paths] out_dir")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return (Path(data) if data else None), out


def _load(data_dir, cfg: RunConfig):
    from .pipeline import compute_features, load_dataset

    subjects = load_dataset(data_dir)
    feats = compute_features(subjects, cfg.feature_params(), cfg["evaluate"]["n_jobs"])
    anns = {s.subject_id: s.annotation for s in subjects}
    return subjects, feats, anns


def _epochs(feats, anns, cfg: RunConfig, names=None):
    from .pipeline import build_epochs

    e = cfg["evaluate"]
    return build_epochs(feats, anns, names, e["window_s"], e["overlap"], e["buffer_s"])


def write_epochs_csv(path: Path, data) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "start_s", "end_s", "label", *data.feature_names])
        for i in range(data.X.shape[0]):
            w.writerow([data.subject_id[i], _num(data.start_s[i]), _num(data.end_s[i]),
                        int(data.y[i]), *(_num(v) for v in data.X[i])])
    return path


def cmd_synth(args, cfg):
    from .synth import generate_dataset, write_dataset

    _, out = _resolve_dirs(args, cfg, need_data=False)
    scfg = cfg.synth_config()
    written = write_dataset(generate_dataset(scfg), out, scfg)
    write_manifest(out, "synth", cfg, written)
    print(f"wrote {scfg.n_subjects} subjects to {out}")


def cmd_features(args, cfg):
    data_dir, out = _resolve_dirs(args, cfg)
    _, feats, anns = _load(data_dir, cfg)
    ds = _epochs(feats, anns, cfg)
    path = write_epochs_csv(out / "epochs.csv", ds)
    write_manifest(out, "features", cfg, [path], {"data_dir": str(data_dir)})
    print(f"wrote {ds.X.shape[0]} epochs x {ds.X.shape[1]} features to {path}")


# windows (relative to onset) summarised in the characterization report
CHAR_WINDOWS = {"pre_10_7": (-10.0, -7.0), "pre_5_0": (-5.0, 0.0), "fog_0.5_3": (0.5, 3.0)}


def cmd_characterize(args, cfg):
    from .pipeline import characterize_all

    data_dir, out = _resolve_dirs(args, cfg)
    _, feats, anns = _load(data_dir, cfg)
    results = characterize_all(feats, anns)
    written, summary = [], {}
    for name, res in results.items():
        band = res["band"]
        path = out / f"band_{name}.csv"
        band.to_csv(path)
        written.append(path)
        sep = band.separated()
        t = band.relative_time_s
        summary[name] = {
            "n_freezing": len(res["freezing"]),
            "n_controls": len(res["controls"]),
            "n_unmatched": len(res["unmatched"]),
            "separated_fraction": {k: float(np.mean(sep[(t >= a) & (t <= b)]))
                                   for k, (a, b) in CHAR_WINDOWS.items()},
        }
    written.append(_write_json(out / "characterization.json", summary))
    write_manifest(out, "characterize", cfg, written, {"data_dir": str(data_dir)})
    print(f"characterized {len(results)} features into {out}")


def _select(ds, cfg):
    from .select import FCBFSelector

    s = cfg["select"]
    lab = ds.y >= 0
    return FCBFSelector(s["threshold"], s["n_bins"], s["empty_fallback"]).fit(ds.X[lab], ds.y[lab])


def cmd_select(args, cfg):
    from .select import write_su_report

    data_dir, out = _resolve_dirs(args, cfg)
    _, feats, anns = _load(data_dir, cfg)
    ds = _epochs(feats, anns, cfg)
    sel = _select(ds, cfg)
    report = out / "su_report.csv"
    write_su_report(report, ds.feature_names, sel.su_class_, sel.selected_)
    summary = _write_json(out / "selection.json", {
        "selected": [ds.feature_names[j] for j in sel.selected_],
        "fallback_used": bool(sel.fallback_used_),
        "threshold": cfg["select"]["threshold"],
    })
    write_manifest(out, "select", cfg, [report, summary], {"data_dir": str(data_dir)})
    print("selected:", ", ".join(ds.feature_names[j] for j in sel.selected_) or "(none)")


def _causal_epochs(data_dir, cfg):
    """Labeled epochs from the causal (streamable) feature pipeline."""
    from .evaluate import label_epochs
    from .model import EpochDataset
    from .pipeline import load_dataset
    from .streaming import STREAMABLE, causal_epoch_features

    e = cfg["evaluate"]
    names = tuple(n for n in STREAMABLE if n != "theta") + ("theta",)
    parts = []
    for s in load_dataset(data_dir):
        ep = causal_epoch_features(s.recording, s.footswitch, names, e["window_s"], e["overlap"],
                                   cfg.seed, s.subject_id)
        parts.append(label_epochs(ep, s.annotation, e["buffer_s"]))
    return EpochDataset.concat(parts)


def cmd_train(args, cfg):
    from .model import train_rusboost

    data_dir, out = _resolve_dirs(args, cfg)
    if args.causal:
        ds = _causal_epochs(data_dir, cfg)
    else:
        _, feats, anns = _load(data_dir, cfg)
        ds = _epochs(feats, anns, cfg)
    sel = _select(ds, cfg)
    if not sel.selected_:
        raise FogSenseError("feature selection left no features; try [select] empty_fallback = true")
    model = train_rusboost(ds, cfg.model_params(), sel.selected_,
                           meta={"fallback_used": bool(sel.fallback_used_), "config_hash": cfg.hash()})
    path = out / "model.json"
    model.save(path)
    write_manifest(out, "train", cfg, [path], {"data_dir": str(data_dir)})
    print(f"trained on {int(np.sum(ds.y >= 0))} epochs; model at {path}")


def cmd_evaluate(args, cfg):
    from .evaluate import compare_systems, loso_cv, write_pr_curves
    from .pipeline import detection_names

    data_dir, out = _resolve_dirs(args, cfg)
    _, feats, anns = _load(data_dir, cfg)
    ds = _epochs(feats, anns, cfg)
    params = cfg.loso_params()
    res = loso_cv(ds, anns, params)
    metrics_path = out / "metrics.csv"
    res.report.to_csv(metrics_path)
    curves_path = out / "pr_curves.csv"
    write_pr_curves(curves_path, res.curves)
    folds = {sid: {"selected": [ds.feature_names[j] for j in f.selected],
                   "fallback_used": bool(f.fallback_used)} for sid, f in res.folds.items()}
    written = [metrics_path, curves_path,
               _write_json(out / "folds.json", {"folds": folds, "skipped": list(res.report.skipped)})]
    if args.compare:
        subjects = list(res.report.per_subject)
        multi = [res.report.per_subject[s]["mcc"] for s in subjects]
        singles, auc = {}, {"multi": res.pr_aucs()}
        for name in detection_names(feats):
            single = loso_cv(ds.columns([name]), anns, dataclasses.replace(params, empty_fallback=True))
            singles[name] = [single.report.per_subject[s]["mcc"] for s in subjects]
            auc[name] = single.pr_aucs()
        written.append(_write_json(out / "comparison.json", {
            "wilcoxon": compare_systems(multi, singles), "pr_auc": auc}))
    write_manifest(out, "evaluate", cfg, written, {"data_dir": str(data_dir)})
    s = res.report.summary()
    print(" ".join(f"{k}={m:.3f}±{sd:.3f}" for k, (m, sd) in s.items()))


def cmd_stream(args, cfg):
    from .features import load_footswitch_configs
    from .model import DetectorModel
    from .streaming import channel_infos, run_ndjson

    for p in (args.model, args.sidecar):
        if not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    model = DetectorModel.load(args.model)
    sidecar = json.loads(Path(args.sidecar).read_text())
    footswitch = None
    if args.footswitch:
        if not Path(args.footswitch).is_file():
            raise ConfigError(f"file not found: {args.footswitch}")
        configs = load_footswitch_configs(args.footswitch)
        sid = args.subject or sidecar.get("subject_id")
        if sid not in configs:
            raise ConfigError(f"no footswitch config for subject {sid!r}")
        footswitch = configs[sid]
    tau = cfg["evaluate"]["tau"] if args.tau is None else args.tau
    n = run_ndjson(model, channel_infos(sidecar), footswitch, tau, sys.stdin, sys.stdout)
    log.info("emitted %d events", n)


HANDLERS = {c: globals()[f"cmd_{c}"] for c in COMMANDS}


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fogsense", description="Freezing-of-gait detection pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_, data=True, out=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=DEFAULT_CONFIG,
                        help="INI config file, or 'default' for built-in defaults")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        if data:
            sp.add_argument("--data", help="dataset directory (recordings, annotations, footswitch.json)")
        if out:
            sp.add_argument("--out", help="output directory")
        return sp

    add("synth", "generate a synthetic dataset", data=False)
    add("features", "extract per-epoch features to epochs.csv")
    add("characterize", "freezing vs matched-turning confidence bands per feature")
    add("select", "FCBF feature selection report")
    tr = add("train", "train a detector on all subjects")
    tr.add_argument("--causal", action="store_true",
                    help="only offer features the streaming detector can compute")
    ev = add("evaluate", "leave-one-subject-out evaluation")
    ev.add_argument("--compare", action="store_true",
                    help="also evaluate each single feature and compare with Wilcoxon tests")
    st = add("stream", "score NDJSON samples from stdin, write events to stdout", data=False, out=False)
    st.add_argument("--model", required=True, help="model.json from 'train --causal'")
    st.add_argument("--sidecar", required=True, help="recording sidecar JSON describing the channels")
    st.add_argument("--footswitch", help="footswitch.json (needed for stride)")
    st.add_argument("--subject", help="subject id in footswitch.json (default: the sidecar's)")
    st.add_argument("--tau", type=float, help="detection threshold (default: [evaluate] tau)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = validate_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace("run", seed=args.seed)
    except ConfigError as exc:
        print(f"fogsense: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"fogsense: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FogSenseError as exc:
        print(f"fogsense: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
