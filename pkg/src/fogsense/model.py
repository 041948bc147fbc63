"""RUSBoost epoch classifier and the epoch dataset it consumes.

Each boosting round draws a uniform random subset of the majority class, fits
a depth-limited tree on the round set weighted by the current boosting
weights, and updates the weights on the full training set with the discrete
AdaBoost rule.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.tree import DecisionTreeClassifier
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import FormatError, InsufficientDataError, ParameterError, ValidationError

log = logging.getLogger(__name__)

NORMAL, FOG_CLASS = 0, 1
MODEL_FORMAT = "fogsense.rusboost"
MODEL_VERSION = 1
MAX_RETRIES = 10
_EPS = 1e-10


# ----------------------------------------------------------------- dataset

@dataclass
class EpochDataset:
    """Epoch feature matrix with labels and provenance.

    ``y`` holds 1 for FOG, 0 for NORMAL and -1 for unlabeled epochs.
    """

    X: np.ndarray
    y: np.ndarray
    subject_id: np.ndarray
    start_s: np.ndarray
    feature_names: tuple
    window_s: float = 2.56

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        self.start_s = np.asarray(self.start_s, dtype=float)
        X = np.asarray(self.X, dtype=float)
        width = len(self.feature_names) if X.size == 0 else -1
        self.X = X.reshape(len(self.start_s), width)
        self.y = np.asarray(self.y, dtype=int)
        self.subject_id = np.asarray(self.subject_id, dtype=object)
        n = self.X.shape[0]
        if not (self.y.size == self.subject_id.size == self.start_s.size == n):
            raise ValidationError("epoch arrays differ in length")
        if self.X.shape[1] != len(self.feature_names):
            raise ValidationError("feature matrix width does not match feature names")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def end_s(self) -> np.ndarray:
        return self.start_s + self.window_s

    def subset(self, mask) -> "EpochDataset":
        mask = np.asarray(mask)
        return EpochDataset(self.X[mask], self.y[mask], self.subject_id[mask], self.start_s[mask],
                            self.feature_names, self.window_s)

    def with_labels(self, y) -> "EpochDataset":
        return EpochDataset(self.X, y, self.subject_id, self.start_s, self.feature_names,
                            self.window_s)

    def columns(self, names) -> "EpochDataset":
        idx = [self.feature_names.index(n) for n in names]
        return EpochDataset(self.X[:, idx], self.y, self.subject_id, self.start_s, tuple(names),
                            self.window_s)

    def subjects(self) -> list:
        return sorted(set(self.subject_id.tolist()))

    @staticmethod
    def concat(parts) -> "EpochDataset":
        parts = list(parts)
        if not parts:
            raise ValidationError("nothing to concatenate")
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValidationError("datasets have different feature names")
        return EpochDataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                            np.concatenate([p.subject_id for p in parts]),
                            np.concatenate([p.start_s for p in parts]), names, parts[0].window_s)


# -------------------------------------------------------------------- trees

def _tree_to_flat(tree: DecisionTreeClassifier) -> dict:
    t = tree.tree_
    leaf = t.children_left == -1
    cls = tree.classes_[np.argmax(t.value[:, 0, :], axis=1)].astype(int)
    return {
        "feature": np.where(leaf, -1, t.feature).astype(int),
        "threshold": np.where(leaf, 0.0, t.threshold).astype(float),
        "left": t.children_left.astype(int),
        "right": t.children_right.astype(int),
        "leaf_class": np.where(leaf, cls, -1).astype(int),
    }


def _flat_predict(flat: dict, X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=int)
    rows = np.arange(X.shape[0])
    while True:
        f = flat["feature"][node]
        active = f >= 0
        if not active.any():
            return flat["leaf_class"][node]
        go_left = X[rows[active], f[active]] <= flat["threshold"][node[active]]
        node[active] = np.where(go_left, flat["left"][node[active]], flat["right"][node[active]])


def _flat_to_nested(flat: dict, i: int = 0) -> dict:
    if flat["feature"][i] < 0:
        return {"class": int(flat["leaf_class"][i])}
    return {
        "feature": int(flat["feature"][i]),
        "threshold": float(flat["threshold"][i]),
        "left": _flat_to_nested(flat, int(flat["left"][i])),
        "right": _flat_to_nested(flat, int(flat["right"][i])),
    }


def _nested_to_flat(tree: dict) -> dict:
    feature, threshold, left, right, leaf_class = [], [], [], [], []

    def visit(node) -> int:
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_class.append(-1)
        if "class" in node:
            leaf_class[i] = int(node["class"])
            return i
        feature[i] = int(node["feature"])
        threshold[i] = float(node["threshold"])
        left[i] = visit(node["left"])
        right[i] = visit(node["right"])
        return i

    try:
        visit(tree)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed tree record: {exc}") from exc
    return {"feature": np.array(feature), "threshold": np.array(threshold),
            "left": np.array(left), "right": np.array(right), "leaf_class": np.array(leaf_class)}


# ---------------------------------------------------------------- estimator

class RUSBoostClassifier(ClassifierMixin, BaseEstimator):
    """Random-undersampling boosted decision trees for binary labels {0, 1}.

    Parameters
    ----------
    n_rounds : int
        Boosting rounds.
    max_depth : int
        Depth limit of each tree.
    undersample_ratio : float
        Majority examples drawn per round, as a multiple of the minority
        count. ``inf`` disables undersampling (plain discrete AdaBoost).
    random_state : int
        Seed; required.

    Attributes
    ----------
    learners_ : list of dict
        Flattened trees.
    learner_weights_ : ndarray
        AdaBoost weight of each learner.
    medians_ : ndarray
        Training medians used to impute missing values.
    """

    def __init__(self, n_rounds: int = 100, max_depth: int = 3, undersample_ratio: float = 1.0,
                 random_state: int | None = 0):
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.undersample_ratio = undersample_ratio
        self.random_state = random_state

    # imputation: medians plus one indicator column per feature
    def _augment(self, X: np.ndarray) -> np.ndarray:
        miss = np.isnan(X)
        filled = np.where(miss, self.medians_, X)
        return np.hstack([filled, miss.astype(float)])

    def _check_params(self):
        if self.random_state is None or isinstance(self.random_state, np.random.RandomState):
            raise ParameterError("random_state must be an integer seed")
        if int(self.n_rounds) < 1:
            raise ParameterError("n_rounds must be >= 1")
        if int(self.max_depth) < 1:
            raise ParameterError("max_depth must be >= 1")
        if not self.undersample_ratio > 0:
            raise ParameterError("undersample_ratio must be > 0")

    def fit(self, X, y):
        self._check_params()
        X = check_array(X, dtype=float, ensure_all_finite="allow-nan")
        y = np.asarray(y).astype(int).ravel()
        if y.size != X.shape[0]:
            raise ValidationError("X and y differ in length")
        if not np.isin(y, (NORMAL, FOG_CLASS)).all():
            raise ValidationError("labels must be 0 (NORMAL) or 1 (FOG)")
        counts = np.bincount(y, minlength=2)
        if (counts == 0).any():
            raise InsufficientDataError("training needs both FOG and NORMAL epochs")
        if (counts < 10).any():
            raise InsufficientDataError(f"need >= 10 epochs per class, got {counts.tolist()}")
        self.classes_ = np.array([NORMAL, FOG_CLASS])
        self.n_features_in_ = X.shape[1]
        with np.errstate(all="ignore"):
            med = np.nanmedian(X, axis=0) if X.size else np.zeros(X.shape[1])
        self.medians_ = np.where(np.isnan(med), 0.0, med)
        Xa = self._augment(X)

        rng = np.random.default_rng(int(self.random_state))
        minority = int(np.argmin(counts))
        min_idx = np.flatnonzero(y == minority)
        maj_idx = np.flatnonzero(y != minority)
        n_maj = maj_idx.size if math.isinf(self.undersample_ratio) else min(
            maj_idx.size, max(1, int(math.ceil(self.undersample_ratio * min_idx.size))))

        w = np.full(y.size, 1.0 / y.size)
        learners, alphas, errors = [], [], []
        self.weight_history_ = [w.copy()]
        self.n_discarded_ = 0
        self.early_stopped_ = False
        for _ in range(int(self.n_rounds)):
            fitted = None
            for _attempt in range(MAX_RETRIES + 1):
                if n_maj >= maj_idx.size:
                    idx = np.arange(y.size)
                else:
                    # uniform draw; the boosting weights enter through sample_weight
                    pick = rng.choice(maj_idx, size=n_maj, replace=False)
                    idx = np.sort(np.concatenate([min_idx, pick]))
                sw = w[idx] / w[idx].sum()
                tree = DecisionTreeClassifier(max_depth=int(self.max_depth),
                                              random_state=int(rng.integers(2**31 - 1)))
                tree.fit(Xa[idx], y[idx], sample_weight=sw)
                flat = _tree_to_flat(tree)
                miss = _flat_predict(flat, Xa) != y
                err = float(w[miss].sum())
                if err < 0.5:
                    fitted = (flat, miss, err)
                    break
                self.n_discarded_ += 1
            if fitted is None:
                log.info("boosting stopped early after %d rounds", len(learners))
                self.early_stopped_ = True
                break
            flat, miss, err = fitted
            e = min(max(err, _EPS), 1.0 - _EPS)
            alpha = 0.5 * math.log((1.0 - e) / e)
            learners.append(flat)
            alphas.append(alpha)
            errors.append(err)
            w = w * np.exp(np.where(miss, alpha, -alpha))
            w /= w.sum()
            self.weight_history_.append(w.copy())
            if err == 0.0:
                break
        if not learners:
            raise InsufficientDataError("no boosting round reached weighted error < 0.5")
        self.learners_ = learners
        self.learner_weights_ = np.array(alphas)
        self.learner_errors_ = np.array(errors)
        return self

    def predict_scores(self, X) -> np.ndarray:
        """Weighted FOG vote divided by the total learner weight."""
        check_is_fitted(self, "learners_")
        X = check_array(X, dtype=float, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        Xa = self._augment(X)
        total = float(np.sum(self.learner_weights_))
        if total <= 0:
            return np.zeros(X.shape[0])
        votes = np.zeros(X.shape[0])
        for flat, a in zip(self.learners_, self.learner_weights_):
            if a == 0:
                continue
            votes += a * (_flat_predict(flat, Xa) == FOG_CLASS)
        return votes / total

    def predict_proba(self, X) -> np.ndarray:
        s = self.predict_scores(X)
        return np.column_stack([1.0 - s, s])

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_scores(X) >= threshold).astype(int)

    def decision_function(self, X) -> np.ndarray:
        return self.predict_scores(X)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.allow_nan = True
        return tags

    # ------------------------------------------------------------ serialization
    def to_dict(self) -> dict:
        check_is_fitted(self, "learners_")
        return {
            "params": self.get_params(),
            "n_features_in": int(self.n_features_in_),
            "medians": [float(v) for v in self.medians_],
            "learners": [{"weight": float(a), "tree": _flat_to_nested(f)}
                         for f, a in zip(self.learners_, self.learner_weights_)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RUSBoostClassifier":
        try:
            params = dict(d["params"])
            if params.get("undersample_ratio") is None:
                params["undersample_ratio"] = math.inf
            clf = cls(**params)
            clf.n_features_in_ = int(d["n_features_in"])
            clf.medians_ = np.array(d["medians"], dtype=float)
            clf.learners_ = [_nested_to_flat(r["tree"]) for r in d["learners"]]
            clf.learner_weights_ = np.array([float(r["weight"]) for r in d["learners"]])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed model document: {exc}") from exc
        clf.classes_ = np.array([NORMAL, FOG_CLASS])
        return clf


def _json_params(p: dict) -> dict:
    p = dict(p)
    if isinstance(p.get("undersample_ratio"), float) and math.isinf(p["undersample_ratio"]):
        p["undersample_ratio"] = None  # JSON has no infinity
    return p


# ------------------------------------------------------------ detector model

@dataclass
class DetectorModel:
    feature_names: tuple          # dataset columns the model was trained against
    selected_features: tuple      # indices into feature_names, in FCBF rank order
    classifier: RUSBoostClassifier
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_rounds(self) -> int:
        return len(self.classifier.learners_)

    @property
    def learner_weights(self) -> np.ndarray:
        return self.classifier.learner_weights_

    def to_json(self) -> str:
        body = self.classifier.to_dict()
        body["params"] = _json_params(body["params"])
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "selected_features": [int(i) for i in self.selected_features],
            "seed": int(self.seed),
            "meta": self.meta,
            "classifier": body,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DetectorModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"model file is not JSON: {exc}") from exc
        if doc.get("format") != MODEL_FORMAT:
            raise FormatError("not a detector model document")
        if doc.get("version") != MODEL_VERSION:
            raise FormatError(f"unsupported model version {doc.get('version')!r}")
        clf = RUSBoostClassifier.from_dict(doc["classifier"])
        return cls(tuple(doc["feature_names"]), tuple(doc["selected_features"]), clf,
                   int(doc["seed"]), dict(doc.get("meta", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "DetectorModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class ModelParams:
    n_rounds: int = 100
    max_depth: int = 3
    undersample_ratio: float = 1.0
    seed: int = 0


def train_rusboost(data: EpochDataset, params: ModelParams = ModelParams(),
                   selected_features=None, meta: dict | None = None) -> DetectorModel:
    """Fit a :class:`DetectorModel` on the labeled epochs of ``data``."""
    labeled = data.y >= 0
    sel = tuple(range(len(data.feature_names))) if selected_features is None else tuple(selected_features)
    if not sel:
        raise ValidationError("no features selected")
    clf = RUSBoostClassifier(params.n_rounds, params.max_depth, params.undersample_ratio,
                             params.seed)
    clf.fit(data.X[labeled][:, list(sel)], data.y[labeled])
    return DetectorModel(data.feature_names, sel, clf, params.seed, dict(meta or {}))


def predict_scores(model: DetectorModel, data: EpochDataset) -> np.ndarray:
    if data.X.shape[1] != len(model.feature_names):
        raise ValidationError(
            f"dataset has {data.X.shape[1]} features, model expects {len(model.feature_names)}"
        )
    if tuple(data.feature_names) != tuple(model.feature_names):
        raise ValidationError("dataset feature names differ from the model's")
    return model.classifier.predict_scores(data.X[:, list(model.selected_features)])
