"""Model specification, validation and the serialized trained-model artifact."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..preprocess import FittedTransform, apply_transform
from .grids import FAMILIES

ARTIFACT_FORMAT = "noiselur-model"
ARTIFACT_VERSION = 1

# preprocessing applied before each family's solver; trees are
# scale-invariant and take the predictors as-is
PREPROCESSING_POLICY = {
    "LM": "vif+yeo-johnson+standardize",
    "ENET": "yeo-johnson+standardize",
    "SVR": "yeo-johnson+standardize",
    "RF": "none",
    "GBT": "none",
}

_HP_KEYS = {
    "LM": {"selection_limit"},
    "ENET": {"alpha", "lam"},
    "SVR": {"C", "epsilon", "gamma"},
    "RF": {"n_trees", "mtry", "min_node", "bootstrap"},
    "GBT": {"learning_rate", "max_depth", "rounds", "subsample",
            "colsample", "reg_lambda", "reg_gamma"},
}


def validate_hyperparameters(family, hp, n_features=None):
    """Range-check a hyperparameter map; raises ValueError on violations."""
    if family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    unknown = set(hp) - _HP_KEYS[family]
    if unknown:
        raise ValueError(f"unknown {family} hyperparameters: {sorted(unknown)}")

    def need(cond, msg):
        if not cond:
            raise ValueError(f"{family}: {msg}")

    if family == "LM":
        need(int(hp["selection_limit"]) >= 1, "selection_limit must be >= 1")
    elif family == "ENET":
        need(0.0 <= hp["alpha"] <= 1.0, "alpha must lie in [0, 1]")
        need(hp["lam"] >= 0.0, "lam must be >= 0")
    elif family == "SVR":
        need(hp["C"] > 0.0, "C must be > 0")
        need(hp["epsilon"] >= 0.0, "epsilon must be >= 0")
        need(hp["gamma"] > 0.0, "gamma must be > 0")
    elif family == "RF":
        need(int(hp["n_trees"]) >= 1, "n_trees must be >= 1")
        need(int(hp["mtry"]) >= 1, "mtry must be >= 1")
        if n_features is not None:
            need(int(hp["mtry"]) <= n_features,
                 f"mtry must be <= {n_features} features")
        need(int(hp["min_node"]) >= 1, "min_node must be >= 1")
    elif family == "GBT":
        need(0.0 < hp["learning_rate"] <= 1.0, "learning_rate must lie in (0, 1]")
        need(int(hp["max_depth"]) >= 1, "max_depth must be >= 1")
        need(int(hp["rounds"]) >= 0, "rounds must be >= 0")
        need(0.0 < hp["subsample"] <= 1.0, "subsample must lie in (0, 1]")
        need(0.0 < hp["colsample"] <= 1.0, "colsample must lie in (0, 1]")
        need(hp["reg_lambda"] >= 0.0, "reg_lambda must be >= 0")
        need(hp["reg_gamma"] >= 0.0, "reg_gamma must be >= 0")


@dataclass(frozen=True)
class ModelSpec:
    """What to fit: family, hyperparameters, preprocessing policy, seed."""

    family: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")

    @property
    def preprocessing(self):
        return PREPROCESSING_POLICY[self.family]

    def validate(self, n_features=None):
        validate_hyperparameters(self.family, self.hyperparameters, n_features)
        return self


# dtype restoration table for array-valued payload entries
_PAYLOAD_DTYPES = {
    "feature": np.int32,
    "left": np.int32,
    "right": np.int32,
    "offsets": np.int64,
    "term_idx": np.int64,
    "threshold": np.float64,
    "value": np.float64,
    "cover": np.float64,
    "tree_weights": np.float64,
    "coef": np.float64,
    "sv": np.float64,
    "sv_beta": np.float64,
    "train_mse": np.float64,
}


def _payload_to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _payload_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _payload_from_jsonable(obj):
    if not isinstance(obj, dict):
        return obj
    out = {}
    for k, v in obj.items():
        if k in _PAYLOAD_DTYPES and isinstance(v, list):
            out[k] = np.asarray(v, dtype=_PAYLOAD_DTYPES[k])
        elif isinstance(v, dict):
            out[k] = _payload_from_jsonable(v)
        else:
            out[k] = v
    return out


@dataclass
class TrainedModel:
    """A fitted model plus everything needed to replay its predictions.

    ``feature_names`` are the columns the model expects at predict time,
    in training order; inputs are aligned to them by name.
    ``used_names`` is the subset that survived constant-column and
    collinearity screening and feeds the actual predictor.
    """

    family: str
    hyperparameters: dict
    seed: int
    feature_names: tuple
    used_names: tuple
    transform: FittedTransform | None
    payload: dict
    n_train: int

    def predict(self, X, columns):
        X = np.asarray(X, dtype=np.float64)
        cols = [str(c) for c in columns]
        if X.ndim == 1:
            X = X.reshape(0 if X.size == 0 else 1, len(cols))
        if X.shape[1] != len(cols):
            raise ValueError("column list does not match matrix width")
        pos = {}
        for i, c in enumerate(cols):
            pos.setdefault(c, i)
        for name in self.feature_names:
            if name not in pos:
                raise ValueError(f"missing column {name!r}")
        aligned = X[:, [pos[c] for c in self.feature_names]]
        where = {c: i for i, c in enumerate(self.feature_names)}
        used = aligned[:, [where[c] for c in self.used_names]]
        if self.transform is not None:
            used = apply_transform(self.transform, used, self.used_names)
        return _predict_payload(self.family, self.payload, used)

    def to_dict(self):
        return {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "family": self.family,
            "hyperparameters": dict(self.hyperparameters),
            "seed": int(self.seed),
            "n_train": int(self.n_train),
            "feature_names": list(self.feature_names),
            "used_names": list(self.used_names),
            "transform": None if self.transform is None else self.transform.to_dict(),
            "payload": _payload_to_jsonable(self.payload),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != ARTIFACT_FORMAT:
            raise ValueError("not a model artifact")
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported model artifact version {d.get('version')!r}")
        return cls(
            family=d["family"],
            hyperparameters=dict(d["hyperparameters"]),
            seed=int(d["seed"]),
            feature_names=tuple(d["feature_names"]),
            used_names=tuple(d["used_names"]),
            transform=(None if d["transform"] is None
                       else FittedTransform.from_dict(d["transform"])),
            payload=_payload_from_jsonable(d["payload"]),
            n_train=int(d["n_train"]),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, allow_nan=False,
                      separators=(",", ":"))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _predict_payload(family, payload, used):
    # imported here so the family modules can import this one freely
    from .linear import predict_linear
    from .svr import predict_svr
    from .trees import predict_trees

    if family in ("LM", "ENET"):
        return predict_linear(payload, used)
    if family == "SVR":
        return predict_svr(payload, used)
    if family in ("RF", "GBT"):
        return predict_trees(payload, used)
    raise ValueError(f"unknown model family {family!r}")
