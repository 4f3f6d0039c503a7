"""Run configuration: one JSON document drives every pipeline command.

Paths are stored as written and resolved against the directory of the
config file, so a dataset directory can be moved wholesale.  Seeds are
explicit; there is no wall-clock fallback anywhere.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .features import PredictorSpec, default_predictor_specs
from .models import FAMILIES

CITY_LAYER_KEYS = ("roads", "railways", "airports", "landuse", "buildings",
                   "imperviousness", "boundary", "population")

DEFAULT_CV = {"n_repeats": 4, "n_folds": 10, "n_inner_folds": 10}
DEFAULT_THRESHOLDS = (40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0)

ENV_OUTPUT_DIR = "NOISELUR_OUT"
ENV_THREADS = "NOISELUR_THREADS"


@dataclass
class RunConfig:
    """Validated pipeline settings plus the dataset file layout."""

    sites: str
    cities: dict
    output_dir: str
    seed: int
    families: tuple
    grids: dict | None = None
    predictors: object = "default"
    cv: dict = field(default_factory=lambda: dict(DEFAULT_CV))
    threads: int = 0
    cell_size: float = 50.0
    thresholds: tuple = DEFAULT_THRESHOLDS
    censor_ceiling: float = 10_000.0
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError("seed must be an explicit integer")
        if not self.cities:
            raise ValueError("config names no cities")
        self.families = tuple(
            tuple(f) if isinstance(f, (list, tuple)) else str(f)
            for f in self.families)
        if not self.families:
            raise ValueError("config names no model families")
        for f in self.families:
            fam = f[1] if isinstance(f, tuple) else f
            if fam not in FAMILIES:
                raise ValueError(f"unknown model family {fam!r}")
        self.cv = {**DEFAULT_CV, **dict(self.cv)}
        extra = set(self.cv) - set(DEFAULT_CV)
        if extra:
            raise ValueError(f"unknown cv settings: {sorted(extra)}")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if float(self.cell_size) <= 0:
            raise ValueError("cell_size must be > 0")
        self.cell_size = float(self.cell_size)
        self.censor_ceiling = float(self.censor_ceiling)
        self.threads = int(self.threads)

    # -- paths ------------------------------------------------------------

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else (self.base_dir / p)

    def sites_path(self):
        return self.resolve(self.sites)

    def city_layer_path(self, city, key):
        try:
            return self.resolve(self.cities[city][key])
        except KeyError:
            raise ValueError(f"config lists no {key!r} layer for city "
                             f"{city!r}")

    def resolved_output_dir(self):
        env = os.environ.get(ENV_OUTPUT_DIR)
        return Path(env) if env else self.resolve(self.output_dir)

    def resolved_threads(self, override=None):
        if override:
            return int(override)
        env = os.environ.get(ENV_THREADS)
        if env:
            return int(env)
        if self.threads > 0:
            return self.threads
        return os.cpu_count() or 1

    def validate_paths(self):
        """Check that every referenced input file exists."""
        missing = []
        if not self.sites_path().is_file():
            missing.append(str(self.sites_path()))
        for city, layers in self.cities.items():
            for key in CITY_LAYER_KEYS:
                if key not in layers:
                    raise ValueError(f"city {city!r} lacks a {key!r} layer "
                                     "path")
                p = self.resolve(layers[key])
                if not p.is_file():
                    missing.append(str(p))
        if missing:
            raise ValueError("missing input files: " + ", ".join(missing))

    # -- derived objects ---------------------------------------------------

    def predictor_specs(self):
        if self.predictors == "default":
            return default_predictor_specs()
        specs = []
        for d in self.predictors:
            specs.append(PredictorSpec(
                name=d["name"], kind=d["kind"], layer=d.get("layer"),
                class_filter=d.get("class_filter"),
                radius=d.get("radius")))
        return tuple(specs)

    def family_list(self):
        return [list(f) if isinstance(f, tuple) else f
                for f in self.families]

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {
            "sites": self.sites,
            "cities": {c: dict(v) for c, v in sorted(self.cities.items())},
            "output_dir": self.output_dir,
            "seed": self.seed,
            "families": [list(f) if isinstance(f, tuple) else f
                         for f in self.families],
            "grids": self.grids,
            "predictors": self.predictors,
            "cv": dict(self.cv),
            "threads": self.threads,
            "cell_size": self.cell_size,
            "thresholds": list(self.thresholds),
            "censor_ceiling": self.censor_ceiling,
        }

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        unknown = set(d) - {
            "sites", "cities", "output_dir", "seed", "families", "grids",
            "predictors", "cv", "threads", "cell_size", "thresholds",
            "censor_ceiling"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("sites", "cities", "output_dir", "seed", "families"):
            if key not in d:
                raise ValueError(f"config lacks required key {key!r}")
        return cls(base_dir=Path(base_dir), **d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True,
                      allow_nan=False)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ValueError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}")
        return cls.from_dict(doc, base_dir=path.parent)
