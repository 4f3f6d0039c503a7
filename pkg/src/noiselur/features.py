"""Predictor extraction at arbitrary locations via exact planar geometry.

Each predictor is declared as a PredictorSpec (what to measure, on which
layer, within which radius) and evaluated identically for monitoring
sites and prediction-grid centroids.
"""

from __future__ import annotations

import csv
import io
import logging
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._geom import segment_clip_length
from .geodata import GeoLayer, SpatialIndex

log = logging.getLogger(__name__)

BUFFER_RADII = (50, 100, 200, 300, 500, 1000)

KINDS = ("distance", "buffer_length", "buffer_count", "buffer_raster_mean",
         "coordinate")

_UNITS = {
    "distance": "m",
    "buffer_length": "m",
    "buffer_count": "count",
    "buffer_raster_mean": "dimensionless",
    "coordinate": "m",
}

MAJOR_ROADS = frozenset({"motorway", "primary", "secondary"})

DEFAULT_CENSOR_CEILING = 10_000.0


@dataclass(frozen=True)
class PredictorSpec:
    """One named predictor: its kind, source layer, class filter, radius."""

    name: str
    kind: str
    layer: str = None
    class_filter: frozenset = None
    radius: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown predictor kind {self.kind!r}")
        if self.kind in ("buffer_length", "buffer_count", "buffer_raster_mean"):
            if self.radius not in BUFFER_RADII:
                raise ValueError(
                    f"{self.name}: buffer radius must be one of {BUFFER_RADII}")
        elif self.radius is not None:
            raise ValueError(f"{self.name}: radius only applies to buffers")
        if self.kind == "coordinate":
            if self.name not in ("X", "Y"):
                raise ValueError("coordinate predictors are named X and Y")
        elif self.layer is None:
            raise ValueError(f"{self.name}: a source layer is required")
        if self.class_filter is not None:
            object.__setattr__(self, "class_filter",
                               frozenset(str(t) for t in self.class_filter))


def _filtered(layer, class_filter):
    if class_filter is None:
        return layer
    feats = tuple((g, t) for g, t in layer.features if t in class_filter)
    return GeoLayer(kind=layer.kind, features=feats)


def distance_to_nearest(point, layer, class_filter=None, index=None):
    """Exact Euclidean distance from the point to the closest feature."""
    if index is None:
        sub = _filtered(layer, class_filter)
        if not sub.features:
            raise ValueError(
                f"no feature matching class filter "
                f"{sorted(class_filter) if class_filter else 'any'}")
        index = SpatialIndex(sub)
    _, d = index.nearest(float(point[0]), float(point[1]))
    return d


def length_within_buffer(point, radius, layer, class_filter=None, index=None):
    """Clipped length of matching polylines inside the open disk."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if index is None:
        sub = _filtered(layer, class_filter)
        if sub.kind != "polyline":
            raise ValueError("length_within_buffer needs a polyline layer")
        if not sub.features:
            return 0.0
        index = SpatialIndex(sub)
    px, py = float(point[0]), float(point[1])
    cand = index.segment_candidates(px, py, float(radius))
    if cand.size == 0:
        return 0.0
    s = index.segments[cand]
    clipped = segment_clip_length(s[:, 0], s[:, 1], s[:, 2], s[:, 3],
                                  px, py, float(radius))
    return float(np.sum(clipped))


def count_within_buffer(point, radius, layer, class_filter=None, index=None):
    """Number of layer points strictly inside the disk."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if index is None:
        sub = _filtered(layer, class_filter)
        if sub.kind != "point":
            raise ValueError("count_within_buffer needs a point layer")
        if not sub.features:
            return 0
        index = SpatialIndex(sub)
    return len(index.within_circle(float(point[0]), float(point[1]),
                                   float(radius)))


def raster_mean_within_buffer(point, radius, raster):
    """Mean of valid raster cells whose centers fall inside the disk."""
    if raster.kind != "raster":
        raise ValueError("raster_mean_within_buffer needs a raster layer")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    px, py = float(point[0]), float(point[1])
    xs, ys = raster.cell_centers()
    ci = np.abs(xs - px) < radius
    ri = np.abs(ys - py) < radius
    if not (ci.any() and ri.any()):
        raise ValueError("no raster cells inside the buffer")
    sub = raster.values[np.ix_(ri, ci)]
    dx2 = (xs[ci] - px) ** 2
    dy2 = (ys[ri] - py) ** 2
    inside = (dy2[:, None] + dx2[None, :]) < radius * radius
    vals = sub[inside]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("no valid raster cells inside the buffer")
    return float(vals.mean())


# ---------------------------------------------------------------------------
# matrix assembly

@dataclass(frozen=True)
class PredictorMatrix:
    """Locations x predictors, fully dense and finite."""

    row_ids: tuple
    column_names: tuple
    values: np.ndarray
    units: tuple
    censored: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("duplicate predictor names")
        if self.values.shape != (len(self.row_ids), len(self.column_names)):
            raise ValueError("matrix shape does not match ids/names")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("predictor matrix contains non-finite values")

    def column(self, name):
        return self.values[:, self.column_names.index(name)]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row_id"] + list(self.column_names))
            for rid, row in zip(self.row_ids, self.values):
                writer.writerow([rid] + [repr(float(v)) for v in row])

    def save_cache(self, path, key=""):
        censored_names = sorted(self.censored)
        arrays = {
            "values": self.values,
            "row_ids": np.array(self.row_ids, dtype=str),
            "column_names": np.array(self.column_names, dtype=str),
            "units": np.array(self.units, dtype=str),
            "censored_names": np.array(censored_names, dtype=str),
            "censored_values": np.array(
                [self.censored[n] for n in censored_names], dtype=np.float64),
            "key": np.array(str(key)),
        }
        # np.savez stamps zip entries with the wall clock, so identical
        # matrices would hash differently on rerun; write the archive with
        # a fixed timestamp instead.
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr))
                info = zipfile.ZipInfo(name + ".npy",
                                       date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load_cache(cls, path, expected_key=None):
        with np.load(path, allow_pickle=False) as z:
            key = str(z["key"])
            if expected_key is not None and key != str(expected_key):
                raise ValueError(
                    f"{path}: cache key {key!r} does not match expected "
                    f"{str(expected_key)!r}; re-run feature extraction")
            censored = dict(zip((str(n) for n in z["censored_names"]),
                                (float(v) for v in z["censored_values"])))
            return cls(
                row_ids=tuple(str(r) for r in z["row_ids"]),
                column_names=tuple(str(c) for c in z["column_names"]),
                values=np.asarray(z["values"], dtype=np.float64),
                units=tuple(str(u) for u in z["units"]),
                censored=censored,
            )


def default_predictor_specs():
    """The standard predictor set: buffer lengths and counts, raster
    means, nearest-feature distances and the two coordinates.

    Road-length predictors cover six classes at six radii, except that
    all-road and major-road lengths stop at 200 m and two secondary-road
    radii are dropped; imperviousness and building counts use all six
    radii; fourteen distance predictors cover roads by class plus
    railways, airports and four land-use classes.
    """
    specs = []

    def length(prefix, filt, radii):
        for r in radii:
            specs.append(PredictorSpec(
                name=f"{prefix}{r}", kind="buffer_length", layer="roads",
                class_filter=filt, radius=r))

    length("LARoad", None, (50, 100, 200))
    length("LMRoad", MAJOR_ROADS, (50, 100, 200))
    length("LMWay", frozenset({"motorway"}), BUFFER_RADII)
    length("LPRoad", frozenset({"primary"}), BUFFER_RADII)
    length("LSRoad", frozenset({"secondary"}), (100, 300, 500, 1000))
    length("LTRoad", frozenset({"tertiary"}), BUFFER_RADII)
    length("LRRoad", frozenset({"residential"}), BUFFER_RADII)
    length("LFWay", frozenset({"footway"}), BUFFER_RADII)

    for r in BUFFER_RADII:
        specs.append(PredictorSpec(name=f"Build{r}", kind="buffer_count",
                                   layer="buildings", radius=r))
    for r in BUFFER_RADII:
        specs.append(PredictorSpec(name=f"Imp{r}", kind="buffer_raster_mean",
                                   layer="imperviousness", radius=r))

    def dist(name, layer, filt=None):
        specs.append(PredictorSpec(name=name, kind="distance", layer=layer,
                                   class_filter=filt))

    dist("DARoad", "roads")
    dist("DMWay", "roads", frozenset({"motorway"}))
    dist("DMRoad", "roads", MAJOR_ROADS)
    dist("DPRoad", "roads", frozenset({"primary"}))
    dist("DSRoad", "roads", frozenset({"secondary"}))
    dist("DTRoad", "roads", frozenset({"tertiary"}))
    dist("DRRoad", "roads", frozenset({"residential"}))
    dist("DFWay", "roads", frozenset({"footway"}))
    dist("DAir", "airports")
    dist("DRail", "railways")
    dist("DGreen", "landuse", frozenset({"green_urban"}))
    dist("DOGreen", "landuse", frozenset({"other_green"}))
    dist("DUrban", "landuse", frozenset({"urban_fabric"}))
    dist("DOLU", "landuse", frozenset({"other"}))

    specs.append(PredictorSpec(name="X", kind="coordinate"))
    specs.append(PredictorSpec(name="Y", kind="coordinate"))
    return specs


class _SpecContext:
    """Per-spec evaluation closure with a shared index cache."""

    def __init__(self, specs, layers, censor_ceiling):
        self.censored = {}
        self._eval = []
        cache = {}

        def subindex(key, filt):
            ck = (key, filt)
            if ck not in cache:
                layer = layers.get(key)
                if layer is None:
                    raise ValueError(f"layer {key!r} is not loaded")
                sub = _filtered(layer, filt)
                cache[ck] = SpatialIndex(sub) if sub.features else None
            return cache[ck]

        for spec in specs:
            if spec.kind == "coordinate":
                axis = 0 if spec.name == "X" else 1
                self._eval.append(
                    lambda x, y, axis=axis: (x, y)[axis])
            elif spec.kind == "distance":
                idx = subindex(spec.layer, spec.class_filter)
                if idx is None:
                    # whole study extent lacks this class: censor instead
                    # of failing every location
                    self.censored[spec.name] = censor_ceiling
                    self._eval.append(
                        lambda x, y, c=censor_ceiling: c)
                else:
                    def dfun(x, y, idx=idx, name=spec.name,
                             cap=censor_ceiling):
                        d = idx.nearest(x, y)[1]
                        if d >= cap:
                            self.censored[name] = cap
                            return cap
                        return d

                    self._eval.append(dfun)
            elif spec.kind == "buffer_length":
                layer = layers.get(spec.layer)
                if layer is None:
                    raise ValueError(f"layer {spec.layer!r} is not loaded")
                if layer.kind != "polyline":
                    raise ValueError(
                        f"{spec.name}: buffer length needs a polyline layer")
                idx = subindex(spec.layer, spec.class_filter)
                if idx is None:
                    self._eval.append(lambda x, y: 0.0)
                else:
                    self._eval.append(
                        lambda x, y, idx=idx, r=spec.radius:
                        length_within_buffer((x, y), r, None, index=idx))
            elif spec.kind == "buffer_count":
                layer = layers.get(spec.layer)
                if layer is None:
                    raise ValueError(f"layer {spec.layer!r} is not loaded")
                if layer.kind != "point":
                    raise ValueError(
                        f"{spec.name}: buffer count needs a point layer")
                idx = subindex(spec.layer, spec.class_filter)
                if idx is None:
                    self._eval.append(lambda x, y: 0.0)
                else:
                    self._eval.append(
                        lambda x, y, idx=idx, r=spec.radius:
                        float(len(idx.within_circle(x, y, float(r)))))
            else:  # buffer_raster_mean
                raster = layers.get(spec.layer)
                if raster is None:
                    raise ValueError(f"layer {spec.layer!r} is not loaded")
                self._eval.append(
                    lambda x, y, rast=raster, r=spec.radius:
                    raster_mean_within_buffer((x, y), r, rast))

def build_predictor_matrix(locations, specs, layers, *,
                           censor_ceiling=DEFAULT_CENSOR_CEILING,
                           on_error="raise", threads=1):
    """Evaluate every spec at every location.

    X and Y coordinate columns are appended when not declared.  With
    ``on_error="skip"`` the return value is ``(matrix, failures)`` where
    failed locations are dropped from the matrix and reported as
    (row_id, predictor, message) tuples; the default propagates the
    first failure with its location and predictor context.
    """
    locations = list(locations)
    if not locations:
        raise ValueError("no locations given")
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate predictor names in spec list")
    for coord in ("X", "Y"):
        if coord not in names:
            specs.append(PredictorSpec(name=coord, kind="coordinate"))
            names.append(coord)

    ctx = _SpecContext(specs, layers, float(censor_ceiling))
    n = len(locations)
    values = np.empty((n, len(specs)))
    errors = [None] * n

    def fill_checked(i):
        rid, x, y = locations[i]
        row = np.empty(len(specs))
        for j, f in enumerate(ctx._eval):
            try:
                row[j] = f(float(x), float(y))
            except ValueError as exc:
                errors[i] = (str(rid), specs[j].name, str(exc))
                return
        values[i] = row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            list(pool.map(fill_checked, range(n)))
    else:
        for i in range(n):
            fill_checked(i)

    failures = [e for e in errors if e is not None]
    if failures and on_error == "raise":
        rid, pname, msg = failures[0]
        raise ValueError(f"location {rid!r}, predictor {pname}: {msg}")
    good = [i for i in range(n) if errors[i] is None]
    matrix = PredictorMatrix(
        row_ids=tuple(str(locations[i][0]) for i in good),
        column_names=tuple(names),
        values=values[good],
        units=tuple(_UNITS[s.kind] for s in specs),
        censored=dict(ctx.censored),
    )
    if on_error == "skip":
        return matrix, failures
    return matrix
