"""Noise surfaces on regular grids and population exposure accounting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._geom import polygon_area, polygon_contains
from .features import build_predictor_matrix
from .geodata import GeoLayer

log = logging.getLogger(__name__)

DEFAULT_CELL_SIZE = 50.0
DEFAULT_THRESHOLDS = (40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0)
MAX_FAILED_CELL_FRACTION = 0.05


@dataclass(frozen=True)
class NoiseGrid:
    """Axis-aligned prediction grid; row 0 is the top (northern) row.

    ``mask`` marks cells whose centroid lies inside the boundary;
    ``values`` holds predicted dB(A) on predicted cells and NaN
    elsewhere.
    """

    city: str
    origin: tuple
    cell_size: float
    mask: np.ndarray
    values: np.ndarray
    failures: tuple = ()

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell size must be > 0")
        if self.mask.shape != self.values.shape:
            raise ValueError("mask and value shapes differ")
        active = self.mask & ~np.isnan(self.values)
        if not np.all(np.isfinite(self.values[active])):
            raise ValueError("non-finite prediction on an active cell")

    @property
    def n_rows(self):
        return self.mask.shape[0]

    @property
    def n_cols(self):
        return self.mask.shape[1]

    def cell_centers(self):
        xll, yll = self.origin
        nr, nc = self.mask.shape
        xs = xll + (np.arange(nc) + 0.5) * self.cell_size
        ys = yll + (nr - np.arange(nr) - 0.5) * self.cell_size
        return xs, ys


def _boundary_features(boundary):
    if isinstance(boundary, GeoLayer):
        if boundary.kind != "polygon":
            raise ValueError("boundary must be a polygon layer")
        return [geom for geom, _ in boundary.features]
    return [boundary]


def make_grid(boundary, cell=DEFAULT_CELL_SIZE, city=""):
    """Grid skeleton over the boundary's bounding box.

    Cells keep their place in the raster; only the centroid-in-polygon
    mask distinguishes inside from outside.
    """
    cell = float(cell)
    if cell <= 0:
        raise ValueError("cell size must be > 0")
    feats = _boundary_features(boundary)
    area = sum(abs(polygon_area(rings[0])) for rings in feats)
    if area == 0.0:
        raise ValueError("degenerate boundary polygon (zero area)")
    xs = np.concatenate([r[:, 0] for rings in feats for r in rings[:1]])
    ys = np.concatenate([r[:, 1] for rings in feats for r in rings[:1]])
    xll, yll = float(xs.min()), float(ys.min())
    nc = max(1, int(math.ceil((float(xs.max()) - xll) / cell)))
    nr = max(1, int(math.ceil((float(ys.max()) - yll) / cell)))
    mask = np.zeros((nr, nc), dtype=bool)
    cxs = xll + (np.arange(nc) + 0.5) * cell
    cys = yll + (nr - np.arange(nr) - 0.5) * cell
    for i in range(nr):
        for j in range(nc):
            mask[i, j] = any(polygon_contains(rings, cxs[j], cys[i])
                             for rings in feats)
    values = np.full((nr, nc), np.nan)
    return NoiseGrid(city=str(city), origin=(xll, yll), cell_size=cell,
                     mask=mask, values=values)


def predict_grid(model, grid, layers, specs, *, threads=1,
                 max_failed=MAX_FAILED_CELL_FRACTION):
    """Predict dB(A) at every unmasked centroid.

    Cells whose feature extraction fails are masked out with a logged
    reason; the run aborts when more than ``max_failed`` of the active
    cells fail.
    """
    xs, ys = grid.cell_centers()
    rows, cols = np.nonzero(grid.mask)
    if rows.size == 0:
        raise ValueError("grid has no unmasked cells")
    locations = [(f"{i}_{j}", xs[j], ys[i]) for i, j in zip(rows, cols)]
    matrix, failures = build_predictor_matrix(
        locations, specs, layers, on_error="skip", threads=threads)
    if len(failures) > max_failed * len(locations):
        raise ValueError(
            f"{len(failures)} of {len(locations)} grid cells failed feature "
            f"extraction (> {max_failed:.0%} allowed); first: "
            f"{failures[0]}")
    for rid, pname, msg in failures:
        log.warning("grid cell %s masked: predictor %s: %s", rid, pname, msg)
    preds = model.predict(matrix.values, matrix.column_names)
    mask = grid.mask.copy()
    values = np.full_like(grid.values, np.nan)
    for rid, p in zip(matrix.row_ids, preds):
        i, j = map(int, rid.split("_"))
        values[i, j] = p
    for rid, _, _ in failures:
        i, j = map(int, rid.split("_"))
        mask[i, j] = False
    return NoiseGrid(city=grid.city, origin=grid.origin,
                     cell_size=grid.cell_size, mask=mask, values=values,
                     failures=tuple(failures))


# ---------------------------------------------------------------------------
# exposure

@dataclass(frozen=True)
class ExposureTable:
    """Population above each threshold, pooled and per city."""

    thresholds: tuple
    cities: tuple
    counts: dict
    populations: dict
    total_counts: tuple = field(init=False)
    total_population: float = field(init=False)

    def __post_init__(self):
        totals = tuple(
            float(sum(self.counts[c][k] for c in self.cities))
            for k in range(len(self.thresholds)))
        object.__setattr__(self, "total_counts", totals)
        object.__setattr__(self, "total_population",
                           float(sum(self.populations.values())))
        if self.total_population <= 0:
            raise ValueError("zero total population")
        for c in self.cities:
            seq = self.counts[c]
            if any(seq[k] < seq[k + 1] for k in range(len(seq) - 1)):
                raise ValueError(f"{c}: exposure counts increase with the "
                                 "threshold")

    def percentage(self, city, k):
        pop = self.populations[city]
        return 100.0 * self.counts[city][k] / pop if pop > 0 else 0.0

    def total_percentage(self, k):
        return 100.0 * self.total_counts[k] / self.total_population

    def to_dict(self):
        bands = []
        for k, t in enumerate(self.thresholds):
            row = {"threshold_db": t,
                   "total_count": self.total_counts[k],
                   "total_percent": self.total_percentage(k)}
            for c in self.cities:
                row[f"{c}_count"] = self.counts[c][k]
                row[f"{c}_percent"] = self.percentage(c, k)
            bands.append(row)
        return {
            "format": "noiselur-exposure",
            "version": 1,
            "thresholds_db": list(self.thresholds),
            "band_semantics": "population in cells predicted strictly "
                              "above each threshold",
            "cities": list(self.cities),
            "population": {c: self.populations[c] for c in self.cities},
            "total_population": self.total_population,
            "bands": bands,
        }

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = ["threshold_db", "total_count", "total_percent"]
            for c in self.cities:
                header += [f"{c}_count", f"{c}_percent"]
            w.writerow(header)
            for k, t in enumerate(self.thresholds):
                row = [repr(float(t)), repr(self.total_counts[k]),
                       repr(self.total_percentage(k))]
                for c in self.cities:
                    row += [repr(float(self.counts[c][k])),
                            repr(self.percentage(c, k))]
                w.writerow(row)

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, allow_nan=False)


def _grid_population(grid, population):
    """Population per grid cell by nearest-centroid assignment."""
    if population.kind != "raster":
        raise ValueError("population layer must be a raster")
    pop = np.where(np.isnan(population.values), 0.0, population.values)
    if np.any(pop < 0):
        raise ValueError("negative population cell")
    pxs, pys = population.cell_centers()
    xll, yll = grid.origin
    nr, nc = grid.mask.shape
    cols = np.clip(np.floor((pxs - xll) / grid.cell_size).astype(np.int64),
                   0, nc - 1)
    rows = np.clip(nr - 1 - np.floor((pys - yll)
                                     / grid.cell_size).astype(np.int64),
                   0, nr - 1)
    out = np.zeros((nr, nc))
    for pi in range(pop.shape[0]):
        np.add.at(out[rows[pi]], cols, pop[pi])
    return out


def exposure_table(grids, population_rasters,
                   thresholds=DEFAULT_THRESHOLDS):
    """Count the population above each threshold, per city and pooled.

    Accepts one grid or a sequence; each grid needs its own co-located
    population raster.  Only predicted (unmasked, finite) cells carry
    population into the accounting.
    """
    if isinstance(grids, NoiseGrid):
        grids = [grids]
        population_rasters = [population_rasters]
    grids = list(grids)
    rasters = list(population_rasters)
    if len(grids) != len(rasters):
        raise ValueError("need one population raster per grid")
    thresholds = tuple(float(t) for t in thresholds)
    if any(thresholds[k] >= thresholds[k + 1]
           for k in range(len(thresholds) - 1)):
        raise ValueError("thresholds must increase")
    cities = []
    counts = {}
    populations = {}
    for grid, raster in zip(grids, rasters):
        city = grid.city or f"city{len(cities)}"
        if city in counts:
            raise ValueError(f"duplicate city label {city!r}")
        cities.append(city)
        cellpop = _grid_population(grid, raster)
        active = grid.mask & np.isfinite(grid.values)
        pop_active = np.where(active, cellpop, 0.0)
        populations[city] = float(pop_active.sum())
        counts[city] = tuple(
            float(pop_active[active & (grid.values > t)].sum())
            for t in thresholds)
    return ExposureTable(thresholds=thresholds, cities=tuple(cities),
                         counts=counts, populations=populations)


# ---------------------------------------------------------------------------
# export

def export_grid(grid, path, fmt="ascii"):
    """Write the surface as an ESRI ASCII raster or GeoJSON cell polygons."""
    if fmt == "ascii":
        from .geodata import save_raster
        layer = GeoLayer.raster(grid.origin, grid.cell_size, grid.values)
        save_raster(layer, path)
        return path
    if fmt == "geojson":
        xll, yll = grid.origin
        nr, nc = grid.mask.shape
        cs = grid.cell_size
        feats = []
        for i in range(nr):
            for j in range(nc):
                if not grid.mask[i, j] or math.isnan(grid.values[i, j]):
                    continue
                x0 = xll + j * cs
                y1 = yll + (nr - i) * cs
                y0 = y1 - cs
                ring = [[x0, y0], [x0 + cs, y0], [x0 + cs, y1], [x0, y1],
                        [x0, y0]]
                feats.append({
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {"db": float(grid.values[i, j]),
                                   "city": grid.city, "row": i, "col": j},
                })
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"type": "FeatureCollection", "features": feats}, fh)
        return path
    raise ValueError(f"unknown export format {fmt!r}")
