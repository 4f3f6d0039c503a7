"""Input datasets: monitoring sites, vector layers, rasters, spatial index.

All coordinates are planar meters in one projected CRS; nothing here
reprojects.  Loaded objects are immutable and safe to share across
threads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._geom import (
    polygon_distance,
    polyline_distance,
    segment_point_distance,
)

log = logging.getLogger(__name__)

LAEQ_MIN = 20.0
LAEQ_MAX = 120.0

ROAD_CLASSES = ("motorway", "primary", "secondary", "tertiary",
                "residential", "footway")

VECTOR_KINDS = ("polyline", "polygon", "point")


@dataclass(frozen=True)
class SiteMeasurement:
    """One monitoring site with yearly noise levels and their mean."""

    site_id: str
    city: str
    x: float
    y: float
    yearly_laeq: dict
    mean_laeq: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yearly_laeq",
                           {int(k): float(v)
                            for k, v in self.yearly_laeq.items()})
        if not self.yearly_laeq:
            raise ValueError(f"site {self.site_id!r}: no yearly values")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"site {self.site_id!r}: non-finite coordinates")
        for year, v in self.yearly_laeq.items():
            if not math.isfinite(v) or not (LAEQ_MIN <= v <= LAEQ_MAX):
                raise ValueError(
                    f"site {self.site_id!r}: L_Aeq {v!r} for {year} outside "
                    f"[{LAEQ_MIN}, {LAEQ_MAX}] dB(A)")
        # summed in year order so the mean ignores insertion order
        years = sorted(self.yearly_laeq)
        total = 0.0
        for yr in years:
            total += self.yearly_laeq[yr]
        object.__setattr__(self, "mean_laeq", total / len(years))


def _closed(ring):
    return ring.shape[0] >= 4 and bool(np.all(ring[0] == ring[-1]))


@dataclass(frozen=True)
class GeoLayer:
    """One vector or raster dataset.

    Vector features are (geometry, class_tag) pairs: an (k, 2) vertex
    array for polylines, a tuple of closed rings for polygons (first
    exterior, rest holes), a (2,) array for points.  Raster values are a
    (n_rows, n_cols) array with row 0 at the top edge and NaN marking
    no-data cells.
    """

    kind: str
    features: tuple = ()
    origin: tuple = None
    cell_size: float = None
    values: np.ndarray = None
    nodata: float = None

    @property
    def n_rows(self):
        return None if self.values is None else self.values.shape[0]

    @property
    def n_cols(self):
        return None if self.values is None else self.values.shape[1]

    @classmethod
    def polyline(cls, features):
        feats = []
        for geom, tag in features:
            v = np.asarray(geom, dtype=np.float64)
            if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] != 2:
                raise ValueError("polyline needs >= 2 (x, y) vertices")
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite polyline coordinate")
            if np.any(np.all(v[1:] == v[:-1], axis=1)):
                raise ValueError("zero-length polyline segment")
            feats.append((v, str(tag)))
        return cls(kind="polyline", features=tuple(feats))

    @classmethod
    def polygon(cls, features):
        feats = []
        for geom, tag in features:
            rings = []
            ring_list = geom if isinstance(geom, (list, tuple)) else [geom]
            for ring in ring_list:
                r = np.asarray(ring, dtype=np.float64)
                if r.ndim != 2 or r.shape[1] != 2 or not np.all(np.isfinite(r)):
                    raise ValueError("bad polygon ring")
                if not _closed(r):
                    raise ValueError("polygon ring must be closed")
                rings.append(r)
            if not rings:
                raise ValueError("polygon without rings")
            feats.append((tuple(rings), str(tag)))
        return cls(kind="polygon", features=tuple(feats))

    @classmethod
    def point(cls, features):
        feats = []
        for geom, tag in features:
            p = np.asarray(geom, dtype=np.float64).reshape(2)
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite point coordinate")
            feats.append((p, str(tag)))
        return cls(kind="point", features=tuple(feats))

    @classmethod
    def raster(cls, origin, cell_size, values, nodata=-9999.0):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("raster values must be 2-d")
        if not cell_size > 0:
            raise ValueError("raster cell_size must be > 0")
        vals = np.where(values == nodata, np.nan, values)
        if not np.all(np.isfinite(vals) | np.isnan(vals)):
            raise ValueError("raster values must be finite or no-data")
        return cls(kind="raster", origin=(float(origin[0]), float(origin[1])),
                   cell_size=float(cell_size), values=vals,
                   nodata=float(nodata))

    def cell_centers(self):
        """(xs, ys) cell-center coordinates; ys[0] belongs to the top row."""
        if self.kind != "raster":
            raise ValueError("cell_centers needs a raster layer")
        xll, yll = self.origin
        nr, nc = self.values.shape
        xs = xll + (np.arange(nc) + 0.5) * self.cell_size
        ys = yll + (nr - np.arange(nr) - 0.5) * self.cell_size
        return xs, ys


# ---------------------------------------------------------------------------
# sites

def load_sites(path):
    """Read the site CSV; returns a list of SiteMeasurement.

    Rows with unusable coordinates or no yearly values are rejected with
    a row-number diagnostic; measurement values outside the plausible
    dB(A) range or duplicate site ids fail the whole load.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty sites file") from None
        required = ["site_id", "city", "x", "y"]
        if header[:4] != required:
            raise ValueError(f"{path}: header must start with {required}")
        year_cols = []
        for i, name in enumerate(header[4:], start=4):
            if not name.startswith("laeq_"):
                raise ValueError(f"{path}: unexpected column {name!r}")
            year_cols.append((i, int(name[5:])))
        if not year_cols:
            raise ValueError(f"{path}: no laeq_<year> columns")
        sites = []
        seen = set()
        rejected = 0
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            site_id, city = row[0].strip(), row[1].strip()
            try:
                x, y = float(row[2]), float(row[3])
            except (ValueError, IndexError):
                log.warning("%s row %d: bad coordinates, row rejected",
                            path, rownum)
                rejected += 1
                continue
            if not (math.isfinite(x) and math.isfinite(y)):
                log.warning("%s row %d: non-finite coordinates, row rejected",
                            path, rownum)
                rejected += 1
                continue
            yearly = {}
            for i, year in year_cols:
                cell = row[i].strip() if i < len(row) else ""
                if not cell:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path} row {rownum}: non-numeric laeq_{year} "
                        f"value {cell!r}") from None
                yearly[year] = value
            if not yearly:
                log.warning("%s row %d: no yearly values, row rejected",
                            path, rownum)
                rejected += 1
                continue
            if site_id in seen:
                raise ValueError(f"{path} row {rownum}: duplicate site_id "
                                 f"{site_id!r}")
            seen.add(site_id)
            sites.append(SiteMeasurement(site_id=site_id, city=city,
                                         x=x, y=y, yearly_laeq=yearly))
    log.info("loaded %d sites from %s (%d rows rejected)",
             len(sites), path, rejected)
    return sites


def save_sites(sites, path):
    years = sorted({yr for s in sites for yr in s.yearly_laeq})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "city", "x", "y"]
                        + [f"laeq_{yr}" for yr in years])
        for s in sites:
            row = [s.site_id, s.city, repr(s.x), repr(s.y)]
            for yr in years:
                v = s.yearly_laeq.get(yr)
                row.append("" if v is None else repr(v))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# vector layers (GeoJSON)

def _geojson_geometries(geom):
    """Split Multi* geometries into their parts, keeping the type name."""
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype in ("Point", "LineString", "Polygon"):
        return [(gtype, coords)]
    if gtype == "MultiPoint":
        return [("Point", c) for c in coords]
    if gtype == "MultiLineString":
        return [("LineString", c) for c in coords]
    if gtype == "MultiPolygon":
        return [("Polygon", c) for c in coords]
    return [(gtype, coords)]


_KIND_TO_GEOJSON = {"polyline": "LineString", "polygon": "Polygon",
                    "point": "Point"}


def load_vector_layer(path, kind, class_field="class"):
    """Read a GeoJSON FeatureCollection into a GeoLayer of the given kind.

    Features of a different geometry type are skipped (counted and
    logged); a layer with nothing accepted is an error.
    """
    if kind not in VECTOR_KINDS:
        raise ValueError(f"unknown vector kind {kind!r}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    want = _KIND_TO_GEOJSON[kind]
    accepted = []
    skipped = 0
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        tag = (feat.get("properties") or {}).get(class_field, "")
        for gtype, coords in _geojson_geometries(geom):
            if gtype != want:
                skipped += 1
                continue
            accepted.append((coords, str(tag)))
    if skipped:
        log.warning("%s: skipped %d features of wrong geometry type",
                    path, skipped)
    if not accepted:
        raise ValueError(f"{path}: no {want} features accepted")
    factory = {"polyline": GeoLayer.polyline, "polygon": GeoLayer.polygon,
               "point": GeoLayer.point}[kind]
    return factory(accepted)


def save_vector_layer(layer, path, class_field="class"):
    if layer.kind not in VECTOR_KINDS:
        raise ValueError("save_vector_layer needs a vector layer")
    features = []
    for geom, tag in layer.features:
        if layer.kind == "polyline":
            coords = [[float(x), float(y)] for x, y in geom]
        elif layer.kind == "polygon":
            coords = [[[float(x), float(y)] for x, y in ring]
                      for ring in geom]
        else:
            coords = [float(geom[0]), float(geom[1])]
        features.append({
            "type": "Feature",
            "geometry": {"type": _KIND_TO_GEOJSON[layer.kind],
                         "coordinates": coords},
            "properties": {class_field: tag},
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)


# ---------------------------------------------------------------------------
# rasters (ESRI ASCII grid)

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize",
                "NODATA_value")


def load_raster(path, declared=None):
    """Read an ESRI ASCII grid.

    ``declared="imperviousness"`` additionally enforces values in [0, 1].
    """
    with open(path, encoding="utf-8") as fh:
        header = {}
        for key in _HEADER_KEYS:
            line = fh.readline()
            parts = line.split()
            if len(parts) != 2 or parts[0] != key:
                raise ValueError(f"{path}: expected header line {key!r}, "
                                 f"got {line.rstrip()!r}")
            header[key] = parts[1]
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        nodata = float(header["NODATA_value"])
        tokens = fh.read().split()
    if len(tokens) != nrows * ncols:
        raise ValueError(f"{path}: expected {nrows * ncols} values, "
                         f"got {len(tokens)}")
    values = np.array(tokens, dtype=np.float64).reshape(nrows, ncols)
    layer = GeoLayer.raster((float(header["xllcorner"]),
                             float(header["yllcorner"])),
                            float(header["cellsize"]), values, nodata)
    if declared == "imperviousness":
        vals = layer.values
        good = np.isnan(vals) | ((vals >= 0.0) & (vals <= 1.0))
        if not np.all(good):
            bad = vals[~good].flat[0]
            raise ValueError(f"{path}: imperviousness value {bad} outside "
                             "[0, 1]")
    return layer


def save_raster(layer, path):
    if layer.kind != "raster":
        raise ValueError("save_raster needs a raster layer")
    nr, nc = layer.values.shape
    out = np.where(np.isnan(layer.values), layer.nodata, layer.values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {nc}\n")
        fh.write(f"nrows {nr}\n")
        fh.write(f"xllcorner {layer.origin[0]!r}\n")
        fh.write(f"yllcorner {layer.origin[1]!r}\n")
        fh.write(f"cellsize {layer.cell_size!r}\n")
        fh.write(f"NODATA_value {layer.nodata!r}\n")
        for row in out:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


# ---------------------------------------------------------------------------
# spatial index

class SpatialIndex:
    """Uniform grid buckets over one vector layer.

    Candidate discovery walks grid cells; every reported result is
    re-checked with exact geometry, so queries return precisely what a
    linear scan would.
    """

    def __init__(self, layer, target_per_cell=4):
        if layer.kind == "raster":
            raise ValueError("spatial index requires a vector layer")
        if not layer.features:
            raise ValueError("spatial index requires >= 1 feature")
        self.layer = layer
        self.kind = layer.kind
        self.features = layer.features

        if self.kind == "point":
            pts = np.array([g for g, _ in layer.features], dtype=np.float64)
            self.points = pts
            item_boxes = np.hstack([pts, pts])
            self.item_feature = np.arange(len(layer.features))
        elif self.kind == "polyline":
            segs = []
            owner = []
            for fi, (v, _) in enumerate(layer.features):
                for i in range(v.shape[0] - 1):
                    segs.append((v[i, 0], v[i, 1], v[i + 1, 0], v[i + 1, 1]))
                    owner.append(fi)
            self.segments = np.array(segs, dtype=np.float64)
            self.item_feature = np.array(owner, dtype=np.int64)
            s = self.segments
            item_boxes = np.column_stack([
                np.minimum(s[:, 0], s[:, 2]), np.minimum(s[:, 1], s[:, 3]),
                np.maximum(s[:, 0], s[:, 2]), np.maximum(s[:, 1], s[:, 3])])
        else:  # polygon: bucket whole features by bounding box
            boxes = []
            for rings, _ in layer.features:
                allv = np.vstack(rings)
                boxes.append((allv[:, 0].min(), allv[:, 1].min(),
                              allv[:, 0].max(), allv[:, 1].max()))
            item_boxes = np.array(boxes, dtype=np.float64)
            self.item_feature = np.arange(len(layer.features))

        self.xmin = float(item_boxes[:, 0].min())
        self.ymin = float(item_boxes[:, 1].min())
        xmax = float(item_boxes[:, 2].max())
        ymax = float(item_boxes[:, 3].max())
        n_items = item_boxes.shape[0]
        g = max(1, min(512, int(math.ceil(math.sqrt(n_items / target_per_cell)))))
        self.nx = self.ny = g
        self.cw = max((xmax - self.xmin) / g, 1e-9)
        self.ch = max((ymax - self.ymin) / g, 1e-9)

        self.buckets = {}
        for item, (bx0, by0, bx1, by1) in enumerate(item_boxes):
            i0, j0 = self._cell_of(bx0, by0)
            i1, j1 = self._cell_of(bx1, by1)
            for j in range(j0, j1 + 1):
                for i in range(i0, i1 + 1):
                    self.buckets.setdefault((i, j), []).append(item)

    def _cell_of(self, x, y):
        i = int((x - self.xmin) / self.cw)
        j = int((y - self.ymin) / self.ch)
        return (min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1))

    def _feature_distance(self, fi, px, py):
        geom = self.features[fi][0]
        if self.kind == "point":
            return float(math.hypot(geom[0] - px, geom[1] - py))
        if self.kind == "polyline":
            return polyline_distance(geom, px, py)
        return polygon_distance(geom, px, py)

    def _candidates_in_box(self, x0, y0, x1, y1):
        i0, j0 = self._cell_of(x0, y0)
        i1, j1 = self._cell_of(x1, y1)
        out = set()
        for j in range(j0, j1 + 1):
            for i in range(i0, i1 + 1):
                out.update(self.buckets.get((i, j), ()))
        return out

    def within_circle(self, px, py, r):
        """Feature indices at exact distance < r, ascending."""
        items = self._candidates_in_box(px - r, py - r, px + r, py + r)
        feats = {int(self.item_feature[it]) for it in items}
        return sorted(fi for fi in feats
                      if self._feature_distance(fi, px, py) < r)

    def nearest(self, px, py):
        """(feature index, distance) of the closest feature.

        Ties in distance resolve to the lowest feature index.
        """
        ci, cj = self._cell_of(px, py)
        best_d = math.inf
        best_f = -1
        checked = set()
        max_ring = max(self.nx, self.ny)
        lb_unit = min(self.cw, self.ch)
        for k in range(max_ring + 1):
            if (k - 1) * lb_unit > best_d:
                break
            found_cell = False
            for i, j in self._ring_cells(ci, cj, k):
                found_cell = True
                for item in self.buckets.get((i, j), ()):
                    fi = int(self.item_feature[item])
                    if fi in checked:
                        continue
                    checked.add(fi)
                    d = self._feature_distance(fi, px, py)
                    if d < best_d or (d == best_d and fi < best_f):
                        best_d = d
                        best_f = fi
            if not found_cell and k > 0:
                break
        return best_f, best_d

    def _ring_cells(self, ci, cj, k):
        if k == 0:
            if 0 <= ci < self.nx and 0 <= cj < self.ny:
                yield ci, cj
            return
        for i in range(ci - k, ci + k + 1):
            for j in (cj - k, cj + k):
                if 0 <= i < self.nx and 0 <= j < self.ny:
                    yield i, j
        for j in range(cj - k + 1, cj + k):
            for i in (ci - k, ci + k):
                if 0 <= i < self.nx and 0 <= j < self.ny:
                    yield i, j

    def segment_candidates(self, px, py, r):
        """Polyline layers: indices into ``segments`` near the disk."""
        if self.kind != "polyline":
            raise ValueError("segment_candidates needs a polyline layer")
        items = self._candidates_in_box(px - r, py - r, px + r, py + r)
        # canonical order keeps downstream float accumulation reproducible
        return np.sort(np.fromiter(items, dtype=np.int64, count=len(items)))


def build_spatial_index(layer):
    """Index a vector layer for nearest/range queries; rasters are refused."""
    return SpatialIndex(layer)
