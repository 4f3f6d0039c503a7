"""Synthetic five-city datasets with a known noise ground truth.

The generator exists so the whole pipeline can be exercised and scored
without access to real measurement campaigns.  Every draw comes from a
substream of the master seed, so a given seed always produces the same
bytes on disk.

The ground-truth level at a site is a fixed, documented function of
four predictors the pipeline itself can compute::

    L = 45 + 12 * sat(LMRoad100 / 400)
          +  6 * sat(LARoad50  / 150)
          -  4 * (1 - sat(DGreen / 500))
          +  3 * sat(Build100  /  40)
          + eps,        sat(u) = min(u, 1),  eps ~ N(0, 3^2)

clamped to [20, 120] dB(A).  Major-road length saturates (more asphalt
past 400 m within the buffer adds nothing), proximity to green space
subtracts up to 4 dB, and the Gaussian term models measurement noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._geom import polygon_contains
from .features import MAJOR_ROADS, PredictorSpec, build_predictor_matrix
from .geodata import GeoLayer, SiteMeasurement, save_raster, save_sites, \
    save_vector_layer
from .rng import substream

CITY_NAMES = ("amber", "basalt", "cedar", "dune", "ember")
_CITY_WEIGHTS = (33, 20, 18, 16, 13)
CITY_SIZE = 2000.0

NOISE_SD = 3.0
LEVEL_RANGE = (20.0, 120.0)
MEASUREMENT_YEARS = (2022, 2023)

_ROAD_COUNTS = (("motorway", 1), ("primary", 2), ("secondary", 2),
                ("tertiary", 3), ("residential", 8), ("footway", 4))

# substream tags (this module owns the 3xx block)
_TAG_ROADS = 301
_TAG_RAIL = 302
_TAG_AIR = 303
_TAG_LANDUSE = 304
_TAG_BUILD = 305
_TAG_IMPER = 306
_TAG_POP = 307
_TAG_SITES = 308
_TAG_NOISE = 309

_TRUTH_SPECS = (
    PredictorSpec("LMRoad100", "buffer_length", layer="roads",
                  class_filter=MAJOR_ROADS, radius=100),
    PredictorSpec("LARoad50", "buffer_length", layer="roads", radius=50),
    PredictorSpec("DGreen", "distance", layer="landuse",
                  class_filter=("green_urban",)),
    PredictorSpec("Build100", "buffer_count", layer="buildings",
                  radius=100),
)


def _sat(u):
    return np.minimum(u, 1.0)


def ground_truth_level(lmroad100, laroad50, dgreen, build100):
    """Deterministic part of the generator, in dB(A)."""
    return (45.0
            + 12.0 * _sat(np.asarray(lmroad100, dtype=float) / 400.0)
            + 6.0 * _sat(np.asarray(laroad50, dtype=float) / 150.0)
            - 4.0 * (1.0 - _sat(np.asarray(dgreen, dtype=float) / 500.0))
            + 3.0 * _sat(np.asarray(build100, dtype=float) / 40.0))


def site_counts(n_sites, city_count):
    """Largest-remainder split of sites over cities."""
    if not 1 <= city_count <= len(CITY_NAMES):
        raise ValueError(f"city_count must be in [1, {len(CITY_NAMES)}]")
    if n_sites < city_count:
        raise ValueError("need at least one site per city")
    weights = np.array(_CITY_WEIGHTS[:city_count], dtype=float)
    raw = n_sites * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in range(n_sites - int(counts.sum())):
        counts[order[k]] += 1
    # largest remainder can starve the lightest city when n is tiny
    for j in range(len(counts)):
        while counts[j] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[j] += 1
    return tuple(int(c) for c in counts)


@dataclass(frozen=True)
class SyntheticCity:
    """One generated city: vector layers, rasters, and measured sites."""

    name: str
    layers: dict
    boundary: GeoLayer
    population: GeoLayer
    sites: tuple


def _boundary_ring():
    s = CITY_SIZE
    notch = 0.2 * s
    return np.array([
        [0.0, 0.0], [s, 0.0], [s, s - notch], [s - notch, s - notch],
        [s - notch, s], [0.0, s], [0.0, 0.0]])


def _chord(rng):
    """A segment joining two random points on distinct square edges."""
    hi = CITY_SIZE
    e1, e2 = rng.choice(4, size=2, replace=False)
    pts = []
    for e in (e1, e2):
        t = rng.uniform(0.0, hi)
        pts.append({0: (t, 0.0), 1: (hi, t), 2: (t, hi), 3: (0.0, t)}[int(e)])
    return np.array(pts, dtype=float)


def _rect_ring(cx, cy, w, h):
    x0 = min(max(cx - w / 2, 0.0), CITY_SIZE - w)
    y0 = min(max(cy - h / 2, 0.0), CITY_SIZE - h)
    x1, y1 = x0 + w, y0 + h
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])


def _rect_distance(ring, xs, ys):
    x0, y0 = ring[0]
    x1, y1 = ring[2]
    dx = np.maximum(np.maximum(x0 - xs, xs - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - ys, ys - y1), 0.0)
    return np.hypot(dx, dy)


def _make_roads(seed, index):
    rng = substream(seed, _TAG_ROADS, index)
    feats = []
    for cls, count in _ROAD_COUNTS:
        for _ in range(count):
            if cls in ("residential", "footway"):
                # short local streets, axis aligned
                x = rng.uniform(100.0, CITY_SIZE - 400.0)
                y = rng.uniform(100.0, CITY_SIZE - 400.0)
                length = rng.uniform(150.0, 300.0)
                if rng.uniform() < 0.5:
                    pts = np.array([[x, y], [x + length, y]])
                else:
                    pts = np.array([[x, y], [x, y + length]])
            else:
                pts = _chord(rng)
            feats.append((pts, cls))
    return GeoLayer.polyline(feats)


def _make_landuse(seed, index):
    rng = substream(seed, _TAG_LANDUSE, index)
    feats = []
    plan = (("green_urban", 2, (300.0, 600.0)),
            ("other_green", 1, (200.0, 400.0)),
            ("urban_fabric", 2, (400.0, 700.0)),
            ("other", 1, (200.0, 350.0)))
    for cls, count, (lo, hi) in plan:
        for _ in range(count):
            cx, cy = rng.uniform(200.0, CITY_SIZE - 200.0, size=2)
            w, h = rng.uniform(lo, hi, size=2)
            feats.append(((_rect_ring(cx, cy, w, h),), cls))
    return GeoLayer.polygon(feats)


def _make_buildings(seed, index, landuse):
    rng = substream(seed, _TAG_BUILD, index)
    urban = [rings[0] for rings, cls in landuse.features
             if cls == "urban_fabric"]
    n = int(rng.integers(180, 260))
    pts = []
    for _ in range(n):
        if urban and rng.uniform() < 0.7:
            ring = urban[int(rng.integers(len(urban)))]
            cx = 0.5 * (ring[0, 0] + ring[2, 0])
            cy = 0.5 * (ring[0, 1] + ring[2, 1])
            x, y = rng.normal([cx, cy], 150.0)
        else:
            x, y = rng.uniform(0.0, CITY_SIZE, size=2)
        pts.append((np.array([min(max(x, 0.0), CITY_SIZE),
                              min(max(y, 0.0), CITY_SIZE)]), ""))
    return GeoLayer.point(pts)


def _make_imperviousness(seed, index, landuse):
    rng = substream(seed, _TAG_IMPER, index)
    cell = 25.0
    n = int(CITY_SIZE / cell)
    xs = (np.arange(n) + 0.5) * cell
    ys = (n - np.arange(n) - 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)
    vals = np.full((n, n), 0.15)
    for rings, cls in landuse.features:
        d = _rect_distance(rings[0], gx, gy)
        if cls == "urban_fabric":
            vals += 0.55 * np.exp(-d / 250.0)
        elif cls in ("green_urban", "other_green"):
            vals -= 0.10 * np.exp(-d / 250.0)
    vals += rng.uniform(-0.05, 0.05, size=vals.shape)
    return GeoLayer.raster((0.0, 0.0), cell, np.clip(vals, 0.0, 1.0))


def _make_population(seed, index, landuse):
    rng = substream(seed, _TAG_POP, index)
    cell = 100.0
    n = int(CITY_SIZE / cell)
    xs = (np.arange(n) + 0.5) * cell
    ys = (n - np.arange(n) - 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)
    vals = np.full((n, n), 4.0)
    for rings, cls in landuse.features:
        if cls == "urban_fabric":
            d = _rect_distance(rings[0], gx, gy)
            vals += 120.0 * np.exp(-d / 300.0)
    vals = vals * rng.uniform(0.8, 1.2, size=vals.shape)
    return GeoLayer.raster((0.0, 0.0), cell, np.round(vals, 1))


def _sample_sites(seed, index, n, roads, ring):
    """Site coordinates stratified around the road network."""
    rng = substream(seed, _TAG_SITES, index)
    major_segs = [pts for pts, cls in roads.features if cls in MAJOR_ROADS]
    minor_segs = [pts for pts, cls in roads.features
                  if cls in ("tertiary", "residential")]
    n_major = int(round(0.4 * n))
    n_minor = int(round(0.3 * n))
    coords = []

    def near_segment(segs, sd):
        pts = segs[int(rng.integers(len(segs)))]
        k = int(rng.integers(len(pts) - 1))
        t = rng.uniform()
        p = pts[k] * (1 - t) + pts[k + 1] * t
        return p + rng.normal(0.0, sd, size=2)

    while len(coords) < n:
        i = len(coords)
        if i < n_major and major_segs:
            x, y = near_segment(major_segs, 40.0)
        elif i < n_major + n_minor and minor_segs:
            x, y = near_segment(minor_segs, 60.0)
        else:
            x, y = rng.uniform(0.0, CITY_SIZE, size=2)
        if 0.0 <= x <= CITY_SIZE and 0.0 <= y <= CITY_SIZE \
                and polygon_contains((ring,), float(x), float(y)):
            coords.append((float(x), float(y)))
    return coords


def build_city(seed, index, name, n_sites):
    """Generate every layer and the measured sites for one city."""
    ring = _boundary_ring()
    roads = _make_roads(seed, index)
    landuse = _make_landuse(seed, index)
    buildings = _make_buildings(seed, index, landuse)
    rail_rng = substream(seed, _TAG_RAIL, index)
    railways = GeoLayer.polyline([(_chord(rail_rng), "rail")])
    air_rng = substream(seed, _TAG_AIR, index)
    acx, acy = air_rng.uniform(300.0, CITY_SIZE - 300.0, size=2)
    airports = GeoLayer.polygon([((_rect_ring(acx, acy, 220.0, 160.0),),
                                  "airport")])
    layers = {
        "roads": roads,
        "railways": railways,
        "airports": airports,
        "landuse": landuse,
        "buildings": buildings,
        "imperviousness": _make_imperviousness(seed, index, landuse),
    }
    boundary = GeoLayer.polygon([((ring,), "")])
    population = _make_population(seed, index, landuse)

    coords = _sample_sites(seed, index, n_sites, roads, ring)
    locations = [(f"{name}-{k + 1:03d}", x, y)
                 for k, (x, y) in enumerate(coords)]
    matrix = build_predictor_matrix(locations, _TRUTH_SPECS, layers)
    level = ground_truth_level(
        matrix.column("LMRoad100"), matrix.column("LARoad50"),
        matrix.column("DGreen"), matrix.column("Build100"))
    eps = substream(seed, _TAG_NOISE, index).normal(0.0, NOISE_SD, n_sites)
    level = np.clip(level + eps, *LEVEL_RANGE)

    sites = tuple(
        SiteMeasurement(site_id=rid, city=name, x=x, y=y,
                        yearly_laeq={yr: float(level[k])
                                     for yr in MEASUREMENT_YEARS})
        for k, (rid, x, y) in enumerate(locations))
    return SyntheticCity(name=name, layers=layers, boundary=boundary,
                         population=population, sites=sites)


def _write_city(city, city_dir):
    city_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key in ("roads", "railways", "airports", "landuse", "buildings"):
        p = city_dir / f"{key}.geojson"
        save_vector_layer(city.layers[key], p)
        paths[key] = p
    p = city_dir / "imperviousness.asc"
    save_raster(city.layers["imperviousness"], p)
    paths["imperviousness"] = p
    p = city_dir / "boundary.geojson"
    save_vector_layer(city.boundary, p)
    paths["boundary"] = p
    p = city_dir / "population.asc"
    save_raster(city.population, p)
    paths["population"] = p
    return paths


def generate_dataset(seed, out_dir, *, n_sites=232, city_count=5,
                     force=False):
    """Write a complete dataset plus a ready-to-run config.

    Returns {city: {layer: path}} plus the sites and config paths under
    string keys "sites" and "config".
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValueError(f"output directory {out_dir} is not empty; "
                         "pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = site_counts(n_sites, city_count)
    all_sites = []
    written = {}
    for index, (name, n_c) in enumerate(zip(CITY_NAMES, counts)):
        city = build_city(int(seed), index, name, n_c)
        paths = _write_city(city, out_dir / name)
        written[name] = {k: str(p.relative_to(out_dir))
                         for k, p in paths.items()}
        all_sites.extend(city.sites)

    sites_path = out_dir / "sites.csv"
    save_sites(all_sites, sites_path)

    from .config import RunConfig
    cfg = RunConfig(
        sites="sites.csv",
        cities=written,
        output_dir="runs",
        seed=int(seed),
        families=("LM", "GBT"),
        base_dir=out_dir,
    )
    config_path = out_dir / "config.json"
    cfg.save(config_path)
    result = dict(written)
    result["sites"] = str(sites_path)
    result["config"] = str(config_path)
    return result
