"""Exact planar geometry primitives shared by the feature and mapping code.

Everything works on plain float coordinates in a single projected CRS;
array arguments are vectorized over segments or vertices with numpy.
"""

from __future__ import annotations

import numpy as np


def segment_point_distance(ax, ay, bx, by, px, py):
    """Euclidean distance from point (px, py) to segment(s) (a, b)."""
    ax = np.asarray(ax, dtype=np.float64)
    ay = np.asarray(ay, dtype=np.float64)
    bx = np.asarray(bx, dtype=np.float64)
    by = np.asarray(by, dtype=np.float64)
    dx = bx - ax
    dy = by - ay
    denom = dx * dx + dy * dy
    t = ((px - ax) * dx + (py - ay) * dy) / np.where(denom == 0.0, 1.0, denom)
    t = np.clip(t, 0.0, 1.0)
    ex = ax + t * dx - px
    ey = ay + t * dy - py
    return np.sqrt(ex * ex + ey * ey)


def segment_clip_length(ax, ay, bx, by, cx, cy, r):
    """Length of segment(s) inside the open disk of radius r around (cx, cy).

    Solves |a + t(b-a) - c|^2 < r^2 for t, intersects the root interval
    with [0, 1] and scales by the segment length.  Tangent segments have
    measure zero inside and contribute 0.
    """
    ax = np.asarray(ax, dtype=np.float64)
    ay = np.asarray(ay, dtype=np.float64)
    bx = np.asarray(bx, dtype=np.float64)
    by = np.asarray(by, dtype=np.float64)
    dx = bx - ax
    dy = by - ay
    fx = ax - cx
    fy = ay - cy
    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - r * r
    disc = b * b - 4.0 * a * c
    safe_a = np.where(a == 0.0, 1.0, a)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / (2.0 * safe_a)
    t2 = (-b + sq) / (2.0 * safe_a)
    lo = np.maximum(t1, 0.0)
    hi = np.minimum(t2, 1.0)
    span = np.maximum(hi - lo, 0.0)
    span = np.where((disc > 0.0) & (a > 0.0), span, 0.0)
    return span * np.sqrt(a)


def ring_contains(ring, px, py):
    """Even-odd ray-cast containment test against one closed ring.

    ``ring`` is an (k, 2) array whose last vertex repeats the first.
    Boundary points are resolved arbitrarily; callers needing distance
    semantics combine this with a boundary-distance check.
    """
    x = ring[:-1, 0]
    y = ring[:-1, 1]
    xj = np.roll(x, 1)
    yj = np.roll(y, 1)
    crosses = (y > py) != (yj > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = (xj - x) * (py - y) / (yj - y) + x
    hits = crosses & (px < xint)
    return bool(np.count_nonzero(hits) & 1)


def polygon_contains(rings, px, py):
    """Even-odd containment over all rings (holes flip the parity)."""
    inside = False
    for ring in rings:
        if ring_contains(ring, px, py):
            inside = not inside
    return inside


def _ring_segments(ring):
    return ring[:-1, 0], ring[:-1, 1], ring[1:, 0], ring[1:, 1]


def polygon_distance(rings, px, py):
    """Distance from a point to a polygon: 0 inside, else boundary distance."""
    if polygon_contains(rings, px, py):
        return 0.0
    best = np.inf
    for ring in rings:
        ax, ay, bx, by = _ring_segments(ring)
        d = segment_point_distance(ax, ay, bx, by, px, py)
        if d.size:
            best = min(best, float(d.min()))
    return best


def polyline_distance(vertices, px, py):
    """Distance from a point to an open polyline given as an (k, 2) array."""
    ax, ay = vertices[:-1, 0], vertices[:-1, 1]
    bx, by = vertices[1:, 0], vertices[1:, 1]
    d = segment_point_distance(ax, ay, bx, by, px, py)
    return float(d.min())


def bounds_of(points):
    """(xmin, ymin, xmax, ymax) of an (k, 2) vertex array."""
    return (float(points[:, 0].min()), float(points[:, 1].min()),
            float(points[:, 0].max()), float(points[:, 1].max()))


def polygon_area(ring):
    """Signed shoelace area of one closed ring (positive if counterclockwise)."""
    x = ring[:-1, 0]
    y = ring[:-1, 1]
    xn = ring[1:, 0]
    yn = ring[1:, 1]
    return 0.5 * float(np.sum(x * yn - xn * y))
