"""Planar geometry kernels and the tagged vector map data model.

All coordinates are meters in a local east/north Cartesian frame. The scalar
kernels (``point_segment_distance``, ``point_in_polygon``, ...) are the
reference implementations; the ``*_many`` variants evaluate the same
quantities for arrays of query points and back the raster and GP pipelines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

#: Dimension of the geometry kernels.
DIM = 2

#: Default full width (meters) used to buffer polyline centerlines for *over*.
DEFAULT_LINE_WIDTH = 4.0

#: Points closer than this to a polygon edge count as on the boundary.
BOUNDARY_TOLERANCE = 1e-9

# Upper bound on the size of point x segment temporaries.
_CHUNK_ELEMENTS = 1 << 21

Tag = str


class NoFeatureWithTag(LookupError):
    """Raised when a quantitative relation is asked about a tag the map lacks."""

    def __init__(self, tag: Tag):
        super().__init__(f"no feature with tag {tag!r}")
        self.tag = tag


class FeatureKind(str, Enum):
    NODE = "node"
    POLYLINE = "polyline"
    POLYGON = "polygon"


@dataclass(frozen=True)
class Point:
    """A point in the local frame, ``x`` east and ``y`` north in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


PointLike = Point | Sequence[float] | np.ndarray


def _xy(p: PointLike) -> tuple[float, float]:
    if isinstance(p, Point):
        return p.x, p.y
    return float(p[0]), float(p[1])


_MIN_VERTICES = {FeatureKind.NODE: 1, FeatureKind.POLYLINE: 2, FeatureKind.POLYGON: 3}


@dataclass(frozen=True, eq=False)
class Feature:
    """A connected map element with a shared tag set.

    ``vertices`` is an ``(n, 2)`` float array. Polygons are stored open: the
    closing edge from the last vertex back to the first is implicit.
    """

    id: str
    vertices: np.ndarray
    kind: FeatureKind
    tags: frozenset[Tag]

    def __post_init__(self):
        kind = FeatureKind(self.kind)
        verts = np.array(self.vertices, dtype=float).reshape(-1, DIM)
        if kind is FeatureKind.POLYGON and len(verts) > 3 and np.array_equal(verts[0], verts[-1]):
            verts = verts[:-1]
        if not np.all(np.isfinite(verts)):
            raise ValueError(f"feature {self.id!r} has non-finite vertices")
        need = _MIN_VERTICES[kind]
        if kind is FeatureKind.NODE and len(verts) != 1:
            raise ValueError(f"node feature {self.id!r} needs exactly one vertex")
        if len(verts) < need:
            raise ValueError(f"{kind.value} feature {self.id!r} needs at least {need} vertices")
        verts.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "id", str(self.id))

    def __eq__(self, other):
        if not isinstance(other, Feature):
            return NotImplemented
        return (
            self.id == other.id
            and self.kind is other.kind
            and self.tags == other.tags
            and np.array_equal(self.vertices, other.vertices)
        )

    __hash__ = None

    @property
    def centroid(self) -> np.ndarray:
        """Vertex mean; the fixed point of sampled transformations."""
        return self.vertices.mean(axis=0)

    def segments(self) -> np.ndarray:
        """Edges as an ``(m, 2, 2)`` array; a node yields one degenerate segment."""
        v = self.vertices
        if self.kind is FeatureKind.NODE:
            return np.stack([v, v], axis=1)
        if self.kind is FeatureKind.POLYGON:
            return np.stack([v, np.roll(v, -1, axis=0)], axis=1)
        return np.stack([v[:-1], v[1:]], axis=1)

    def with_vertices(self, vertices: np.ndarray) -> Feature:
        return Feature(self.id, vertices, self.kind, self.tags)


@dataclass(frozen=True)
class GeoOrigin:
    """WGS84 anchor of the local frame, in degrees."""

    latitude: float
    longitude: float

    def __post_init__(self):
        if not (abs(self.latitude) <= 90 and abs(self.longitude) <= 180):
            raise ValueError(f"invalid origin ({self.latitude}, {self.longitude})")


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate bbox {self}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, DIM)
        return (
            (p[:, 0] >= self.xmin) & (p[:, 0] <= self.xmax)
            & (p[:, 1] >= self.ymin) & (p[:, 1] <= self.ymax)
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class TagGeometry:
    """Flattened geometry of all features carrying one tag."""

    segments: np.ndarray  # (m, 2, 2), every feature's edges
    polygons: tuple[np.ndarray, ...]  # rings of polygon features
    line_segments: np.ndarray  # (k, 2, 2), polyline edges only

    @property
    def empty(self) -> bool:
        return len(self.segments) == 0


@dataclass(frozen=True, eq=False)
class Map:
    """A tagged vector map: features plus the frame anchor and nominal extent."""

    features: tuple[Feature, ...]
    origin: GeoOrigin = GeoOrigin(0.0, 0.0)
    bbox: BBox | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        feats = tuple(self.features)
        ids = [f.id for f in feats]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate feature ids: {dupes}")
        object.__setattr__(self, "features", feats)
        if self.bbox is None and feats:
            allv = np.concatenate([f.vertices for f in feats])
            lo, hi = allv.min(axis=0), allv.max(axis=0)
            hi = np.where(hi > lo, hi, lo + 1.0)
            object.__setattr__(self, "bbox", BBox(lo[0], lo[1], hi[0], hi[1]))

    def __eq__(self, other):
        if not isinstance(other, Map):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.bbox == other.bbox
            and len(self.features) == len(other.features)
            and all(a == b for a, b in zip(self.features, other.features))
        )

    __hash__ = None

    @property
    def tags(self) -> frozenset[Tag]:
        return frozenset().union(*(f.tags for f in self.features))

    def with_tag(self, tag: Tag) -> list[Feature]:
        return [f for f in self.features if tag in f.tags]

    def geometry(self, tag: Tag) -> TagGeometry:
        """Cached flattened geometry for ``tag`` (maps are immutable)."""
        geom = self._cache.get(tag)
        if geom is None:
            feats = self.with_tag(tag)
            segs = [f.segments() for f in feats]
            lines = [f.segments() for f in feats if f.kind is FeatureKind.POLYLINE]
            geom = TagGeometry(
                segments=np.concatenate(segs) if segs else np.empty((0, 2, 2)),
                polygons=tuple(f.vertices for f in feats if f.kind is FeatureKind.POLYGON),
                line_segments=np.concatenate(lines) if lines else np.empty((0, 2, 2)),
            )
            self._cache[tag] = geom
        return geom

    def with_features(self, features: Iterable[Feature]) -> Map:
        return Map(tuple(features), self.origin, self.bbox)


# ---------------------------------------------------------------------------
# scalar kernels


def point_segment_distance(p: PointLike, a: PointLike, b: PointLike) -> float:
    """Euclidean distance from ``p`` to the closed segment ``[a, b]``."""
    px, py = _xy(p)
    ax, ay = _xy(a)
    bx, by = _xy(b)
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / len2
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def point_in_polygon(p: PointLike, ring: Sequence[PointLike] | np.ndarray) -> bool:
    """Even-odd containment test; points on the boundary count as inside."""
    verts = np.asarray([_xy(v) for v in ring], dtype=float) if not isinstance(ring, np.ndarray) else ring
    n = len(verts)
    if n < 3:
        raise ValueError(f"polygon ring needs at least 3 vertices, got {n}")
    px, py = _xy(p)
    inside = False
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        if point_segment_distance((px, py), (ax, ay), (bx, by)) <= BOUNDARY_TOLERANCE:
            return True
        if (ay > py) != (by > py):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_cross:
                inside = not inside
    return inside


def feature_distance(p: PointLike, f: Feature) -> float:
    """Distance from ``p`` to the feature's geometry; zero inside polygons."""
    if f.kind is FeatureKind.POLYGON and point_in_polygon(p, f.vertices):
        return 0.0
    return min(point_segment_distance(p, a, b) for a, b in f.segments())


def map_distance(p: PointLike, tag: Tag, m: Map) -> float:
    """Distance from ``p`` to the closest feature carrying ``tag``."""
    feats = m.with_tag(tag)
    if not feats:
        raise NoFeatureWithTag(tag)
    return min(feature_distance(p, f) for f in feats)


def map_over(p: PointLike, tag: Tag, m: Map, line_width: float = DEFAULT_LINE_WIDTH) -> bool:
    """Whether ``p`` lies on a ``tag`` feature.

    Polygons use containment; polylines are buffered by half of ``line_width``.
    Node features never contain a point.
    """
    half = 0.5 * line_width
    for f in m.with_tag(tag):
        if f.kind is FeatureKind.POLYGON:
            if point_in_polygon(p, f.vertices):
                return True
        elif f.kind is FeatureKind.POLYLINE:
            if any(point_segment_distance(p, a, b) <= half for a, b in f.segments()):
                return True
    return False


# ---------------------------------------------------------------------------
# vectorized kernels over arrays of query points


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=float).reshape(-1, DIM)


def segments_distance_many(points, segments: np.ndarray) -> np.ndarray:
    """Minimum distance from every point to any of ``segments`` (shape ``(m, 2, 2)``)."""
    pts = _as_points(points)
    out = np.full(len(pts), np.inf)
    if len(segments) == 0:
        return out
    a = segments[:, 0, :]
    d = segments[:, 1, :] - a
    len2 = np.einsum("ij,ij->i", d, d)
    safe = np.where(len2 > 0.0, len2, 1.0)
    step = max(1, _CHUNK_ELEMENTS // len(segments))
    for lo in range(0, len(pts), step):
        p = pts[lo:lo + step]
        rx = p[:, None, 0] - a[None, :, 0]
        ry = p[:, None, 1] - a[None, :, 1]
        t = (rx * d[:, 0] + ry * d[:, 1]) / safe
        np.clip(t, 0.0, 1.0, out=t)
        t[:, len2 == 0.0] = 0.0
        ex = rx - t * d[:, 0]
        ey = ry - t * d[:, 1]
        out[lo:lo + step] = np.sqrt((ex * ex + ey * ey).min(axis=1))
    return out


def points_in_polygon_many(points, ring: np.ndarray) -> np.ndarray:
    """Vectorized ``point_in_polygon`` for an ``(n, 2)`` ring."""
    pts = _as_points(points)
    ring = np.asarray(ring, dtype=float)
    if len(ring) < 3:
        raise ValueError(f"polygon ring needs at least 3 vertices, got {len(ring)}")
    lo, hi = ring.min(axis=0), ring.max(axis=0)
    out = np.zeros(len(pts), dtype=bool)
    near = np.all((pts >= lo - BOUNDARY_TOLERANCE) & (pts <= hi + BOUNDARY_TOLERANCE), axis=1)
    if not near.any():
        return out
    p = pts[near]
    a = ring
    b = np.roll(ring, -1, axis=0)
    inside = np.zeros(len(p), dtype=bool)
    px, py = p[:, 0], p[:, 1]
    for (ax, ay), (bx, by) in zip(a, b):
        crosses = (ay > py) != (by > py)
        if by != ay:
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= crosses & (px < x_cross)
    edges = np.stack([a, b], axis=1)
    inside |= segments_distance_many(p, edges) <= BOUNDARY_TOLERANCE
    out[near] = inside
    return out


def map_distance_many(points, tag: Tag, m: Map) -> np.ndarray:
    """Vectorized ``map_distance``."""
    geom = m.geometry(tag)
    if geom.empty:
        raise NoFeatureWithTag(tag)
    pts = _as_points(points)
    dist = segments_distance_many(pts, geom.segments)
    for ring in geom.polygons:
        dist[points_in_polygon_many(pts, ring)] = 0.0
    return dist


def map_over_many(points, tag: Tag, m: Map, line_width: float = DEFAULT_LINE_WIDTH) -> np.ndarray:
    """Vectorized ``map_over``."""
    geom = m.geometry(tag)
    pts = _as_points(points)
    out = np.zeros(len(pts), dtype=bool)
    for ring in geom.polygons:
        out |= points_in_polygon_many(pts, ring)
    if len(geom.line_segments):
        out |= segments_distance_many(pts, geom.line_segments) <= 0.5 * line_width
    return out
