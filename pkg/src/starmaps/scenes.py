"""Synthetic scenes used by demos, benchmarks and tests."""

from __future__ import annotations

import numpy as np

from .geometry import BBox, Feature, FeatureKind, GeoOrigin, Map

#: Anchor of the demo scenes (a point near Karlsruhe, Germany).
DEMO_ORIGIN = GeoOrigin(49.0, 8.4)


def straight_road(offset: float = 20.0, length: float = 10_000.0) -> Map:
    """One east-west road ``offset`` meters south of the origin."""
    half = 0.5 * length
    road = Feature("road", [(-half, -offset), (half, -offset)], FeatureKind.POLYLINE, {"road"})
    return Map((road,), DEMO_ORIGIN, BBox(-half, -offset - 100, half, 100))


def demo_town() -> Map:
    """A 400 m x 400 m block with a road grid, buildings, a park and a pilot.

    Roads carry ``road`` plus their class (``primary``, ``secondary``,
    ``residential``).
    """
    feats: list[Feature] = []

    def road(fid, pts, cls):
        feats.append(Feature(fid, pts, FeatureKind.POLYLINE, {"road", cls}))

    road("primary-ew", [(-200, 30), (-60, 42), (80, 38), (200, 55)], "primary")
    road("primary-ns", [(-20, -200), (-12, -40), (-25, 90), (-5, 200)], "primary")
    road("secondary-1", [(60, -200), (75, -60), (80, 38)], "secondary")
    road("residential-1", [(-200, -110), (-12, -100)], "residential")
    road("residential-2", [(80, 38), (120, 130), (110, 200)], "residential")
    road("residential-3", [(-150, 42), (-160, 200)], "residential")
    road("residential-4", [(75, -60), (200, -80)], "residential")

    def building(fid, x, y, w, h):
        feats.append(
            Feature(fid, [(x, y), (x + w, y), (x + w, y + h), (x, y + h)], FeatureKind.POLYGON, {"building"})
        )

    building("b1", -120, -60, 40, 30)
    building("b2", -70, -70, 30, 45)
    building("b3", 20, -150, 25, 40)
    building("b4", 110, -40, 50, 35)
    building("b5", 130, 70, 30, 30)
    building("b6", -110, 80, 35, 50)
    building("b7", 20, 120, 45, 25)
    feats.append(
        Feature(
            "park", [(-190, -190), (-60, -185), (-50, -130), (-180, -125)], FeatureKind.POLYGON, {"park"}
        )
    )
    feats.append(Feature("pilot", [(150, -160)], FeatureKind.NODE, {"pilot"}))
    return Map(tuple(feats), DEMO_ORIGIN, BBox(-200, -200, 200, 200))


def demo_extent() -> BBox:
    return BBox(-200.0, -200.0, 200.0, 200.0)


def random_convex_polygon(rng: np.random.Generator, n: int, radius: float = 1.0) -> np.ndarray:
    """Convex polygon with ``n`` vertices on a circle, counter-clockwise."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    center = rng.uniform(-1, 1, 2)
    return center + radius * np.column_stack([np.cos(angles), np.sin(angles)])
