"""Ingest OpenStreetMap extracts into tagged local-frame maps."""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import BBox, Feature, FeatureKind, GeoOrigin, Map
from .uam import Correlation, TransformationParams, TranslationParams, UncertaintyAnnotatedMap

log = logging.getLogger(__name__)

EARTH_RADIUS = 6_371_000.0
#: Points farther than this from the origin are rejected by :func:`project`.
VALIDITY_RADIUS = 100_000.0

MAP_FORMAT = "starmap-map"
MAP_VERSION = 1


class SourceError(ValueError):
    """Unreadable or malformed input; ``offset`` is a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyMapError(ValueError):
    pass


class SourceFormat(str, Enum):
    OSM_XML = "osm_xml"
    OVERPASS_JSON = "overpass_json"


@dataclass
class RawFeature:
    id: str
    kind: FeatureKind  # node, polyline or polygon candidate
    coords: list[tuple[float, float]]  # (lat, lon)
    tags: dict[str, str]


# ---------------------------------------------------------------------------
# projection


def project(origin: GeoOrigin, lat: float, lon: float) -> tuple[float, float]:
    """Equirectangular projection into the local frame of ``origin``."""
    x = EARTH_RADIUS * math.cos(math.radians(origin.latitude)) * math.radians(lon - origin.longitude)
    y = EARTH_RADIUS * math.radians(lat - origin.latitude)
    if math.hypot(x, y) > VALIDITY_RADIUS:
        raise ValueError(
            f"({lat}, {lon}) is {math.hypot(x, y) / 1000:.1f} km from the origin; "
            f"the local frame is valid within {VALIDITY_RADIUS / 1000:.0f} km"
        )
    return x, y


def unproject(origin: GeoOrigin, x: float, y: float) -> tuple[float, float]:
    """Inverse of :func:`project`, returns ``(lat, lon)``."""
    lat = origin.latitude + math.degrees(y / EARTH_RADIUS)
    lon = origin.longitude + math.degrees(x / (EARTH_RADIUS * math.cos(math.radians(origin.latitude))))
    return lat, lon


# ---------------------------------------------------------------------------
# readers


def _offset_from_position(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: line - 1]) + column


def _way_feature(wid, refs, tags, nodes) -> RawFeature | None:
    coords = [nodes[r] for r in refs if r in nodes]
    if len(coords) < len(refs):
        log.warning("way %s references %d missing node(s)", wid, len(refs) - len(coords))
    if len(coords) < 2:
        return None
    closed = len(refs) >= 4 and refs[0] == refs[-1]
    if closed:
        coords = coords[:-1]
    kind = FeatureKind.POLYGON if closed else FeatureKind.POLYLINE
    return RawFeature(f"way/{wid}", kind, coords, tags)


def _read_osm_xml(data: bytes) -> list[RawFeature]:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise SourceError(f"malformed OSM XML: {exc}", _offset_from_position(data, line, col)) from None
    if root.tag != "osm":
        raise SourceError(f"expected an <osm> document, found <{root.tag}>", 0)
    nodes: dict[str, tuple[float, float]] = {}
    out: list[RawFeature] = []
    for el in root:
        tags = {t.get("k"): t.get("v") for t in el.findall("tag")}
        if el.tag == "node":
            try:
                nodes[el.get("id")] = (float(el.get("lat")), float(el.get("lon")))
            except (TypeError, ValueError):
                raise SourceError(f"node {el.get('id')} lacks valid lat/lon") from None
            if tags:
                out.append(RawFeature(f"node/{el.get('id')}", FeatureKind.NODE, [nodes[el.get("id")]], tags))
        elif el.tag == "way":
            refs = [nd.get("ref") for nd in el.findall("nd")]
            feat = _way_feature(el.get("id"), refs, tags, nodes)
            if feat is not None and tags:
                out.append(feat)
    return out


def _read_overpass_json(data: bytes) -> list[RawFeature]:
    text = data.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SourceError(f"malformed Overpass JSON: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("elements"), list):
        raise SourceError("Overpass JSON needs a top-level 'elements' list", 0)
    nodes: dict[str, tuple[float, float]] = {}
    for el in doc["elements"]:
        if el.get("type") == "node":
            nodes[str(el["id"])] = (float(el["lat"]), float(el["lon"]))
    out: list[RawFeature] = []
    for el in doc["elements"]:
        tags = {str(k): str(v) for k, v in (el.get("tags") or {}).items()}
        if not tags:
            continue
        if el.get("type") == "node":
            out.append(RawFeature(f"node/{el['id']}", FeatureKind.NODE, [nodes[str(el["id"])]], tags))
        elif el.get("type") == "way":
            refs = [str(r) for r in el.get("nodes", [])]
            if "geometry" in el:
                geom = {r: (float(g["lat"]), float(g["lon"])) for r, g in zip(refs, el["geometry"])}
                feat = _way_feature(el["id"], refs, tags, {**nodes, **geom})
            else:
                feat = _way_feature(el["id"], refs, tags, nodes)
            if feat is not None:
                out.append(feat)
    return out


def load_source(path: str | Path, fmt: SourceFormat | str) -> list[RawFeature]:
    """Read tagged nodes and ways; closed ways become polygon candidates."""
    try:
        fmt = SourceFormat(fmt)
    except ValueError:
        raise SourceError(f"unsupported format {fmt!r}; use one of {[f.value for f in SourceFormat]}") from None
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise SourceError(f"cannot read {path}: {exc.strerror}") from None
    if fmt is SourceFormat.OSM_XML:
        if data.lstrip()[:1] in (b"{", b"["):
            raise SourceError(f"{path} looks like JSON; try --format {SourceFormat.OVERPASS_JSON.value}", 0)
        return _read_osm_xml(data)
    if data.lstrip()[:1] == b"<":
        raise SourceError(f"{path} looks like XML; try --format {SourceFormat.OSM_XML.value}", 0)
    return _read_overpass_json(data)


# ---------------------------------------------------------------------------
# tag mapping


@dataclass(frozen=True)
class TagRule:
    key: str
    value: str  # "*" matches any value
    tags: tuple[str, ...]
    kind: FeatureKind | None = None

    def matches(self, tags: dict[str, str]) -> bool:
        return self.key in tags and (self.value == "*" or tags[self.key] == self.value)

    def to_dict(self) -> dict:
        d = {"key": self.key, "value": self.value, "tags": list(self.tags)}
        if self.kind is not None:
            d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class TagMapping:
    """Ordered source-tag rules; the first matching rule wins."""

    rules: tuple[TagRule, ...]

    def match(self, tags: dict[str, str]) -> TagRule | None:
        return next((r for r in self.rules if r.matches(tags)), None)

    @classmethod
    def from_dict(cls, data: dict) -> TagMapping:
        rules = []
        for r in data["rules"]:
            tags = r.get("tags", r.get("tag"))
            tags = (tags,) if isinstance(tags, str) else tuple(tags)
            rules.append(TagRule(r["key"], r.get("value", "*"), tags, FeatureKind(r["kind"]) if r.get("kind") else None))
        return cls(tuple(rules))

    def to_dict(self) -> dict:
        return {"rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def load(cls, path: str | Path) -> TagMapping:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> TagMapping:
        text = resources.files("starmaps.data").joinpath("default_mapping.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class IngestReport:
    counts: dict[str, int] = field(default_factory=dict)  # per mapped tag
    unmatched: int = 0
    outside_bbox: int = 0
    demoted: list[str] = field(default_factory=list)


def build_map_with_report(
    raw: Iterable[RawFeature], mapping: TagMapping, origin: GeoOrigin, bbox: BBox | None = None
) -> tuple[Map, IngestReport]:
    report = IngestReport()
    features = []
    for rf in raw:
        rule = mapping.match(rf.tags)
        if rule is None:
            report.unmatched += 1
            continue
        verts = np.array([project(origin, lat, lon) for lat, lon in rf.coords])
        if bbox is not None and not bbox.contains(verts).any():
            report.outside_bbox += 1
            continue
        kind = rf.kind
        if kind is not FeatureKind.NODE and rule.kind is not None:
            kind = rule.kind
            if kind is FeatureKind.POLYGON and len(verts) < 3:
                log.warning("%s maps to a polygon but has %d vertices; using a polyline", rf.id, len(verts))
                report.demoted.append(rf.id)
                kind = FeatureKind.POLYLINE
            elif kind is FeatureKind.POLYLINE and rf.kind is FeatureKind.POLYGON:
                verts = np.vstack([verts, verts[:1]])
            elif kind is FeatureKind.NODE:
                kind = rf.kind
        features.append(Feature(rf.id, verts, kind, frozenset(rule.tags)))
        for t in rule.tags:
            report.counts[t] = report.counts.get(t, 0) + 1
    if report.unmatched:
        log.info("dropped %d feature(s) without a mapping rule", report.unmatched)
    if not features:
        raise EmptyMapError("no features left after tag mapping; check the mapping and bbox")
    report.counts = dict(sorted(report.counts.items()))
    return Map(tuple(features), origin, bbox), report


def build_map(raw: Iterable[RawFeature], mapping: TagMapping, origin: GeoOrigin, bbox: BBox | None = None) -> Map:
    """Project and tag-map raw features; features touching ``bbox`` are kept whole."""
    return build_map_with_report(raw, mapping, origin, bbox)[0]


def annotate_uniform(m: Map, translation_stddev: float, interpretation: str = "stddev") -> UncertaintyAnnotatedMap:
    """Same pure-translation error for every feature.

    ``interpretation="variance"`` reads ``translation_stddev`` as the diagonal
    covariance entry instead of the per-axis standard deviation.
    """
    if translation_stddev < 0:
        raise ValueError("translation_stddev must be >= 0")
    if interpretation == "stddev":
        var = translation_stddev**2
    elif interpretation == "variance":
        var = translation_stddev
    else:
        raise ValueError(f"unknown interpretation {interpretation!r}")
    return UncertaintyAnnotatedMap(
        m,
        default_transform=TransformationParams(),
        default_translate=TranslationParams(np.zeros(2), np.diag([var, var])),
        correlation=Correlation.PER_FEATURE,
    )


# ---------------------------------------------------------------------------
# map files


def map_to_dict(m: Map) -> dict:
    return {
        "format": MAP_FORMAT,
        "version": MAP_VERSION,
        "origin": {"latitude": m.origin.latitude, "longitude": m.origin.longitude},
        "bbox": list(m.bbox.as_tuple()) if m.bbox is not None else None,
        "features": [
            {
                "id": f.id,
                "kind": f.kind.value,
                "tags": sorted(f.tags),
                "vertices": f.vertices.tolist(),
            }
            for f in m.features
        ],
    }


def map_from_dict(data: dict) -> Map:
    if data.get("format") != MAP_FORMAT:
        raise ValueError("not a map file")
    if data.get("version") != MAP_VERSION:
        raise ValueError(f"unsupported map file version {data.get('version')}")
    feats = tuple(
        Feature(f["id"], np.array(f["vertices"], dtype=float), FeatureKind(f["kind"]), frozenset(f["tags"]))
        for f in data["features"]
    )
    bbox = BBox(*data["bbox"]) if data.get("bbox") else None
    return Map(feats, GeoOrigin(**data["origin"]), bbox)


def save_map(m: Map, path: str | Path) -> None:
    Path(path).write_text(json.dumps(map_to_dict(m), indent=1, sort_keys=True) + "\n")


def load_map(path: str | Path) -> Map:
    return map_from_dict(json.loads(Path(path).read_text()))
