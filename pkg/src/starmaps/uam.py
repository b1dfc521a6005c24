"""Uncertainty annotated maps and the perturbation sampler.

Each feature carries Gaussian error moments for an affine transformation
(rotation, scale, shear about the feature centroid) and a translation. Drawing
one perturbation per feature (or per vertex) for every feature yields one
plausible map instance; repeating that ``n`` times yields a collection.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import Feature, Map

SCHEMA_VERSION = 1


class Correlation(str, Enum):
    PER_FEATURE = "per_feature"
    PER_VERTEX = "per_vertex"


@dataclass(frozen=True)
class TransformationParams:
    """Moments of the centroid-anchored linear error.

    Rotation angle, scale factor and shear factor are drawn from independent
    normals. ``scale_mean`` is the expected isotropic scale.
    """

    rotation_stddev: float = 0.0
    scale_mean: float = 1.0
    scale_stddev: float = 0.0
    shear_stddev: float = 0.0

    def __post_init__(self):
        for name in ("rotation_stddev", "scale_stddev", "shear_stddev"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.scale_mean > 0:
            raise ValueError(f"scale_mean must be > 0, got {self.scale_mean}")

    @property
    def degenerate(self) -> bool:
        return (
            self.rotation_stddev == 0 and self.scale_stddev == 0
            and self.shear_stddev == 0 and self.scale_mean == 1
        )

    def to_dict(self) -> dict:
        return {
            "rotation_stddev": self.rotation_stddev,
            "scale_mean": self.scale_mean,
            "scale_stddev": self.scale_stddev,
            "shear_stddev": self.shear_stddev,
        }


@dataclass(frozen=True, eq=False)
class TranslationParams:
    """Mean offset and 2x2 covariance of the translation error (meters, m^2)."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(2)
        cov = np.array(self.covariance, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("translation covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-12 * max(1.0, eig.max()):
            raise ValueError("translation covariance must be positive semi-definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_factor", _psd_factor(cov))

    @classmethod
    def isotropic(cls, stddev: float) -> TranslationParams:
        return cls(np.zeros(2), np.eye(2) * stddev**2)

    @property
    def factor(self) -> np.ndarray:
        """Matrix ``L`` with ``L @ L.T == covariance``."""
        return self._factor

    def __eq__(self, other):
        if not isinstance(other, TranslationParams):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.covariance, other.covariance)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    if not cov.any():
        return np.zeros((2, 2))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class UncertaintyAnnotatedMap:
    """A map with transformation and translation annotators.

    Annotations resolve per feature in this order: feature-id override, then
    the first of the feature's tags (sorted) that has a per-tag entry, then the
    map-wide default.
    """

    map: Map
    default_transform: TransformationParams = TransformationParams()
    default_translate: TranslationParams = field(default_factory=TranslationParams)
    tag_transform: Mapping[str, TransformationParams] = field(default_factory=dict)
    tag_translate: Mapping[str, TranslationParams] = field(default_factory=dict)
    feature_transform: Mapping[str, TransformationParams] = field(default_factory=dict)
    feature_translate: Mapping[str, TranslationParams] = field(default_factory=dict)
    correlation: Correlation = Correlation.PER_FEATURE

    def __post_init__(self):
        object.__setattr__(self, "correlation", Correlation(self.correlation))
        for name in ("tag_transform", "tag_translate", "feature_transform", "feature_translate"):
            object.__setattr__(self, name, dict(getattr(self, name)))

    def annotate_transform(self, f: Feature) -> TransformationParams:
        return _resolve(f, self.feature_transform, self.tag_transform, self.default_transform)

    def annotate_translate(self, f: Feature) -> TranslationParams:
        return _resolve(f, self.feature_translate, self.tag_translate, self.default_translate)

    @property
    def degenerate(self) -> bool:
        return all(
            self.annotate_transform(f).degenerate
            and not self.annotate_translate(f).mean.any()
            and not self.annotate_translate(f).covariance.any()
            for f in self.map.features
        )

    def annotations_dict(self) -> dict:
        """Annotation config (everything except the map itself)."""
        return {
            "version": SCHEMA_VERSION,
            "correlation": self.correlation.value,
            "default": {
                "transform": self.default_transform.to_dict(),
                "translate": self.default_translate.to_dict(),
            },
            "tags": _overrides_dict(self.tag_transform, self.tag_translate),
            "features": _overrides_dict(self.feature_transform, self.feature_translate),
        }

    def save_annotations(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.annotations_dict(), indent=2, sort_keys=True) + "\n")


def _resolve(f: Feature, by_id: Mapping, by_tag: Mapping, default):
    if f.id in by_id:
        return by_id[f.id]
    for tag in sorted(f.tags):
        if tag in by_tag:
            return by_tag[tag]
    return default


def _overrides_dict(transforms: Mapping, translations: Mapping) -> dict:
    out: dict[str, dict] = {}
    for key, tp in transforms.items():
        out.setdefault(key, {})["transform"] = tp.to_dict()
    for key, tl in translations.items():
        out.setdefault(key, {})["translate"] = tl.to_dict()
    return out


def annotations_from_dict(m: Map, data: Mapping) -> UncertaintyAnnotatedMap:
    """Inverse of :meth:`UncertaintyAnnotatedMap.annotations_dict`."""
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported annotation schema version {version}")
    default = data.get("default", {})
    kwargs = {
        "default_transform": TransformationParams(**default.get("transform", {})),
        "default_translate": TranslationParams(**default.get("translate", {})),
        "correlation": Correlation(data.get("correlation", Correlation.PER_FEATURE.value)),
    }
    for scope in ("tags", "features"):
        prefix = "tag" if scope == "tags" else "feature"
        entries = data.get(scope, {})
        kwargs[f"{prefix}_transform"] = {
            k: TransformationParams(**v["transform"]) for k, v in entries.items() if "transform" in v
        }
        kwargs[f"{prefix}_translate"] = {
            k: TranslationParams(**v["translate"]) for k, v in entries.items() if "translate" in v
        }
    return UncertaintyAnnotatedMap(m, **kwargs)


def load_annotations(m: Map, path: str | Path) -> UncertaintyAnnotatedMap:
    return annotations_from_dict(m, json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# sampling


def transform_matrix(rotation: float, scale: float, shear: float) -> np.ndarray:
    """``R(rotation) @ S(scale) @ H(shear)`` with ``H`` a horizontal shear."""
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.array([[scale, scale * shear], [0.0, scale]])


def draw_perturbation(
    tp: TransformationParams, tl: TranslationParams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one transformation matrix and translation vector.

    Always consumes five standard normals from ``rng`` (rotation, scale, shear,
    two translation components) so stream positions do not depend on which
    parameters are zero.
    """
    z = rng.standard_normal(5)
    phi = _phi(tp, z[0], z[1], z[2])
    t = tl.mean + tl.factor @ z[3:5]
    return phi, t


def _phi(tp: TransformationParams, z_rot, z_scale, z_shear):
    if tp.degenerate:
        return np.eye(2)
    return transform_matrix(
        tp.rotation_stddev * z_rot,
        tp.scale_mean + tp.scale_stddev * z_scale,
        tp.shear_stddev * z_shear,
    )


def perturb_feature(f: Feature, phi: np.ndarray, t: np.ndarray) -> Feature:
    """Apply ``v -> c + phi (v - c) + t`` with ``c`` the feature centroid."""
    return f.with_vertices(_apply(f.vertices, f.centroid, np.asarray(phi), np.asarray(t)))


def _apply(verts: np.ndarray, centroid: np.ndarray, phi: np.ndarray, t: np.ndarray) -> np.ndarray:
    # Written as v + (phi - I)(v - c) + t so the identity leaves v bit-exact.
    delta = phi - np.eye(2)
    out = verts.copy()
    if delta.any():
        out += (verts - centroid) @ delta.T
    if t.any():
        out += t
    return out


def sample_map(uam: UncertaintyAnnotatedMap, rng: np.random.Generator) -> Map:
    """Draw one map instance from ``uam``."""
    features = []
    for f in uam.map.features:
        tp = uam.annotate_transform(f)
        tl = uam.annotate_translate(f)
        if uam.correlation is Correlation.PER_FEATURE:
            phi, t = draw_perturbation(tp, tl, rng)
            features.append(f.with_vertices(_apply(f.vertices, f.centroid, phi, t)))
        else:
            z = rng.standard_normal((len(f.vertices), 5))
            c = f.centroid
            verts = np.empty_like(f.vertices)
            for i, v in enumerate(f.vertices):
                phi = _phi(tp, *z[i, :3])
                verts[i] = _apply(v[None, :], c, phi, tl.mean + tl.factor @ z[i, 3:5])[0]
            features.append(f.with_vertices(verts))
    return uam.map.with_features(features)


def substreams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-sample generators derived from ``seed`` by index."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


@dataclass(frozen=True, eq=False)
class MapCollection:
    """``n`` map instances sampled from ``source`` with ``seed``."""

    maps: tuple[Map, ...]
    seed: int
    source: UncertaintyAnnotatedMap

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i) -> Map:
        return self.maps[i]


def sample_collection(
    uam: UncertaintyAnnotatedMap, n: int, seed: int, workers: int = 1
) -> MapCollection:
    """Draw ``n`` maps, sample ``i`` using the ``i``-th substream of ``seed``.

    The result does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError(f"collection size must be >= 1, got {n}")
    streams = substreams(seed, n)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            maps = tuple(pool.map(lambda rng: sample_map(uam, rng), streams))
    else:
        maps = tuple(sample_map(uam, rng) for rng in streams)
    return MapCollection(maps, seed, uam)
