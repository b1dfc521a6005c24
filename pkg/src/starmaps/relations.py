"""Spatial relations over sampled maps and moment matching of their samples."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import ndtr

from .geometry import (
    DEFAULT_LINE_WIDTH,
    Map,
    NoFeatureWithTag,
    Point,
    PointLike,
    Tag,
    map_distance,
    map_distance_many,
    map_over,
    map_over_many,
)
from .uam import MapCollection


class Signature(str, Enum):
    CATEGORICAL = "categorical"
    QUANTITATIVE = "quantitative"


class RelationKind(str, Enum):
    OVER = "over"
    DISTANCE = "distance"

    @property
    def signature(self) -> Signature:
        return Signature.CATEGORICAL if self is RelationKind.OVER else Signature.QUANTITATIVE

    @property
    def family(self) -> Family:
        return Family.BERNOULLI if self is RelationKind.OVER else Family.GAUSSIAN

    @property
    def n_params(self) -> int:
        return len(self.family.param_names)


class Family(str, Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("p",) if self is Family.BERNOULLI else ("mean", "variance")


class Comparison(str, Enum):
    GREATER = "greater"
    LESS = "less"


@dataclass(frozen=True, eq=False)
class RelationSamples:
    relation: RelationKind
    tag: Tag
    location: Point
    values: np.ndarray

    def __post_init__(self):
        kind = RelationKind(self.relation)
        dtype = bool if kind.signature is Signature.CATEGORICAL else float
        values = np.asarray(self.values, dtype=dtype).reshape(-1)
        if dtype is float and not np.all(np.isfinite(values)):
            raise ValueError("quantitative samples must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "relation", kind)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DistributionParams:
    family: Family
    params: tuple[float, ...]

    def __post_init__(self):
        family = Family(self.family)
        params = tuple(float(v) for v in self.params)
        if len(params) != len(family.param_names):
            raise ValueError(f"{family.value} takes {len(family.param_names)} parameters")
        if family is Family.BERNOULLI and not 0.0 <= params[0] <= 1.0:
            raise ValueError(f"bernoulli p must be in [0, 1], got {params[0]}")
        if family is Family.GAUSSIAN and not params[1] >= 0.0:
            raise ValueError(f"gaussian variance must be >= 0, got {params[1]}")
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "params", params)

    @classmethod
    def bernoulli(cls, p: float) -> DistributionParams:
        return cls(Family.BERNOULLI, (p,))

    @classmethod
    def gaussian(cls, mean: float, variance: float) -> DistributionParams:
        return cls(Family.GAUSSIAN, (mean, variance))

    @property
    def p(self) -> float:
        self._expect(Family.BERNOULLI)
        return self.params[0]

    @property
    def mean(self) -> float:
        self._expect(Family.GAUSSIAN)
        return self.params[0]

    @property
    def variance(self) -> float:
        self._expect(Family.GAUSSIAN)
        return self.params[1]

    def _expect(self, family: Family):
        if self.family is not family:
            raise TypeError(f"expected {family.value} parameters, got {self.family.value}")


def eval_relation(kind: RelationKind, x: PointLike, tag: Tag, m: Map, line_width: float = DEFAULT_LINE_WIDTH):
    """Evaluate one relation on one map: a bool for *over*, meters for *distance*."""
    kind = RelationKind(kind)
    if kind is RelationKind.OVER:
        return map_over(x, tag, m, line_width)
    return map_distance(x, tag, m)


def eval_relation_many(kind: RelationKind, points, tag: Tag, m: Map, line_width: float = DEFAULT_LINE_WIDTH) -> np.ndarray:
    kind = RelationKind(kind)
    if kind is RelationKind.OVER:
        return map_over_many(points, tag, m, line_width)
    return map_distance_many(points, tag, m)


def sample_relation(
    kind: RelationKind, x: PointLike, tag: Tag, w: MapCollection, line_width: float = DEFAULT_LINE_WIDTH
) -> RelationSamples:
    """Evaluate the relation at ``x`` on every map of ``w``, in collection order."""
    kind = RelationKind(kind)
    if kind is RelationKind.DISTANCE and tag not in w.source.map.tags:
        raise NoFeatureWithTag(tag)
    values = [eval_relation(kind, x, tag, m, line_width) for m in w.maps]
    loc = x if isinstance(x, Point) else Point(*map(float, x))
    return RelationSamples(kind, tag, loc, values)


def sample_relation_grid(
    kind: RelationKind, points, tag: Tag, w: MapCollection, line_width: float = DEFAULT_LINE_WIDTH
) -> np.ndarray:
    """``(N, P)`` array of relation values for ``P`` points over ``N`` maps."""
    kind = RelationKind(kind)
    if kind is RelationKind.DISTANCE and tag not in w.source.map.tags:
        raise NoFeatureWithTag(tag)
    return np.stack([eval_relation_many(kind, points, tag, m, line_width) for m in w.maps])


def match_bernoulli(s: RelationSamples) -> DistributionParams:
    if s.relation.signature is not Signature.CATEGORICAL:
        raise TypeError(f"bernoulli matching needs categorical samples, got {s.relation.value}")
    return DistributionParams.bernoulli(np.count_nonzero(s.values) / len(s.values))


def match_gaussian(s: RelationSamples) -> DistributionParams:
    if s.relation.signature is not Signature.QUANTITATIVE:
        raise TypeError(f"gaussian matching needs quantitative samples, got {s.relation.value}")
    if len(s.values) < 2:
        raise ValueError("gaussian matching needs at least 2 samples")
    return DistributionParams.gaussian(*(float(v) for v in match_moments(s.relation, s.values[:, None])[:, 0]))


def match_moments(kind: RelationKind, values: np.ndarray) -> np.ndarray:
    """Column-wise moment matching of an ``(N, P)`` sample array.

    Returns ``(1, P)`` Bernoulli ``p`` or ``(2, P)`` Gaussian mean/variance,
    identical to the scalar matchers applied per column.
    """
    kind = RelationKind(kind)
    values = np.asarray(values)
    if kind.signature is Signature.CATEGORICAL:
        return (np.count_nonzero(values, axis=0) / values.shape[0])[None, :]
    if values.shape[0] < 2:
        raise ValueError("gaussian matching needs at least 2 samples")
    var = values.var(axis=0, ddof=1)
    # Constant columns get exactly zero variance (np.var leaves rounding residue).
    var[np.ptp(values, axis=0) == 0] = 0.0
    return np.stack([values.mean(axis=0), var])


def prob_threshold(d: DistributionParams, op: Comparison, threshold: float) -> float:
    """Probability that a Gaussian variable is above/below ``threshold``."""
    if d.family is not Family.GAUSSIAN:
        raise TypeError("threshold probabilities need gaussian parameters")
    return float(prob_threshold_many(d.mean, d.variance, op, threshold))


def prob_threshold_many(mean, variance, op: Comparison, threshold: float):
    """Array form of :func:`prob_threshold`.

    Zero variance degenerates to a step: ``greater`` is 1 iff
    ``mean > threshold`` and ``less`` is 1 iff ``mean <= threshold``.
    """
    op = Comparison(op)
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ValueError("variance must be >= 0")
    sd = np.sqrt(variance)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (threshold - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    less = np.where(sd > 0, ndtr(z), (mean <= threshold).astype(float))
    if op is Comparison.LESS:
        return less
    return np.where(sd > 0, ndtr(-z), (mean > threshold).astype(float))
