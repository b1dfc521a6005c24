"""Scalar fields of distribution parameters: raster and Gaussian-process backends.

A StaR Map stores, per (relation, tag), the raw relation samples taken at a
set of locations, and per (relation, tag, parameter) a field that predicts the
moment-matched parameter anywhere in the navigation area.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .geometry import DEFAULT_LINE_WIDTH, BBox, Point, PointLike, Tag
from .relations import (
    Family,
    RelationKind,
    RelationSamples,
    match_moments,
    sample_relation_grid,
)
from .uam import MapCollection, UncertaintyAnnotatedMap, sample_collection

ARCHIVE_FORMAT = "starmap-archive"
ARCHIVE_VERSION = 1

# Relative slack when deciding whether a point lies inside a raster extent.
_EXTENT_SLACK = 1e-9
# Snap fractional grid coordinates this close to an integer onto the node.
_NODE_SNAP = 1e-9
_PREDICT_CHUNK = 8192


class Backend(str, Enum):
    RASTER = "raster"
    GP = "gp"


class OutOfExtent(ValueError):
    """Raster evaluation outside the sampled node hull."""


class MissingField(KeyError):
    """No field stored for the requested (relation, tag, parameter)."""


# ---------------------------------------------------------------------------
# grids and bilinear interpolation


def grid_points(extent: BBox, rows: int, cols: int) -> np.ndarray:
    """Node coordinates in row-major order; row 0 lies at ``ymin``."""
    xs = np.linspace(extent.xmin, extent.xmax, cols)
    ys = np.linspace(extent.ymin, extent.ymax, rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _fractional_index(coord, lo, hi, n):
    f = (coord - lo) / (hi - lo) * (n - 1)
    snapped = np.round(f)
    return np.where(np.abs(f - snapped) < _NODE_SNAP, snapped, f)


def bilinear(values: np.ndarray, extent: BBox, points) -> np.ndarray:
    """Bilinear interpolation of a node raster at ``points``.

    Raises :class:`OutOfExtent` for points outside the node hull.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rows, cols = values.shape
    slack_x = _EXTENT_SLACK * (extent.xmax - extent.xmin)
    slack_y = _EXTENT_SLACK * (extent.ymax - extent.ymin)
    outside = (
        (pts[:, 0] < extent.xmin - slack_x) | (pts[:, 0] > extent.xmax + slack_x)
        | (pts[:, 1] < extent.ymin - slack_y) | (pts[:, 1] > extent.ymax + slack_y)
    )
    if outside.any():
        bad = pts[np.argmax(outside)]
        raise OutOfExtent(f"point ({bad[0]:.3f}, {bad[1]:.3f}) outside raster extent {extent.as_tuple()}")
    fx = np.clip(_fractional_index(pts[:, 0], extent.xmin, extent.xmax, cols), 0, cols - 1)
    fy = np.clip(_fractional_index(pts[:, 1], extent.ymin, extent.ymax, rows), 0, rows - 1)
    j0 = np.minimum(np.floor(fx).astype(int), cols - 2)
    i0 = np.minimum(np.floor(fy).astype(int), rows - 2)
    tx = fx - j0
    ty = fy - i0
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    # Exact at nodes: zero weights multiply, unit weights pass through.
    top = np.where(tx == 0, v00, np.where(tx == 1, v01, (1 - tx) * v00 + tx * v01))
    bot = np.where(tx == 0, v10, np.where(tx == 1, v11, (1 - tx) * v10 + tx * v11))
    return np.where(ty == 0, top, np.where(ty == 1, bot, (1 - ty) * top + ty * bot))


# ---------------------------------------------------------------------------
# Gaussian processes


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel hyperparameters.

    ``None`` entries are resolved from the training data at fit time: the
    length scale becomes twice the spacing of a regular grid with as many
    nodes as training points over their bounding box, the signal variance the
    sample variance of the targets, and the noise variance ``noise_ratio``
    times the signal variance. ``prior_mean`` is ``"constant"`` (the target
    mean) or ``"zero"``.
    """

    length_scale: float | None = None
    signal_variance: float | None = None
    noise_variance: float | None = None
    noise_ratio: float = 1e-4
    prior_mean: str = "constant"
    tune: bool = False

    def to_dict(self) -> dict:
        return {
            "length_scale": self.length_scale,
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
            "noise_ratio": self.noise_ratio,
            "prior_mean": self.prior_mean,
            "tune": self.tune,
        }


def se_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, signal_variance: float) -> np.ndarray:
    d2 = (
        np.einsum("ij,ij->i", a, a)[:, None]
        + np.einsum("ij,ij->i", b, b)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(d2, 0.0, out=d2)
    return signal_variance * np.exp(-0.5 * d2 / length_scale**2)


class GPFitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class GPModel:
    """Exact GP regression posterior with a cached Cholesky factor."""

    inputs: np.ndarray
    targets: np.ndarray
    length_scale: float
    signal_variance: float
    noise_variance: float
    prior_mean: float
    jitter: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of the latent field."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        mean = np.empty(len(pts))
        std = np.empty(len(pts))
        prior_var = self.signal_variance
        for lo in range(0, len(pts), _PREDICT_CHUNK):
            p = pts[lo:lo + _PREDICT_CHUNK]
            ks = se_kernel(p, self.inputs, self.length_scale, self.signal_variance)
            mean[lo:lo + len(p)] = self.prior_mean + ks @ self.alpha
            v = solve_triangular(self.chol, ks.T, lower=True, check_finite=False)
            var = prior_var - np.einsum("ij,ij->j", v, v)
            std[lo:lo + len(p)] = np.sqrt(np.maximum(var, 0.0))
        return mean, std

    def log_marginal_likelihood(self) -> float:
        y = self.targets - self.prior_mean
        n = len(y)
        return float(
            -0.5 * y @ self.alpha - np.log(np.diag(self.chol)).sum() - 0.5 * n * math.log(2 * math.pi)
        )

    @property
    def kernel(self) -> KernelConfig:
        """Resolved hyperparameters; refits with this config reproduce the kernel."""
        return KernelConfig(
            self.length_scale, self.signal_variance, self.noise_variance,
            prior_mean=repr(self.prior_mean),
        )


def merge_duplicates(inputs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average targets of identical input points; first-occurrence order is kept."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    uniq, first, inverse = np.unique(inputs, axis=0, return_index=True, return_inverse=True)
    if len(uniq) == len(inputs):
        return inputs, targets
    inverse = inverse.reshape(-1)
    sums = np.bincount(inverse, weights=targets, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    order = np.argsort(first, kind="stable")
    return uniq[order], (sums / counts)[order]


def _resolve_prior_mean(spec: str, targets: np.ndarray) -> float:
    if spec == "zero":
        return 0.0
    if spec == "constant":
        return float(targets.mean())
    return float(spec)


def _default_length_scale(inputs: np.ndarray) -> float:
    span = inputs.max(axis=0) - inputs.min(axis=0)
    area = max(float(span[0] * span[1]), float(max(span.max(), 1.0)) ** 2 * 1e-6)
    return 2.0 * math.sqrt(area / len(inputs))


def _factorize(inputs, length_scale, signal_variance, noise_variance):
    k = se_kernel(inputs, inputs, length_scale, signal_variance)
    k[np.diag_indices_from(k)] += noise_variance
    jitter = 0.0
    scale = max(signal_variance, 1e-300)
    for attempt in range(8):
        try:
            if jitter:
                kj = k.copy()
                kj[np.diag_indices_from(kj)] += jitter
            else:
                kj = k
            c, _ = cho_factor(kj, lower=True, check_finite=False)
            return np.tril(c), jitter
        except np.linalg.LinAlgError:
            jitter = scale * 10.0 ** (attempt - 10)
    raise GPFitError("kernel matrix is not positive definite after jitter escalation")


def gp_fit(samples: Iterable[tuple[PointLike, float]] | tuple[np.ndarray, np.ndarray], kernel: KernelConfig = KernelConfig()) -> GPModel:
    """Fit an exact GP to ``(point, target)`` pairs.

    ``samples`` is either an iterable of pairs or an ``(inputs, targets)``
    tuple of arrays. Duplicate inputs are merged by averaging.
    """
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        inputs, targets = samples
    else:
        pairs = list(samples)
        inputs = np.array([tuple(p) for p, _ in pairs], dtype=float)
        targets = np.array([t for _, t in pairs], dtype=float)
    inputs, targets = merge_duplicates(inputs, targets)
    if len(inputs) < 2:
        raise ValueError("GP fit needs at least 2 distinct training inputs")
    if kernel.tune:
        return _tuned_fit(inputs, targets, kernel)
    return _fit(inputs, targets, kernel)


def _fit(inputs, targets, kernel: KernelConfig) -> GPModel:
    prior_mean = _resolve_prior_mean(kernel.prior_mean, targets)
    signal = kernel.signal_variance
    if signal is None:
        signal = float(np.var(targets, ddof=1))
        if not signal > 0:
            signal = 1.0
    noise = kernel.noise_variance if kernel.noise_variance is not None else kernel.noise_ratio * signal
    length = kernel.length_scale if kernel.length_scale is not None else _default_length_scale(inputs)
    chol, jitter = _factorize(inputs, length, signal, noise)
    alpha = cho_solve((chol, True), targets - prior_mean, check_finite=False)
    return GPModel(inputs, targets, length, signal, noise, prior_mean, jitter, chol, alpha)


def _tuned_fit(inputs, targets, kernel: KernelConfig) -> GPModel:
    """Grid search over a 5x5 log grid of length scale and noise variance."""
    base = _fit(inputs, targets, replace(kernel, tune=False))
    best = None
    for ls_factor in np.logspace(-1, 1, 5, base=4.0):
        for noise_factor in np.logspace(-2, 2, 5):
            candidate = replace(
                kernel,
                tune=False,
                length_scale=base.length_scale * ls_factor,
                signal_variance=base.signal_variance,
                noise_variance=base.noise_variance * noise_factor,
                prior_mean=repr(base.prior_mean),
            )
            try:
                model = _fit(inputs, targets, candidate)
            except GPFitError:
                continue
            lml = model.log_marginal_likelihood()
            if best is None or lml > best[0]:
                best = (lml, model)
    return best[1] if best is not None else base


def gp_predict(model: GPModel, x: PointLike) -> tuple[float, float]:
    mean, std = model.predict(np.asarray(tuple(x), dtype=float))
    return float(mean[0]), float(std[0])


def gp_add(model: GPModel, inputs, targets) -> GPModel:
    """Refit with extra training data under the same hyperparameters."""
    x = np.vstack([model.inputs, np.asarray(inputs, dtype=float).reshape(-1, 2)])
    y = np.concatenate([model.targets, np.asarray(targets, dtype=float).reshape(-1)])
    x, y = merge_duplicates(x, y)
    return _fit(x, y, model.kernel)


# ---------------------------------------------------------------------------
# sampling helper shared by both backends


class MomentSampler:
    """Moment-matched relation parameters at arbitrary points over one collection.

    Keeps every location it sampled, so callers can count relation samples and
    persist the raw sample sets.
    """

    def __init__(self, collection: MapCollection, relation: RelationKind, tag: Tag,
                 line_width: float = DEFAULT_LINE_WIDTH):
        self.collection = collection
        self.relation = RelationKind(relation)
        self.tag = tag
        self.line_width = line_width
        self.locations: list[np.ndarray] = []
        self.values: list[np.ndarray] = []

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        values = sample_relation_grid(self.relation, pts, self.tag, self.collection, self.line_width)
        self.locations.append(pts)
        self.values.append(values)
        return match_moments(self.relation, values)

    @property
    def n_locations(self) -> int:
        return sum(len(p) for p in self.locations)

    @property
    def n_relation_samples(self) -> int:
        return self.n_locations * len(self.collection)

    def sample_set(self) -> SampleSet:
        return SampleSet(
            self.relation, self.tag,
            np.concatenate(self.locations) if self.locations else np.empty((0, 2)),
            np.concatenate(self.values, axis=1) if self.values else np.empty((len(self.collection), 0)),
        )


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Raw relation samples: ``values[n, k]`` is map ``n`` at ``locations[k]``."""

    relation: RelationKind
    tag: Tag
    locations: np.ndarray
    values: np.ndarray

    def samples_at(self, k: int) -> RelationSamples:
        x, y = self.locations[k]
        return RelationSamples(self.relation, self.tag, Point(float(x), float(y)), self.values[:, k])

    def __iter__(self):
        return (self.samples_at(k) for k in range(len(self.locations)))


def gp_refine(
    model: GPModel,
    sampler: MomentSampler,
    candidates,
    batch: int = 16,
    rounds: int = 1,
    param_index: int = 0,
    on_round=None,
) -> GPModel:
    """Confidence-guided refinement.

    Each round predicts the standard deviation at every candidate, samples the
    relation at the ``batch`` candidates with the largest deviation (ties go to
    the earlier candidate), appends the matched parameter and refits with the
    model's hyperparameters. ``on_round(round_index, model)`` is called after
    each refit.
    """
    cand = np.asarray(candidates, dtype=float).reshape(-1, 2)
    if len(cand) == 0:
        raise ValueError("refinement needs at least one candidate")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    for r in range(rounds):
        _, std = model.predict(cand)
        picked = np.argsort(-std, kind="stable")[:batch]
        picked.sort()
        new_points = cand[picked]
        model = gp_add(model, new_points, sampler(new_points)[param_index])
        if on_round is not None:
            on_round(r, model)
    return model


# ---------------------------------------------------------------------------
# parameter fields and the StaR Map


@dataclass(frozen=True, eq=False)
class ParamField:
    """Predictor of one distribution parameter over the navigation area."""

    relation: RelationKind
    tag: Tag
    param_index: int
    backend: Backend
    extent: BBox
    raster: np.ndarray | None = None
    gp: GPModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "relation", RelationKind(self.relation))
        object.__setattr__(self, "backend", Backend(self.backend))
        if not 0 <= self.param_index < self.relation.n_params:
            raise ValueError(f"{self.relation.value} has no parameter {self.param_index}")
        if self.backend is Backend.RASTER:
            if self.raster is None or self.raster.ndim != 2 or min(self.raster.shape) < 2:
                raise ValueError("raster fields need a node grid of at least 2x2")
        elif self.gp is None:
            raise ValueError("gp fields need a fitted model")

    @property
    def key(self) -> tuple[RelationKind, Tag, int]:
        return (self.relation, self.tag, self.param_index)

    @property
    def param_name(self) -> str:
        return self.relation.family.param_names[self.param_index]

    @property
    def resolution(self) -> tuple[int, int] | None:
        return None if self.raster is None else self.raster.shape

    def node_points(self) -> np.ndarray:
        if self.raster is None:
            raise ValueError("gp fields have no node grid")
        return grid_points(self.extent, *self.raster.shape)

    def __call__(self, points) -> np.ndarray:
        if self.backend is Backend.RASTER:
            out = bilinear(self.raster, self.extent, points)
        else:
            out, _ = self.gp.predict(points)
        return self._clamp(out)

    def _clamp(self, values: np.ndarray) -> np.ndarray:
        if self.relation.family is Family.BERNOULLI:
            return np.clip(values, 0.0, 1.0)
        if self.param_index == 1:
            return np.maximum(values, 0.0)
        return values


def raster_mae(f: ParamField, reference: ParamField) -> float:
    """Mean absolute error of ``f`` over the reference nodes inside both extents."""
    if f.key != reference.key:
        raise ValueError(f"field keys differ: {f.key} vs {reference.key}")
    nodes = reference.node_points()
    inside = f.extent.contains(nodes) & reference.extent.contains(nodes)
    if not inside.any():
        raise ValueError("extents do not overlap")
    ref_vals = reference.raster.reshape(-1)[inside]
    return float(np.mean(np.abs(f(nodes[inside]) - ref_vals)))


@dataclass(eq=False)
class StaRMap:
    """Sample sets and fitted parameter fields of one map collection."""

    sample_sets: dict[tuple[RelationKind, Tag], SampleSet] = field(default_factory=dict)
    fields: dict[tuple[RelationKind, Tag, int], ParamField] = field(default_factory=dict)
    source: UncertaintyAnnotatedMap | None = None
    metadata: dict = field(default_factory=dict)

    def field_for(self, relation: RelationKind, tag: Tag, param_index: int) -> ParamField:
        key = (RelationKind(relation), tag, param_index)
        try:
            return self.fields[key]
        except KeyError:
            raise MissingField(f"no field for {key[0].value}/{tag}/param {param_index}") from None

    def has_relation(self, relation: RelationKind, tag: Tag) -> bool:
        return (RelationKind(relation), tag, 0) in self.fields

    def samples(self, relation: RelationKind, tag: Tag, location: PointLike) -> RelationSamples:
        """Stored samples at an exact sampled location."""
        ss = self.sample_sets[(RelationKind(relation), tag)]
        hit = np.flatnonzero(np.all(ss.locations == np.asarray(tuple(location), dtype=float), axis=1))
        if len(hit) == 0:
            raise KeyError(f"no samples stored at {tuple(location)}")
        return ss.samples_at(int(hit[0]))

    def add_samples(self, ss: SampleSet) -> None:
        key = (ss.relation, ss.tag)
        old = self.sample_sets.get(key)
        if old is None:
            self.sample_sets[key] = ss
        else:
            self.sample_sets[key] = SampleSet(
                ss.relation, ss.tag,
                np.concatenate([old.locations, ss.locations]),
                np.concatenate([old.values, ss.values], axis=1),
            )


def evaluate_field(starmap: StaRMap, relation: RelationKind, tag: Tag, param_index: int, x: PointLike) -> float:
    f = starmap.field_for(relation, tag, param_index)
    return float(f(np.asarray(tuple(x), dtype=float))[0])


def evaluate_field_many(starmap: StaRMap, relation: RelationKind, tag: Tag, param_index: int, points) -> np.ndarray:
    return starmap.field_for(relation, tag, param_index)(points)


def _collection(source, n_samples: int, seed: int) -> MapCollection:
    if isinstance(source, MapCollection):
        return source
    return sample_collection(source, n_samples, seed)


def build_raster(
    source: UncertaintyAnnotatedMap | MapCollection,
    relation: RelationKind,
    tag: Tag,
    extent: BBox,
    resolution: tuple[int, int],
    n_samples: int = 50,
    seed: int = 0,
    *,
    starmap: StaRMap | None = None,
    line_width: float = DEFAULT_LINE_WIDTH,
    keep_samples: bool = True,
) -> StaRMap:
    """Sample a relation on a node grid and store one raster field per parameter.

    ``source`` is either a UAM (a collection of ``n_samples`` maps is drawn
    with ``seed``) or an existing collection shared with other fields.
    """
    relation = RelationKind(relation)
    rows, cols = resolution
    if rows < 2 or cols < 2:
        raise ValueError(f"raster resolution must be at least 2x2, got {resolution}")
    collection = _collection(source, n_samples, seed)
    if relation.family is Family.GAUSSIAN and len(collection) < 2:
        raise ValueError("gaussian relations need at least 2 sampled maps")
    sampler = MomentSampler(collection, relation, tag, line_width)
    params = sampler(grid_points(extent, rows, cols))
    starmap = starmap if starmap is not None else StaRMap(source=collection.source)
    if keep_samples:
        starmap.add_samples(sampler.sample_set())
    for k in range(relation.n_params):
        f = ParamField(relation, tag, k, Backend.RASTER, extent, raster=params[k].reshape(rows, cols))
        starmap.fields[f.key] = f
    return starmap


@dataclass
class GPBuildResult:
    starmap: StaRMap
    models: list[GPModel]
    history: list[GPModel]
    n_locations: int
    n_relation_samples: int


def build_gp(
    source: UncertaintyAnnotatedMap | MapCollection,
    relation: RelationKind,
    tag: Tag,
    extent: BBox,
    *,
    candidates_resolution: tuple[int, int] = (64, 64),
    seed_points: int = 256,
    batch: int = 16,
    rounds: int = 5,
    n_samples: int = 50,
    seed: int = 0,
    kernel: KernelConfig = KernelConfig(),
    starmap: StaRMap | None = None,
    line_width: float = DEFAULT_LINE_WIDTH,
    keep_samples: bool = True,
) -> GPBuildResult:
    """GP fields seeded with uniform random points, then refined.

    Refinement is driven by the first parameter's model; the remaining
    parameters are fit on the same training locations with the kernel
    resolved for them on the seed set.
    """
    relation = RelationKind(relation)
    collection = _collection(source, n_samples, seed)
    sampler = MomentSampler(collection, relation, tag, line_width)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6770])))
    lo = np.array([extent.xmin, extent.ymin])
    hi = np.array([extent.xmax, extent.ymax])
    seeds = lo + rng.random((seed_points, 2)) * (hi - lo)
    seed_params = sampler(seeds)
    models = [gp_fit((seeds, seed_params[k]), kernel) for k in range(relation.n_params)]
    history = [models[0]]
    candidates = grid_points(extent, *candidates_resolution)
    primary = gp_refine(
        models[0], sampler, candidates, batch, rounds, 0,
        on_round=lambda _, m: history.append(m),
    )
    models[0] = primary
    if relation.n_params > 1:
        ss = sampler.sample_set()
        params = match_moments(relation, ss.values)
        for k in range(1, relation.n_params):
            models[k] = _fit(*merge_duplicates(ss.locations, params[k]), models[k].kernel)
    starmap = starmap if starmap is not None else StaRMap(source=collection.source)
    if keep_samples:
        starmap.add_samples(sampler.sample_set())
    for k, model in enumerate(models):
        f = ParamField(relation, tag, k, Backend.GP, extent, gp=model)
        starmap.fields[f.key] = f
    return GPBuildResult(starmap, models, history, sampler.n_locations, sampler.n_relation_samples)


# ---------------------------------------------------------------------------
# persistence


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_starmap(starmap: StaRMap, path: str | Path) -> None:
    """Write a versioned zip archive; output bytes depend only on content."""
    manifest = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "metadata": starmap.metadata,
        "sample_sets": [],
        "fields": [],
    }
    arrays: dict[str, np.ndarray] = {}
    for i, ((rel, tag), ss) in enumerate(sorted(starmap.sample_sets.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))):
        manifest["sample_sets"].append({"relation": rel.value, "tag": tag, "locations": f"samples/{i}/locations.npy",
                                        "values": f"samples/{i}/values.npy"})
        arrays[f"samples/{i}/locations.npy"] = ss.locations
        arrays[f"samples/{i}/values.npy"] = ss.values
    for i, (key, f) in enumerate(sorted(starmap.fields.items(), key=lambda kv: (kv[0][0].value, kv[0][1], kv[0][2]))):
        entry = {
            "relation": f.relation.value,
            "tag": f.tag,
            "param_index": f.param_index,
            "backend": f.backend.value,
            "extent": list(f.extent.as_tuple()),
        }
        if f.backend is Backend.RASTER:
            entry["raster"] = f"fields/{i}/raster.npy"
            arrays[entry["raster"]] = f.raster
        else:
            gp = f.gp
            entry["gp"] = {
                "inputs": f"fields/{i}/inputs.npy",
                "targets": f"fields/{i}/targets.npy",
                "hyper": f"fields/{i}/hyper.npy",
            }
            arrays[entry["gp"]["inputs"]] = gp.inputs
            arrays[entry["gp"]["targets"]] = gp.targets
            arrays[entry["gp"]["hyper"]] = np.array(
                [gp.length_scale, gp.signal_variance, gp.noise_variance, gp.prior_mean, gp.jitter]
            )
        manifest["fields"].append(entry)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name in sorted(arrays):
            _write_entry(zf, name, _npy_bytes(arrays[name]))


def load_starmap(path: str | Path) -> StaRMap:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != ARCHIVE_FORMAT:
            raise ValueError(f"{path} is not a StaR Map archive")
        if manifest.get("version") != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {manifest.get('version')}")

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        starmap = StaRMap(metadata=manifest.get("metadata", {}))
        for entry in manifest["sample_sets"]:
            rel = RelationKind(entry["relation"])
            starmap.sample_sets[(rel, entry["tag"])] = SampleSet(
                rel, entry["tag"], arr(entry["locations"]), arr(entry["values"])
            )
        for entry in manifest["fields"]:
            rel = RelationKind(entry["relation"])
            extent = BBox(*entry["extent"])
            if entry["backend"] == Backend.RASTER.value:
                f = ParamField(rel, entry["tag"], entry["param_index"], Backend.RASTER, extent, raster=arr(entry["raster"]))
            else:
                g = entry["gp"]
                length, signal, noise, prior_mean, jitter = arr(g["hyper"]).tolist()
                inputs, targets = arr(g["inputs"]), arr(g["targets"])
                chol, _ = _factorize(inputs, length, signal, noise + jitter)
                alpha = cho_solve((chol, True), targets - prior_mean, check_finite=False)
                model = GPModel(inputs, targets, length, signal, noise, prior_mean, jitter, chol, alpha)
                f = ParamField(rel, entry["tag"], entry["param_index"], Backend.GP, extent, gp=model)
            starmap.fields[f.key] = f
    return starmap
