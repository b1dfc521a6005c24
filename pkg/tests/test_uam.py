import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from starmaps.geometry import Feature, FeatureKind, Map
from starmaps.ingest import annotate_uniform
from starmaps.scenes import straight_road
from starmaps.uam import (
    Correlation,
    TransformationParams,
    TranslationParams,
    UncertaintyAnnotatedMap,
    annotations_from_dict,
    draw_perturbation,
    load_annotations,
    perturb_feature,
    sample_collection,
    sample_map,
    substreams,
    transform_matrix,
)


def square(fid="b", tags=("building",), offset=(0.0, 0.0)):
    ox, oy = offset
    return Feature(fid, [(ox, oy), (ox + 10, oy), (ox + 10, oy + 10), (ox, oy + 10)], FeatureKind.POLYGON, set(tags))


def vertices(m: Map):
    return [f.vertices for f in m.features]


def test_degenerate_annotation_reproduces_map(town):
    uam = UncertaintyAnnotatedMap(town)
    assert uam.degenerate
    coll = sample_collection(uam, 5, 3)
    for m in coll:
        for a, b in zip(m.features, town.features):
            assert a.id == b.id and a.tags == b.tags and a.kind == b.kind
            np.testing.assert_array_equal(a.vertices, b.vertices)


def test_sampling_is_deterministic(town):
    uam = annotate_uniform(town, 10.0)
    a = sample_collection(uam, 4, 99)
    b = sample_collection(uam, 4, 99, workers=3)
    c = sample_collection(uam, 4, 100)
    for ma, mb in zip(a, b):
        for fa, fb in zip(ma.features, mb.features):
            np.testing.assert_array_equal(fa.vertices, fb.vertices)
    assert not np.array_equal(a[0].features[0].vertices, c[0].features[0].vertices)


def test_prefix_of_collection_is_stable(town):
    uam = annotate_uniform(town, 5.0)
    small = sample_collection(uam, 3, 11)
    big = sample_collection(uam, 6, 11)
    for ma, mb in zip(small, big):
        np.testing.assert_array_equal(ma.features[2].vertices, mb.features[2].vertices)


def test_rejects_empty_collection(town):
    with pytest.raises(ValueError):
        sample_collection(UncertaintyAnnotatedMap(town), 0, 1)


def test_translation_marginal_is_normal():
    m = straight_road()
    uam = annotate_uniform(m, 10.0)
    streams = substreams(5, 1)
    rng = streams[0]
    tl = uam.annotate_translate(m.features[0])
    tp = uam.annotate_transform(m.features[0])
    draws = np.array([draw_perturbation(tp, tl, rng)[1] for _ in range(100_000)])
    for axis in range(2):
        res = stats.kstest(draws[:, axis], stats.norm(0, 10).cdf)
        assert res.pvalue > 0.001
    assert abs(np.corrcoef(draws.T)[0, 1]) < 0.02


def test_translation_with_correlated_covariance(rng):
    cov = np.array([[4.0, 3.0], [3.0, 9.0]])
    tl = TranslationParams([1.0, -2.0], cov)
    np.testing.assert_allclose(tl.factor @ tl.factor.T, cov, atol=1e-12)
    draws = np.array([draw_perturbation(TransformationParams(), tl, rng)[1] for _ in range(40_000)])
    np.testing.assert_allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.06)
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05)


def test_singular_covariance_is_accepted(rng):
    tl = TranslationParams([0, 0], [[1.0, 1.0], [1.0, 1.0]])
    t = np.array([draw_perturbation(TransformationParams(), tl, rng)[1] for _ in range(200)])
    np.testing.assert_allclose(t[:, 0], t[:, 1], atol=1e-9)


@pytest.mark.parametrize("cov", [[[1, 2], [2, 1]], [[1, 0.5], [0, 1]], [[-1, 0], [0, 1]]])
def test_invalid_covariance_rejected(cov):
    with pytest.raises(ValueError):
        TranslationParams([0, 0], cov)


def test_invalid_transform_params():
    with pytest.raises(ValueError):
        TransformationParams(rotation_stddev=-0.1)
    with pytest.raises(ValueError):
        TransformationParams(scale_mean=0.0)


def test_draw_consumes_fixed_number_of_normals():
    a, b = np.random.default_rng(1), np.random.default_rng(1)
    draw_perturbation(TransformationParams(), TranslationParams(), a)
    draw_perturbation(TransformationParams(0.1, 1.0, 0.1, 0.1), TranslationParams.isotropic(3), b)
    assert a.standard_normal() == b.standard_normal()


def test_per_vertex_translation_variance(rng):
    f = Feature("r", [(0, 0), (50, 0), (100, 0)], FeatureKind.POLYLINE, {"road"})
    uam = UncertaintyAnnotatedMap(
        Map((f,)), default_translate=TranslationParams.isotropic(2.0), correlation=Correlation.PER_VERTEX
    )
    offs = np.array([sample_map(uam, rng).features[0].vertices - f.vertices for _ in range(4000)])
    var = offs.var(axis=0, ddof=1)
    np.testing.assert_allclose(var, 4.0, rtol=0.1)
    # vertices move independently
    assert abs(np.corrcoef(offs[:, 0, 0], offs[:, 1, 0])[0, 1]) < 0.06


def test_per_feature_moves_rigidly(rng):
    f = Feature("r", [(0, 0), (50, 0), (100, 0)], FeatureKind.POLYLINE, {"road"})
    uam = annotate_uniform(Map((f,)), 5.0)
    for _ in range(20):
        d = sample_map(uam, rng).features[0].vertices - f.vertices
        np.testing.assert_allclose(d, d[0][None, :].repeat(3, axis=0), atol=1e-12)


@given(
    st.floats(-3.0, 3.0), st.floats(0.2, 3.0), st.floats(-2.0, 2.0),
    st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=8),
)
@settings(max_examples=60)
def test_linear_part_fixes_centroid(rot, scale, shear, pts):
    f = Feature("p", pts, FeatureKind.POLYLINE, set())
    g = perturb_feature(f, transform_matrix(rot, scale, shear), np.zeros(2))
    np.testing.assert_allclose(g.centroid, f.centroid, atol=1e-9)


def test_rotation_preserves_distances_to_centroid():
    f = square()
    g = perturb_feature(f, transform_matrix(0.7, 1.0, 0.0), np.zeros(2))
    np.testing.assert_allclose(
        np.linalg.norm(g.vertices - g.centroid, axis=1), np.linalg.norm(f.vertices - f.centroid, axis=1)
    )
    h = perturb_feature(f, transform_matrix(0.0, 2.0, 0.0), np.array([1.0, 2.0]))
    np.testing.assert_allclose(h.vertices - h.centroid, 2 * (f.vertices - f.centroid))
    np.testing.assert_allclose(h.centroid, f.centroid + [1, 2])


def test_sampling_preserves_structure(town):
    uam = UncertaintyAnnotatedMap(
        town,
        default_transform=TransformationParams(0.05, 1.0, 0.02, 0.02),
        default_translate=TranslationParams.isotropic(4.0),
    )
    m = sample_map(uam, np.random.default_rng(0))
    assert [f.id for f in m.features] == [f.id for f in town.features]
    assert [f.kind for f in m.features] == [f.kind for f in town.features]
    assert [f.tags for f in m.features] == [f.tags for f in town.features]
    assert [len(f.vertices) for f in m.features] == [len(f.vertices) for f in town.features]
    assert m.bbox == town.bbox and m.origin == town.origin


def test_annotation_resolution_order():
    b1, b2, park = square("b1"), square("b2", offset=(20, 0)), square("p", ("park",), (40, 0))
    uam = UncertaintyAnnotatedMap(
        Map((b1, b2, park)),
        default_translate=TranslationParams.isotropic(1.0),
        tag_translate={"building": TranslationParams.isotropic(2.0)},
        feature_translate={"b2": TranslationParams.isotropic(3.0)},
    )
    assert uam.annotate_translate(b1) == TranslationParams.isotropic(2.0)
    assert uam.annotate_translate(b2) == TranslationParams.isotropic(3.0)
    assert uam.annotate_translate(park) == TranslationParams.isotropic(1.0)


def test_annotation_config_round_trip(tmp_path):
    m = Map((square("b1"), square("b2", offset=(20, 0))))
    uam = UncertaintyAnnotatedMap(
        m,
        default_transform=TransformationParams(0.01, 1.0, 0.02, 0.0),
        default_translate=TranslationParams([1.0, 0.0], [[4.0, 1.0], [1.0, 9.0]]),
        tag_transform={"building": TransformationParams(0.1)},
        feature_translate={"b2": TranslationParams.isotropic(3.0)},
        correlation="per_vertex",
    )
    path = tmp_path / "ann.json"
    uam.save_annotations(path)
    back = load_annotations(m, path)
    assert back.annotations_dict() == uam.annotations_dict()
    assert json.loads(path.read_text())["version"] == 1
    with pytest.raises(ValueError):
        annotations_from_dict(m, {"version": 99})
