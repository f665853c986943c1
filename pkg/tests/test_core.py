import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mobcpd.core import (LabeledCloud, Landmarks, SimilarityTransform, bounding_box,
                         similarity_apply, similarity_inverse)

from conftest import random_rotation

coords = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(float, 3, elements=coords)


@st.composite
def transforms(draw):
    q = draw(arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda a: np.linalg.norm(a) > 0.1))
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    s = draw(st.floats(0.1, 10))
    return SimilarityTransform(s, R, draw(vec3))


def test_identity_leaves_points_alone():
    np.testing.assert_array_equal(similarity_apply(SimilarityTransform(), [1, 2, 3]), [1, 2, 3])


def test_scale_and_shift():
    T = SimilarityTransform(2.0, np.eye(3), [1, 0, 0])
    np.testing.assert_allclose(similarity_apply(T, [1, 1, 1]), [3, 2, 2])


def test_inverse_of_identity_is_identity():
    inv = similarity_inverse(SimilarityTransform())
    assert inv.scale == 1.0
    np.testing.assert_array_equal(inv.rotation, np.eye(3))
    np.testing.assert_array_equal(inv.translation, np.zeros(3))


def test_inverse_of_pure_scaling():
    inv = similarity_inverse(SimilarityTransform(2.0))
    assert inv.scale == 0.5
    np.testing.assert_array_equal(inv.rotation, np.eye(3))
    np.testing.assert_array_equal(inv.translation, np.zeros(3))


def test_round_trip_on_random_points(rng):
    T = SimilarityTransform(rng.uniform(0.5, 2), random_rotation(rng), rng.normal(0, 50, 3))
    p = rng.normal(0, 100, (100, 3))
    back = similarity_apply(similarity_inverse(T), similarity_apply(T, p))
    assert np.max(np.abs(back - p)) < 1e-10
    again = similarity_apply(T, similarity_apply(similarity_inverse(T), p))
    assert np.max(np.abs(again - p)) < 1e-10


@given(transforms(), vec3, vec3)
def test_distances_scale_by_s(T, p, q):
    d = np.linalg.norm(T.apply(p) - T.apply(q))
    assert d == pytest.approx(T.scale * np.linalg.norm(p - q), abs=1e-9 * max(1.0, d))


@given(transforms(), vec3)
def test_compose_with_inverse_is_identity(T, p):
    I = T.compose(T.inverse())
    np.testing.assert_allclose(I.apply(p), p, atol=1e-10 * max(1.0, np.abs(p).max()) * 10)


def test_apply_inverse_matches_inverse_transform(rng):
    T = SimilarityTransform(1.7, random_rotation(rng), [3, -2, 9])
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.apply_inverse(p), T.inverse().apply(p), atol=1e-12)


@pytest.mark.parametrize("bad", [
    dict(scale=0.0), dict(scale=-1.0), dict(scale=np.inf),
    dict(rotation=np.diag([1.0, 1.0, -1.0])),
    dict(rotation=np.diag([1.0, 2.0, 1.0])),
])
def test_transform_invariants_enforced(bad):
    with pytest.raises(ValueError):
        SimilarityTransform(**bad)


def test_transform_serialization_round_trip(rng):
    T = SimilarityTransform(1.2, random_rotation(rng), [1, 2, 3])
    d = T.to_dict()
    assert set(d) == {"scale", "rotation", "translation"}
    assert len(d["rotation"]) == 9
    back = SimilarityTransform.from_dict(d)
    np.testing.assert_array_equal(back.rotation, T.rotation)
    assert back.scale == T.scale


def test_rotation_angle():
    from scipy.spatial.transform import Rotation
    R = Rotation.from_rotvec([0, 0, np.radians(30)]).as_matrix()
    assert SimilarityTransform(1, R).rotation_angle_deg() == pytest.approx(30)
    assert SimilarityTransform(1, R).rotation_angle_deg(SimilarityTransform(1, R)) == pytest.approx(0, abs=1e-6)


class TestLabeledCloud:
    def test_basic(self):
        c = LabeledCloud([[0, 0, 0], [1, 1, 1]], [1, 2])
        assert len(c) == 2 and c.n_labels == 2

    def test_is_read_only(self):
        c = LabeledCloud([[0, 0, 0]], [1])
        with pytest.raises(ValueError):
            c.points[0, 0] = 5.0

    @pytest.mark.parametrize("points,labels,L", [
        (np.zeros((0, 3)), [], 1),
        ([[0, 0, 0]], [1, 1], 1),
        ([[0, 0, 0]], [0], 1),
        ([[0, 0, 0]], [3], 2),
        ([[0, np.nan, 0]], [1], 1),
        ([[0, 0]], [1], 1),
        ([[0, 0, 0]], [1.5], 2),
    ])
    def test_invariants(self, points, labels, L):
        with pytest.raises(ValueError):
            LabeledCloud(points, labels, L)

    def test_subset_keeps_label_count(self):
        c = LabeledCloud([[0, 0, 0], [1, 1, 1]], [1, 3], 3)
        assert c.subset([0]).n_labels == 3


class TestBoundingBox:
    def test_single_point_padded(self):
        lo, hi = bounding_box(LabeledCloud([[0, 0, 0]], [1]), pad=1)
        np.testing.assert_array_equal(lo, [-1, -1, -1])
        np.testing.assert_array_equal(hi, [1, 1, 1])

    def test_flat_dimensions_widened(self):
        lo, hi = bounding_box(LabeledCloud([[0, 0, 0], [10, 0, 0]], [1, 1]), pad=0)
        np.testing.assert_array_equal(hi - lo, [10, 1, 1])
        assert lo[0] == 0 and hi[0] == 10

    @given(arrays(float, (20, 3), elements=coords), st.floats(0, 10))
    def test_contains_every_point(self, pts, pad):
        lo, hi = bounding_box(pts, pad)
        assert np.all(pts >= lo) and np.all(pts <= hi)
        assert np.prod(hi - lo) > 0

    def test_empty_and_negative_pad_rejected(self):
        with pytest.raises(ValueError):
            bounding_box(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            bounding_box(np.zeros((1, 3)), pad=-1)


class TestLandmarks:
    def test_unique_names(self):
        with pytest.raises(ValueError):
            Landmarks(("a", "a"), np.zeros((2, 3)))

    def test_finite(self):
        with pytest.raises(ValueError):
            Landmarks(("a",), [[np.inf, 0, 0]])

    def test_mapping_round_trip(self):
        lm = Landmarks.from_mapping({"p": (1, 2, 3), "q": (4, 5, 6)})
        assert list(lm.as_dict()) == ["p", "q"]
        np.testing.assert_array_equal(lm.as_dict()["q"], [4, 5, 6])

    def test_as_cloud_needs_labels(self):
        with pytest.raises(ValueError):
            Landmarks(("a",), [[0, 0, 0]]).as_cloud(1)
