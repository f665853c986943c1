import numpy as np
import pytest

from mobcpd import io as mio
from mobcpd.core import LabeledCloud, Landmarks, SimilarityTransform

from conftest import random_rotation


def test_cloud_round_trip_is_exact(tmp_path, rng):
    c = LabeledCloud(rng.normal(0, 50, (20, 3)), rng.integers(1, 4, 20), 3)
    mio.write_cloud(tmp_path / "c.csv", c)
    back = mio.read_cloud(tmp_path / "c.csv", 3)
    np.testing.assert_array_equal(back.points, c.points)
    np.testing.assert_array_equal(back.labels, c.labels)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "x,y,z,label"


def test_landmark_round_trip(tmp_path):
    lm = Landmarks(("tip", "base"), [[1.5, 2, 3], [4, 5, 6]], [1, 2])
    mio.write_landmarks(tmp_path / "l.csv", lm)
    back = mio.read_landmarks(tmp_path / "l.csv")
    assert back.names == lm.names
    np.testing.assert_array_equal(back.labels, [1, 2])


def test_unlabeled_landmarks(tmp_path):
    (tmp_path / "l.csv").write_text("name,x,y,z\na,1,2,3\n")
    lm = mio.read_landmarks(tmp_path / "l.csv")
    assert lm.labels is None and lm.as_dict()["a"].tolist() == [1, 2, 3]


def test_transform_round_trip(tmp_path, rng):
    T = SimilarityTransform(0.8, random_rotation(rng), [1, 2, 3])
    mio.write_transform(tmp_path / "t.json", T)
    back = mio.read_transform(tmp_path / "t.json")
    np.testing.assert_array_equal(back.rotation, T.rotation)


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("a,b,c,d\n1,2,3,1\n", ":1:"),
    ("x,y,z,label\n1,2,3\n", ":2:"),
    ("x,y,z,label\n1,2,3,1\n1,q,3,1\n", ":3:"),
    ("x,y,z,label\n1,2,3,0\n", "positive"),
    ("x,y,z,label\n1,2,inf,1\n", "non-finite"),
    ("x,y,z,label\n", "no points"),
])
def test_bad_cloud_files(tmp_path, text, msg):
    p = tmp_path / "c.csv"
    p.write_text(text)
    with pytest.raises(mio.InputFormatError, match=msg):
        mio.read_cloud(p)


def test_duplicate_landmarks(tmp_path):
    (tmp_path / "l.csv").write_text("name,x,y,z\na,1,2,3\na,1,2,3\n")
    with pytest.raises(mio.InputFormatError):
        mio.read_landmarks(tmp_path / "l.csv")
