"""Geometric primitives shared by the registration modules.

Point clouds carry one organ label per point; labels are 1-based in ``{1..L}``.
All coordinates are in millimetres and the spatial dimension is fixed to 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

DIM = 3


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledCloud:
    """Points with per-point organ labels.

    Parameters
    ----------
    points : (M, 3) array_like
        Coordinates in mm.
    labels : (M,) array_like of int
        Organ indices in ``1..n_labels``.
    n_labels : int, optional
        Number of organs ``L``. Defaults to ``labels.max()``.
    """

    points: np.ndarray
    labels: np.ndarray
    n_labels: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        labels = np.asarray(self.labels)
        if points.ndim == 1 and points.size == DIM:
            points = points.reshape(1, DIM)
        if points.ndim != 2 or points.shape[1] != DIM:
            raise ValueError(f"points must have shape (M, 3), got {points.shape}")
        if labels.ndim != 1 or labels.shape[0] != points.shape[0]:
            raise ValueError("labels must be a vector with one entry per point")
        if points.shape[0] < 1:
            raise ValueError("a labeled cloud needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ValueError("point coordinates must be finite")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        n_labels = int(self.n_labels) if self.n_labels else int(labels.max())
        if labels.min() < 1 or labels.max() > n_labels:
            raise ValueError(f"labels must lie in 1..{n_labels}")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "n_labels", n_labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "LabeledCloud":
        return LabeledCloud(points, self.labels, self.n_labels)

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.points, labels, self.n_labels)

    def subset(self, index) -> "LabeledCloud":
        return LabeledCloud(self.points[index], self.labels[index], self.n_labels)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


def _rotate(p: np.ndarray, R: np.ndarray) -> np.ndarray:
    # elementwise rather than BLAS so each row's result is independent of
    # how many rows are transformed together
    return np.stack([p[..., 0] * R[k, 0] + p[..., 1] * R[k, 1] + p[..., 2] * R[k, 2]
                     for k in range(DIM)], axis=-1)


@dataclass(frozen=True)
class SimilarityTransform:
    """The map ``p -> s R p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(DIM))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(DIM))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(DIM, DIM)
        t = np.asarray(self.translation, dtype=float).reshape(DIM)
        s = float(self.scale)
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"scale must be positive, got {s}")
        if not np.allclose(R.T @ R, np.eye(DIM), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an (M, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return _rotate(self.scale * p, self.rotation) + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return _rotate(p - self.translation, self.rotation.T) / self.scale

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self o other``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.apply(other.translation),
        )

    def rotation_angle_deg(self, other: "SimilarityTransform | None" = None) -> float:
        """Geodesic angle of the rotation, or of the relative rotation to ``other``."""
        R = self.rotation if other is None else self.rotation @ other.rotation.T
        c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": [float(a) for a in self.rotation.ravel()],
            "translation": [float(a) for a in self.translation],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimilarityTransform":
        rot = d["rotation"]
        if len(rot) != 9 or len(d["translation"]) != 3:
            raise ValueError("transform needs 9 rotation and 3 translation entries")
        return cls(float(d["scale"]), np.reshape(rot, (3, 3)), d["translation"])


def similarity_apply(T: SimilarityTransform, p) -> np.ndarray:
    return T.apply(p)


def similarity_inverse(T: SimilarityTransform) -> SimilarityTransform:
    if T.scale <= 0:
        raise ValueError("cannot invert a transform with nonpositive scale")
    return T.inverse()


@dataclass(frozen=True)
class Landmarks:
    """Named 3D landmarks, optionally tagged with the organ they belong to."""

    names: tuple
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        pts = np.asarray(self.points, dtype=float).reshape(len(names), DIM)
        if len(set(names)) != len(names):
            raise ValueError("landmark names must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[float]]) -> "Landmarks":
        names = list(mapping)
        return cls(tuple(names), np.array([list(mapping[n]) for n in names], dtype=float))

    def as_dict(self) -> dict:
        return {n: self.points[i] for i, n in enumerate(self.names)}

    def as_cloud(self, n_labels: int) -> LabeledCloud:
        if self.labels is None:
            raise ValueError("landmarks carry no organ labels")
        return LabeledCloud(self.points, self.labels, n_labels)

    def with_points(self, points) -> "Landmarks":
        return Landmarks(self.names, points, self.labels)

    def __len__(self) -> int:
        return len(self.names)


def bounding_box(cloud: LabeledCloud | np.ndarray, pad: float = 0.0,
                 min_extent: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around a cloud, padded by ``pad`` mm on every side.

    Dimensions thinner than ``min_extent`` mm are widened symmetrically so
    that the box always has positive volume.
    """
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, float)
    if pts.size == 0:
        raise ValueError("cannot bound an empty cloud")
    if pad < 0:
        raise ValueError("pad must be nonnegative")
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    thin = (hi - lo) < min_extent
    mid = 0.5 * (lo + hi)
    lo = np.where(thin, mid - 0.5 * min_extent, lo)
    hi = np.where(thin, mid + 0.5 * min_extent, hi)
    return lo, hi
