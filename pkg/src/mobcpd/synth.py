"""Synthetic multi-organ scenes with ground truth, and evaluation metrics.

Organs are ellipsoidal surface shells placed side by side. Three families of
cases are generated:

* ``similarity``: the target is a random similarity transform of the source,
* ``gp``: the target is the source displaced by a draw from the multi-organ
  displacement prior, optionally plus an independent rigid shift per organ,
* ``labelnoise``: two neighbouring organs whose target labels are corrupted
  near their shared boundary.

Landmarks (organ centres and poles) are carried through the same ground-truth
motion so registrations can be scored by target registration error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .core import LabeledCloud, Landmarks, SimilarityTransform
from .interpolation import RegistrationModel, interpolate
from .kernel import OrganModel, cross_gram, validate_spd
from . import io as mio


@dataclass
class SyntheticCase:
    kind: str
    seed: int
    source: LabeledCloud
    target: LabeledCloud
    source_landmarks: Landmarks
    target_landmarks: Landmarks
    # target point i is the image of source point target_index[i]
    target_index: np.ndarray
    transform: SimilarityTransform | None = None
    displacement: np.ndarray | None = None
    offsets: np.ndarray | None = None
    target_true_labels: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    @property
    def n_labels(self) -> int:
        return self.source.n_labels

    def manifest(self) -> dict:
        d = {
            "kind": self.kind,
            "seed": self.seed,
            "n_labels": self.n_labels,
            "params": self.params,
            "target_index": self.target_index.tolist(),
        }
        if self.transform is not None:
            d["transform"] = self.transform.to_dict()
        if self.displacement is not None:
            d["displacement"] = self.displacement.tolist()
        if self.offsets is not None:
            d["offsets"] = self.offsets.tolist()
        if self.target_true_labels is not None:
            d["target_true_labels"] = self.target_true_labels.tolist()
        return d

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        mio.write_cloud(out / "source.csv", self.source)
        mio.write_cloud(out / "target.csv", self.target)
        mio.write_landmarks(out / "source_landmarks.csv", self.source_landmarks)
        mio.write_landmarks(out / "target_landmarks.csv", self.target_landmarks)
        mio.write_json(out / "case.json", self.manifest())

    @classmethod
    def load(cls, directory) -> "SyntheticCase":
        d = Path(directory)
        man = json.loads((d / "case.json").read_text())
        L = man["n_labels"]
        opt = lambda k: np.asarray(man[k]) if k in man else None  # noqa: E731
        return cls(
            kind=man["kind"], seed=man["seed"],
            source=mio.read_cloud(d / "source.csv", L),
            target=mio.read_cloud(d / "target.csv", L),
            source_landmarks=mio.read_landmarks(d / "source_landmarks.csv"),
            target_landmarks=mio.read_landmarks(d / "target_landmarks.csv"),
            target_index=np.asarray(man["target_index"], dtype=int),
            transform=SimilarityTransform.from_dict(man["transform"]) if "transform" in man else None,
            displacement=opt("displacement"), offsets=opt("offsets"),
            target_true_labels=opt("target_true_labels"), params=man.get("params", {}),
        )


@dataclass(frozen=True)
class OrganShell:
    """Star-shaped closed surface: a bumped ellipsoid around ``center``."""

    center: np.ndarray
    axes: np.ndarray
    bumps: np.ndarray  # rows: unit direction (3) and relative height (1)
    width: float = 0.35

    def surface(self, u: np.ndarray) -> np.ndarray:
        """Surface points along the unit directions ``u``."""
        d2 = ((u[:, None, :] - self.bumps[None, :, :3]) ** 2).sum(-1)
        r = 1.0 + np.exp(-d2 / (2 * self.width**2)) @ self.bumps[:, 3]
        return self.center + u * self.axes * r[:, None]


def _random_bumps(rng, n=6, height=0.18):
    # smooth radial modulation so shells have no continuous symmetries
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.column_stack([d, rng.uniform(-height, height, n)])


def organ_shells(rng: np.random.Generator, M: int, L: int,
                 gap=(5.0, 12.0)) -> tuple[LabeledCloud, list[OrganShell]]:
    """Sample ``L`` organ surfaces with ``M`` points in total."""
    axes = np.column_stack([rng.uniform(28, 40, L), rng.uniform(22, 32, L), rng.uniform(18, 28, L)])
    radius = axes.max(axis=1)
    if L == 1:
        centers = np.zeros((1, 3))
    else:
        chord = max(radius[k] + radius[(k + 1) % L] for k in range(L)) + rng.uniform(*gap)
        if L == 2:
            centers = np.array([[-chord / 2, 0, 0], [chord / 2, 0, 0]])
        else:
            R = chord / (2 * np.sin(np.pi / L))
            ang = 2 * np.pi * np.arange(L) / L + rng.uniform(0, 2 * np.pi)
            centers = np.column_stack([R * np.cos(ang), R * np.sin(ang), rng.normal(0, 3, L)])
    counts = np.full(L, M // L)
    counts[: M % L] += 1
    shells = [OrganShell(centers[k], axes[k], _random_bumps(rng)) for k in range(L)]
    pts, labs = [], []
    for k, shell in enumerate(shells):
        u = rng.standard_normal((counts[k], 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        pts.append(shell.surface(u))
        labs.append(np.full(counts[k], k + 1))
    return LabeledCloud(np.vstack(pts), np.concatenate(labs), L), shells


_POLES = {"anterior": [0, 1, 0], "posterior": [0, -1, 0], "top": [0, 0, 1],
          "bottom": [0, 0, -1], "left": [-1, 0, 0], "right": [1, 0, 0]}


def organ_landmarks(shells: list[OrganShell]) -> Landmarks:
    """Six surface poles per organ, named ``organ<k>_<pole>``."""
    dirs = np.array(list(_POLES.values()), dtype=float)
    names, pts, labs = [], [], []
    for k, shell in enumerate(shells):
        names += [f"organ{k + 1}_{tag}" for tag in _POLES]
        pts.append(shell.surface(dirs))
        labs += [k + 1] * len(dirs)
    return Landmarks(tuple(names), np.vstack(pts), np.array(labs))


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_angle_deg))
    return Rotation.from_rotvec(angle * axis).as_matrix()


def gen_similarity_case(seed: int, M: int = 600, L: int = 3, noise_mm: float = 0.5,
                        max_angle_deg: float = 45.0) -> SyntheticCase:
    """Target = random similarity of the source plus isotropic jitter."""
    if M < 10 or L < 1:
        raise ValueError("need M >= 10 and L >= 1")
    rng = np.random.default_rng(seed)
    y, shells = organ_shells(rng, M, L)
    s = rng.uniform(0.7, 1.3)
    R = random_rotation(rng, max_angle_deg)
    d = rng.standard_normal(3)
    t = d / np.linalg.norm(d) * rng.uniform(0, 50)
    T = SimilarityTransform(s, R, t)
    perm = rng.permutation(M)
    moved = T.apply(y.points) + rng.normal(0, noise_mm, (M, 3)) if noise_mm > 0 else T.apply(y.points)
    x = LabeledCloud(moved[perm], y.labels[perm], L)
    lm = organ_landmarks(shells)
    return SyntheticCase("similarity", seed, y, x, lm, lm.with_points(T.apply(lm.points)), perm,
                         transform=T, displacement=T.apply(y.points) - y.points,
                         params={"M": M, "L": L, "noise_mm": noise_mm, "max_angle_deg": max_angle_deg})


def sample_displacement(points, labels, model: OrganModel, rng: np.random.Generator,
                        n_draws: int | None = None) -> np.ndarray:
    """Draw ``v`` from the zero-mean prior with covariance ``G``, per coordinate.

    Returns an ``(n, 3)`` array, or ``(n_draws, n, 3)`` when ``n_draws`` is given.
    """
    G = cross_gram(points, labels, points, labels, model)
    G, _ = validate_spd(0.5 * (G + G.T), jitter=1e-10, escalations=6)
    C = np.linalg.cholesky(G.matrix)
    n = C.shape[0]
    if n_draws is None:
        return C @ rng.standard_normal((n, 3))
    z = rng.standard_normal((n_draws, n, 3))
    return np.einsum("ij,djk->dik", C, z)


def _organ_offsets(rng, L, max_norm=40.0, min_diff=20.0):
    if L == 1:
        d = rng.standard_normal(3)
        return (d / np.linalg.norm(d) * rng.uniform(min_diff, max_norm))[None]
    for _ in range(10_000):
        d = rng.standard_normal((L, 3))
        off = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(min_diff / 2, max_norm, (L, 1))
        diff = np.linalg.norm(off[:, None] - off[None], axis=-1)
        if np.all(diff[~np.eye(L, dtype=bool)] >= min_diff):
            return off
    raise RuntimeError("could not place organ offsets")


def gen_gp_case(seed: int, M: int = 600, L: int = 3, organ_model: OrganModel | None = None,
                independent_motion: bool = True, noise_mm: float = 0.0,
                gap=(5.0, 12.0)) -> SyntheticCase:
    """Target = source + prior draw of ``v`` (+ per-organ rigid shifts).

    The field is drawn jointly on the source points and the landmarks, so the
    landmark ground truth follows the same deformation as the cloud.
    """
    rng = np.random.default_rng(seed)
    om = organ_model or OrganModel.uniform(L)
    y, shells = organ_shells(rng, M, L, gap=gap)
    lm = organ_landmarks(shells)
    allp = np.vstack([y.points, lm.points])
    alll = np.concatenate([y.labels, lm.labels])
    v = sample_displacement(allp, alll, om, rng)
    offsets = _organ_offsets(rng, L) if independent_motion else np.zeros((L, 3))
    v = v + offsets[alll - 1]
    v_src, v_lm = v[:M], v[M:]
    perm = rng.permutation(M)
    moved = y.points + v_src
    if noise_mm > 0:
        moved = moved + rng.normal(0, noise_mm, moved.shape)
    x = LabeledCloud(moved[perm], y.labels[perm], L)
    return SyntheticCase("gp", seed, y, x, lm, lm.with_points(lm.points + v_lm), perm,
                         displacement=v_src, offsets=offsets,
                         params={"M": M, "L": L, "independent_motion": independent_motion,
                                 "noise_mm": noise_mm, **om.to_dict()})


def boundary_distance(cloud: LabeledCloud) -> tuple[np.ndarray, np.ndarray]:
    """Distance from each point to the nearest point of another organ, and that organ's label."""
    dist = np.full(len(cloud), np.inf)
    other = np.zeros(len(cloud), dtype=int)
    for lab in np.unique(cloud.labels):
        mine = cloud.labels == lab
        if mine.all():
            continue
        tree = cKDTree(cloud.points[~mine])
        d, j = tree.query(cloud.points[mine])
        dist[mine] = d
        other[mine] = cloud.labels[~mine][j]
    return dist, other


def corrupt_labels(cloud: LabeledCloud, rate: float, seed: int = 0) -> LabeledCloud:
    """Relabel the ``floor(rate * M)`` points closest to another organ with that organ's label."""
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    if len(np.unique(cloud.labels)) < 2:
        raise ValueError("label corruption needs at least two organs")
    k = int(np.floor(rate * len(cloud)))
    if k == 0:
        return cloud
    dist, other = boundary_distance(cloud)
    tie = np.random.default_rng(seed).random(len(cloud))
    order = np.lexsort((tie, dist))
    labels = np.array(cloud.labels)
    flip = order[:k]
    labels[flip] = other[flip]
    return cloud.with_labels(labels)


def gen_labelnoise_case(seed: int, M: int = 500, rate: float = 0.1, slide_mm: float = 15.0,
                        organ_model: OrganModel | None = None) -> SyntheticCase:
    """Two abutting organs sliding past each other, target labels corrupted at the boundary."""
    rng = np.random.default_rng(seed)
    om = organ_model or OrganModel.uniform(2, lam=5.0)
    y, shells = organ_shells(rng, M, 2, gap=(2.0, 4.0))
    lm = organ_landmarks(shells)
    allp = np.vstack([y.points, lm.points])
    alll = np.concatenate([y.labels, lm.labels])
    v = sample_displacement(allp, alll, om, rng)
    # opposite shifts perpendicular to the line joining the organs
    d = rng.standard_normal(3)
    d -= d[0] * np.array([1.0, 0, 0])
    d /= np.linalg.norm(d)
    offsets = np.array([d, -d]) * slide_mm / 2
    v = v + offsets[alll - 1]
    perm = rng.permutation(M)
    clean = LabeledCloud((y.points + v[:M])[perm], y.labels[perm], 2)
    x = corrupt_labels(clean, rate, seed)
    return SyntheticCase("labelnoise", seed, y, x, lm, lm.with_points(lm.points + v[M:]), perm,
                         displacement=v[:M], offsets=offsets,
                         target_true_labels=np.array(clean.labels),
                         params={"M": M, "rate": rate, "slide_mm": slide_mm, **om.to_dict()})


def tre(moved: Landmarks, target: Landmarks) -> dict:
    """Per-landmark Euclidean error, with mean and population std."""
    a = moved.as_dict()
    b = target.as_dict()
    if set(a) != set(b):
        raise ValueError(f"landmark names differ: {sorted(set(a) ^ set(b))}")
    names = sorted(a)
    err = np.array([np.linalg.norm(np.asarray(a[n]) - np.asarray(b[n])) for n in names])
    return {
        "per_landmark": {n: float(e) for n, e in zip(names, err)},
        "mean": float(err.mean()) if err.size else 0.0,
        "std": float(err.std()) if err.size else 0.0,
    }


def correspondence_accuracy(P, source_truth, target_truth) -> float:
    """Fraction of source points whose most responsible target point shares their true organ."""
    P = np.asarray(P)
    if P.size == 0:
        raise ValueError("empty responsibility matrix")
    best = np.argmax(P, axis=1)
    return float(np.mean(np.asarray(target_truth)[best] == np.asarray(source_truth)))


def move_landmarks(model: RegistrationModel, lm: Landmarks) -> Landmarks:
    """Carry labeled landmarks through a fitted deformation."""
    _, moved = interpolate(model, lm.as_cloud(model.organ_model.n_labels))
    return lm.with_points(moved)


def evaluate_registration(case: SyntheticCase, result) -> dict:
    model = RegistrationModel.from_result(result)
    return tre(move_landmarks(model, case.source_landmarks), case.target_landmarks)
