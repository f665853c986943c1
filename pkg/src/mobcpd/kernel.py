"""Multi-organ Gram matrix and posterior covariance operations.

The displacement prior covariance between source points ``i`` and ``j`` is::

    G_ij = lam[l_i] lam[l_j] S[l_i, l_j] exp(-|y_i - y_j|^2 / (2 B[l_i] B[l_j]))

Everything downstream only needs products with, and the diagonal of, the
posterior covariance ``(G^-1 + diag(d))^-1``. Both are computed without ever
forming ``G^-1``: densely through the Woodbury identity on ``I + D^1/2 G D^1/2``,
or in ``O(M r^2)`` from a truncated eigendecomposition ``G ~ F F^T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .core import LabeledCloud

logger = logging.getLogger(__name__)


class InvalidCouplingError(ValueError):
    """The Gram matrix could not be made positive definite."""


def _as_matrix(value, L: int, name: str) -> np.ndarray:
    if isinstance(value, str):
        if value == "identity":
            return np.eye(L)
        if value == "ones":
            return np.ones((L, L))
        raise ValueError(f"unknown {name} shorthand {value!r}")
    m = np.asarray(value, dtype=float)
    if m.shape != (L, L):
        raise ValueError(f"{name} must be {L}x{L}, got {m.shape}")
    return m


def _as_vector(value, L: int, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        v = np.full(L, float(v))
    if v.shape != (L,):
        raise ValueError(f"{name} must have {L} entries, got {v.shape}")
    return v


@dataclass(frozen=True)
class OrganModel:
    """Per-organ elasticity and inter-organ coupling.

    Parameters
    ----------
    lam : (L,) array
        Expected deformation magnitude per organ, in mm.
    bandwidth : (L,) array
        Motion coherence bandwidth per organ, in mm.
    coupling : (L, L) array
        Symmetric inter-organ motion coherence, unit diagonal, entries in [0, 1].
    label_transition : (L, L) array
        ``U[l, l']`` is the probability that a source point labelled ``l'``
        generates a target point labelled ``l``. Columns sum to one. The
        all-ones matrix is also accepted and means "ignore labels".
    """

    lam: np.ndarray
    bandwidth: np.ndarray
    coupling: np.ndarray
    label_transition: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        L = lam.shape[0]
        bw = _as_vector(self.bandwidth, L, "bandwidth")
        S = _as_matrix(self.coupling, L, "coupling")
        U = _as_matrix(self.label_transition, L, "label_transition")
        if np.any(lam <= 0) or np.any(bw <= 0):
            raise ValueError("lambda and bandwidth must be strictly positive")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("coupling matrix must be symmetric")
        if not np.allclose(np.diag(S), 1.0, atol=1e-12):
            raise ValueError("coupling matrix must have a unit diagonal")
        if np.any(S < 0) or np.any(S > 1):
            raise ValueError("coupling entries must lie in [0, 1]")
        if np.any(U < 0):
            raise ValueError("label transition probabilities must be nonnegative")
        label_blind = np.all(U == 1.0)
        if not label_blind and not np.allclose(U.sum(axis=0), 1.0, atol=1e-9, rtol=0):
            raise ValueError("label transition columns must sum to 1")
        for name, a in (("lam", lam), ("bandwidth", bw), ("coupling", S), ("label_transition", U)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_labels(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def uniform(cls, n_labels: int, lam: float = 10.0, bandwidth: float = 30.0,
                coupling="identity", label_transition="identity") -> "OrganModel":
        return cls(np.full(n_labels, float(lam)), np.full(n_labels, float(bandwidth)),
                   _as_matrix(coupling, n_labels, "coupling"),
                   _as_matrix(label_transition, n_labels, "label_transition"))

    def replace(self, **changes) -> "OrganModel":
        d = dict(lam=self.lam, bandwidth=self.bandwidth, coupling=self.coupling,
                 label_transition=self.label_transition)
        L = self.n_labels
        for k, v in changes.items():
            if k in ("coupling", "label_transition"):
                v = _as_matrix(v, L, k)
            d[k] = v
        return OrganModel(**d)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam.tolist(),
            "bandwidth": self.bandwidth.tolist(),
            "coupling": self.coupling.tolist(),
            "label_transition": self.label_transition.tolist(),
        }


def cross_gram(q_points, q_labels, y_points, y_labels, model: OrganModel) -> np.ndarray:
    """Prior cross-covariance between query points and source points."""
    q_labels = np.asarray(q_labels)
    y_labels = np.asarray(y_labels)
    L = model.n_labels
    for lab in (q_labels, y_labels):
        if lab.size and (lab.min() < 1 or lab.max() > L):
            raise ValueError(f"labels must lie in 1..{L} for this organ model")
    qi = q_labels - 1
    yj = y_labels - 1
    d2 = cdist(np.asarray(q_points, float), np.asarray(y_points, float), "sqeuclidean")
    bb = np.outer(model.bandwidth[qi], model.bandwidth[yj])
    amp = np.outer(model.lam[qi], model.lam[yj]) * model.coupling[np.ix_(qi, yj)]
    return amp * np.exp(-d2 / (2.0 * bb))


@dataclass(frozen=True)
class GramMatrix:
    """Dense symmetric prior covariance of the displacement field."""

    matrix: np.ndarray
    labels: np.ndarray
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def diag(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    def posterior(self, d) -> "_DensePosterior":
        return _DensePosterior(self, np.asarray(d, dtype=float))


@dataclass(frozen=True)
class LowRankGram:
    """Truncated eigendecomposition ``G ~ F F^T`` with ``F = E diag(sqrt(w))``."""

    factor: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    retained_fraction: float
    relative_error: float
    labels: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return self.factor.shape[0]

    def diag(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.factor, self.factor)

    def posterior(self, d) -> "_LowRankPosterior":
        return _LowRankPosterior(self, np.asarray(d, dtype=float))


def build_gram(y: LabeledCloud, model: OrganModel) -> GramMatrix:
    """Gram matrix of the multi-organ displacement prior over ``y``."""
    if y.labels.max() > model.n_labels:
        raise ValueError(f"cloud uses label {y.labels.max()} but the model has {model.n_labels} organs")
    G = cross_gram(y.points, y.labels, y.points, y.labels, model)
    G = 0.5 * (G + G.T)
    return GramMatrix(G, np.array(y.labels))


def validate_spd(G: GramMatrix | np.ndarray, jitter: float = 1e-10,
                 escalations: int = 3) -> tuple[GramMatrix, bool]:
    """Make sure ``G`` admits a Cholesky factorization.

    On failure ``jitter * mean(diag(G))`` is added to the diagonal, growing
    tenfold on each of up to ``escalations`` retries.

    Returns
    -------
    G : GramMatrix
        The input, or a jittered copy.
    repaired : bool
        True when jitter had to be added.
    """
    gram = G if isinstance(G, GramMatrix) else GramMatrix(np.asarray(G, float), np.zeros(len(G), int))
    A = gram.matrix
    scale = float(np.mean(np.diag(A)))
    try:
        np.linalg.cholesky(A)
        return gram, False
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(A.shape[0])
    rel = jitter
    for _ in range(escalations + 1):
        Aj = A + rel * scale * eye
        try:
            np.linalg.cholesky(Aj)
        except np.linalg.LinAlgError:
            rel *= 10.0
            continue
        logger.info("Gram matrix repaired with relative jitter %.1e", rel)
        return GramMatrix(Aj, gram.labels, gram.jitter + rel * scale), True
    raise InvalidCouplingError(
        f"Gram matrix is not positive definite even with relative jitter {rel / 10:.1e}; "
        "check the coupling matrix S against the organ bandwidths"
    )


def low_rank_factor(G: GramMatrix | np.ndarray, rank: int) -> LowRankGram:
    """Top-``rank`` eigenpairs of ``G`` as a factor ``F`` with ``F F^T ~ G``."""
    A = G.matrix if isinstance(G, GramMatrix) else np.asarray(G, float)
    labels = G.labels if isinstance(G, GramMatrix) else None
    M = A.shape[0]
    if not 1 <= rank <= M:
        raise ValueError(f"rank must be in 1..{M}, got {rank}")
    try:
        w, E = scipy.linalg.eigh(A, subset_by_index=[M - rank, M - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    E = E[:, order]
    F = E * np.sqrt(w)
    norm = np.linalg.norm(A)
    err = np.linalg.norm(A - F @ F.T) / norm if norm > 0 else 0.0
    trace = float(np.trace(A))
    frac = float(w.sum() / trace) if trace > 0 else 1.0
    return LowRankGram(F, w, E, rank, frac, float(err), labels)


class _DensePosterior:
    # Sigma = G - G D^1/2 (I + D^1/2 G D^1/2)^-1 D^1/2 G
    def __init__(self, gram: GramMatrix, d: np.ndarray):
        if np.any(d < 0):
            raise ValueError("posterior precision weights must be nonnegative")
        self.G = gram.matrix
        self.sd = np.sqrt(d)
        inner = self.sd[:, None] * self.G * self.sd[None, :]
        inner[np.diag_indices_from(inner)] += 1.0
        try:
            self.chol = scipy.linalg.cholesky(inner, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("posterior inner system is singular") from exc

    def apply(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        Gr = self.G @ rhs
        sd = self.sd if rhs.ndim == 1 else self.sd[:, None]
        z = scipy.linalg.cho_solve((self.chol, True), sd * Gr)
        return Gr - self.G @ (sd * z)

    def diag(self) -> np.ndarray:
        W = scipy.linalg.solve_triangular(self.chol, self.sd[:, None] * self.G, lower=True)
        return np.diag(self.G) - np.einsum("ij,ij->j", W, W)


class _LowRankPosterior:
    # Sigma = F (I_r + F^T D F)^-1 F^T
    def __init__(self, lr: LowRankGram, d: np.ndarray):
        if np.any(d < 0):
            raise ValueError("posterior precision weights must be nonnegative")
        self.F = lr.factor
        inner = self.F.T @ (d[:, None] * self.F)
        inner[np.diag_indices_from(inner)] += 1.0
        try:
            self.chol = scipy.linalg.cholesky(inner, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("posterior inner system is singular") from exc

    def apply(self, rhs) -> np.ndarray:
        z = scipy.linalg.cho_solve((self.chol, True), self.F.T @ np.asarray(rhs, dtype=float))
        return self.F @ z

    def diag(self) -> np.ndarray:
        W = scipy.linalg.solve_triangular(self.chol, self.F.T, lower=True)
        return np.einsum("ij,ij->j", W, W)


_clamp_count = 0


def clamp_nonnegative(diag: np.ndarray) -> np.ndarray:
    global _clamp_count
    neg = diag < 0
    if np.any(neg):
        _clamp_count += int(neg.sum())
        logger.debug("clamped %d negative posterior variances", int(neg.sum()))
        diag = np.where(neg, 0.0, diag)
    return diag


def clamp_count() -> int:
    """Number of negative posterior variances clamped to zero so far."""
    return _clamp_count


def posterior_apply(G: GramMatrix | LowRankGram, d, rhs) -> np.ndarray:
    """Return ``(G^-1 + diag(d))^-1 @ rhs``."""
    return G.posterior(d).apply(rhs)


def posterior_diag(G: GramMatrix | LowRankGram, d) -> np.ndarray:
    """Return ``diag((G^-1 + diag(d))^-1)``, clamped at zero."""
    return clamp_nonnegative(G.posterior(d).diag())
