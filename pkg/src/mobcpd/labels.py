"""Label transition matrix from segmentation confusion, and the outlier density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionModel:
    """Segmentation confusion statistics on both sides of a registration.

    ``source_posterior[k, l]`` is P(true label k | predicted label l) on the
    source side, ``target_likelihood[l, k]`` is P(predicted label l | true
    label k) on the target side. Indices are 0-based for organs ``1..L``.
    """

    source_posterior: np.ndarray
    target_likelihood: np.ndarray

    def __post_init__(self):
        for name in ("source_posterior", "target_likelihood"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be a square matrix")
            if np.any(m < 0) or np.any(m > 1):
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if not np.allclose(m.sum(axis=0), 1.0, atol=1e-9, rtol=0):
                raise ValueError(f"{name} columns must sum to 1")
            object.__setattr__(self, name, m)

    @classmethod
    def symmetric(cls, n_labels: int, source_rate: float = 0.0,
                  target_rate: float = 0.0) -> "ConfusionModel":
        """Uniform confusion: a fraction ``rate`` of each organ spread over the others."""

        def conf(rate):
            if n_labels == 1:
                return np.ones((1, 1))
            m = np.full((n_labels, n_labels), rate / (n_labels - 1))
            np.fill_diagonal(m, 1.0 - rate)
            return m

        return cls(conf(source_rate), conf(target_rate))


def build_label_transition(c: ConfusionModel) -> np.ndarray:
    """``U[l, l'] = sum_k P(true k | source label l') P(target label l | true k)``."""
    A = c.source_posterior
    B = c.target_likelihood
    if A.shape != B.shape:
        raise ValueError(f"confusion matrices disagree in size: {A.shape} vs {B.shape}")
    return B @ A


def outlier_density(box) -> float:
    """Uniform density over an axis-aligned ``(lo, hi)`` box."""
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    volume = float(np.prod(hi - lo))
    if not volume > 0:
        raise ValueError("outlier box has zero volume")
    return 1.0 / volume
