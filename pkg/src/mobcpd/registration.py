"""Variational EM for multi-organ Bayesian coherent point drift.

The source cloud ``y`` is deformed as ``rho(y + v)`` where ``rho`` is a
similarity transform and ``v`` a displacement field with the multi-organ
Gaussian-process prior of :mod:`mobcpd.kernel`. Each iteration runs

1. the E-step: label-aware responsibilities ``P`` and their marginals,
2. the posterior update of ``v`` and of the mixing weights ``alpha``,
3. the closed-form similarity update,
4. the noise variance update,

until the deformed cloud and the noise variance stop moving.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.special
from scipy.spatial.distance import cdist

from .core import DIM, LabeledCloud, SimilarityTransform, bounding_box
from .kernel import (GramMatrix, LowRankGram, OrganModel, build_gram, clamp_nonnegative,
                     low_rank_factor, validate_spd)
from .labels import outlier_density

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-6  # mm^2
NU_FLOOR = 1e-12
DIVERGENCE_FACTOR = 1e3
CONVERGENCE_SCALE_MM = 1.0
# a rigid warm-up is kept only if its residual rms is below this fraction of
# the target bounding-box diagonal
PREALIGN_ACCEPT_FRACTION = 0.02

MODES = ("sim", "bcpd", "gmc", "omc", "custom")


class RegistrationDiverged(RuntimeError):
    """Raised when the noise variance blows up; carries the last state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class Config:
    """Registration hyper-parameters.

    ``organ_model=None`` means uniform organs with lambda 10 mm, bandwidth
    30 mm, independent organ motion (S = I) and error-free labels (U = I).

    With ``prealign`` the loop first iterates with ``v`` held at zero until
    convergence. If that rigid fit already explains the target, the
    displacement field is then released from there. Otherwise the warm-up is
    discarded and the joint fit starts afresh, since a biased rigid start
    hurts scenes whose organs move independently. Without a warm-up the
    displacement field soaks up part of the rigid motion in the first
    iterations and the similarity part is recovered only very slowly.
    """

    omega: float = 0.0
    kappa: float = 1e6
    gamma: float = 1.0
    epsilon: float = 0.1
    max_iters: int = 200
    rank: int | None = None
    organ_model: OrganModel | None = None
    outlier_pad_mm: float = 0.0
    similarity_only: bool = False
    prealign: bool = True

    def __post_init__(self):
        if not 0.0 <= self.omega < 1.0:
            raise ValueError("omega must lie in [0, 1)")
        if self.kappa <= 0 or self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("kappa, gamma and epsilon must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be a positive integer")
        if self.rank is not None and int(self.rank) < 1:
            raise ValueError("rank must be positive")
        if self.outlier_pad_mm < 0:
            raise ValueError("outlier_pad_mm must be nonnegative")

    def resolved(self, n_labels: int) -> "Config":
        if self.organ_model is not None:
            if self.organ_model.n_labels < n_labels:
                raise ValueError(
                    f"organ model covers {self.organ_model.n_labels} organs, clouds use {n_labels}")
            return self
        return replace(self, organ_model=OrganModel.uniform(n_labels))


def configure_mode(mode: str, n_labels: int, base: Config | None = None) -> Config:
    """Config for one of the comparison settings.

    ``sim`` keeps ``v = 0``; ``bcpd`` ignores labels (S and U all-ones);
    ``gmc`` couples all organs (S all-ones); ``omc`` decouples them (S = I);
    ``custom`` returns ``base`` unchanged.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = (base or Config()).resolved(n_labels)
    om = cfg.organ_model
    if mode == "sim":
        return replace(cfg, similarity_only=True)
    if mode == "bcpd":
        return replace(cfg, organ_model=om.replace(coupling="ones", label_transition="ones"))
    if mode == "gmc":
        return replace(cfg, organ_model=om.replace(coupling="ones"))
    if mode == "omc":
        return replace(cfg, organ_model=om.replace(coupling="identity"))
    return cfg


@dataclass
class RegistrationState:
    v: np.ndarray
    sigma_diag: np.ndarray
    alpha: np.ndarray
    rho: SimilarityTransform
    sigma2: float
    P: np.ndarray
    nu: np.ndarray
    nu_prime: np.ndarray
    n_hat: float
    x_hat: np.ndarray
    deformed: np.ndarray
    iteration: int = 0
    rotation_fallback: bool = False


@dataclass
class RegistrationResult:
    source: LabeledCloud
    deformed: LabeledCloud
    transform: SimilarityTransform
    displacement: np.ndarray
    correspondence: np.ndarray
    state: RegistrationState
    config: Config
    iterations: int
    prealign_iterations: int
    prealign_kept: bool
    converged: bool
    final_measure: float
    sigma2_init: float
    sigma2_trace: list = field(default_factory=list)
    measure_trace: list = field(default_factory=list)
    det_trace: list = field(default_factory=list)
    kernel_info: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def diagnostics(self) -> dict:
        om = self.config.organ_model
        return {
            "iterations": self.iterations,
            "prealign_iterations": self.prealign_iterations,
            "prealign_kept": self.prealign_kept,
            "converged": self.converged,
            "final_convergence_measure": self.final_measure,
            "sigma2_init": self.sigma2_init,
            "sigma2_trace": [float(a) for a in self.sigma2_trace],
            "convergence_trace": [float(a) for a in self.measure_trace],
            "det_rotation_trace": [float(a) for a in self.det_trace],
            "elapsed_seconds": self.elapsed,
            "kernel": self.kernel_info,
            "hyperparameters": {
                "omega": self.config.omega,
                "kappa": self.config.kappa,
                "gamma": self.config.gamma,
                "epsilon": self.config.epsilon,
                "max_iters": self.config.max_iters,
                "rank": self.config.rank,
                "outlier_pad_mm": self.config.outlier_pad_mm,
                "similarity_only": self.config.similarity_only,
                "prealign": self.config.prealign,
                **om.to_dict(),
            },
        }


def digamma(z):
    """Digamma function for positive arguments."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0) or np.any(~np.isfinite(z)):
        raise ValueError("digamma is only defined here for positive finite arguments")
    out = scipy.special.digamma(z)
    return float(out) if out.ndim == 0 else out



def init_state(y: LabeledCloud, x: LabeledCloud, cfg: Config) -> RegistrationState:
    cfg = cfg.resolved(max(y.n_labels, x.n_labels))
    U = cfg.organ_model.label_transition
    if max(y.labels.max(), x.labels.max()) > U.shape[0]:
        raise ValueError("cloud labels exceed the organ model size")
    M, N = len(y), len(x)
    origin = 0.5 * (y.points.mean(0) + x.points.mean(0))
    yp = y.points - origin
    xp = x.points - origin
    # sum over label pairs of U[b, a] * sum_{m in a, n in b} |x_n - y_m|^2
    total = 0.0
    weight = 0.0
    for a in np.unique(y.labels):
        ya = yp[y.labels == a]
        Ma, sya, qya = len(ya), ya.sum(0), np.einsum("ij,ij->", ya, ya)
        for b in np.unique(x.labels):
            w = U[b - 1, a - 1]
            if w == 0:
                continue
            xb = xp[x.labels == b]
            Nb = len(xb)
            ssd = Nb * qya + Ma * np.einsum("ij,ij->", xb, xb) - 2.0 * sya @ xb.sum(0)
            total += w * ssd
            weight += w * Ma * Nb
    if weight <= 0:
        raise ValueError("no source/target label pair has nonzero transition probability")
    sigma2 = cfg.gamma * max(total, 0.0) / (DIM * weight)
    sigma2 = max(sigma2, SIGMA2_FLOOR)
    P = np.full((M, N), 1.0 / M)
    nu = P.sum(1)
    return RegistrationState(
        v=np.zeros((M, DIM)),
        sigma_diag=np.ones(M),
        alpha=np.full(M, 1.0 / M),
        rho=SimilarityTransform.identity(),
        sigma2=float(sigma2),
        P=P,
        nu=nu,
        nu_prime=np.ones(N),
        n_hat=float(N),
        x_hat=(P @ x.points) / nu[:, None],
        deformed=np.array(y.points),
    )


def _log_u(y: LabeledCloud, x: LabeledCloud, U: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(U.T)[np.ix_(y.labels - 1, x.labels - 1)]


def e_step(state: RegistrationState, y: LabeledCloud, x: LabeledCloud, cfg: Config,
           p_out: float | None = None, log_u: np.ndarray | None = None) -> RegistrationState:
    """Responsibilities and their marginals for the current deformation."""
    cfg = cfg.resolved(max(y.n_labels, x.n_labels))
    s2, sig2 = state.rho.scale ** 2, state.sigma2
    if not sig2 > 0:
        raise ValueError("sigma2 must be positive")
    if log_u is None:
        log_u = _log_u(y, x, cfg.organ_model.label_transition)
    y_def = state.rho.apply(y.points + state.v)
    log_phi = (log_u - cdist(y_def, x.points, "sqeuclidean") / (2.0 * sig2)
               - 0.5 * DIM * np.log(2.0 * np.pi * sig2)
               - (DIM * s2 * state.sigma_diag / (2.0 * sig2))[:, None])
    with np.errstate(divide="ignore"):
        log_num = np.log1p(-cfg.omega) + np.log(state.alpha)[:, None] + log_phi
    col_max = log_num.max(axis=0)
    if cfg.omega > 0:
        if p_out is None:
            p_out = outlier_density(bounding_box(x, cfg.outlier_pad_mm))
        log_out = np.log(cfg.omega) + np.log(p_out)
        shift = np.maximum(col_max, log_out)
    else:
        if np.any(~np.isfinite(col_max)):
            bad = int(np.flatnonzero(~np.isfinite(col_max))[0])
            raise ValueError(
                f"target point {bad} has no compatible source point (zero label transition "
                "for every source label) and omega = 0")
        shift = col_max
    with np.errstate(under="ignore"):
        num = np.exp(log_num - shift)
        den = num.sum(axis=0)
        if cfg.omega > 0:
            den = den + np.exp(log_out - shift)
    P = num / den
    nu = P.sum(axis=1)
    nu_prime = P.sum(axis=0)
    n_hat = float(nu.sum())
    starved = nu < NU_FLOOR
    x_hat = (P @ x.points) / np.where(starved, 1.0, nu)[:, None]
    if np.any(starved):
        x_hat[starved] = y_def[starved]
    state.P, state.nu, state.nu_prime, state.n_hat, state.x_hat = P, nu, nu_prime, n_hat, x_hat
    return state


def update_displacement(state: RegistrationState, y: LabeledCloud,
                        kernel: GramMatrix | LowRankGram, cfg: Config) -> RegistrationState:
    """Posterior mean/variance of ``v`` and expected mixing weights."""
    c = state.rho.scale ** 2 / state.sigma2
    d = c * state.nu
    residual = state.rho.apply_inverse(state.x_hat) - y.points
    post = kernel.posterior(d)
    state.v = post.apply(d[:, None] * residual)
    state.sigma_diag = clamp_nonnegative(post.diag())
    state.alpha = update_alpha(state.nu, state.n_hat, cfg.kappa)
    return state


def update_alpha(nu: np.ndarray, n_hat: float, kappa: float) -> np.ndarray:
    M = nu.shape[0]
    log_a = digamma(kappa + nu) - digamma(kappa * M + n_hat)
    a = np.exp(log_a - log_a.max())
    return a / a.sum()


def update_similarity(state: RegistrationState, y: LabeledCloud,
                      x: LabeledCloud | None = None) -> RegistrationState:
    """Weighted closed-form similarity between ``y + v`` and ``x_hat``.

    When the target ``x`` is given, the scale is instead the ratio of the
    weighted spreads of ``x`` and ``y + v``. Unlike the least-squares scale it
    is not shrunk by blurred correspondences at large sigma2.
    """
    n_hat = state.n_hat
    if not n_hat > 0:
        raise ValueError("no inlier evidence (N_hat = 0)")
    w = state.nu / n_hat
    u = y.points + state.v
    x_bar = w @ state.x_hat
    u_bar = w @ u
    sig_bar = float(w @ state.sigma_diag)
    xc = state.x_hat - x_bar
    uc = u - u_bar
    S_xu = (w[:, None] * xc).T @ uc
    S_uu = (w[:, None] * uc).T @ uc + sig_bar * np.eye(DIM)
    Phi, D, PsiT = np.linalg.svd(S_xu)
    fallback = D[0] <= 0 or D[1] <= 1e-12 * D[0]
    if fallback:
        R = np.array(state.rho.rotation)
        logger.warning("cross-covariance is rank deficient; keeping previous rotation")
    else:
        corr = np.ones(DIM)
        corr[-1] = np.sign(np.linalg.det(Phi) * np.linalg.det(PsiT))
        R = (Phi * corr) @ PsiT
        # re-orthonormalize against rounding drift
        Uo, _, Vo = np.linalg.svd(R)
        R = Uo @ Vo
    spread_u = float(np.trace(S_uu))
    if not spread_u > 0:
        s = float("nan")
    elif x is None:
        s = float(np.trace(R.T @ S_xu)) / spread_u
    else:
        xs = x.points - x_bar
        spread_x = state.nu_prime @ np.einsum("ij,ij->i", xs, xs) / n_hat
        s = float(np.sqrt(spread_x / spread_u))
    if not s > 0:
        logger.warning("nonpositive scale estimate %.3g; keeping previous scale", s)
        s = state.rho.scale
        fallback = True
    t = x_bar - s * R @ u_bar
    state.rho = SimilarityTransform(s, R, t)
    state.rotation_fallback = bool(fallback)
    return state


def update_sigma2(state: RegistrationState, x: LabeledCloud, y: LabeledCloud) -> RegistrationState:
    """Noise variance from the expected squared residual plus posterior spread."""
    if not state.n_hat > 0:
        raise ValueError("no inlier evidence (N_hat = 0)")
    y_def = state.rho.apply(y.points + state.v)
    origin = y_def.mean(0)
    xs = x.points - origin
    ys = y_def - origin
    quad = (state.nu_prime @ np.einsum("ij,ij->i", xs, xs)
            - 2.0 * np.einsum("ij,ij->", state.P @ xs, ys)
            + state.nu @ np.einsum("ij,ij->i", ys, ys))
    sig_bar = float(state.nu @ state.sigma_diag) / state.n_hat
    sigma2 = quad / (DIM * state.n_hat) + state.rho.scale ** 2 * sig_bar
    state.sigma2 = float(max(sigma2, SIGMA2_FLOOR))
    state.deformed = y_def
    return state


def convergence_measure(state: RegistrationState, prev: RegistrationState,
                        scale_mm: float = CONVERGENCE_SCALE_MM) -> float:
    """Largest coordinate change of the deformed cloud, or the scaled relative sigma2 change."""
    move = float(np.max(np.abs(state.deformed - prev.deformed))) if state.deformed.size else 0.0
    rel = abs(state.sigma2 - prev.sigma2) / max(prev.sigma2, SIGMA2_FLOOR)
    return max(move, rel * scale_mm)


def prepare_kernel(y: LabeledCloud, cfg: Config) -> tuple[GramMatrix | LowRankGram, dict]:
    G, repaired = validate_spd(build_gram(y, cfg.organ_model))
    info = {"jittered": repaired, "jitter": G.jitter, "rank": None}
    if cfg.rank is not None and cfg.rank < len(y):
        lr = low_rank_factor(G, int(cfg.rank))
        info.update(rank=lr.rank, relative_error=lr.relative_error,
                    retained_fraction=lr.retained_fraction)
        return lr, info
    return G, info


def register(y: LabeledCloud, x: LabeledCloud, cfg: Config | None = None,
             callback: Callable[[int, RegistrationState], None] | None = None) -> RegistrationResult:
    """Register the labeled source cloud ``y`` onto the target ``x``.

    Parameters
    ----------
    y, x : LabeledCloud
        Source and target clouds; labels must share the organ numbering.
    cfg : Config, optional
        Hyper-parameters; defaults as in :class:`Config`.
    callback : callable, optional
        Called as ``callback(iteration, state)`` after every iteration.

    Raises
    ------
    RegistrationDiverged
        If sigma2 grows beyond a thousand times its initial value.
    """
    t0 = time.perf_counter()
    cfg = (cfg or Config()).resolved(max(y.n_labels, x.n_labels))
    kernel, info = prepare_kernel(y, cfg)
    state = init_state(y, x, cfg)
    sigma2_init = state.sigma2
    p_out = outlier_density(bounding_box(x, cfg.outlier_pad_mm)) if cfg.omega > 0 else None
    log_u = _log_u(y, x, cfg.organ_model.label_transition)
    sig_trace, meas_trace, det_trace = [state.sigma2], [], []
    phases = [cfg.similarity_only]
    if cfg.prealign and not cfg.similarity_only:
        phases.insert(0, True)
    it = 0
    n_pre = 0
    kept = False
    accept_sigma = PREALIGN_ACCEPT_FRACTION * x.bbox_diagonal()
    converged = False
    measure = float("inf")
    for rigid in phases:
        converged = False
        for _ in range(int(cfg.max_iters)):
            it += 1
            prev = copy.copy(state)
            e_step(state, y, x, cfg, p_out=p_out, log_u=log_u)
            if rigid:
                state.sigma_diag = np.zeros(len(y))
                state.alpha = update_alpha(state.nu, state.n_hat, cfg.kappa)
            else:
                update_displacement(state, y, kernel, cfg)
            update_similarity(state, y, x if (rigid and len(phases) == 2) else None)
            update_sigma2(state, x, y)
            state.iteration = it
            measure = convergence_measure(state, prev)
            sig_trace.append(state.sigma2)
            meas_trace.append(measure)
            det_trace.append(float(np.linalg.det(state.rho.rotation)))
            logger.debug("iter %d sigma2=%.4g measure=%.4g", it, state.sigma2, measure)
            if callback is not None:
                callback(it, state)
            if not np.isfinite(state.sigma2) or state.sigma2 > DIVERGENCE_FACTOR * sigma2_init:
                raise RegistrationDiverged(
                    f"sigma2 diverged at iteration {it}: {state.sigma2:.3g} vs initial {sigma2_init:.3g}",
                    state)
            if measure <= cfg.epsilon:
                converged = True
                break
        if rigid and len(phases) == 2:
            n_pre = it
            kept = bool(np.sqrt(state.sigma2) <= accept_sigma)
            if not kept:
                logger.debug("rigid warm-up residual %.3g mm too large; restarting",
                             np.sqrt(state.sigma2))
                state = init_state(y, x, cfg)
    deformed = y.with_points(state.deformed)
    return RegistrationResult(
        source=y,
        deformed=deformed,
        transform=state.rho,
        displacement=state.v,
        correspondence=np.argmax(state.P, axis=1),
        state=state,
        config=cfg,
        iterations=state.iteration,
        prealign_iterations=n_pre,
        prealign_kept=kept,
        converged=converged,
        final_measure=measure,
        sigma2_init=sigma2_init,
        sigma2_trace=sig_trace,
        measure_trace=meas_trace,
        det_trace=det_trace,
        kernel_info=info,
        elapsed=time.perf_counter() - t0,
    )
