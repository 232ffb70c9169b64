# funcount/narfd.py

import logging
import warnings
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import nnls
from sklearn.decomposition import NMF
from sklearn.exceptions import ConvergenceWarning

from funcount.arrays import FloatArray
from funcount.basis import DEFAULT_N_BASIS, BasisSystem, penalty_scale, trapezoid_weights
from funcount.config import parallel_map, resolve_threads
from funcount.decomposition import Decomposition
from funcount.errors import PreconditionError
from funcount.gfpca import DEFAULT_K, default_basis
from funcount.ingest import CountCurveSet
from funcount.nonneg import projected_newton
from funcount.pfpca import poisson_deviance

logger = logging.getLogger(__name__)

INTENSITY_FLOOR = 1e-10
PENALTY_LADDER = tuple(10.0 ** np.linspace(-3, 3, 7))
WARM_START_ITER = 200


class NarfdState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    Phi: FloatArray = Field(description="M x K nonnegative spline coefficients of the prototypes.")
    scores: FloatArray = Field(description="N x K nonnegative subject scores.")
    lam: float = Field(ge=0, description="Roughness penalty weight.")
    objective_trace: FloatArray = Field(description="Penalized negative log-likelihood after each half-iteration.")
    n_iter: int = Field(description="Full alternations performed.")
    converged: bool = Field(description="Whether the relative objective change fell below tol.")


# ---------- Objective ----------

def _floored(mu: np.ndarray) -> np.ndarray:
    return np.maximum(mu, INTENSITY_FLOOR)


def _neg_loglik_rows(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.sum(mu - y * np.log(_floored(mu)), axis=-1)


def narfd_objective(counts, design, Phi, scores, penalty, lam: float) -> float:
    """Identity-link Poisson negative log-likelihood, log(y!) dropped, plus lam * sum_k phi_k' P phi_k."""
    y = np.asarray(counts, dtype=np.float64)
    mu = scores @ (design @ Phi).T
    rough = float(np.sum(Phi * (penalty @ Phi)))
    return float(_neg_loglik_rows(y, mu).sum() + lam * rough)


def narfd_gradient(counts, design, Phi, scores, penalty, lam: float):
    """Gradients of narfd_objective in Phi (M x K) and in the scores (N x K)."""
    y = np.asarray(counts, dtype=np.float64)
    prototypes = design @ Phi
    mu = scores @ prototypes.T
    resid = 1.0 - np.where(mu > INTENSITY_FLOOR, y / _floored(mu), 0.0)
    grad_phi = design.T @ resid.T @ scores + 2.0 * lam * (penalty @ Phi)
    grad_scores = resid @ prototypes
    return grad_phi, grad_scores


# ---------- Score half-step ----------

def _solve_scores(y: np.ndarray, prototypes: np.ndarray, start: np.ndarray, tol: float) -> np.ndarray:
    active = np.flatnonzero(prototypes.sum(axis=0) > 0)
    scores = np.zeros((y.shape[0], prototypes.shape[1]))
    if active.size == 0 or y.shape[0] == 0:
        return scores
    a = prototypes[:, active]

    def objective(s, rows):
        return _neg_loglik_rows(y[rows], s @ a.T)

    def gradient(s, rows):
        mu = s @ a.T
        ratio = np.where(mu > INTENSITY_FLOOR, y[rows] / _floored(mu), 0.0)
        return (1.0 - ratio) @ a

    def hessian(s, rows):
        mu = s @ a.T
        curv = np.where(mu > INTENSITY_FLOOR, y[rows] / _floored(mu) ** 2, 0.0)
        return np.einsum("nt,tk,tl->nkl", curv, a, a)

    result = projected_newton(objective, gradient, hessian, start[:, active], tol=tol)
    scores[:, active] = result.x
    return scores


def _initial_scores(y: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    k = prototypes.shape[1]
    mass = prototypes.sum()
    if mass <= 0:
        return np.zeros((y.shape[0], k))
    level = y.sum(axis=1) / mass
    return np.repeat(level[:, None], k, axis=1)


def update_all_scores(
    counts,
    prototypes,
    start=None,
    tol: float = 1e-6,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Nonnegative identity-link Poisson score fits for every row of counts (N x T) given T x K prototypes."""
    y = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if np.any(prototypes < 0):
        raise PreconditionError("narfd", "prototype matrix must be nonnegative")
    start = _initial_scores(y, prototypes) if start is None else np.asarray(start, dtype=np.float64)

    chunks = [c for c in np.array_split(np.arange(y.shape[0]), resolve_threads(threads)) if c.size]
    if len(chunks) <= 1:
        return _solve_scores(y, prototypes, start, tol)
    parts = parallel_map(lambda rows: _solve_scores(y[rows], prototypes, start[rows], tol), chunks, threads)
    return np.vstack(parts)


def update_scores_nnls_poisson(curve, prototype_matrix, tol: float = 1e-6) -> np.ndarray:
    """
    Maximize sum_j [y_j log(mu_j) - mu_j], mu = prototype_matrix @ s, over s >= 0.
    Intensities below 1e-10 are floored inside the log.
    """
    return update_all_scores(np.atleast_2d(curve), prototype_matrix, tol=tol, threads=1)[0]


# ---------- Prototype half-step ----------

def update_prototypes(
    data: Union[CountCurveSet, np.ndarray],
    scores,
    basis: BasisSystem,
    lam: float,
    start=None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> np.ndarray:
    """
    Minimize the identity-link Poisson negative log-likelihood plus
    lam * sum_k phi_k' P phi_k over Phi >= 0 with the scores held fixed.
    Prototypes whose scores are all zero do not touch the likelihood; they
    keep their `start` coefficients, or are zero without a start.
    """
    y = data.counts.astype(np.float64) if isinstance(data, CountCurveSet) else np.asarray(data, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    design, penalty = basis.design, basis.penalty
    m, k = basis.n_basis, scores.shape[1]
    if np.any(scores < 0):
        raise PreconditionError("narfd", "scores must be nonnegative")
    if lam < 0:
        raise PreconditionError("narfd", "penalty weight must be nonnegative")

    Phi = np.zeros((m, k)) if start is None else np.maximum(np.array(start, dtype=np.float64), 0.0)
    active = np.flatnonzero(scores.sum(axis=0) > 0)
    if active.size == 0:
        return Phi
    s = scores[:, active]
    ka = active.size
    if start is None:
        x0 = np.full((m, ka), max(y.mean(), 1e-3) / max(s.sum(axis=1).mean(), 1e-12))
    else:
        x0 = Phi[:, active]
    rough = 2.0 * lam * np.kron(penalty, np.eye(ka))

    def unpack(x):
        return x[0].reshape(m, ka)

    def objective(x, rows):
        phi = unpack(x)
        mu = s @ (design @ phi).T
        return np.array([_neg_loglik_rows(y, mu).sum() + lam * np.sum(phi * (penalty @ phi))])

    def gradient(x, rows):
        phi = unpack(x)
        mu = s @ (design @ phi).T
        ratio = np.where(mu > INTENSITY_FLOOR, y / _floored(mu), 0.0)
        grad = design.T @ (1.0 - ratio).T @ s + 2.0 * lam * (penalty @ phi)
        return grad.reshape(1, -1)

    def hessian(x, rows):
        phi = unpack(x)
        mu = s @ (design @ phi).T
        curv = np.where(mu > INTENSITY_FLOOR, y / _floored(mu) ** 2, 0.0)
        inner = np.einsum("ik,il,ij->klj", s, s, curv)
        h = np.einsum("jm,jn,klj->mknl", design, design, inner).reshape(m * ka, m * ka)
        return (h + rough)[None]

    result = projected_newton(objective, gradient, hessian, x0.reshape(1, -1), tol=tol, max_iter=max_iter)
    Phi[:, active] = unpack(result.x)
    return Phi


# ---------- Alternating minimization ----------

def _zero_state(n: int, m: int, k: int, lam: float) -> NarfdState:
    return NarfdState(
        Phi=np.zeros((m, k)),
        scores=np.zeros((n, k)),
        lam=lam,
        objective_trace=[0.0],
        n_iter=1,
        converged=True,
    )


def warm_start(y: np.ndarray, basis: BasisSystem, k: int, rng: np.random.Generator, max_iter: int = WARM_START_ITER):
    """
    Seeded uniform(0.5, 1.5) spline coefficients and per-subject score
    multipliers, refined on the grid by Kullback-Leibler multiplicative
    updates; the refined prototypes are projected back onto nonnegative
    spline coefficients. Returns (Phi M x K, scores N x K).
    """
    Phi = rng.uniform(0.5, 1.5, size=(basis.n_basis, k))
    prototypes = basis.design @ Phi
    level = y.sum(axis=1) / max(prototypes.sum(), 1e-12)
    scores = level[:, None] * rng.uniform(0.5, 1.5, size=(y.shape[0], k))

    model = NMF(
        n_components=k,
        init="custom",
        solver="mu",
        beta_loss="kullback-leibler",
        max_iter=max_iter,
        tol=1e-6,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        scores = model.fit_transform(y, W=scores, H=np.ascontiguousarray(prototypes.T))
    Phi = np.column_stack([nnls(basis.design, row)[0] for row in model.components_])
    return Phi, scores


def run_narfd(
    data: CountCurveSet,
    k: int,
    basis: BasisSystem,
    lam: float,
    max_iter: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    threads: Optional[int] = None,
) -> NarfdState:
    """
    Alternate score and prototype half-steps from a seeded warm start
    until the relative objective change over one alternation drops below
    tol. A prototype whose scores all vanish keeps its previous
    coefficients.
    """
    if k < 1:
        raise PreconditionError("narfd", "K must be at least 1")
    if lam < 0:
        raise PreconditionError("narfd", "penalty weight must be nonnegative")
    y = data.counts.astype(np.float64)
    n = y.shape[0]
    m = basis.n_basis
    if not np.any(y):
        logger.info("NARFD: all-zero data, returning the zero decomposition")
        return _zero_state(n, m, k, lam)

    Phi, scores = warm_start(y, basis, k, np.random.default_rng(seed))
    trace = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        scores = update_all_scores(y, basis.design @ Phi, start=scores, threads=threads)
        trace.append(narfd_objective(y, basis.design, Phi, scores, basis.penalty, lam))
        Phi = update_prototypes(y, scores, basis, lam, start=Phi)
        trace.append(narfd_objective(y, basis.design, Phi, scores, basis.penalty, lam))
        logger.debug("NARFD iteration %d objective %.10g", n_iter, trace[-1])
        if n_iter > 1:
            previous = trace[-3]
            if abs(previous - trace[-1]) / max(abs(previous), 1.0) < tol:
                converged = True
                break

    if not converged:
        logger.warning("NARFD stopped at max_iter=%d without reaching tol=%g", max_iter, tol)
    return NarfdState(
        Phi=Phi,
        scores=scores,
        lam=lam,
        objective_trace=trace,
        n_iter=n_iter,
        converged=converged,
    )


def normalize_state(state: NarfdState, basis: BasisSystem):
    """
    Scale every prototype to unit trapezoid integral (scores absorb the
    scale) and order components by descending total score mass.
    Returns (components K x T, scores N x K).
    """
    w = trapezoid_weights(basis.grid)
    prototypes = (basis.design @ state.Phi).T
    scores = state.scores.copy()
    integrals = prototypes @ w
    for j, area in enumerate(integrals):
        if area > 0:
            prototypes[j] /= area
            scores[:, j] *= area
    order = np.argsort(-scores.sum(axis=0), kind="stable")
    return prototypes[order], scores[:, order]


def select_narfd_penalty(
    data: CountCurveSet,
    k: int,
    basis: BasisSystem,
    ladder: Optional[Sequence[float]] = None,
    folds: int = 5,
    seed: int = 0,
    max_iter: int = 50,
    threads: Optional[int] = None,
) -> float:
    """
    Subject-wise K-fold cross-validation of the penalty weight: prototypes
    are learned on the training subjects, held-out scores are refitted
    against them, and the held-out Poisson deviance is summed.
    """
    if ladder is None:
        ladder = tuple(penalty_scale(basis) * r for r in PENALTY_LADDER)
    n = data.n_subjects
    folds = max(2, min(folds, n))
    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % folds

    best_lam, best_dev = float(ladder[0]), np.inf
    for lam in ladder:
        total = 0.0
        for f in range(folds):
            train = np.flatnonzero(fold_of != f)
            test = np.flatnonzero(fold_of == f)
            state = run_narfd(data.subset(train), k, basis, lam, max_iter=max_iter, seed=seed, threads=threads)
            prototypes = basis.design @ state.Phi
            held = data.counts[test].astype(np.float64)
            held_scores = update_all_scores(held, prototypes, threads=threads)
            total += float(poisson_deviance(held, held_scores @ prototypes.T).sum())
        logger.info("NARFD CV lambda=%.4g held-out deviance=%.6g", lam, total)
        if total < best_dev:
            best_lam, best_dev = float(lam), total
    return best_lam


def fit_narfd(
    data: CountCurveSet,
    k: int = DEFAULT_K,
    basis: Optional[BasisSystem] = None,
    lam: Optional[float] = None,
    max_iter: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    n_basis: int = DEFAULT_N_BASIS,
    threads: Optional[int] = None,
) -> Decomposition:
    """
    Nonnegative and regularized function decomposition. `lam=None` selects
    the penalty weight by 5-fold subject-wise cross-validation.
    """
    logger.info("=== NARFD FIT (N=%d, T=%d, K=%d) ===", data.n_subjects, data.n_points, k)
    if basis is None:
        basis = default_basis(data.grid, n_basis)
    if lam is None:
        lam = select_narfd_penalty(data, k, basis, seed=seed, threads=threads)

    state = run_narfd(data, k, basis, lam, max_iter=max_iter, tol=tol, seed=seed, threads=threads)
    components, scores = normalize_state(state, basis)
    return Decomposition(
        method="NARFD",
        grid=data.grid,
        subject_ids=data.subject_ids,
        mean=None,
        components=components,
        scores=scores,
        fitted=scores @ components,
        penalty_weight=lam,
        objective_trace=state.objective_trace,
        converged=state.converged,
    )
