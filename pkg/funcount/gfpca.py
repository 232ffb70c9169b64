# funcount/gfpca.py

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import eigh

from funcount.arrays import FloatArray
from funcount.basis import (
    DEFAULT_LADDER,
    DEFAULT_N_BASIS,
    BasisSystem,
    build_basis,
    hat_matrix,
    select_smoothing_gcv,
    smooth_penalized,
    trapezoid_weights,
)
from funcount.decomposition import Decomposition
from funcount.errors import PreconditionError
from funcount.ingest import CountCurveSet

logger = logging.getLogger(__name__)

DEFAULT_K = 6


# ---------- Shared FPCA machinery ----------

class FpcaResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: FloatArray = Field(description="Mean function on the grid.")
    components: FloatArray = Field(description="K x T eigenfunctions, orthonormal under trapezoid quadrature.")
    eigenvalues: FloatArray = Field(description="K eigenvalues, descending, truncated at 0.")
    scores: FloatArray = Field(description="N x K quadrature projections of the centred curves.")
    noise_var: float = Field(description="Mean excess of the raw covariance diagonal over the smoothed one.")
    total_variance: float = Field(description="Sum of all nonnegative eigenvalues of the smoothed covariance.")
    covariance_smoothing: float = Field(description="Selected covariance smoothing weight.")


def default_basis(grid, n_basis: int = DEFAULT_N_BASIS) -> BasisSystem:
    grid = np.asarray(grid, dtype=np.float64)
    return build_basis(grid, n_basis=min(n_basis, grid.size), degree=3)


def _impute_diagonal(raw_cov: np.ndarray) -> np.ndarray:
    work = raw_cov.copy()
    t = work.shape[0]
    if t < 2:
        return work
    upper = np.diag(raw_cov, 1)
    neighbours = np.empty(t)
    neighbours[0] = upper[0]
    neighbours[-1] = upper[-1]
    neighbours[1:-1] = 0.5 * (upper[:-1] + upper[1:])
    np.fill_diagonal(work, neighbours)
    return work


def _sandwich_fit(raw_cov: np.ndarray, hat: np.ndarray, max_iter: int = 10, tol: float = 1e-10) -> np.ndarray:
    # Diagonal carries the nugget, so it is re-imputed from the smooth fit
    # until it stops moving; only off-diagonal entries inform the surface.
    work = _impute_diagonal(raw_cov)
    smoothed = hat @ work @ hat.T
    for _ in range(max_iter):
        previous = np.diag(work).copy()
        np.fill_diagonal(work, np.diag(smoothed))
        smoothed = hat @ work @ hat.T
        if np.max(np.abs(np.diag(work) - previous)) <= tol * (1.0 + np.max(np.abs(previous))):
            break
    return 0.5 * (smoothed + smoothed.T)


def smooth_covariance(
    raw_cov,
    basis: BasisSystem,
    ladder: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, float]:
    """
    Tensor-product penalized smoothing H G H' of a raw covariance, excluding
    its diagonal; the smoothing weight minimizes off-diagonal GCV.
    """
    raw_cov = np.asarray(raw_cov, dtype=np.float64)
    t = raw_cov.shape[0]
    ladder = DEFAULT_LADDER if ladder is None else ladder
    off = ~np.eye(t, dtype=bool)
    n_obs = max(off.sum(), 1)

    best = (np.inf, None, None)
    for lam in ladder:
        hat = hat_matrix(basis, lam)
        smoothed = _sandwich_fit(raw_cov, hat)
        rss = np.sum((raw_cov - smoothed)[off] ** 2)
        edf = np.trace(hat) ** 2
        denom = (1.0 - edf / n_obs) ** 2
        if denom <= 0:
            continue
        score = rss / n_obs / denom
        if score < best[0]:
            best = (score, lam, smoothed)

    if best[1] is None:
        lam = ladder[-1]
        best = (np.inf, lam, _sandwich_fit(raw_cov, hat_matrix(basis, lam)))
    logger.debug("Covariance smoothing weight %.3g", best[1])
    return best[2], float(best[1])


def _fix_signs(components: np.ndarray) -> np.ndarray:
    fixed = components.copy()
    for k in range(fixed.shape[0]):
        j = np.argmax(np.abs(fixed[k]))
        if fixed[k, j] < 0:
            fixed[k] = -fixed[k]
    return fixed


def smoothed_fpca(
    values,
    grid,
    k: int,
    basis: Optional[BasisSystem] = None,
    smooth_mean: bool = False,
    ladder: Optional[Sequence[float]] = None,
) -> FpcaResult:
    """
    FPCA of a real N x T matrix of curves on a shared grid.

    The mean is the raw column mean, or a GCV-smoothed column mean when
    smooth_mean is set. Components are eigenfunctions of the smoothed
    sample covariance, orthonormal under trapezoid quadrature; scores are
    quadrature projections of the curves centred at the returned mean.
    """
    values = np.asarray(values, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != grid.size:
        raise PreconditionError("gfpca", f"curves must be N x {grid.size}")
    n, t = values.shape
    if k < 1:
        raise PreconditionError("gfpca", "K must be at least 1")
    if k > min(n - 1, t):
        raise PreconditionError("gfpca", f"K={k} exceeds min(N-1, T)={min(n - 1, t)}")
    if basis is None:
        basis = default_basis(grid)

    raw_mean = values.mean(axis=0)
    if smooth_mean:
        mean = smooth_penalized(basis, raw_mean, select_smoothing_gcv(basis, raw_mean, ladder))
    else:
        mean = raw_mean

    deviations = values - raw_mean
    raw_cov = deviations.T @ deviations / (n - 1)
    smoothed, cov_lam = smooth_covariance(raw_cov, basis, ladder)

    w = trapezoid_weights(grid)
    root_w = np.sqrt(w)
    evals, evecs = eigh(root_w[:, None] * smoothed * root_w[None, :])
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    components = _fix_signs((evecs[:, :k] / root_w[:, None]).T)
    scores = (values - mean) @ (w[:, None] * components.T)
    noise_var = max(float(np.mean(np.diag(raw_cov) - np.diag(smoothed))), 0.0)

    return FpcaResult(
        mean=mean,
        components=components,
        eigenvalues=evals[:k],
        scores=scores,
        noise_var=noise_var,
        total_variance=float(evals.sum()),
        covariance_smoothing=cov_lam,
    )


# ---------- Gaussian FPCA on log(Y + 1) ----------

def fit_gfpca(
    data: CountCurveSet,
    k: int = DEFAULT_K,
    n_basis: int = DEFAULT_N_BASIS,
    smooth_mean: bool = False,
    ladder: Optional[Sequence[float]] = None,
) -> Decomposition:
    """
    Gaussian FPCA of log(Y + 1) around the column mean (smoothed when
    smooth_mean is set). Fitted values are back-transformed with
    exp(.) - 1 and clipped at 0.
    """
    logger.info("=== GFPCA FIT (N=%d, T=%d, K=%d) ===", data.n_subjects, data.n_points, k)
    z = np.log1p(data.counts.astype(np.float64))
    basis = default_basis(data.grid, n_basis)
    result = smoothed_fpca(z, data.grid, k, basis=basis, smooth_mean=smooth_mean, ladder=ladder)

    latent = result.mean + result.scores @ result.components
    fitted = np.clip(np.expm1(latent), 0.0, None)

    return Decomposition(
        method="GFPCA",
        grid=data.grid,
        subject_ids=data.subject_ids,
        mean=result.mean,
        components=result.components,
        scores=result.scores,
        eigenvalues=result.eigenvalues,
        noise_var=result.noise_var,
        fitted=fitted,
    )


def project_scores(decomp: Decomposition, new_curves: Union[CountCurveSet, np.ndarray]) -> np.ndarray:
    """Scores of new count curves: quadrature inner products of centred log(Y + 1) with the components."""
    if decomp.method != "GFPCA":
        raise PreconditionError("gfpca", f"project_scores needs a GFPCA decomposition, got {decomp.method}")
    if isinstance(new_curves, CountCurveSet):
        if new_curves.grid.shape != decomp.grid.shape or not np.allclose(new_curves.grid, decomp.grid):
            raise PreconditionError("gfpca", "new curves are on a different grid")
        counts = new_curves.counts.astype(np.float64)
    else:
        counts = np.atleast_2d(np.asarray(new_curves, dtype=np.float64))
        if counts.shape[1] != decomp.grid.size:
            raise PreconditionError(
                "gfpca", f"new curves have {counts.shape[1]} points, decomposition grid has {decomp.grid.size}"
            )
    w = trapezoid_weights(decomp.grid)
    return (np.log1p(counts) - decomp.mean) @ (w[:, None] * decomp.components.T)


def fraction_of_variance(decomp: Decomposition) -> np.ndarray:
    """Cumulative share of the retained eigenvalues."""
    if decomp.eigenvalues is None:
        raise PreconditionError("gfpca", f"{decomp.method} decompositions carry no eigenvalues")
    total = decomp.eigenvalues.sum()
    if total <= 0:
        return np.zeros_like(decomp.eigenvalues)
    return np.cumsum(decomp.eigenvalues) / total
