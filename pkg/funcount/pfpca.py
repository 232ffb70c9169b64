# funcount/pfpca.py

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve

from funcount.arrays import FloatArray
from funcount.basis import DEFAULT_N_BASIS, BasisSystem, penalty_scale
from funcount.config import parallel_map
from funcount.decomposition import Decomposition
from funcount.errors import ConvergenceError, PreconditionError
from funcount.gfpca import DEFAULT_K, default_basis, smoothed_fpca
from funcount.ingest import CountCurveSet

logger = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_DIVERGED_SHARE = 0.01
LATENT_LADDER = tuple(10.0 ** np.linspace(-3, 3, 10))
MAX_ETA = 30.0


# ---------- Step 1: per-subject penalized Poisson spline ----------

class LatentFit(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    coefficients: FloatArray = Field(description="Spline coefficients of the log intensity.")
    log_intensity: FloatArray = Field(description="Estimated log intensity on the grid.")
    edf: float = Field(description="Effective degrees of freedom at convergence.")
    working_rss: float = Field(description="Weighted working-response residual sum of squares.")
    n_iter: int = Field(description="IRLS iterations used.")
    converged: bool = Field(description="Whether the IRLS tolerance was met.")


def fit_latent_curve(
    curve,
    basis: BasisSystem,
    lam: float,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LatentFit:
    """
    Maximize the penalized Poisson log-likelihood of a log-link spline
    regression by IRLS. A 1e-8 ridge keeps all-zero curves solvable.
    """
    y = np.asarray(curve, dtype=np.float64)
    design = basis.design
    penalty = lam * penalty_scale(basis) * basis.penalty + RIDGE * np.eye(basis.n_basis)

    coef = np.full(basis.n_basis, np.log(max(y.mean(), 0.1)))
    eta = design @ coef
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = np.exp(eta)
        working = eta + (y - mu) / mu
        system = design.T @ (mu[:, None] * design) + penalty
        try:
            new_coef = cho_solve(cho_factor(system), design.T @ (mu * working))
        except LinAlgError:
            new_coef = solve(system, design.T @ (mu * working), assume_a="sym")
        new_eta = np.clip(design @ new_coef, -MAX_ETA, MAX_ETA)
        if not np.all(np.isfinite(new_eta)):
            break
        change = np.max(np.abs(new_eta - eta))
        coef, eta = new_coef, new_eta
        if change < tol * (1.0 + np.max(np.abs(eta))):
            converged = True
            break

    mu = np.exp(eta)
    system = design.T @ (mu[:, None] * design) + penalty
    influence = np.linalg.solve(system, design.T @ (mu[:, None] * design))
    working = eta + (y - mu) / mu
    resid = working - eta
    return LatentFit(
        coefficients=coef,
        log_intensity=eta,
        edf=float(np.trace(influence)),
        working_rss=float(np.sum(mu * resid ** 2)),
        n_iter=n_iter,
        converged=converged,
    )


def select_latent_smoothing(
    counts,
    basis: BasisSystem,
    ladder: Sequence[float] = LATENT_LADDER,
    max_subjects: int = 200,
    threads: Optional[int] = None,
) -> float:
    """
    One shared smoothing weight: the ladder value minimizing the summed
    working-scale GCV over (an evenly spaced subset of) the subjects.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n, t = counts.shape
    rows = np.unique(np.linspace(0, n - 1, min(n, max_subjects)).round().astype(int))

    best_lam, best_score = ladder[0], np.inf
    for lam in ladder:
        fits = parallel_map(lambda i: fit_latent_curve(counts[i], basis, lam), rows, threads)
        score = 0.0
        for fit in fits:
            denom = (1.0 - fit.edf / t) ** 2
            score += fit.working_rss / t / max(denom, 1e-12)
        if score < best_score:
            best_lam, best_score = lam, score
    logger.info("PFPCA step-1 smoothing weight %.3g", best_lam)
    return float(best_lam)


# ---------- Step 3: Poisson score refit ----------

def poisson_loglik(curve, eta) -> float:
    y = np.asarray(curve, dtype=np.float64)
    return float(np.sum(y * eta - np.exp(eta)))


def score_gradient(curve, mean, components, scores) -> np.ndarray:
    """Gradient in s of the log-link Poisson log-likelihood with predictor mean + s'components."""
    y = np.asarray(curve, dtype=np.float64)
    eta = mean + np.asarray(scores) @ components
    return components @ (y - np.exp(eta))


def estimate_scores_poisson(
    curve,
    mean,
    components,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """
    Maximize sum_j [y_j eta_j - exp(eta_j)] over s, eta = mean + sum_k s_k phi_k,
    by Newton's method with step halving. The objective is concave in s.
    """
    y = np.asarray(curve, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    phi = np.atleast_2d(np.asarray(components, dtype=np.float64))
    s = np.zeros(phi.shape[0])

    eta = mean + s @ phi
    value = poisson_loglik(y, eta)
    for _ in range(max_iter):
        mu = np.exp(eta)
        grad = phi @ (y - mu)
        if np.max(np.abs(grad)) <= tol:
            return s
        info = (phi * mu) @ phi.T
        try:
            step = solve(info + 1e-12 * np.eye(len(s)), grad, assume_a="pos")
        except LinAlgError:
            step = grad / max(np.trace(info), 1.0)

        # Near the optimum the predicted gain (half the Newton decrement)
        # is below rounding error in the log-likelihood; a step is then
        # accepted unless it loses more than that rounding error.
        slack = 8 * np.finfo(float).eps * (1.0 + abs(value))
        near_optimum = grad @ step <= 1e-10 * (1.0 + abs(value))
        shrink = 1.0
        while True:
            candidate = s + shrink * step
            cand_eta = mean + candidate @ phi
            cand_value = poisson_loglik(y, cand_eta) if np.all(cand_eta < 700) else -np.inf
            accepted = cand_value >= value or (near_optimum and cand_value >= value - slack)
            if accepted or shrink < 1e-10:
                break
            shrink *= 0.5
        if not accepted:
            break
        moved = np.max(np.abs(candidate - s))
        s, eta, value = candidate, cand_eta, max(value, cand_value)
        if moved < 1e-14 * (1.0 + np.max(np.abs(s))):
            break

    grad = score_gradient(y, mean, phi, s)
    if np.max(np.abs(grad)) <= tol:
        return s
    raise ConvergenceError(
        "pfpca",
        f"score refit stopped with gradient sup-norm {np.max(np.abs(grad)):.3g}",
        last_iterate=s,
    )


def poisson_deviance(observed, fitted) -> np.ndarray:
    """Per-row Poisson deviance 2 * sum[y log(y / mu) - (y - mu)]."""
    y = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(fitted, dtype=np.float64))
    mu = np.maximum(mu, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return 2.0 * np.sum(term - (y - mu), axis=1)


# ---------- Full two-step fit ----------

def _check_divergence(ids: List[str], bad: List[int], n: int, what: str) -> None:
    if not bad:
        return
    bad_ids = [ids[i] for i in bad]
    logger.warning("PFPCA %s did not converge for %d subject(s): %s", what, len(bad), ", ".join(bad_ids[:10]))
    if len(bad) > MAX_DIVERGED_SHARE * n:
        raise ConvergenceError(
            "pfpca",
            f"{what} diverged for {len(bad)} of {n} subjects",
            subject_ids=bad_ids,
        )


def fit_pfpca(
    data: CountCurveSet,
    k: int = DEFAULT_K,
    n_basis: int = DEFAULT_N_BASIS,
    smoothing: Optional[float] = None,
    threads: Optional[int] = None,
) -> Decomposition:
    """
    Poisson FPCA with a log link.

    1. Penalized Poisson spline estimate of each subject's log intensity.
    2. FPCA (mean + eigenfunctions) of the estimated log intensities.
    3. Per-subject unpenalized Poisson refit of the scores, mean as offset.
    """
    n, t = data.counts.shape
    logger.info("=== PFPCA FIT (N=%d, T=%d, K=%d) ===", n, t, k)
    if k < 1 or k > min(n - 1, t):
        raise PreconditionError("pfpca", f"K={k} must lie in [1, min(N-1, T)={min(n - 1, t)}]")

    basis = default_basis(data.grid, n_basis)
    counts = data.counts.astype(np.float64)
    lam = select_latent_smoothing(counts, basis, threads=threads) if smoothing is None else float(smoothing)

    latent_fits = parallel_map(lambda i: fit_latent_curve(counts[i], basis, lam), range(n), threads)
    _check_divergence(data.subject_ids, [i for i, f in enumerate(latent_fits) if not f.converged], n, "step-1 IRLS")
    latent = np.vstack([f.log_intensity for f in latent_fits])

    result = smoothed_fpca(latent, data.grid, k, basis=basis)

    def refit(i: int) -> Tuple[np.ndarray, bool]:
        try:
            return estimate_scores_poisson(counts[i], result.mean, result.components), True
        except ConvergenceError as exc:
            return exc.last_iterate, False

    refits = parallel_map(refit, range(n), threads)
    _check_divergence(data.subject_ids, [i for i, (_, ok) in enumerate(refits) if not ok], n, "score refit")
    scores = np.vstack([s for s, _ in refits])

    fitted = np.exp(result.mean + scores @ result.components)
    return Decomposition(
        method="PFPCA",
        grid=data.grid,
        subject_ids=data.subject_ids,
        mean=result.mean,
        components=result.components,
        scores=scores,
        eigenvalues=result.eigenvalues,
        noise_var=result.noise_var,
        fitted=fitted,
    )
