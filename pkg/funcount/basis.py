# funcount/basis.py

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from funcount.arrays import FloatArray
from funcount.errors import PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_N_BASIS = 30
DEFAULT_DEGREE = 3

# Log-spaced smoothing ladder shared by the GCV selectors.
DEFAULT_LADDER = tuple(10.0 ** np.arange(-4, 6))


# ---------- BasisSystem model ----------

class BasisSystem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: FloatArray = Field(description="Evaluation grid (T points).")
    degree: int = Field(ge=0, description="Polynomial degree of the B-splines.")
    n_basis: int = Field(ge=1, description="Number of basis functions M.")
    knots: FloatArray = Field(description="Full knot vector, boundary knots repeated degree+1 times.")
    design: FloatArray = Field(description="T x M design matrix of basis values on the grid.")
    penalty: FloatArray = Field(description="M x M integrated squared second-derivative penalty.")


def _knot_vector(lo: float, hi: float, n_basis: int, degree: int) -> np.ndarray:
    breakpoints = np.linspace(lo, hi, n_basis - degree + 1)
    return np.concatenate([np.repeat(lo, degree), breakpoints, np.repeat(hi, degree)])


def build_basis(grid, n_basis: int = DEFAULT_N_BASIS, degree: int = DEFAULT_DEGREE) -> BasisSystem:
    """
    Build a B-spline basis with equally spaced knots over [min(grid), max(grid)].

    Boundary knots are repeated degree+1 times, so the basis is a partition
    of unity on the whole interval.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if degree < 0:
        raise PreconditionError("basis", "degree must be nonnegative")
    if n_basis < degree + 1:
        raise PreconditionError("basis", f"need at least degree+1={degree + 1} basis functions, got {n_basis}")
    if grid.ndim != 1 or grid.size < 2:
        raise PreconditionError("basis", "grid needs at least two points")
    if np.any(np.diff(grid) <= 0):
        raise PreconditionError("basis", "grid must be strictly increasing")

    knots = _knot_vector(grid[0], grid[-1], n_basis, degree)
    design = BSpline.design_matrix(grid, knots, degree).toarray()

    if degree >= 2:
        penalty = _penalty_from_knots(knots, degree, n_basis)
    else:
        # Second derivative vanishes inside every knot cell.
        penalty = np.zeros((n_basis, n_basis))

    return BasisSystem(
        grid=grid,
        degree=degree,
        n_basis=n_basis,
        knots=knots,
        design=design,
        penalty=penalty,
    )


def evaluate_basis(basis: BasisSystem, points, deriv: int = 0) -> np.ndarray:
    """Evaluate every basis function (or a derivative) at `points`; returns len(points) x M."""
    points = np.asarray(points, dtype=np.float64)
    spline = BSpline(basis.knots, np.eye(basis.n_basis), basis.degree, extrapolate=False)
    if deriv:
        spline = spline.derivative(deriv)
    values = spline(points)
    return np.nan_to_num(values, nan=0.0)


def _penalty_from_knots(knots: np.ndarray, degree: int, n_basis: int) -> np.ndarray:
    # Gauss-Legendre per knot cell; the squared second derivative is a
    # polynomial of degree 2*(degree-2), integrated exactly.
    nodes, weights = np.polynomial.legendre.leggauss(degree + 1)
    second = BSpline(knots, np.eye(n_basis), degree).derivative(2)
    cells = np.unique(knots)
    penalty = np.zeros((n_basis, n_basis))
    for left, right in zip(cells[:-1], cells[1:]):
        half = 0.5 * (right - left)
        x = left + half * (nodes + 1.0)
        d2 = second(x)
        penalty += (d2.T * (weights * half)) @ d2
    return 0.5 * (penalty + penalty.T)


def second_derivative_penalty(basis: BasisSystem) -> np.ndarray:
    """Matrix P with c'Pc = integral of the squared second derivative of sum_m c_m B_m."""
    if basis.degree < 2:
        raise PreconditionError("basis", "second-derivative penalty needs degree >= 2")
    return _penalty_from_knots(basis.knots, basis.degree, basis.n_basis)


# ---------- Quadrature ----------

def trapezoid_weights(grid) -> np.ndarray:
    """Weights w with sum(w * f) equal to the trapezoid integral of f over the grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 1:
        return np.ones(1)
    gaps = np.diff(grid)
    w = np.zeros(grid.size)
    w[:-1] += gaps / 2.0
    w[1:] += gaps / 2.0
    return w


# ---------- Penalized least-squares smoothing ----------

def penalty_scale(basis: BasisSystem) -> float:
    # Puts the ladder on a scale comparable to B'B whatever the grid units.
    trace_p = np.trace(basis.penalty)
    if trace_p <= 0:
        return 1.0
    return float(np.trace(basis.design.T @ basis.design) / trace_p)


def hat_matrix(basis: BasisSystem, lam: float) -> np.ndarray:
    """T x T smoother matrix B (B'B + lam P)^-1 B' for relative smoothing weight lam."""
    btb = basis.design.T @ basis.design
    system = btb + lam * penalty_scale(basis) * basis.penalty + 1e-10 * np.eye(basis.n_basis)
    factor = cho_factor(system)
    return basis.design @ cho_solve(factor, basis.design.T)


def smooth_penalized(basis: BasisSystem, y, lam: float) -> np.ndarray:
    """Penalized spline fit of y (length T, or T x n columns) evaluated on the grid."""
    return hat_matrix(basis, lam) @ np.asarray(y, dtype=np.float64)


def select_smoothing_gcv(basis: BasisSystem, y, ladder: Optional[Sequence[float]] = None) -> float:
    """Pick the smoothing weight on `ladder` minimizing generalized cross-validation."""
    y = np.asarray(y, dtype=np.float64)
    ladder = DEFAULT_LADDER if ladder is None else ladder
    t = basis.grid.size
    best_lam, best_score = None, np.inf
    for lam in ladder:
        hat = hat_matrix(basis, lam)
        resid = y - hat @ y
        edf = np.trace(hat)
        denom = (1.0 - edf / t) ** 2
        if denom <= 0:
            continue
        score = np.sum(resid ** 2) / t / denom
        if score < best_score:
            best_lam, best_score = lam, score
    if best_lam is None:
        best_lam = ladder[-1]
    logger.debug("GCV smoothing weight %.3g", best_lam)
    return float(best_lam)
