# funcount/nonneg.py
#
# Projected Newton for batches of independent bound-constrained problems
#   minimize f_b(x_b)  subject to  x_b >= 0,
# each a smooth convex objective. Variables at zero with a positive
# gradient are held fixed; the rest take a Newton step, and the step is
# backtracked along the projection arc until an Armijo decrease holds.

import logging
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from funcount.arrays import BoolArray, FloatArray

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray, np.ndarray], np.ndarray]


class SolverResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: FloatArray = Field(description="B x P solutions, all entries >= 0.")
    objective: FloatArray = Field(description="Objective value per problem.")
    converged: BoolArray = Field(description="KKT tolerance met, per problem.")
    n_iter: int = Field(description="Outer iterations performed.")


def kkt_violation(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Largest KKT violation per row: |g| where x > 0, max(-g, 0) where x == 0."""
    viol = np.where(x > 0, np.abs(grad), np.maximum(-grad, 0.0))
    return viol.max(axis=1) if viol.size else np.zeros(x.shape[0])


def projected_newton(
    objective: Objective,
    gradient: Objective,
    hessian: Objective,
    x0,
    max_iter: int = 200,
    tol: float = 1e-6,
    armijo: float = 1e-4,
    max_backtracks: int = 60,
) -> SolverResult:
    """
    Solve a batch of nonnegativity-constrained convex problems.

    The callables take (X, rows) where X holds the current iterates of the
    problems listed in `rows`, and return per-row values (b,), gradients
    (b, P) and Hessians (b, P, P). Objective values never increase.
    """
    x = np.maximum(np.array(x0, dtype=np.float64, copy=True), 0.0)
    b, p = x.shape
    all_rows = np.arange(b)
    f = objective(x, all_rows)
    stalled = np.zeros(b, dtype=bool)
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        g = gradient(x, all_rows)
        open_rows = (kkt_violation(x, g) > tol) & ~stalled
        if not open_rows.any():
            break
        rows = np.flatnonzero(open_rows)
        xr, gr = x[rows], g[rows]

        bound = (xr <= 0) & (gr > 0)
        free = ~bound
        h = hessian(xr, rows)
        mask = free[:, :, None] & free[:, None, :]
        eye = np.broadcast_to(np.eye(p), h.shape)
        hm = np.where(mask, h, eye)
        scale = np.maximum(np.abs(np.diagonal(h, axis1=1, axis2=2)).mean(axis=1), 1.0)
        hm = hm + (1e-10 * scale)[:, None, None] * eye
        gm = np.where(free, gr, 0.0)
        try:
            d = -np.linalg.solve(hm, gm[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            d = -gm
        uphill = np.sum(d * gm, axis=1) >= 0
        d[uphill] = -gm[uphill]

        alpha = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        x_new = xr.copy()
        f_new = f[rows].copy()
        for _ in range(max_backtracks):
            todo = ~accepted
            if not todo.any():
                break
            cand = np.maximum(xr[todo] + alpha[todo, None] * d[todo], 0.0)
            f_cand = objective(cand, rows[todo])
            f_cand = np.where(np.isfinite(f_cand), f_cand, np.inf)
            f_old = f[rows[todo]]
            decrease = np.minimum(np.sum(gr[todo] * (cand - xr[todo]), axis=1), 0.0)
            ok = f_cand <= f_old + armijo * decrease
            # Near the optimum the predicted decrease drops below rounding
            # error in f; accept steps that do not raise f beyond that.
            roundoff = -decrease <= 1e-10 * (1.0 + np.abs(f_old))
            ok |= roundoff & (f_cand <= f_old + 8 * np.finfo(float).eps * (1.0 + np.abs(f_old)))
            idx = np.flatnonzero(todo)[ok]
            x_new[idx] = cand[ok]
            f_new[idx] = f_cand[ok]
            accepted[idx] = True
            alpha[todo] *= 0.5

        gain = f[rows] - f_new
        no_progress = ~accepted | (gain <= 1e-15 * (1.0 + np.abs(f[rows])))
        stalled[rows[no_progress]] = True
        x[rows[accepted]] = x_new[accepted]
        f[rows[accepted]] = f_new[accepted]

    g = gradient(x, all_rows)
    converged = kkt_violation(x, g) <= tol
    if not converged.all():
        logger.debug(
            "projected Newton: %d of %d problems above KKT tolerance after %d iterations",
            int((~converged).sum()),
            b,
            n_iter,
        )
    return SolverResult(x=x, objective=f, converged=converged, n_iter=n_iter)
