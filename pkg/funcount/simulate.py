# funcount/simulate.py
#
# Synthetic data with known parameters. Every row draws from its own PCG64
# stream spawned from one SeedSequence, so output does not depend on how
# rows are scheduled.

import logging
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logit

from funcount.arrays import FloatArray, IntArray
from funcount.basis import trapezoid_weights
from funcount.errors import PreconditionError
from funcount.ingest import (
    CATEGORICAL_COVARIATES,
    FIVE_MINUTE_GRID,
    CountCurveSet,
    SubjectCovariates,
    write_count_curves,
    write_covariates,
)

logger = logging.getLogger(__name__)

MAX_LOG_INTENSITY = 30.0

Seed = Union[int, np.random.SeedSequence]
ScoreDraw = Callable[[np.random.Generator, int], np.ndarray]


class Simulation(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: FloatArray = Field(description="N x T curves (Gaussian), log intensities (PFPCA) or intensities (NARFD).")
    scores: FloatArray = Field(description="N x K true scores.")
    counts: Optional[IntArray] = Field(default=None, description="N x T Poisson draws, for the count generators.")


def _row_generators(seed: Seed, n: int) -> List[np.random.Generator]:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in root.spawn(n)]


def _check_fpca_inputs(mean, components, score_sds):
    mean = np.asarray(mean, dtype=np.float64)
    components = np.asarray(components, dtype=np.float64)
    components = np.zeros((0, mean.size)) if components.size == 0 else np.atleast_2d(components)
    score_sds = np.asarray(score_sds, dtype=np.float64).ravel()
    if mean.ndim != 1:
        raise PreconditionError("simulate", "mean must be a vector")
    if components.shape[1] != mean.size:
        raise PreconditionError("simulate", f"components have {components.shape[1]} points, mean has {mean.size}")
    if score_sds.size != components.shape[0]:
        raise PreconditionError("simulate", f"{score_sds.size} score SDs for {components.shape[0]} components")
    if np.any(score_sds < 0) or np.any(np.diff(score_sds) > 0):
        raise PreconditionError("simulate", "score SDs must be nonnegative and descending")
    return mean, components, score_sds


# ---------- Generators ----------

def simulate_gaussian(mean, components, score_sds, noise_sd: float, n: int, seed: Seed = 0) -> Simulation:
    """Rows mean + sum_k s_k phi_k + eps, s_k ~ N(0, sd_k^2), eps ~ N(0, noise_sd^2)."""
    mean, components, score_sds = _check_fpca_inputs(mean, components, score_sds)
    if noise_sd < 0:
        raise PreconditionError("simulate", "noise SD must be nonnegative")
    values = np.empty((n, mean.size))
    scores = np.empty((n, score_sds.size))
    for i, rng in enumerate(_row_generators(seed, n)):
        scores[i] = rng.normal(0.0, 1.0, score_sds.size) * score_sds
        values[i] = mean + scores[i] @ components + noise_sd * rng.normal(0.0, 1.0, mean.size)
    return Simulation(values=values, scores=scores)


def gaussian_to_counts(values) -> np.ndarray:
    """round(exp(v)) - 1, clipped at 0: log(Y + 1)-scale curves to counts."""
    values = np.clip(np.asarray(values, dtype=np.float64), None, MAX_LOG_INTENSITY)
    return np.clip(np.round(np.exp(values)) - 1.0, 0.0, None).astype(np.int64)


def simulate_poisson_fpca(
    mean,
    components,
    score_sds,
    n: int,
    seed: Seed = 0,
    jitter_sd: float = 0.0,
) -> Simulation:
    """
    Counts ~ Poisson(exp(mean + sum_k s_k phi_k)), s_k ~ N(0, sd_k^2).
    `jitter_sd` adds Gaussian noise inside the log intensity.
    """
    mean, components, score_sds = _check_fpca_inputs(mean, components, score_sds)
    t = mean.size
    eta = np.empty((n, t))
    counts = np.empty((n, t), dtype=np.int64)
    scores = np.empty((n, score_sds.size))
    clipped = 0
    for i, rng in enumerate(_row_generators(seed, n)):
        scores[i] = rng.normal(0.0, 1.0, score_sds.size) * score_sds
        row = mean + scores[i] @ components
        if jitter_sd > 0:
            row = row + jitter_sd * rng.normal(0.0, 1.0, t)
        clipped += int(np.sum(row > MAX_LOG_INTENSITY))
        eta[i] = np.minimum(row, MAX_LOG_INTENSITY)
        counts[i] = rng.poisson(np.exp(eta[i]))
    if clipped:
        logger.warning("Clipped %d log intensities at %.0f", clipped, MAX_LOG_INTENSITY)
    return Simulation(values=eta, scores=scores, counts=counts)


def simulate_narfd(prototypes, score_distribution: Union[np.ndarray, ScoreDraw], n: int, seed: Seed = 0) -> Simulation:
    """
    Counts ~ Poisson(sum_k s_ik p_k(t)) with nonnegative prototypes (K x T).
    `score_distribution` is an N x K array of scores or a callable
    (rng, K) -> K-vector drawing them.
    """
    prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if np.any(prototypes < 0):
        raise PreconditionError("simulate", "prototypes must be nonnegative")
    k, t = prototypes.shape
    generators = _row_generators(seed, n)

    if callable(score_distribution):
        scores = np.vstack([np.asarray(score_distribution(rng, k), dtype=np.float64) for rng in generators])
    else:
        scores = np.atleast_2d(np.asarray(score_distribution, dtype=np.float64))
    if scores.shape != (n, k):
        raise PreconditionError("simulate", f"scores must be {n} x {k}")
    if np.any(scores < 0):
        raise PreconditionError("simulate", "scores must be nonnegative")

    intensity = scores @ prototypes
    counts = np.vstack([rng.poisson(intensity[i]) for i, rng in enumerate(generators)]) if n else np.zeros(
        (0, t), dtype=np.int64
    )
    return Simulation(values=intensity, scores=scores, counts=counts)


def simulate_mortality(scores, covariate_matrix, coefficients, intercept: float, seed: Seed = 0) -> np.ndarray:
    """y_i ~ Bernoulli(logistic(intercept + [x_i, s_i]' coefficients))."""
    scores = np.asarray(scores, dtype=np.float64)
    covariates = np.asarray(covariate_matrix, dtype=np.float64)
    n = scores.shape[0] if scores.ndim == 2 else covariates.shape[0]
    scores = scores.reshape(n, -1)
    covariates = covariates.reshape(n, -1)
    predictors = np.hstack([covariates, scores])
    coefficients = np.asarray(coefficients, dtype=np.float64).ravel()
    if coefficients.size != predictors.shape[1]:
        raise PreconditionError(
            "simulate", f"{coefficients.size} coefficients for {predictors.shape[1]} covariate and score columns"
        )
    prob = expit(intercept + predictors @ coefficients)
    return np.array([int(rng.random() < prob[i]) for i, rng in enumerate(_row_generators(seed, n))], dtype=np.int64)


# ---------- Cohort ----------

def orthonormalize(curves, grid) -> np.ndarray:
    """Gram-Schmidt of the rows of `curves` under the trapezoid inner product."""
    w = trapezoid_weights(grid)
    out = []
    for row in np.atleast_2d(np.asarray(curves, dtype=np.float64)):
        v = row.copy()
        for u in out:
            v -= np.sum(w * v * u) * u
        out.append(v / np.sqrt(np.sum(w * v * v)))
    return np.vstack(out)


def diurnal_model(grid=FIVE_MINUTE_GRID):
    """Mean log intensity with a daytime plateau and two orthonormal modes (level, timing)."""
    grid = np.asarray(grid, dtype=np.float64)
    span = grid[-1] - grid[0]
    centre = grid[0] + 0.55 * span
    mean = 1.0 + 3.5 * np.exp(-(((grid - centre) / (0.2 * span)) ** 4))
    components = orthonormalize(
        [np.ones_like(grid), np.sin(2.0 * np.pi * (grid - grid[0]) / span)],
        grid,
    )
    # scale so the level mode moves log intensity by about 0.5 per SD
    score_sds = np.array([0.5, 0.3]) * np.sqrt(span)
    return mean, components, score_sds


class SimulatedCohort(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    curves: CountCurveSet = Field(description="Median-day count curves.")
    subjects: List[SubjectCovariates] = Field(description="Covariates and mortality, aligned with curves.")
    mean: FloatArray = Field(description="True mean log intensity.")
    components: FloatArray = Field(description="True components.")
    scores: FloatArray = Field(description="True PFPCA scores.")


_LEVEL_PROBS = {
    "race": (0.5, 0.2, 0.2, 0.1),
    "gender": (0.5, 0.5),
    "education": (0.2, 0.3, 0.5),
    "smoking": (0.5, 0.35, 0.15),
    "diabetes": (0.85, 0.15),
    "chf": (0.9, 0.1),
    "chd": (0.88, 0.12),
    "cancer": (0.8, 0.2),
    "stroke": (0.9, 0.1),
}


def _draw_covariates(rng: np.random.Generator) -> dict:
    weekdays = int(rng.integers(3, 6))
    row = {
        "age": float(rng.uniform(50.0, 85.0)),
        "bmi": float(np.clip(rng.normal(28.5, 5.5), 16.0, 60.0)),
        "drinks_per_week": float(rng.poisson(2.0)),
        "hdl_cholesterol": float(np.clip(rng.normal(53.0, 15.0), 20.0, 120.0)),
        "total_cholesterol": float(np.clip(rng.normal(200.0, 40.0), 100.0, 350.0)),
        "systolic_bp": float(np.clip(rng.normal(130.0, 18.0), 85.0, 220.0)),
        "n_weekdays": float(weekdays),
        "n_weekend": float(rng.integers(0, 3)),
        "raw_survey_weight": float(rng.lognormal(np.log(20000.0), 0.5)),
    }
    for name, levels in CATEGORICAL_COVARIATES.items():
        row[name] = levels[rng.choice(len(levels), p=_LEVEL_PROBS[name])]
    return row


def simulate_cohort(
    n: int,
    seed: int = 0,
    death_rate: float = 0.06,
    age_effect: float = 0.06,
    score_effect: float = 1.0,
    grid=FIVE_MINUTE_GRID,
) -> SimulatedCohort:
    """
    A cohort of n subjects: PFPCA count curves from the diurnal model,
    covariates with plausible marginals, and mortality depending on age and
    the standardized second score. The intercept is logit(death_rate).
    """
    if not 0.0 < death_rate < 1.0:
        raise PreconditionError("simulate", "death rate must lie in (0, 1)")
    logger.info("=== SIMULATE COHORT (n=%d, seed=%d) ===", n, seed)
    curve_seed, covariate_seed, outcome_seed = np.random.SeedSequence(seed).spawn(3)

    mean, components, score_sds = diurnal_model(grid)
    sim = simulate_poisson_fpca(mean, components, score_sds, n, seed=curve_seed)
    rows = [_draw_covariates(rng) for rng in _row_generators(covariate_seed, n)]

    age = np.array([r["age"] for r in rows])
    standardized = sim.scores[:, 1] / score_sds[1] if score_sds[1] > 0 else np.zeros(n)
    outcome = simulate_mortality(
        standardized[:, None],
        (age - 67.5)[:, None],
        [age_effect, score_effect],
        float(logit(death_rate)),
        seed=outcome_seed,
    )

    ids = [f"S{i + 1:05d}" for i in range(n)]
    subjects = [
        SubjectCovariates(subject_id=sid, mortality=int(y), **row) for sid, y, row in zip(ids, outcome, rows)
    ]
    curves = CountCurveSet(subject_ids=ids, grid=grid, counts=sim.counts)
    return SimulatedCohort(curves=curves, subjects=subjects, mean=mean, components=components, scores=sim.scores)


def write_cohort(cohort: SimulatedCohort, out_dir: Union[str, Path]) -> List[Path]:
    """Write accel5.csv, covariates.csv and mortality.csv in the ingest schemas."""
    out_dir = Path(out_dir)
    paths = [out_dir / "accel5.csv", out_dir / "covariates.csv", out_dir / "mortality.csv"]
    write_count_curves(cohort.curves, paths[0])
    write_covariates(cohort.subjects, paths[1], paths[2])
    return paths
