# test_pfpca.py

import numpy as np

from funcount.errors import ConvergenceError, PreconditionError
from funcount.fiteval import principal_angle
from funcount.gfpca import default_basis
from funcount.ingest import CountCurveSet
from funcount.pfpca import (
    estimate_scores_poisson,
    fit_latent_curve,
    fit_pfpca,
    poisson_deviance,
    poisson_loglik,
    score_gradient,
)
from funcount.simulate import orthonormalize, simulate_poisson_fpca


def _raises(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc_type.__name__}")


def _curves(counts, grid):
    return CountCurveSet(subject_ids=[f"s{i}" for i in range(len(counts))], grid=grid, counts=counts)


# ---------- Score refit ----------

def test_score_refit_exact_level():
    phi = np.ones((1, 20))
    y = np.full(20, np.exp(2.0))
    s = estimate_scores_poisson(y, np.zeros(20), phi)
    assert abs(s[0] - 2.0) < 1e-6
    assert np.max(np.abs(score_gradient(y, np.zeros(20), phi, s))) <= 1e-6


def test_score_refit_high_intensity():
    grid = np.linspace(0.0, 1.0, 200)
    phi = orthonormalize([np.sin(2 * np.pi * grid)], grid)
    mean = np.full(grid.size, np.log(1000.0))
    rng = np.random.default_rng(11)
    y = rng.poisson(np.exp(mean + 2.0 * phi[0]))
    s = estimate_scores_poisson(y, mean, phi)
    assert abs(s[0] - 2.0) < 0.05


def _index_grid_model():
    grid = np.arange(100, dtype=float) + 0.5
    mean = np.log(10.0) + 0.5 * np.sin(2 * np.pi * grid / 100)
    components = orthonormalize([np.sin(4 * np.pi * grid / 100), np.cos(4 * np.pi * grid / 100)], grid)
    return grid, mean, components


def test_score_refit_meets_gradient_bound():
    grid, mean, components = _index_grid_model()
    sim = simulate_poisson_fpca(mean, components, [3.0, 1.5], 200, seed=12)
    for row in sim.counts:
        s = estimate_scores_poisson(row, mean, components)
        assert np.max(np.abs(score_gradient(row, mean, components, s))) <= 1e-6


def test_score_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    t = 25
    mean = rng.normal(1.0, 0.3, t)
    phi = rng.normal(0.0, 0.3, size=(2, t))
    y = rng.poisson(np.exp(mean))
    s = np.array([0.3, -0.2])
    grad = score_gradient(y, mean, phi, s)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        numeric = (poisson_loglik(y, mean + (s + e) @ phi) - poisson_loglik(y, mean + (s - e) @ phi)) / (2 * h)
        assert abs(numeric - grad[j]) <= 1e-4 * max(1.0, abs(grad[j]))


def test_score_refit_all_zero_curve_does_not_converge():
    # with y = 0 and a constant component the likelihood increases forever as s -> -inf
    _raises(ConvergenceError, estimate_scores_poisson, np.zeros(10), np.zeros(10), np.ones((1, 10)), max_iter=5)


# ---------- Deviance ----------

def test_poisson_deviance():
    assert np.allclose(poisson_deviance([[1.0, 4.0]], [[1.0, 4.0]]), 0.0)
    assert np.allclose(poisson_deviance([[0.0]], [[2.0]]), [4.0])
    assert np.allclose(poisson_deviance([[1.0]], [[np.e]]), [2 * (np.e - 2)])
    two_rows = poisson_deviance([[0.0, 1.0], [2.0, 2.0]], [[1.0, 1.0], [2.0, 2.0]])
    assert two_rows.shape == (2,)
    assert np.allclose(two_rows, [2.0, 0.0])


# ---------- Step 1 and full fit ----------

def test_latent_fit_of_constant_curve():
    grid = np.linspace(0.0, 1.0, 40)
    basis = default_basis(grid, 8)
    fit = fit_latent_curve(np.full(40, 5.0), basis, lam=1.0)
    assert fit.converged
    assert np.allclose(fit.log_intensity, np.log(5.0), atol=1e-4)

    zero = fit_latent_curve(np.zeros(40), basis, lam=1.0)
    assert np.all(np.isfinite(zero.log_intensity))


def test_constant_curves_fit_exactly():
    grid = np.linspace(0.0, 1.0, 30)
    counts = np.full((8, 30), 5)
    decomp = fit_pfpca(_curves(counts, grid), k=2, n_basis=8, smoothing=1.0)
    assert decomp.method == "PFPCA"
    assert np.allclose(decomp.mean, np.log(5.0), atol=1e-3)
    assert np.allclose(decomp.fitted, 5.0, atol=1e-2)


def test_recovers_components_and_scores():
    grid, mean, components = _index_grid_model()
    hits = 0
    for seed in range(3):
        sim = simulate_poisson_fpca(mean, components, [3.0, 1.5], 200, seed=seed)
        decomp = fit_pfpca(_curves(sim.counts, grid), k=2, n_basis=12, smoothing=1.0)
        assert decomp.scores.shape == (200, 2)
        assert np.all(decomp.fitted > 0)
        angle = principal_angle(decomp.components, components, grid)
        corr = [abs(np.corrcoef(decomp.scores[:, j], sim.scores[:, j])[0, 1]) for j in range(2)]
        if angle < 15.0 and min(corr) > 0.8:
            hits += 1
    assert hits >= 2


def test_k_bounds():
    grid = np.linspace(0.0, 1.0, 10)
    counts = np.random.default_rng(0).poisson(3, size=(4, 10))
    _raises(PreconditionError, fit_pfpca, _curves(counts, grid), k=4, n_basis=6, smoothing=1.0)


def main():
    test_score_refit_exact_level()
    test_score_refit_high_intensity()
    test_score_refit_meets_gradient_bound()
    test_score_gradient_matches_finite_differences()
    test_score_refit_all_zero_curve_does_not_converge()
    test_poisson_deviance()
    test_latent_fit_of_constant_curve()
    test_constant_curves_fit_exactly()
    test_recovers_components_and_scores()
    test_k_bounds()
    print("All PFPCA tests passed.")


if __name__ == "__main__":
    main()
