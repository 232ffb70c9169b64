# test_gfpca.py

import tempfile
from pathlib import Path

import numpy as np

from funcount.basis import trapezoid_weights
from funcount.decomposition import load_decomposition, save_decomposition
from funcount.errors import PreconditionError
from funcount.fiteval import principal_angle
from funcount.gfpca import fit_gfpca, fraction_of_variance, project_scores, smoothed_fpca
from funcount.ingest import CountCurveSet
from funcount.simulate import orthonormalize, simulate_gaussian


def _raises(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc_type.__name__}")


def _two_component_model(t=100):
    grid = np.linspace(0.0, 1.0, t)
    mean = 1.0 + 0.5 * np.sin(np.pi * grid)
    components = orthonormalize([np.sin(2 * np.pi * grid), np.cos(2 * np.pi * grid)], grid)
    return grid, mean, components


def _curves(counts, grid=None):
    counts = np.asarray(counts)
    grid = np.arange(counts.shape[1], dtype=float) if grid is None else grid
    return CountCurveSet(subject_ids=[f"s{i}" for i in range(counts.shape[0])], grid=grid, counts=counts)


def test_identical_rows_are_degenerate():
    counts = np.tile(np.array([3, 5, 8, 2, 0, 1, 4, 6, 7, 9]), (6, 1))
    decomp = fit_gfpca(_curves(counts), k=2, n_basis=8)
    assert np.allclose(decomp.eigenvalues, 0.0, atol=1e-10)
    assert np.allclose(decomp.scores, 0.0, atol=1e-8)
    assert decomp.fitted.shape == counts.shape
    assert np.allclose(decomp.fitted, counts, atol=1e-8)


def test_two_point_pca():
    grid = np.linspace(0.0, 1.0, 41)
    u = orthonormalize([np.sin(np.pi * grid)], grid)[0]
    values = np.vstack([u, -u])
    result = smoothed_fpca(values, grid, k=1)
    phi = result.components[0]
    w = trapezoid_weights(grid)
    assert abs(abs(np.sum(w * phi * u)) - 1.0) < 1e-2
    assert result.scores[0, 0] * result.scores[1, 0] < 0
    assert np.allclose(np.abs(result.scores[:, 0]), 1.0, atol=1e-2)


def test_orthonormal_components_and_centred_scores():
    grid, mean, components = _two_component_model(60)
    sim = simulate_gaussian(mean, components, [2.0, 1.0], 0.1, 80, seed=3)
    result = smoothed_fpca(sim.values, grid, k=3)
    w = trapezoid_weights(grid)
    gram = (result.components * w) @ result.components.T
    assert np.allclose(gram, np.eye(3), atol=1e-6)
    assert np.all(np.diff(result.eigenvalues) <= 1e-12)
    assert np.all(result.eigenvalues >= 0)
    assert np.max(np.abs(result.scores.mean(axis=0))) <= 1e-8


def test_recovers_component_subspace():
    grid, mean, components = _two_component_model(100)
    hits = 0
    for seed in range(5):
        sim = simulate_gaussian(mean, components, [3.0, 1.5], 0.2, 200, seed=seed)
        result = smoothed_fpca(sim.values, grid, k=2)
        if principal_angle(result.components, components, grid) < 10.0:
            hits += 1
    assert hits >= 4


def test_project_scores():
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 1.0, 30)
    base = 20 + 10 * np.sin(2 * np.pi * grid)
    counts = rng.poisson(base * rng.uniform(0.5, 1.5, size=(40, 1)))
    data = _curves(counts, grid)
    decomp = fit_gfpca(data, k=2, n_basis=10)

    assert np.allclose(project_scores(decomp, data), decomp.scores, atol=1e-8)
    mean_counts = np.expm1(decomp.mean)
    assert np.allclose(project_scores(decomp, mean_counts), 0.0, atol=1e-8)

    shifted = np.expm1(decomp.mean + 2 * np.sqrt(decomp.eigenvalues[0]) * decomp.components[0])
    scores = project_scores(decomp, shifted)[0]
    assert abs(scores[0] - 2 * np.sqrt(decomp.eigenvalues[0])) < 1e-6
    assert abs(scores[1]) < 1e-6

    other = _curves(counts[:, :20], grid[:20])
    _raises(PreconditionError, project_scores, decomp, other)


def test_k_bounds_and_variance_share():
    counts = np.random.default_rng(0).poisson(5, size=(5, 12))
    _raises(PreconditionError, fit_gfpca, _curves(counts), k=5, n_basis=6)
    _raises(PreconditionError, fit_gfpca, _curves(counts), k=0, n_basis=6)
    decomp = fit_gfpca(_curves(counts), k=3, n_basis=6)
    share = fraction_of_variance(decomp)
    assert share.shape == (3,)
    assert np.all(np.diff(share) >= -1e-12)


def test_json_round_trip_drops_fitted():
    counts = np.random.default_rng(2).poisson(8, size=(10, 15))
    decomp = fit_gfpca(_curves(counts), k=2, n_basis=6)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_decomposition(decomp, Path(tmp) / "d.json")
        loaded = load_decomposition(path)
    assert loaded.method == "GFPCA"
    assert loaded.fitted is None
    assert np.allclose(loaded.scores, decomp.scores)
    assert loaded.subject_ids == decomp.subject_ids
    assert loaded.noise_var == decomp.noise_var


def test_default_fit_centres_scores():
    counts = np.random.default_rng(7).poisson(6, size=(50, 24))
    decomp = fit_gfpca(_curves(counts), k=3, n_basis=8)
    assert np.max(np.abs(decomp.scores.mean(axis=0))) <= 1e-8
    assert np.allclose(decomp.mean, np.log1p(counts).mean(axis=0))


def test_smoothed_mean_option():
    grid = np.linspace(0.0, 1.0, 40)
    rng = np.random.default_rng(8)
    values = np.sin(2 * np.pi * grid) + rng.normal(0.0, 0.5, size=(30, 40))
    raw = smoothed_fpca(values, grid, k=2)
    smooth = smoothed_fpca(values, grid, k=2, smooth_mean=True)
    assert np.allclose(raw.mean, values.mean(axis=0))
    assert np.sum(np.diff(smooth.mean, 2) ** 2) < np.sum(np.diff(raw.mean, 2) ** 2)


def main():
    test_identical_rows_are_degenerate()
    test_two_point_pca()
    test_orthonormal_components_and_centred_scores()
    test_recovers_component_subspace()
    test_project_scores()
    test_k_bounds_and_variance_share()
    test_json_round_trip_drops_fitted()
    test_default_fit_centres_scores()
    test_smoothed_mean_option()
    print("All GFPCA tests passed.")


if __name__ == "__main__":
    main()
