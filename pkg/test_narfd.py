# test_narfd.py

import itertools

import numpy as np

from funcount.basis import build_basis, trapezoid_weights
from funcount.errors import PreconditionError
from funcount.fiteval import principal_angle
from funcount.ingest import CountCurveSet
from funcount.narfd import (
    fit_narfd,
    narfd_gradient,
    narfd_objective,
    run_narfd,
    update_all_scores,
    update_prototypes,
    update_scores_nnls_poisson,
)
from funcount.nonneg import kkt_violation, projected_newton
from funcount.simulate import simulate_narfd


def _raises(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc_type.__name__}")


def _curves(counts, grid=None):
    counts = np.asarray(counts)
    grid = np.linspace(0.0, 1.0, counts.shape[1]) if grid is None else grid
    return CountCurveSet(subject_ids=[f"s{i}" for i in range(counts.shape[0])], grid=grid, counts=counts)


def _loglik(y, mu):
    mu = np.maximum(mu, 1e-10)
    return float(np.sum(y * np.log(mu) - mu))


# ---------- Score half-step ----------

def test_single_flat_prototype_gives_mean():
    y = np.array([2.0, 0.0, 1.0, 3.0, 4.0])
    s = update_scores_nnls_poisson(y, np.ones((5, 1)))
    assert abs(s[0] - y.mean()) < 1e-5


def test_zero_curve_gives_zero_scores():
    prototypes = np.abs(np.random.default_rng(0).normal(size=(6, 2))) + 0.1
    assert np.allclose(update_scores_nnls_poisson(np.zeros(6), prototypes), 0.0)


def test_two_prototypes_match_grid_search():
    y = np.array([2.0, 0.0, 1.0, 3.0])
    prototypes = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    s = update_scores_nnls_poisson(y, prototypes)
    # disjoint supports: each score is the mean of its block
    assert np.allclose(s, [1.0, 2.0], atol=1e-5)

    overlap = np.array([[1.0, 0.2], [0.8, 0.4], [0.3, 1.0], [0.1, 0.9]])
    s = update_scores_nnls_poisson(y, overlap)
    grid = np.linspace(0.0, 4.0, 201)
    best = max(itertools.product(grid, grid), key=lambda ab: _loglik(y, overlap @ np.array(ab)))
    assert _loglik(y, overlap @ s) >= _loglik(y, overlap @ np.array(best)) - 1e-8
    assert np.all(s >= 0)


def test_batched_scores_match_single_rows():
    rng = np.random.default_rng(3)
    prototypes = rng.uniform(0.2, 2.0, size=(15, 3))
    counts = rng.poisson(prototypes @ rng.uniform(0.0, 3.0, size=(3, 8))).T
    together = update_all_scores(counts, prototypes)
    threaded = update_all_scores(counts, prototypes, threads=3)
    single = np.vstack([update_scores_nnls_poisson(row, prototypes) for row in counts])
    assert np.allclose(together, single, atol=1e-6)
    assert np.allclose(threaded, together, atol=1e-10)
    _raises(PreconditionError, update_all_scores, counts, -prototypes)


# ---------- Prototype half-step ----------

def test_zero_scores_give_zero_prototypes():
    grid = np.linspace(0.0, 1.0, 12)
    basis = build_basis(grid, n_basis=6)
    counts = np.random.default_rng(1).poisson(3, size=(4, 12))
    scores = np.array([[1.0, 0.0], [2.0, 0.0], [0.5, 0.0], [1.5, 0.0]])
    Phi = update_prototypes(counts, scores, basis, lam=1.0)
    assert np.allclose(Phi[:, 1], 0.0)
    assert np.all(Phi >= 0)
    assert np.allclose(update_prototypes(counts, np.zeros((4, 2)), basis, lam=1.0), 0.0)


def test_piecewise_constant_prototype_is_bin_mean():
    grid = np.array([0.1, 0.4, 0.6, 0.9])
    basis = build_basis(grid, n_basis=2, degree=0)
    counts = np.array([[1, 3, 5, 7], [3, 5, 7, 9]])
    Phi = update_prototypes(counts, np.ones((2, 1)), basis, lam=0.0)
    assert np.allclose(Phi[:, 0], [3.0, 7.0], atol=1e-5)


def test_heavy_penalty_flattens_prototype():
    grid = np.linspace(0.0, 1.0, 40)
    basis = build_basis(grid, n_basis=10)
    counts = np.random.default_rng(5).poisson(5 + 4 * np.sin(2 * np.pi * grid), size=(20, 40))
    scores = np.ones((20, 1))
    rough = update_prototypes(counts, scores, basis, lam=0.0)
    smooth = update_prototypes(counts, scores, basis, lam=1e8)
    quad_rough = rough[:, 0] @ basis.penalty @ rough[:, 0]
    quad_smooth = smooth[:, 0] @ basis.penalty @ smooth[:, 0]
    assert quad_smooth < 1e-3
    assert quad_smooth < quad_rough
    assert np.all(smooth >= 0)


def test_unused_prototype_keeps_its_start():
    grid = np.linspace(0.0, 1.0, 12)
    basis = build_basis(grid, n_basis=6)
    counts = np.random.default_rng(1).poisson(3, size=(4, 12))
    scores = np.array([[1.0, 0.0], [2.0, 0.0], [0.5, 0.0], [1.5, 0.0]])
    start = np.full((6, 2), 0.7)
    Phi = update_prototypes(counts, scores, basis, lam=1.0, start=start)
    assert np.allclose(Phi[:, 1], 0.7)
    assert not np.allclose(Phi[:, 0], 0.7)


# ---------- Objective and solver ----------

def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    grid = np.linspace(0.0, 1.0, 20)
    basis = build_basis(grid, n_basis=6)
    Phi = rng.uniform(0.5, 1.5, size=(6, 2))
    scores = rng.uniform(0.5, 1.5, size=(5, 2))
    counts = rng.poisson(scores @ (basis.design @ Phi).T)
    lam = 0.3
    grad_phi, grad_scores = narfd_gradient(counts, basis.design, Phi, scores, basis.penalty, lam)

    def f(P, S):
        return narfd_objective(counts, basis.design, P, S, basis.penalty, lam)

    h = 1e-6
    for i, j in [(0, 0), (3, 1), (5, 0)]:
        e = np.zeros_like(Phi)
        e[i, j] = h
        numeric = (f(Phi + e, scores) - f(Phi - e, scores)) / (2 * h)
        assert abs(numeric - grad_phi[i, j]) <= 1e-4 * max(1.0, abs(numeric))
    for i, j in [(0, 1), (4, 0)]:
        e = np.zeros_like(scores)
        e[i, j] = h
        numeric = (f(Phi, scores + e) - f(Phi, scores - e)) / (2 * h)
        assert abs(numeric - grad_scores[i, j]) <= 1e-4 * max(1.0, abs(numeric))


def test_projected_newton_meets_kkt():
    # convex quadratics whose unconstrained minimizers are partly negative
    targets = np.array([[1.0, -2.0, 0.5], [-1.0, -1.0, 3.0]])

    def objective(x, rows):
        return 0.5 * np.sum((x - targets[rows]) ** 2, axis=1)

    def gradient(x, rows):
        return x - targets[rows]

    def hessian(x, rows):
        return np.broadcast_to(np.eye(3), (len(rows), 3, 3)).copy()

    result = projected_newton(objective, gradient, hessian, np.ones((2, 3)))
    assert np.allclose(result.x, np.maximum(targets, 0.0))
    assert result.converged.all()
    assert np.all(kkt_violation(result.x, gradient(result.x, np.arange(2))) <= 1e-6)


# ---------- Alternating fit ----------

def test_objective_trace_is_monotone():
    grid = np.linspace(0.0, 1.0, 30)
    basis = build_basis(grid, n_basis=8)
    prototypes = np.vstack([1 + np.sin(np.pi * grid) ** 2, 1 + np.cos(np.pi * grid) ** 2]) * 3
    sim = simulate_narfd(prototypes, lambda rng, k: rng.uniform(0.2, 1.5, k), 30, seed=4)
    state = run_narfd(_curves(sim.counts, grid), 2, basis, lam=1.0, max_iter=30, seed=1)
    trace = np.asarray(state.objective_trace)
    assert np.all(np.diff(trace) <= 1e-8 * (1.0 + np.abs(trace[:-1])))
    assert np.all(state.Phi >= 0) and np.all(state.scores >= 0)


def test_all_zero_data():
    grid = np.linspace(0.0, 1.0, 10)
    decomp = fit_narfd(_curves(np.zeros((5, 10), dtype=int), grid), k=2, lam=1.0, n_basis=6)
    assert np.allclose(decomp.fitted, 0.0)
    assert np.allclose(decomp.scores, 0.0)
    assert decomp.converged
    assert decomp.mean is None


def test_rank_one_recovery():
    grid = np.linspace(0.0, 1.0, 100)
    shape = 5.0 + 3.0 * np.sin(2 * np.pi * grid)
    draws = np.random.default_rng(8).integers(1, 6, size=(100, 1)).astype(float)
    sim = simulate_narfd(shape[None, :], draws, 100, seed=8)
    decomp = fit_narfd(_curves(sim.counts, grid), k=1, lam=1e-3, n_basis=12)
    w = trapezoid_weights(grid)
    assert abs(np.sum(w * decomp.components[0]) - 1.0) < 1e-8
    truth = shape / np.sum(w * shape)
    assert np.max(np.abs(decomp.components[0] - truth) / truth) < 0.10
    assert principal_angle(decomp.components, shape[None, :], grid) < 5.0
    assert np.mean(np.abs(decomp.fitted - sim.values)) < np.mean(np.abs(sim.counts - sim.values))


def _bump(grid, lo, hi):
    inside = (grid >= lo) & (grid <= hi)
    return np.where(inside, 10.0 * np.sin(np.pi * (grid - lo) / (hi - lo)) ** 2, 0.0)


def test_disjoint_bumps_split_into_two_prototypes():
    grid = np.linspace(0.0, 1.0, 100)
    supports = [(grid <= 0.4), (grid >= 0.6)]
    prototypes = np.vstack([_bump(grid, 0.0, 0.4), _bump(grid, 0.6, 1.0)])
    w = trapezoid_weights(grid)
    hits = 0
    for seed in range(3):
        sim = simulate_narfd(prototypes, lambda rng, k: rng.uniform(0.5, 2.0, k), 100, seed=seed)
        decomp = fit_narfd(_curves(sim.counts, grid), k=2, lam=1e-3, n_basis=20, seed=seed)
        shares = np.array([[np.sum(w * comp * mask) for mask in supports] for comp in decomp.components])
        assert np.all(decomp.scores.sum(axis=0) > 0)
        dominant = shares.argmax(axis=1)
        if np.all(shares.max(axis=1) > 0.8) and set(dominant) == {0, 1}:
            hits += 1
    assert hits >= 2


def main():
    test_single_flat_prototype_gives_mean()
    test_zero_curve_gives_zero_scores()
    test_two_prototypes_match_grid_search()
    test_batched_scores_match_single_rows()
    test_zero_scores_give_zero_prototypes()
    test_piecewise_constant_prototype_is_bin_mean()
    test_heavy_penalty_flattens_prototype()
    test_unused_prototype_keeps_its_start()
    test_gradient_matches_finite_differences()
    test_projected_newton_meets_kkt()
    test_objective_trace_is_monotone()
    test_all_zero_data()
    test_rank_one_recovery()
    test_disjoint_bumps_split_into_two_prototypes()
    print("All NARFD tests passed.")


if __name__ == "__main__":
    main()
