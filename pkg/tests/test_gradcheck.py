import numpy as np
import pytest

from headpose import gradcheck as G


def test_numerical_gradient_on_known_function(rng):
    a = rng.normal(size=(5, 5))

    def f(x):
        return float(np.sin(x) @ a @ np.cos(x))

    def grad(x):
        return np.cos(x) * (a @ np.cos(x)) - np.sin(x) * (a.T @ np.sin(x))

    x = rng.normal(size=5)
    np.testing.assert_allclose(G.numerical_gradient(f, x), grad(x), rtol=1e-8, atol=1e-10)
    batched = G.numerical_gradient_batched(lambda xs: np.array([f(r) for r in xs]), x, chunk=2)
    np.testing.assert_allclose(batched, G.numerical_gradient(f, x), rtol=0, atol=0)


def test_relative_error_floor():
    # below the absolute floor the error is measured against 1e-3
    np.testing.assert_allclose(G.relative_error(np.array([2e-8]), np.array([0.0])), [2e-5])
    np.testing.assert_allclose(G.relative_error(np.array([1.0001]), np.array([1.0])), [1e-4], rtol=1e-9)


def test_detects_a_wrong_gradient(rng):
    x = rng.normal(size=4)
    err = G.relative_error(2 * x * 1.001, G.numerical_gradient(lambda v: float(v @ v), x))
    assert err.max() > G.RTOL


@pytest.mark.parametrize("name", sorted(G.CASES))
def test_case_passes_at_a_few_points(name):
    res = G.check_case(name, points=5, seed=7)
    assert res.passed, f"{name}: {res.max_rel_error:.3e}"
    assert res.points == 5


def test_fit_objective_gradient(model, rng):
    from headpose.facemodel import Pose, landmarks68
    from headpose.fitting import FitProblem, GaussianMixture, fit_objective, gmm_fit, pack
    from headpose.geometry import from_euler

    mix = gmm_fit(rng.normal(size=(200, 50)), k=3, seed=1).mixture
    for _ in range(5):
        pose = Pose(from_euler(*rng.uniform(-30, 30, 3)), *rng.uniform(-0.1, 0.1, 2), rng.uniform(0.4, 0.6))
        lm = landmarks68(model, rng.normal(size=50), pose)[:, :2] + 0.01 * rng.normal(size=(68, 2))
        for prior in (GaussianMixture.standard(), mix):
            prob = FitProblem(lm, rng.uniform(0, 1, 68), Pose(from_euler(5, 0, 0)), 0.7, prior, model)
            x = pack(Pose(from_euler(*rng.uniform(-20, 20, 3)), 0.05, -0.05, rng.uniform(0.3, 0.7)), rng.normal(size=50))
            _, g = fit_objective(x, prob)
            num = G.numerical_gradient(lambda v: fit_objective(v, prob)[0], x)
            assert G.relative_error(g, num).max() < G.RTOL
