import numpy as np
import pytest

from diacal.optim import (
    SIGMOID,
    SOFTMAX,
    CrossEntropyObjective,
    OptimizationError,
    minimize_regularized_cross_entropy,
)


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e)[0] - f(x - e)[0]) / (2 * h)
    return g


def random_problem(rng, link, n=20, f=3, d=3):
    x = rng.normal(size=(n, f)) * 2
    if link == SIGMOID:
        y = (rng.random((n, d)) < 0.5).astype(float)
        n_out = None
    else:
        y = rng.integers(0, d, n)
        n_out = d
    w = rng.random(n) + 0.1 if rng.random() < 0.5 else None
    obj = CrossEntropyObjective(x, y, link, l2_c=rng.uniform(0.1, 5), sample_weight=w, n_out=n_out)
    return obj


def newton_binary(x, y, l2, iters=100):
    """Penalised binary logistic regression by Newton's method (exact Hessian).

    Minimises mean CE + l2 * ||v||^2 / 2 over weights v; bias unpenalised.
    """
    n, f = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(f + 1)
    pen = np.full(f + 1, l2)
    pen[-1] = 0.0
    for _ in range(iters):
        p = 1 / (1 + np.exp(-(xa @ theta)))
        grad = xa.T @ (p - y) / n + pen * theta
        hess = (xa * (p * (1 - p))[:, None]).T @ xa / n + np.diag(pen)
        step = np.linalg.solve(hess, grad)
        theta -= step
        if np.abs(step).max() < 1e-14:
            break
    return theta


@pytest.mark.parametrize("link", [SIGMOID, SOFTMAX])
def test_gradient_matches_finite_differences(link):
    rng = np.random.default_rng(1)
    for _ in range(50):
        obj = random_problem(rng, link)
        x = rng.normal(size=obj.size)
        g = obj(x)[1]
        num = central_difference(obj, x)
        assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12) < 1e-5


def test_intercept_only_matches_base_rate():
    rng = np.random.default_rng(2)
    y = (rng.random(5000) < 0.3).astype(float)
    res = minimize_regularized_cross_entropy(np.zeros((5000, 1)), y, SIGMOID)
    rate = y.mean()
    assert abs(res.bias[0] - np.log(rate / (1 - rate))) < 1e-3
    assert abs(res.weights[0, 0]) < 1e-8
    assert res.converged


def test_softmax_intercept_only_matches_class_frequencies():
    rng = np.random.default_rng(3)
    y = rng.choice(4, size=4000, p=[0.1, 0.2, 0.3, 0.4])
    res = minimize_regularized_cross_entropy(np.zeros((4000, 1)), y, SOFTMAX, n_out=4)
    p = np.exp(res.bias - res.bias.max())
    p /= p.sum()
    np.testing.assert_allclose(p, np.bincount(y, minlength=4) / 4000, atol=1e-4)


def test_two_class_softmax_equals_binary_logistic():
    rng = np.random.default_rng(4)
    n = 400
    x = rng.normal(size=(n, 2))
    y = (rng.random(n) < 1 / (1 + np.exp(-(1.5 * x[:, 0] - x[:, 1] + 0.3)))).astype(int)
    l2_c = 0.5
    res = minimize_regularized_cross_entropy(x, y, SOFTMAX, l2_c=l2_c, n_out=2)
    s = x @ res.weights.T + res.bias
    p_soft = np.exp(s[:, 1]) / np.exp(s).sum(axis=1)
    # symmetric penalty on both softmax rows equals half the penalty on their difference
    reg = 1.0 / (l2_c * n)
    theta = newton_binary(x, y.astype(float), reg / 2)
    p_bin = 1 / (1 + np.exp(-(np.hstack([x, np.ones((n, 1))]) @ theta)))
    np.testing.assert_allclose(p_soft, p_bin, atol=1e-6)


def test_objective_reports_penalty_and_cross_entropy():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 2))
    y = (rng.random((50, 1)) < 0.5).astype(float)
    res = minimize_regularized_cross_entropy(x, y, SIGMOID, l2_c=2.0)
    penalty = np.sum(res.weights ** 2) / (2 * 2.0 * 50)
    assert res.final_loss == pytest.approx(res.cross_entropy + penalty, rel=1e-12)


def test_convex_optimum_independent_of_start():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(300, 4))
    y = rng.integers(0, 4, 300)
    a = minimize_regularized_cross_entropy(x, y, SOFTMAX, n_out=4)
    b = minimize_regularized_cross_entropy(x, y, SOFTMAX, n_out=4,
                                           init=(rng.normal(size=(4, 4)), rng.normal(size=4)))
    assert abs(a.final_loss - b.final_loss) < 1e-8


def test_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(200, 3))
    y = (rng.random((200, 3)) < 0.4).astype(float)
    a = minimize_regularized_cross_entropy(x, y, SIGMOID)
    b = minimize_regularized_cross_entropy(x.copy(), y.copy(), SIGMOID)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_sample_weights_equal_duplication():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(40, 2))
    y = (rng.random((40, 1)) < 0.5).astype(float)
    w = rng.integers(1, 4, 40)
    a = minimize_regularized_cross_entropy(x, y, SIGMOID, sample_weight=w)
    b = minimize_regularized_cross_entropy(np.repeat(x, w, axis=0), np.repeat(y, w, axis=0), SIGMOID)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-6)
    np.testing.assert_allclose(a.bias, b.bias, atol=1e-6)


def test_single_class_targets_do_not_fail():
    x = np.random.default_rng(9).normal(size=(100, 2))
    res = minimize_regularized_cross_entropy(x, np.ones((100, 1)), SIGMOID)
    assert np.all(np.isfinite(res.weights)) and np.isfinite(res.bias).all()
    assert res.cross_entropy < 1e-3


def test_strong_regularisation_shrinks_weights():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(100, 2))
    y = (x[:, :1] > 0).astype(float)
    weak = minimize_regularized_cross_entropy(x, y, SIGMOID, l2_c=100.0)
    strong = minimize_regularized_cross_entropy(x, y, SIGMOID, l2_c=1e-4)
    assert np.abs(strong.weights).sum() < 0.1 * np.abs(weak.weights).sum()


def test_non_finite_objective_reports_iteration():
    x = np.array([[1e200], [-1e200], [1e200]])
    y = np.array([[1.0], [0.0], [0.0]])
    with pytest.raises(OptimizationError) as info:
        minimize_regularized_cross_entropy(x, y, SIGMOID, l2_c=1e300)
    assert isinstance(info.value.iteration, int)
    assert "iteration" in str(info.value)


def test_iteration_cap_flags_non_convergence():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(500, 4)) * 5
    y = rng.integers(0, 4, 500)
    res = minimize_regularized_cross_entropy(x, y, SOFTMAX, n_out=4, max_iter=1)
    assert not res.converged and res.n_iter <= 1


@pytest.mark.parametrize("kwargs", [
    dict(l2_c=0.0), dict(l2_c=-1.0), dict(max_iter=0),
])
def test_invalid_arguments(kwargs):
    with pytest.raises(ValueError):
        minimize_regularized_cross_entropy(np.zeros((3, 1)), np.zeros((3, 1)), SIGMOID, **kwargs)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        minimize_regularized_cross_entropy(np.array([[np.inf]]), np.zeros((1, 1)), SIGMOID)
    with pytest.raises(ValueError):
        minimize_regularized_cross_entropy(np.zeros((0, 1)), np.zeros((0, 1)), SIGMOID)
    with pytest.raises(ValueError):
        minimize_regularized_cross_entropy(np.zeros((3, 1)), np.array([0, 1, 5]), SOFTMAX, n_out=3)
    with pytest.raises(ValueError):
        minimize_regularized_cross_entropy(np.zeros((3, 1)), np.zeros((2, 1)), SIGMOID)
