"""L2-regularized logistic / softmax regression fitted with L-BFGS.

The objective is the weighted mean cross-entropy over frames plus
``||W||_F^2 / (2 * l2_c * n_eff)`` where ``n_eff`` is the total frame weight.
This is the conventional ``C`` parameterisation (``C * sum(loss) + ||W||^2 / 2``)
divided by ``C * n_eff``; biases are not penalised.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .core import DiacalError

log = logging.getLogger(__name__)

SIGMOID = "elementwise_sigmoid"
SOFTMAX = "softmax"
LINKS = (SIGMOID, SOFTMAX)

GRAD_TOL = 1e-6


class OptimizationError(DiacalError, RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class OptimizationResult:
    weights: np.ndarray  # D x F
    bias: np.ndarray  # D
    final_loss: float  # full objective, penalty included
    cross_entropy: float  # data term only
    converged: bool
    n_iter: int
    grad_norm: float


def _prepare_targets(targets, link: str, n: int, n_out: int | None):
    targets = np.asarray(targets)
    if link == SOFTMAX:
        if targets.ndim == 2 and targets.shape[1] > 1:
            if n_out is not None and targets.shape[1] != n_out:
                raise ValueError("one-hot targets do not match the number of classes")
            onehot = targets.astype(np.float64)
        else:
            idx = targets.reshape(-1).astype(np.int64)
            k = n_out if n_out is not None else int(idx.max()) + 1
            if idx.size and (idx.min() < 0 or idx.max() >= k):
                raise ValueError("class index out of range")
            onehot = np.zeros((idx.size, k))
            onehot[np.arange(idx.size), idx] = 1.0
    else:
        onehot = targets.astype(np.float64)
        if onehot.ndim == 1:
            onehot = onehot[:, None]
    if onehot.shape[0] != n:
        raise ValueError(f"{onehot.shape[0]} target rows for {n} feature rows")
    return onehot


class CrossEntropyObjective:
    """Regularized cross-entropy and its analytic gradient.

    Parameters are packed as ``[W.ravel(), b]`` with ``W`` of shape
    ``(n_out, n_features)``.
    """

    def __init__(self, features, targets, link: str, l2_c: float = 1.0,
                 sample_weight=None, n_out: int | None = None):
        if link not in LINKS:
            raise ValueError(f"unknown link {link!r}")
        if not l2_c > 0:
            raise ValueError("l2_c must be positive")
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0:
            raise ValueError("empty training set")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        # stored transposed (features x frames): reductions over the few
        # output columns are much faster along the leading axis
        self.xt = np.ascontiguousarray(x.T)
        self.link = link
        self.yt = np.ascontiguousarray(_prepare_targets(targets, link, x.shape[0], n_out).T)
        if sample_weight is None:
            w = np.ones(x.shape[0])
        else:
            w = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
            if w.shape[0] != x.shape[0] or np.any(w < 0):
                raise ValueError("sample weights must be non-negative, one per row")
        self.total_weight = float(w.sum())
        if not self.total_weight > 0:
            raise ValueError("sample weights sum to zero")
        self.w = w / self.total_weight
        self.reg = 1.0 / (l2_c * self.total_weight)
        self.n_out = self.yt.shape[0]
        self.n_features = x.shape[1]

    @property
    def size(self) -> int:
        return self.n_out * (self.n_features + 1)

    def unpack(self, params):
        nw = self.n_out * self.n_features
        return params[:nw].reshape(self.n_out, self.n_features), params[nw:]

    @staticmethod
    def pack(weights, bias):
        return np.concatenate([np.asarray(weights, dtype=np.float64).ravel(),
                               np.asarray(bias, dtype=np.float64).ravel()])

    def scores(self, params):
        """N x n_out linear scores."""
        return self._scores_t(params).T

    def _scores_t(self, params):
        weights, bias = self.unpack(params)
        return weights @ self.xt + bias[:, None]

    def _loss_terms(self, s):
        """Per-frame cross-entropy and predicted probabilities for n_out x N scores."""
        if self.link == SIGMOID:
            e = np.exp(-np.abs(s))
            per_row = (np.maximum(s, 0.0) + np.log1p(e) - self.yt * s).sum(axis=0)
            prob = np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        else:
            top = s.max(axis=0)
            e = np.exp(s - top)
            total = e.sum(axis=0)
            per_row = top + np.log(total) - (self.yt * s).sum(axis=0)
            prob = e / total
        return per_row, prob

    def cross_entropy(self, params) -> float:
        per_row, _ = self._loss_terms(self._scores_t(params))
        return float(per_row @ self.w)

    def __call__(self, params):
        weights, _ = self.unpack(params)
        per_row, prob = self._loss_terms(self._scores_t(params))
        loss = float(per_row @ self.w) + 0.5 * self.reg * float(np.sum(weights * weights))
        resid = (prob - self.yt) * self.w
        grad_w = resid @ self.xt.T + self.reg * weights
        grad_b = resid.sum(axis=1)
        return loss, self.pack(grad_w, grad_b)


def minimize_regularized_cross_entropy(features, targets, link: str, l2_c: float = 1.0,
                                       max_iter: int = 1000, sample_weight=None,
                                       n_out: int | None = None, init=None) -> OptimizationResult:
    """Fit ``link(W x + b)`` to targets by L-BFGS.

    Parameters
    ----------
    features : (N, F) array
    targets : (N, D) binary array for the sigmoid link; class indices (N,)
        or one-hot (N, K) for softmax.
    link : ``"elementwise_sigmoid"`` or ``"softmax"``
    l2_c : inverse regularization strength.
    init : optional ``(weights, bias)`` starting point; zeros otherwise.

    Returns
    -------
    OptimizationResult
        ``converged`` is set when the gradient infinity-norm falls below 1e-6.

    Raises
    ------
    OptimizationError
        If the objective becomes non-finite.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    objective = CrossEntropyObjective(features, targets, link, l2_c, sample_weight, n_out)
    if init is None:
        x0 = np.zeros(objective.size)
    else:
        x0 = objective.pack(*init)
        if x0.size != objective.size:
            raise ValueError("initial parameters have the wrong size")

    state = {"iter": 0}

    def fun(params):
        loss, grad = objective(params)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise OptimizationError("non-finite cross-entropy", state["iter"])
        return loss, grad

    def callback(_params):
        state["iter"] += 1

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": int(max_iter), "gtol": 1e-10, "ftol": 1e-15, "maxcor": 20},
    )
    loss, grad = objective(res.x)
    grad_norm = float(np.abs(grad).max())
    weights, bias = objective.unpack(res.x)
    converged = grad_norm < GRAD_TOL
    if not converged:
        log.warning("L-BFGS stopped after %d iterations with gradient norm %.3g (%s)",
                    res.nit, grad_norm, res.message)
    return OptimizationResult(
        weights=weights.copy(),
        bias=bias.copy(),
        final_loss=float(loss),
        cross_entropy=objective.cross_entropy(res.x),
        converged=converged,
        n_iter=int(res.nit),
        grad_norm=grad_norm,
    )
