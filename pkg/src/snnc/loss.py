"""Closed-form stochastic loss over the network's output distribution.

total = MSE(one-hot target, output means)
        - mean over wrong classes of P(Y_true > Y_wrong)
        - alpha * sigma^2                  (Bimodel policy only)

The win probabilities come from the Gaussian difference of independent
outputs: P(Y_k > Y_i) = Phi((mu_k - mu_i) / sqrt(var_k + var_i)).  Driving
the loss down therefore both fits the means and pushes the true class's
output distribution above the others.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .mathops import INV_SQRT_2PI, erf
from .moments import GaussianTensor, VAR_FLOOR

# erf saturates numerically well before this; the clamp keeps downstream
# exp() arguments bounded.
ERF_ARG_CLAMP = 8.0


@dataclass(frozen=True)
class Plain:
    pass


@dataclass(frozen=True)
class Bimodel:
    """Adds -alpha * sigma^2 to the loss, rewarding tolerated noise."""

    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"Bimodel alpha must be > 0, got {self.alpha}")


LossPolicy = Union[Plain, Bimodel]


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    win_term: float          # subtracted mean win probability
    sigma_reg: float         # subtracted alpha * sigma^2 (0 under Plain)
    total: float
    win_probabilities: np.ndarray  # P(Y_k > Y_i) per class; index k itself is 0.5


def pairwise_win_probability(mu_k: float, var_k: float, mu_i: float,
                             var_i: float) -> float:
    """P(Y_k > Y_i) for independent Gaussians Y_k, Y_i."""
    vals = np.array([mu_k, var_k, mu_i, var_i], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("win probability arguments must be finite")
    if var_k < VAR_FLOOR or var_i < VAR_FLOOR:
        raise ValueError(f"variances must be >= {VAR_FLOOR}")
    arg = (mu_k - mu_i) / np.sqrt(2.0 * (var_k + var_i))
    arg = float(np.clip(arg, -ERF_ARG_CLAMP, ERF_ARG_CLAMP))
    return 0.5 * (1.0 + erf(arg))


def _check_target(n: int, k: int, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not 0 <= k < n:
        raise ValueError(f"class index {k} out of range for {n} classes")
    if y.shape != (n,):
        raise ValueError(f"target must have shape ({n},), got {y.shape}")
    expect = np.zeros(n)
    expect[k] = 1.0
    if not np.array_equal(y, expect):
        raise ValueError("target must be one-hot at the true class")
    return y


def _win_probs(mean2: np.ndarray, var2: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """Vectorized per-example win probabilities, shape (N, n)."""
    rows = np.arange(mean2.shape[0])
    mu_k = mean2[rows, ks][:, None]
    var_k = var2[rows, ks][:, None]
    arg = (mu_k - mean2) / np.sqrt(2.0 * (var_k + var2))
    arg = np.clip(arg, -ERF_ARG_CLAMP, ERF_ARG_CLAMP)
    return 0.5 * (1.0 + erf(arg))


def _loss_terms_batch(mean2, var2, ks, targets):
    n = mean2.shape[1]
    rows = np.arange(mean2.shape[0])
    mse = np.mean((targets - mean2) ** 2, axis=1)
    p = _win_probs(mean2, var2, ks)
    win = (p.sum(axis=1) - p[rows, ks]) / (n - 1)
    return mse, win, p


def stochastic_loss(output: GaussianTensor, k: int, y, policy: LossPolicy,
                    sigma: float) -> LossBreakdown:
    """Evaluate the loss on one example's output distribution."""
    mean = np.asarray(output.mean, dtype=np.float64)
    if mean.ndim != 1:
        raise ValueError("stochastic_loss expects a single output distribution")
    n = mean.shape[0]
    y = _check_target(n, k, y)
    mse, win, p = _loss_terms_batch(mean[None], output.var[None],
                                    np.array([k]), y[None])
    sigma_reg = policy.alpha * sigma * sigma if isinstance(policy, Bimodel) else 0.0
    total = float(mse[0] - win[0] - sigma_reg)
    return LossBreakdown(float(mse[0]), float(win[0]), float(sigma_reg),
                         total, p[0])


def _loss_grads_batch(mean2, var2, ks, targets):
    """Per-example gradients of the loss w.r.t. output means and variances.

    The win-term kernel is the Gaussian density of the mean difference at
    zero: g_i = exp(-d_i^2 / (2 s_i)) / ((n-1) sqrt(2 pi s_i)) with
    d_i = mu_k - mu_i and s_i = var_i + var_k.
    """
    n = mean2.shape[1]
    rows = np.arange(mean2.shape[0])
    mu_k = mean2[rows, ks][:, None]
    var_k = var2[rows, ks][:, None]
    d = mu_k - mean2
    s = var_k + var2
    kernel = INV_SQRT_2PI * np.exp(-0.5 * d * d / s) / ((n - 1) * np.sqrt(s))
    kernel[rows, ks] = 0.0

    dmu = (2.0 / n) * (mean2 - targets) + kernel
    dmu[rows, ks] -= kernel.sum(axis=1)  # own kernel entry is zero
    # d/dvar of -Phi(d/sqrt(s)): the same kernel times d / (2 s)
    dvar = kernel * d / (2.0 * s)
    dvar[rows, ks] = dvar.sum(axis=1)
    return dmu, dvar


def loss_grad_output(output: GaussianTensor, k: int, y
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. the output means and variances."""
    mean = np.asarray(output.mean, dtype=np.float64)
    n = mean.shape[0]
    y = _check_target(n, k, y)
    dmu, dvar = _loss_grads_batch(mean[None], output.var[None],
                                  np.array([k]), y[None])
    return dmu[0], dvar[0]
