"""Propagation of a diagonal Gaussian through network transformations.

A distribution is carried as per-element (mean, variance) pairs.  Affine
layers map it exactly; the ReLU output is replaced by a Gaussian surrogate
whose mean is the mode of the rectified density and whose variance passes
through unless the unit is essentially fully censored; pooling forwards the
element with the largest mean in each region.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .mathops import conv2d, std_normal_cdf, std_normal_pdf, _windows

# Lower clamp on every propagated variance.  Keeps the "variance collapses
# to zero" censored regime representable without creating zero divisors in
# the loss, which divides by sqrt(var_i + var_k).
VAR_FLOOR = 1e-12


class VarianceMode(enum.Enum):
    """How affine layers transform variances.

    DIAGONAL propagates per-element variance through the squared weights
    (inputs treated as independent).  IDENTITY pins the variance of every
    affine output at the injected noise level sigma^2, the reading in which
    variances never depend on the weights.
    """

    IDENTITY = "identity"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class GaussianTensor:
    """Per-element mean and variance of a diagonal Gaussian."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)
        if mean.shape != var.shape:
            raise ShapeError(
                f"mean shape {mean.shape} != var shape {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("GaussianTensor elements must be finite")
        if np.any(var < VAR_FLOOR):
            raise ValueError(f"variances must be >= {VAR_FLOOR}")

    @property
    def shape(self):
        return self.mean.shape


@dataclass(frozen=True)
class SelectionMap:
    """Pooling choices: per output position, the flat index of the selected
    element inside its (window x window) region, row-major."""

    indices: np.ndarray  # int64, shape of the pooled output
    window: int
    stride: int
    input_hw: tuple[int, int]

    def in_region(self) -> bool:
        k = self.window * self.window
        return bool(np.all((self.indices >= 0) & (self.indices < k)))


def floor_var(var: np.ndarray) -> np.ndarray:
    return np.maximum(var, VAR_FLOOR)


def inject_noise(x: np.ndarray, sigma: float) -> GaussianTensor:
    """Model x + nu with nu ~ N(0, sigma^2 I): mean x, variance sigma^2."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    var = np.full_like(x, max(sigma * sigma, VAR_FLOOR))
    return GaussianTensor(x, var)


def _affine_fc(mean2, var2, weight, bias, mode, sigma_global):
    # mean2/var2: (N, F_in); weight: (F_out, F_in)
    mean_out = mean2 @ weight.T
    if bias is not None:
        mean_out = mean_out + bias[None, :]
    if mode is VarianceMode.DIAGONAL:
        var_out = floor_var(var2 @ (weight * weight).T)
    else:
        var_out = np.full_like(mean_out, max(sigma_global ** 2, VAR_FLOOR))
    return mean_out, var_out


def _affine_conv(mean4, var4, weight, bias, mode, sigma_global, stride, padding):
    mean_out = conv2d(mean4, weight, bias, stride, padding)
    if mode is VarianceMode.DIAGONAL:
        var_out = floor_var(conv2d(var4, weight * weight, None, stride, padding))
    else:
        var_out = np.full_like(mean_out, max(sigma_global ** 2, VAR_FLOOR))
    return mean_out, var_out


def propagate_affine(gt: GaussianTensor, weight, bias, mode: VarianceMode,
                     sigma_global: float = 0.0, stride: int = 1,
                     padding: int = 0) -> GaussianTensor:
    """Push a diagonal Gaussian through y = Wx + b (FC) or a convolution.

    The mean transforms exactly like the deterministic layer.  Under
    DIAGONAL the output variances are sum_j a_ji^2 var_j; under IDENTITY
    they are pinned at sigma_global^2.
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = None if bias is None else np.asarray(bias, dtype=np.float64)
    if weight.ndim == 2:
        fan_in = weight.shape[1]
        features = gt.mean.shape[-1] if gt.mean.ndim == 2 else gt.mean.size
        if features != fan_in:
            raise ShapeError(
                f"FC weight expects {fan_in} inputs, got {features}")
        mean = gt.mean if gt.mean.ndim == 2 else gt.mean.reshape(-1, fan_in)
        var = gt.var.reshape(mean.shape)
        m, v = _affine_fc(mean, var, weight, bias, mode, sigma_global)
        if gt.mean.ndim == 1:
            m, v = m[0], v[0]
        return GaussianTensor(m, v)
    if weight.ndim == 4:
        batched = gt.mean.ndim == 4
        mean = gt.mean if batched else gt.mean[None]
        var = gt.var if batched else gt.var[None]
        m, v = _affine_conv(mean, var, weight, bias, mode, sigma_global,
                            stride, padding)
        if not batched:
            m, v = m[0], v[0]
        return GaussianTensor(m, v)
    raise ShapeError(f"weight must have rank 2 or 4, got {weight.ndim}")


def _relu_moments(mean, var):
    """Rectified-Gaussian surrogate plus the backprop gate masks.

    mean_out is the mode of the rectified density (max(0, mean) across all
    regimes); var_out keeps the incoming variance unless the unit is beyond
    3 standard deviations below zero, where it collapses to the floor.
    """
    sig = np.sqrt(var)
    mean_gate = mean >= 0.0
    var_gate = mean >= -3.0 * sig
    mean_out = np.where(mean_gate, mean, 0.0)
    var_out = np.where(var_gate, var, VAR_FLOOR)
    return mean_out, var_out, mean_gate, var_gate


def propagate_relu(gt: GaussianTensor) -> GaussianTensor:
    """Rectify a diagonal Gaussian elementwise."""
    mean_out, var_out, _, _ = _relu_moments(gt.mean, gt.var)
    return GaussianTensor(mean_out, var_out)


def exact_rectified_moments(mu, sigma):
    """Exact mean and variance of max(0, Z) for Z ~ N(mu, sigma^2).

    Validation-side reference for the surrogate used in propagate_relu.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be > 0")
    z = mu / sigma
    cdf = std_normal_cdf(z)
    pdf = std_normal_pdf(z)
    mean = mu * cdf + sigma * pdf
    second = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf
    var = second - mean * mean
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


def _pool_plan(h, w, window, stride):
    if window < 1 or stride < 1:
        raise ShapeError(f"invalid pooling window/stride: {window}/{stride}")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    if (h - window) % stride or (w - window) % stride:
        raise ShapeError(
            f"pool window {window}/stride {stride} does not tile {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def _meanpool_moments(mean4, var4, window, stride):
    n, c, h, w = mean4.shape
    oh, ow = _pool_plan(h, w, window, stride)
    win_m = _windows(mean4, window, window, stride).reshape(n, c, oh, ow, -1)
    win_v = _windows(var4, window, window, stride).reshape(n, c, oh, ow, -1)
    idx = np.argmax(win_m, axis=-1)  # ties: first in row-major order
    sel = idx[..., None]
    pooled_m = np.take_along_axis(win_m, sel, axis=-1)[..., 0]
    pooled_v = np.take_along_axis(win_v, sel, axis=-1)[..., 0]
    return pooled_m, pooled_v, idx


def propagate_meanpool(gt: GaussianTensor, window: int,
                       stride: int) -> tuple[GaussianTensor, SelectionMap]:
    """Per pooling region, forward the element whose mean is largest."""
    batched = gt.mean.ndim == 4
    mean = gt.mean if batched else gt.mean[None]
    var = gt.var if batched else gt.var[None]
    if mean.ndim != 4:
        raise ShapeError(f"pooling expects (C,H,W) or (N,C,H,W), got {gt.shape}")
    pm, pv, idx = _meanpool_moments(mean, var, window, stride)
    hw = mean.shape[2:]
    if not batched:
        pm, pv, idx = pm[0], pv[0], idx[0]
    return GaussianTensor(pm, pv), SelectionMap(idx, window, stride, hw)


def pool_scatter(dpooled: np.ndarray, indices: np.ndarray, window: int,
                 stride: int, input_hw: tuple[int, int]) -> np.ndarray:
    """Route pooled-output gradients back to their selected input positions."""
    n, c, oh, ow = dpooled.shape
    h, w = input_hw
    out = np.zeros((n, c, h, w))
    rows = (np.arange(oh) * stride)[None, None, :, None] + indices // window
    cols = (np.arange(ow) * stride)[None, None, None, :] + indices % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(out, (ni, ci, rows, cols), dpooled)
    return out


def mc_forward_moments(params, x: np.ndarray, sigma: float, n_samples: int,
                       seed: int) -> GaussianTensor:
    """Monte-Carlo oracle for the analytic propagation: run the genuinely
    noisy network n_samples times and return empirical output moments."""
    from .network import sampled_output_moments  # cycle: network builds on this module
    return sampled_output_moments(params, x, sigma, n_samples, seed)
