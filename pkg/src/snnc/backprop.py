"""Hand-derived reverse pass through the moment-propagation graph.

Mean gradients flow through affine transposes, the ReLU mean gate and the
pooling selections.  Variance gradients flow through the squared weights
(DIAGONAL mode) or terminate at each affine layer (IDENTITY mode, where
every affine output variance is sigma^2 directly), and reach sigma at the
injection point.  Threshold gates are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .loss import (Bimodel, LossBreakdown, LossPolicy, Plain,
                   _loss_grads_batch, _loss_terms_batch, stochastic_loss)
from .mathops import conv_input_grad, conv_weight_grad, relative_error
from .moments import VAR_FLOOR, VarianceMode, pool_scatter
from .network import (Conv, Flatten, ForwardCache, FullyConnected, MeanPool,
                      ParameterSet, ReLU, forward_stochastic,
                      forward_stochastic_batch)


@dataclass
class Gradients:
    """Gradients of the (mean-over-batch) loss w.r.t. every parameter."""

    d_weights: tuple[Optional[np.ndarray], ...]
    d_biases: tuple[Optional[np.ndarray], ...]
    d_sigma: float
    d_x: np.ndarray
    d_mu: np.ndarray  # loss gradient at the output means

    def finite(self) -> bool:
        for g in (*self.d_weights, *self.d_biases, self.d_x, self.d_mu):
            if g is not None and not np.all(np.isfinite(g)):
                return False
        return bool(np.isfinite(self.d_sigma))


def backward_pass(cache: ForwardCache, params: ParameterSet,
                  dmu: np.ndarray, dvar: Optional[np.ndarray],
                  want_dx: bool = True):
    """Accumulate parameter/input gradients from output-moment gradients.

    dmu/dvar are (N, n); weight and bias gradients are summed over the
    batch, dx keeps its batch axis.  Pass dvar=None for pure mean-path
    backprop (deterministic losses).
    """
    sigma = cache.sigma
    d_weights: list[Optional[np.ndarray]] = [None] * len(params.config.layers)
    d_biases: list[Optional[np.ndarray]] = [None] * len(params.config.layers)
    d_sigma_sq = 0.0  # accumulated d(loss)/d(sigma^2)
    dm = dmu
    dv = dvar
    for i in range(len(params.config.layers) - 1, -1, -1):
        trace = cache.traces[i]
        spec = trace.spec
        if isinstance(spec, FullyConnected):
            w = params.weights[i]
            dw = np.einsum("no,ni->oi", dm, trace.in_mean, optimize=True)
            db = dm.sum(axis=0)
            dm = dm @ w
            if dv is not None:
                if i == 0:
                    d_sigma_sq += dv.sum()
                    dv = None
                elif cache.mode is VarianceMode.DIAGONAL:
                    dw += 2.0 * w * np.einsum("no,ni->oi", dv, trace.in_var,
                                              optimize=True)
                    dv = dv @ (w * w)
                else:
                    d_sigma_sq += dv.sum()
                    dv = np.zeros_like(trace.in_mean)
            d_weights[i], d_biases[i] = dw, db
            if trace.in_shape is not None:  # implicit flatten before this FC
                dm = dm.reshape((-1,) + trace.in_shape)
                if dv is not None:
                    dv = dv.reshape(dm.shape)
        elif isinstance(spec, Conv):
            w = params.weights[i]
            kh, kw = spec.kernel_h, spec.kernel_w
            in_hw = trace.in_mean.shape[2:]
            dw = conv_weight_grad(trace.in_mean, dm, kh, kw,
                                  spec.stride, spec.padding)
            db = dm.sum(axis=(0, 2, 3))
            need_dx = want_dx or i > 0
            dm_next = conv_input_grad(dm, w, in_hw, spec.stride, spec.padding) \
                if need_dx else None
            if dv is not None:
                if i == 0:
                    d_sigma_sq += dv.sum()
                    dv = None
                elif cache.mode is VarianceMode.DIAGONAL:
                    dw += 2.0 * w * conv_weight_grad(trace.in_var, dv, kh, kw,
                                                     spec.stride, spec.padding)
                    dv = conv_input_grad(dv, w * w, in_hw, spec.stride,
                                         spec.padding)
                else:
                    d_sigma_sq += dv.sum()
                    dv = None if dm_next is None else np.zeros_like(dm_next)
            d_weights[i], d_biases[i] = dw, db
            dm = dm_next
        elif isinstance(spec, ReLU):
            dm = dm * trace.mean_gate
            if dv is not None:
                dv = dv * trace.var_gate
        elif isinstance(spec, MeanPool):
            dm = pool_scatter(dm, trace.selection, spec.window, spec.stride,
                              trace.pool_hw)
            if dv is not None:
                dv = pool_scatter(dv, trace.selection, spec.window,
                                  spec.stride, trace.pool_hw)
        elif isinstance(spec, Flatten):
            dm = dm.reshape((-1,) + trace.in_shape)
            if dv is not None:
                dv = dv.reshape(dm.shape)
    # var = max(sigma^2, floor) at the injection: zero slope inside the clamp
    d_sigma = 2.0 * sigma * d_sigma_sq if sigma * sigma > VAR_FLOOR else 0.0
    dx = dm if want_dx else None
    return tuple(d_weights), tuple(d_biases), float(d_sigma), dx


def backprop(params: ParameterSet, x: np.ndarray, k: int, y,
             mode: VarianceMode = VarianceMode.DIAGONAL,
             policy: LossPolicy = Plain()
             ) -> tuple[LossBreakdown, Gradients]:
    """Loss and its gradients for a single labeled example."""
    output, cache = forward_stochastic(params, x, mode)
    breakdown = stochastic_loss(output, k, np.asarray(y), policy, params.sigma)
    dmu, dvar = _loss_grads_batch(cache.out_mean, cache.out_var,
                                  np.array([k]), np.asarray(y, dtype=np.float64)[None])
    dws, dbs, d_sigma, dx = backward_pass(cache, params, dmu, dvar)
    if isinstance(policy, Bimodel):
        d_sigma -= 2.0 * policy.alpha * params.sigma
    grads = Gradients(dws, dbs, d_sigma, dx[0], dmu[0])
    if not grads.finite():
        raise ValueError("non-finite gradients produced")
    return breakdown, grads


def batch_loss_and_grads(params: ParameterSet, xb: np.ndarray,
                         labels: np.ndarray, n_classes: int,
                         mode: VarianceMode, policy: LossPolicy,
                         want_dx: bool = False):
    """Mean loss over a batch plus batch-averaged gradients."""
    out, cache = forward_stochastic_batch(params, xb, mode)
    nb = xb.shape[0]
    targets = np.zeros((nb, n_classes))
    targets[np.arange(nb), labels] = 1.0
    mse, win, _ = _loss_terms_batch(cache.out_mean, cache.out_var, labels,
                                    targets)
    sigma_reg = policy.alpha * params.sigma ** 2 \
        if isinstance(policy, Bimodel) else 0.0
    losses = mse - win - sigma_reg
    dmu, dvar = _loss_grads_batch(cache.out_mean, cache.out_var, labels,
                                  targets)
    dws, dbs, d_sigma, dx = backward_pass(cache, params, dmu / nb, dvar / nb,
                                          want_dx=want_dx)
    if isinstance(policy, Bimodel):
        d_sigma -= 2.0 * policy.alpha * params.sigma
    grads = Gradients(dws, dbs, d_sigma, dx if dx is not None else np.zeros(0),
                      dmu.mean(axis=0))
    return float(losses.mean()), grads


@dataclass
class GroupStats:
    max_rel: float
    mean_rel: float
    count: int


@dataclass
class FdReport:
    """Per-group comparison of analytic gradients vs central differences."""

    groups: dict[str, GroupStats]
    h: float

    def max_relative_error(self) -> float:
        return max(g.max_rel for g in self.groups.values())

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error() <= tol


def central_difference(fn, value: float, h: float) -> float:
    """Two-point central difference (f(v+h) - f(v-h)) / 2h."""
    return (fn(value + h) - fn(value - h)) / (2.0 * h)


def _loss_value(params, x, k, y, mode, policy):
    output, _ = forward_stochastic(params, x, mode)
    return stochastic_loss(output, k, y, policy, params.sigma).total


def finite_difference_check(params: ParameterSet, x: np.ndarray, k: int, y,
                            mode: VarianceMode = VarianceMode.DIAGONAL,
                            policy: LossPolicy = Plain(), h: float = 1e-5,
                            max_input_pixels: int = 50) -> FdReport:
    """Central-difference check of every analytic gradient group.

    Perturbs each weight, bias, sigma, and a deterministic subsample of
    input pixels by +/- h.  Relative errors carry an absolute floor of 1e-6
    so that coordinates with (near-)zero gradient compare sanely.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    y = np.asarray(y, dtype=np.float64)
    _, grads = backprop(params, x, k, y, mode, policy)

    weights = [None if w is None else w.copy() for w in params.weights]
    biases = [None if b is None else b.copy() for b in params.biases]

    def rebuilt(sigma=None):
        return ParameterSet(params.config,
                            tuple(weights), tuple(biases),
                            params.sigma if sigma is None else sigma,
                            params.sigma_learnable)

    def central(mutate, restore):
        mutate(+h)
        up = _loss_value(rebuilt(), x, k, y, mode, policy)
        restore()
        mutate(-h)
        down = _loss_value(rebuilt(), x, k, y, mode, policy)
        restore()
        return (up - down) / (2.0 * h)

    groups: dict[str, GroupStats] = {}

    def run_group(name, pairs):
        errs = []
        for analytic, mutate, restore in pairs:
            fd = central(mutate, restore)
            errs.append(relative_error(analytic, fd))
        errs = np.asarray(errs)
        groups[name] = GroupStats(float(errs.max()), float(errs.mean()),
                                  len(errs))

    def tensor_pairs(arrs, grad_arrs):
        for arr, g in zip(arrs, grad_arrs):
            if arr is None:
                continue
            for flat in range(arr.size):
                orig = arr.flat[flat]

                def mutate(delta, arr=arr, flat=flat, orig=orig):
                    arr.flat[flat] = orig + delta

                def restore(arr=arr, flat=flat, orig=orig):
                    arr.flat[flat] = orig

                yield g.flat[flat], mutate, restore

    run_group("W", tensor_pairs(weights, grads.d_weights))
    run_group("B", tensor_pairs(biases, grads.d_biases))

    sigma_fd = central_difference(
        lambda s: _loss_value(rebuilt(sigma=s), x, k, y, mode, policy),
        params.sigma, h)
    err = relative_error(grads.d_sigma, sigma_fd)
    groups["sigma"] = GroupStats(float(err), float(err), 1)

    xw = np.asarray(x, dtype=np.float64).copy()
    idx = np.linspace(0, xw.size - 1, min(max_input_pixels, xw.size)).astype(int)
    errs = []
    for flat in idx:
        orig = xw.flat[flat]
        xw.flat[flat] = orig + h
        up = _loss_value(rebuilt(), xw, k, y, mode, policy)
        xw.flat[flat] = orig - h
        down = _loss_value(rebuilt(), xw, k, y, mode, policy)
        xw.flat[flat] = orig
        errs.append(relative_error(grads.d_x.flat[flat],
                                   (up - down) / (2.0 * h)))
    errs = np.asarray(errs)
    groups["x"] = GroupStats(float(errs.max()), float(errs.mean()), len(errs))
    return FdReport(groups, h)
