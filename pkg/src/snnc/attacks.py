"""L-infinity attacks against the expectation model, a noise-aware
single-step attack that differentiates the stochastic loss at the
defender's noise level, and majority-vote randomized inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ShapeError
from .backprop import backward_pass
from .data import Dataset
from .loss import _loss_grads_batch
from .mathops import SeededRng
from .moments import VarianceMode
from .network import (ParameterSet, forward_expectation_batch,
                      forward_stochastic_batch, sampled_logits)
from .train import cross_entropy_and_grad


@dataclass(frozen=True)
class AttackConfig:
    """Projected signed-gradient attack settings (pixel units on [0, 1])."""

    eps: float
    step_size: float
    iterations: int = 40
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @classmethod
    def pgd_default(cls, eps: float, seed: int = 0) -> "AttackConfig":
        return cls(eps=eps, step_size=max(eps / 10.0, 1e-12), iterations=40,
                   random_start=True, seed=seed)


@dataclass(frozen=True)
class Expectation:
    """Inference with the deterministic expectation model."""


@dataclass(frozen=True)
class Randomized:
    """Inference by majority vote over noisy forward passes."""

    sigma: float
    votes: int = 100


InferenceMode = Union[Expectation, Randomized]


def _check_images(params: ParameterSet, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == params.config.input_shape
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[1:] != params.config.input_shape:
        raise ShapeError(f"input shape {x.shape} incompatible with model "
                         f"input {params.config.input_shape}")
    return xb, single


def ce_input_grad(params: ParameterSet, xb: np.ndarray,
                  labels: np.ndarray) -> np.ndarray:
    """Per-example gradient of softmax cross-entropy w.r.t. the input."""
    logits, cache = forward_expectation_batch(params, xb, with_cache=True)
    _, dlogits = cross_entropy_and_grad(logits, labels)
    _, _, _, dx = backward_pass(cache, params, dlogits, None, want_dx=True)
    return dx


def stochastic_input_grad(params: ParameterSet, xb: np.ndarray,
                          labels: np.ndarray, sigma: float,
                          mode: VarianceMode = VarianceMode.DIAGONAL
                          ) -> np.ndarray:
    """Per-example input gradient of the stochastic loss at noise level sigma."""
    noisy = params.with_sigma(sigma)
    _, cache = forward_stochastic_batch(noisy, xb, mode)
    nb = xb.shape[0]
    n = params.config.n_classes
    targets = np.zeros((nb, n))
    targets[np.arange(nb), labels] = 1.0
    dmu, dvar = _loss_grads_batch(cache.out_mean, cache.out_var, labels,
                                  targets)
    _, _, _, dx = backward_pass(cache, noisy, dmu, dvar, want_dx=True)
    return dx


def fgsm_batch(params: ParameterSet, xb: np.ndarray, labels: np.ndarray,
               eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if eps == 0:
        return xb.copy()
    grad = ce_input_grad(params, xb, labels)
    return np.clip(xb + eps * np.sign(grad), 0.0, 1.0)


def fgsm(params: ParameterSet, x: np.ndarray, y_label: int,
         eps: float) -> np.ndarray:
    """One signed-gradient step of size eps against the expectation model."""
    xb, single = _check_images(params, x)
    adv = fgsm_batch(params, xb, np.array([int(y_label)] * xb.shape[0]), eps)
    return adv[0] if single else adv


def pgd_batch(params: ParameterSet, xb: np.ndarray, labels: np.ndarray,
              cfg: AttackConfig, step_seed: int = 0) -> np.ndarray:
    if cfg.eps == 0:
        return xb.copy()
    lo = np.clip(xb - cfg.eps, 0.0, 1.0)
    hi = np.clip(xb + cfg.eps, 0.0, 1.0)
    if cfg.random_start:
        gen = SeededRng(cfg.seed, 0).substream(step_seed % (2 ** 19)).generator()
        adv = np.clip(xb + gen.uniform(-cfg.eps, cfg.eps, size=xb.shape),
                      lo, hi)
    else:
        adv = xb.copy()
    for _ in range(cfg.iterations):
        grad = ce_input_grad(params, adv, labels)
        adv = np.clip(adv + cfg.step_size * np.sign(grad), lo, hi)
    return adv


def pgd(params: ParameterSet, x: np.ndarray, y_label: int,
        cfg: AttackConfig) -> np.ndarray:
    """Iterative projected signed-gradient attack on the expectation model."""
    xb, single = _check_images(params, x)
    adv = pgd_batch(params, xb, np.array([int(y_label)] * xb.shape[0]), cfg)
    return adv[0] if single else adv


def adaptive_attack_batch(params: ParameterSet, sigma: float, xb: np.ndarray,
                          labels: np.ndarray, eps: float,
                          mode: VarianceMode = VarianceMode.DIAGONAL
                          ) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if eps == 0:
        return xb.copy()
    grad = stochastic_input_grad(params, xb, labels, sigma, mode)
    return np.clip(xb + eps * np.sign(grad), 0.0, 1.0)


def adaptive_attack(params: ParameterSet, sigma: float, x: np.ndarray,
                    y_onehot, k: int, eps: float,
                    mode: VarianceMode = VarianceMode.DIAGONAL) -> np.ndarray:
    """Single-step attack along the sign of the stochastic loss's input
    gradient, evaluated at the defender's noise level sigma."""
    xb, single = _check_images(params, x)
    y = np.asarray(y_onehot, dtype=np.float64)
    expect = np.zeros(params.config.n_classes)
    if not 0 <= k < params.config.n_classes:
        raise ValueError(f"class index {k} out of range")
    expect[k] = 1.0
    if y.shape != expect.shape or not np.array_equal(y, expect):
        raise ValueError("y_onehot must be one-hot at class k")
    adv = adaptive_attack_batch(params, sigma, xb,
                                np.array([int(k)] * xb.shape[0]), eps, mode)
    return adv[0] if single else adv


def randomized_predict(params: ParameterSet, sigma: float, x: np.ndarray,
                       m: int, seed: int) -> tuple[int, np.ndarray]:
    """Majority vote over m noisy forward passes; ties go to the lowest
    class index.  Returns (label, vote histogram)."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    n = params.config.n_classes
    votes = np.zeros(n, dtype=np.int64)
    for logits in sampled_logits(params, x, sigma, m, SeededRng(seed)):
        votes += np.bincount(np.argmax(logits, axis=1), minlength=n)
    return int(np.argmax(votes)), votes


def _randomized_labels(params: ParameterSet, sigma: float, xb: np.ndarray,
                       m: int, seed: int) -> np.ndarray:
    """Vectorized randomized inference over a batch of inputs."""
    from .network import _first_preactivation, _deterministic_tail
    n = params.config.n_classes
    nb = xb.shape[0]
    pre = np.stack([_first_preactivation(params, xi) for xi in xb])
    gen = SeededRng(seed).generator()
    votes = np.zeros((nb, n), dtype=np.int64)
    for _ in range(m):
        z = pre + gen.normal(0.0, sigma, size=pre.shape)
        logits = _deterministic_tail(params, z)
        picks = np.argmax(logits, axis=1)
        votes[np.arange(nb), picks] += 1
    return np.argmax(votes, axis=1)


def _accuracy_under(params: ParameterSet, xb: np.ndarray, labels: np.ndarray,
                    inference: InferenceMode, seed: int) -> float:
    if isinstance(inference, Expectation):
        logits = forward_expectation_batch(params, xb)
        pred = np.argmax(logits, axis=1)
    else:
        pred = _randomized_labels(params, inference.sigma, xb,
                                  inference.votes, seed)
    return float(np.mean(pred == labels))


@dataclass
class EvalCurve:
    """(eps, accuracy) pairs for one attack/inference combination."""

    points: list[tuple[float, float]]
    attack: str
    inference: str
    sigma: float
    seed: int

    def accuracies(self) -> np.ndarray:
        return np.array([a for _, a in self.points])

    def at(self, eps: float) -> float:
        for e, a in self.points:
            if e == eps:
                return a
        raise KeyError(f"eps {eps} not on curve")

    def rows(self):
        return [(e, a, self.attack, self.inference, self.sigma, self.seed)
                for e, a in self.points]


def robustness_curve(params: ParameterSet, dataset: Dataset, attack: str,
                     eps_grid, inference: InferenceMode = Expectation(), *,
                     iterations: int = 40, step_frac: float = 0.1,
                     random_start: bool = True, seed: int = 0,
                     attack_sigma: Optional[float] = None,
                     mode: VarianceMode = VarianceMode.DIAGONAL,
                     batch_size: int = 256) -> EvalCurve:
    """Attack every example at each eps and measure accuracy under the
    chosen inference mode.  Fully seeded."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid or any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps grid must be nonempty and strictly increasing")
    if attack not in ("fgsm", "pgd", "adaptive"):
        raise ValueError(f"unknown attack {attack!r}")
    sig = params.sigma if attack_sigma is None else float(attack_sigma)

    points = []
    for gi, eps in enumerate(eps_grid):
        correct = 0
        for start in range(0, len(dataset), batch_size):
            xb = dataset.images[start:start + batch_size]
            yb = dataset.labels[start:start + batch_size]
            if eps == 0:
                adv = xb
            elif attack == "fgsm":
                adv = fgsm_batch(params, xb, yb, eps)
            elif attack == "pgd":
                cfg = AttackConfig(eps=eps, step_size=eps * step_frac,
                                   iterations=iterations,
                                   random_start=random_start, seed=seed)
                adv = pgd_batch(params, xb, yb, cfg, step_seed=gi * 1009 + start)
            else:
                adv = adaptive_attack_batch(params, sig, xb, yb, eps, mode)
            acc = _accuracy_under(params, adv, yb, inference,
                                  seed + 31 * gi + start)
            correct += acc * xb.shape[0]
        points.append((eps, correct / len(dataset)))
    inf_name = "expectation" if isinstance(inference, Expectation) \
        else f"randomized(m={inference.votes})"
    curve_sigma = inference.sigma if isinstance(inference, Randomized) else sig
    return EvalCurve(points, attack, inf_name, float(curve_sigma), seed)
