"""Optimization loops: stochastic training, learnable-sigma variants, a
PGD adversarial-training baseline, and evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .backprop import backward_pass, batch_loss_and_grads, Gradients
from .data import Dataset, batches
from .loss import Bimodel, Plain
from .moments import VarianceMode
from .network import (ModelConfig, ParameterSet, forward_expectation_batch,
                      init_params)


@dataclass(frozen=True)
class TrainSchedule:
    """Optimization hyperparameters.  grad_clip bounds the global gradient
    norm per batch; 0 disables clipping."""

    epochs: int
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    variance_mode: VarianceMode = VarianceMode.DIAGONAL
    eval_every: int = 1
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass(frozen=True)
class SigmaPolicy:
    """Noise-level handling during training.

    fixed: sigma stays at its initial value.  learnable: sigma is updated
    by its loss gradient like any weight.  bimodel: learnable, with the
    loss additionally rewarding large sigma through -alpha * sigma^2.
    """

    kind: str
    sigma0: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "learnable", "bimodel"):
            raise ValueError(f"unknown sigma policy {self.kind!r}")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if self.kind == "bimodel" and self.alpha <= 0:
            raise ValueError("bimodel requires alpha > 0")

    @classmethod
    def fixed(cls, sigma: float) -> "SigmaPolicy":
        return cls("fixed", sigma)

    @classmethod
    def learnable(cls, sigma0: float) -> "SigmaPolicy":
        return cls("learnable", sigma0)

    @classmethod
    def bimodel(cls, sigma0: float, alpha: float) -> "SigmaPolicy":
        return cls("bimodel", sigma0, alpha)

    def loss_policy(self):
        return Bimodel(self.alpha) if self.kind == "bimodel" else Plain()

    @property
    def learns_sigma(self) -> bool:
        return self.kind != "fixed"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    clean_acc: float
    sigma: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def final_sigma(self) -> float:
        return self.records[-1].sigma

    def rows(self):
        return [(r.epoch, r.loss, r.clean_acc, r.sigma) for r in self.records]


@dataclass
class MomentumState:
    velocities_w: tuple
    velocities_b: tuple
    velocity_sigma: float = 0.0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "MomentumState":
        vw = tuple(None if w is None else np.zeros_like(w)
                   for w in params.weights)
        vb = tuple(None if b is None else np.zeros_like(b)
                   for b in params.biases)
        return cls(vw, vb, 0.0)


def clip_gradients(grads: Gradients, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm <= max_norm.
    Returns the pre-clip norm."""
    sq = grads.d_sigma ** 2
    for g in (*grads.d_weights, *grads.d_biases):
        if g is not None:
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in (*grads.d_weights, *grads.d_biases):
            if g is not None:
                g *= scale
        grads.d_sigma *= scale
    return norm


def sgd_update(params: ParameterSet, grads: Gradients, lr: float,
               momentum: float, state: MomentumState
               ) -> tuple[ParameterSet, MomentumState]:
    """Classic momentum SGD: v <- m*v + g; p <- p - lr*v.

    Sigma is updated the same way when the ParameterSet marks it learnable,
    then projected onto sigma >= 0.
    """
    new_w, new_vw = [], []
    for w, g, v in zip(params.weights, grads.d_weights, state.velocities_w):
        if w is None:
            new_w.append(None)
            new_vw.append(None)
            continue
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w.shape}")
        v2 = momentum * v + g
        new_vw.append(v2)
        new_w.append(w - lr * v2)
    new_b, new_vb = [], []
    for b, g, v in zip(params.biases, grads.d_biases, state.velocities_b):
        if b is None:
            new_b.append(None)
            new_vb.append(None)
            continue
        v2 = momentum * v + g
        new_vb.append(v2)
        new_b.append(b - lr * v2)
    if params.sigma_learnable:
        vs = momentum * state.velocity_sigma + grads.d_sigma
        sigma = max(params.sigma - lr * vs, 0.0)
    else:
        vs = state.velocity_sigma
        sigma = params.sigma
    new_params = ParameterSet(params.config, tuple(new_w), tuple(new_b),
                              sigma, params.sigma_learnable)
    return new_params, MomentumState(tuple(new_vw), tuple(new_vb), vs)


def evaluate(params: ParameterSet, dataset: Dataset,
             batch_size: int = 256) -> float:
    """Accuracy of argmax(expectation logits); argmax ties go to the lowest
    class index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        logits = forward_expectation_batch(params, xb)
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == dataset.labels[start:start + batch_size]))
    return correct / len(dataset)


def train(config: ModelConfig, dataset: Dataset, schedule: TrainSchedule,
          policy: SigmaPolicy) -> tuple[ParameterSet, History]:
    """Minimize the stochastic loss over mini-batches.

    Reproducible from (config, dataset, schedule, policy): initialization
    and batch shuffles derive from schedule.seed.  Clean accuracy is
    measured on the training dataset every eval_every epochs (the previous
    measurement is carried on other epochs).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init_params(config, schedule.seed)
    params = ParameterSet(params.config, params.weights, params.biases,
                          float(policy.sigma0), policy.learns_sigma)
    state = MomentumState.zeros_like(params)
    loss_policy = policy.loss_policy()
    history = History()
    acc = float("nan")
    for epoch in range(schedule.epochs):
        total_loss = 0.0
        seen = 0
        for xb, yb in batches(dataset, schedule.batch_size,
                              shuffle_seed=schedule.seed + 7919 * epoch):
            try:
                loss, grads = batch_loss_and_grads(
                    params, xb, yb, config.n_classes,
                    schedule.variance_mode, loss_policy)
            except ValueError as exc:
                raise TrainingDiverged(
                    f"epoch {epoch}: forward pass left the finite range "
                    f"(sigma={params.sigma:.4g}): {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"epoch {epoch}: batch loss {loss} (sigma={params.sigma:.4g})")
            clip_gradients(grads, schedule.grad_clip)
            params, state = sgd_update(params, grads, schedule.learning_rate,
                                       schedule.momentum, state)
            total_loss += loss * xb.shape[0]
            seen += xb.shape[0]
        mean_loss = total_loss / seen
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs - 1:
            acc = evaluate(params, dataset)
        history.records.append(EpochRecord(epoch, float(mean_loss),
                                           float(acc), params.sigma))
    return params, history


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(logits: np.ndarray, labels: np.ndarray
                           ) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    nb = logits.shape[0]
    p = _softmax(logits)
    eps = 1e-300
    loss = -np.log(p[np.arange(nb), labels] + eps).mean()
    grad = p
    grad[np.arange(nb), labels] -= 1.0
    return float(loss), grad / nb


def train_adversarial_baseline(config: ModelConfig, dataset: Dataset,
                               schedule: TrainSchedule, eps: float,
                               pgd_cfg=None) -> tuple[ParameterSet, History]:
    """Min-max baseline: train the deterministic model with cross-entropy
    on PGD adversarial examples regenerated each batch."""
    from .attacks import AttackConfig, pgd_batch  # attacks build on this module
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if pgd_cfg is None and eps > 0:
        pgd_cfg = AttackConfig(eps=eps, step_size=eps / 10.0, iterations=40,
                               random_start=True, seed=schedule.seed)
    params = init_params(config, schedule.seed)
    state = MomentumState.zeros_like(params)
    history = History()
    acc = float("nan")
    for epoch in range(schedule.epochs):
        total_loss = 0.0
        seen = 0
        for bi, (xb, yb) in enumerate(batches(
                dataset, schedule.batch_size,
                shuffle_seed=schedule.seed + 7919 * epoch)):
            if eps > 0:
                xb = pgd_batch(params, xb, yb, pgd_cfg,
                               step_seed=schedule.seed + 104729 * epoch + bi)
            logits, cache = forward_expectation_batch(params, xb,
                                                      with_cache=True)
            loss, dlogits = cross_entropy_and_grad(logits, yb)
            dws, dbs, _, _ = backward_pass(cache, params, dlogits, None,
                                           want_dx=False)
            grads = Gradients(dws, dbs, 0.0, np.zeros(0), dlogits.mean(axis=0))
            clip_gradients(grads, schedule.grad_clip)
            params, state = sgd_update(params, grads, schedule.learning_rate,
                                       schedule.momentum, state)
            total_loss += loss * xb.shape[0]
            seen += xb.shape[0]
        mean_loss = total_loss / seen
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"epoch {epoch}: mean loss {mean_loss}")
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs - 1:
            acc = evaluate(params, dataset)
        history.records.append(EpochRecord(epoch, float(mean_loss),
                                           float(acc), 0.0))
    return params, history
