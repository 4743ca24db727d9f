"""Weighted binary cross-entropy with deep supervision, L2, and Adadelta."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, clip, log, reduce_mean, square

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, float] = (1.0, 1.0)  # (benign, malignant)
    lambda_aux: float = 0.3
    l2_coeff: float = 1e-4

    def __post_init__(self):
        w = tuple(float(v) for v in self.class_weights)
        if len(w) != 2 or not all(np.isfinite(v) and v > 0 for v in w):
            raise ConfigurationError(f"class weights must be two positive finite numbers, got {self.class_weights}")
        object.__setattr__(self, "class_weights", w)
        if not self.lambda_aux >= 0:
            raise ConfigurationError("lambda_aux must be >= 0")
        if not self.l2_coeff >= 0:
            raise ConfigurationError("l2_coeff must be >= 0")


def class_weights_from_counts(n_benign: int, n_malignant: int) -> tuple[float, float]:
    """Inverse-frequency weights ``N / (2 * N_c)``; balanced data gives (1, 1)."""
    if n_benign < 1 or n_malignant < 1:
        raise ConfigurationError(f"both classes need at least one sample, got {n_benign} benign / {n_malignant} malignant")
    total = n_benign + n_malignant
    return total / (2.0 * n_benign), total / (2.0 * n_malignant)


def weighted_bce(prob: Tensor, labels, weights: tuple[float, float]) -> Tensor:
    """Mean over the batch of ``-[w_pos*y*log p + w_neg*(1-y)*log(1-p)]``.

    ``weights`` is ``(w_benign, w_malignant)``; ``p`` is clamped to
    ``[1e-7, 1 - 1e-7]`` first.
    """
    y = np.asarray(labels, dtype=prob.dtype).reshape(-1)
    if y.size == 0:
        raise ContractError("weighted_bce needs a non-empty batch")
    if prob.size != y.size:
        raise DimensionError(f"{prob.size} probabilities for {y.size} labels")
    w_neg, w_pos = weights
    y = y.reshape(prob.shape)
    p = clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = log(p) * as_tensor(w_pos * y, like=prob)
    neg = log(1.0 - p) * as_tensor(w_neg * (1.0 - y), like=prob)
    return -reduce_mean(pos + neg)


def l2_penalty(params: Mapping[str, Tensor]) -> Tensor | None:
    """Sum of squares over kernels and weight matrices (biases, gamma, beta excluded)."""
    terms = [square(t).sum() for name, t in params.items() if name.endswith("/weight")]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(
    final_prob: Tensor,
    intermediate_probs: Sequence[Tensor],
    labels,
    config: LossConfig,
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    loss = weighted_bce(final_prob, labels, config.class_weights)
    if config.lambda_aux > 0:
        for head in intermediate_probs:
            loss = loss + config.lambda_aux * weighted_bce(head, labels, config.class_weights)
    if config.l2_coeff > 0 and params:
        penalty = l2_penalty(params)
        if penalty is not None:
            loss = loss + config.l2_coeff * penalty
    return loss


class Adadelta:
    """Adadelta with per-parameter accumulators of squared gradients and updates.

    ``step`` applies, per element::

        Eg2  <- rho*Eg2 + (1-rho)*g^2
        dx   <- -lr * sqrt(Edx2 + eps) / sqrt(Eg2 + eps) * g
        Edx2 <- rho*Edx2 + (1-rho)*dx^2
        x    <- x + dx

    Parameters whose ``requires_grad`` is False are skipped.
    """

    def __init__(self, params: Mapping[str, Tensor], rho: float = 0.95, epsilon: float = 1e-6, lr: float = 1.0):
        if not 0 < rho < 1:
            raise ConfigurationError(f"rho must be in (0, 1), got {rho}")
        if not epsilon > 0 or not lr > 0:
            raise ConfigurationError("epsilon and lr must be positive")
        self.params = dict(params)
        self.rho = rho
        self.epsilon = epsilon
        self.lr = lr
        self.acc_grad = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.acc_delta = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.last_delta: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Update every trainable parameter; ``grads`` defaults to each tensor's ``.grad``."""
        rho, eps = self.rho, self.epsilon
        self.last_delta = {}
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            eg2 = self.acc_grad[name]
            edx2 = self.acc_delta[name]
            eg2 *= rho
            eg2 += (1 - rho) * g * g
            delta = -self.lr * np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
            edx2 *= rho
            edx2 += (1 - rho) * delta * delta
            p.data += delta.astype(p.dtype, copy=False)
            self.last_delta[name] = delta

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optimizer/acc_grad/{name}"] = self.acc_grad[name]
            out[f"optimizer/acc_delta/{name}"] = self.acc_delta[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in self.params:
            for kind, store in (("acc_grad", self.acc_grad), ("acc_delta", self.acc_delta)):
                key = f"optimizer/{kind}/{name}"
                if key in arrays:
                    store[name][...] = arrays[key]


def adadelta_step(state: Adadelta, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """Functional form: apply one Adadelta update of ``params`` held by ``state``."""
    for name in grads:
        if name not in state.params or state.params[name] is not params[name]:
            raise ContractError(f"parameter {name!r} is not managed by this optimizer state")
    state.step(grads)
