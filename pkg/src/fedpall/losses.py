"""Client-side training losses and their analytic gradients.

``cross_entropy`` and ``kl_uniform_loss`` take probability rows produced by a
softmax and return the gradient with respect to the *logits* that produced
them (the softmax Jacobian is folded in). ``info_nce_loss`` returns the
gradient with respect to the feature batch directly. ``combined_local_loss``
pushes everything back to the extractor output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .neural import MlpParams, backward_mlp, forward_mlp, softmax

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    mu: float = 0.1
    delta: float = 0.1
    tau: float = 0.1
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mu < 0 or self.delta < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_labels(labels: np.ndarray, n_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if batch and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.intp, copy=False)


def cross_entropy(probabilities: np.ndarray, labels) -> LossOutput:
    """Mean negative log-likelihood; gradient is ``(p - onehot) / batch`` w.r.t. logits."""
    batch, k = probabilities.shape
    labels = _check_labels(labels, k, batch)
    rows = np.arange(batch)
    value = -np.mean(np.log(np.maximum(probabilities[rows, labels], PROB_FLOOR)))
    grad = probabilities.copy()
    grad[rows, labels] -= 1.0
    grad /= batch
    return LossOutput(float(value), grad)


def kl_uniform_loss(amplifier_probs: np.ndarray) -> LossOutput:
    """Mean over rows of ``KL(p || uniform) = sum_i p_i log(N p_i)``.

    Uses ``0 log 0 = 0``. The gradient is taken w.r.t. the amplifier logits:
    ``p_j (log(N p_j) - KL_row) / batch``.
    """
    batch, n = amplifier_probs.shape
    if n < 2:
        raise DomainError("KL-to-uniform needs at least two clients")
    p = amplifier_probs
    log_np = np.log(n * np.maximum(p, PROB_FLOOR))
    terms = np.where(p == 0, 0.0, p * log_np)
    row_kl = terms.sum(axis=1)
    value = float(np.maximum(row_kl, 0.0).mean()) if batch else 0.0
    grad = p * (log_np - row_kl[:, None]) / max(batch, 1)
    return LossOutput(value, grad)


def _prototype_matrix(global_prototypes) -> np.ndarray:
    return np.asarray(getattr(global_prototypes, "prototypes", global_prototypes))


def info_nce_loss(features: np.ndarray, labels, global_prototypes, weights: LossWeights) -> LossOutput:
    """Global-prototype contrastive loss with cosine similarity and temperature tau.

    By default the denominator sums only over the *other* classes, so the value
    can be negative. ``weights.include_positive_in_denominator`` switches to the
    usual softmax form.
    """
    protos = _prototype_matrix(global_prototypes)
    batch, d = features.shape
    k = protos.shape[0]
    if k < 2:
        raise DomainError("InfoNCE needs at least two classes")
    if protos.shape[1] != d:
        raise DimensionError(f"prototype dim {protos.shape[1]} != feature dim {d}")
    labels = _check_labels(labels, k, batch)
    if batch == 0:
        return LossOutput(0.0, np.zeros_like(features))
    tau = weights.tau
    rows = np.arange(batch)

    zn = np.linalg.norm(features, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    z_ok = zn >= NORM_FLOOR
    p_ok = pn >= NORM_FLOOR
    inv_zn = np.where(z_ok, 1.0 / np.where(z_ok, zn, 1.0), 0.0)
    inv_pn = np.where(p_ok, 1.0 / np.where(p_ok, pn, 1.0), 0.0)
    cos = (features @ protos.T) * inv_zn[:, None] * inv_pn[None, :]
    s = cos / tau

    in_denom = np.ones((batch, k), dtype=bool)
    if not weights.include_positive_in_denominator:
        in_denom[rows, labels] = False
    masked = np.where(in_denom, s, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(in_denom, np.exp(masked - m), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + m[:, 0]
    value = float(np.mean(lse - s[rows, labels]))

    ds = e / denom
    ds[rows, labels] -= 1.0
    dcos = ds / (tau * batch)
    # d cos(z, p) / dz = p / (|z||p|) - cos * z / |z|^2
    grad = ((dcos * inv_pn[None, :]) @ protos) * inv_zn[:, None]
    grad -= (dcos * cos).sum(axis=1)[:, None] * features * (inv_zn ** 2)[:, None]
    return LossOutput(value, grad)


@dataclass
class CombinedLoss:
    value: float
    ce: float
    kl: float
    nce: float
    grad_features: np.ndarray
    classifier_grads: MlpParams


def combined_local_loss(features: np.ndarray, labels, classifier: MlpParams, amplifier: MlpParams | None,
                        global_prototypes, weights: LossWeights) -> CombinedLoss:
    """``CE(H(z), y) + mu * KL(A(z) || U) + delta * InfoNCE(z, G)`` on a feature batch.

    The amplifier is used forward-only; only the classifier receives parameter
    gradients here. Terms with zero weight are not evaluated (reported as NaN).
    """
    logits, h_cache = forward_mlp(classifier, features, cache=True)
    ce = cross_entropy(softmax(logits), labels)
    classifier_grads, grad = backward_mlp(classifier, h_cache, ce.grad)
    value, kl_value, nce_value = ce.value, float("nan"), float("nan")

    if weights.mu > 0:
        if amplifier is None:
            raise DomainError("mu > 0 requires an amplifier")
        amp_logits, a_cache = forward_mlp(amplifier, features, cache=True)
        kl = kl_uniform_loss(softmax(amp_logits))
        _, kl_grad = backward_mlp(amplifier, a_cache, kl.grad, need_param_grads=False)
        grad = grad + weights.mu * kl_grad
        kl_value = kl.value
        value += weights.mu * kl.value
    if weights.delta > 0:
        nce = info_nce_loss(features, labels, global_prototypes, weights)
        grad = grad + weights.delta * nce.grad
        nce_value = nce.value
        value += weights.delta * nce.value
    return CombinedLoss(value, ce.value, kl_value, nce_value, grad, classifier_grads)
