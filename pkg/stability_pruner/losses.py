"""Data loss, the ±1-attractor auxiliary loss, and their combination.

The auxiliary loss only touches Conv2d filter weights. Its default ``abs``
form pulls every negative weight towards -1 and every non-negative weight
towards +1; the ``literal`` form keeps the signed summand
``(-1 - f)`` / ``(1 - f)`` whose gradient is a constant -1.
"""
from typing import List, Sequence, Tuple

import numpy as np

from stability_pruner.errors import ConfigError, ShapeError

AUX_FORMS = ("abs", "literal")


def _check_form(form: str) -> None:
    if form not in AUX_FORMS:
        raise ConfigError(f"aux_form must be one of {AUX_FORMS}, got {form!r}")


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, classes), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ConfigError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(logits.shape[0])
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return loss, grad.astype(logits.dtype, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return softmax_cross_entropy(logits, labels)[0]


def filter_attraction(weight: np.ndarray, form: str = "abs") -> float:
    """Auxiliary loss of one conv weight tensor."""
    _check_form(form)
    w = weight.astype(np.float64, copy=False)
    negative = w < 0
    if form == "abs":
        terms = np.where(negative, np.abs(-1.0 - w), np.abs(1.0 - w))
    else:
        terms = np.where(negative, -1.0 - w, 1.0 - w)
    return float(terms.sum())


def filter_attraction_grad(weight: np.ndarray, form: str = "abs") -> np.ndarray:
    """Subgradient of :func:`filter_attraction`.

    abs form: +1 on (-1, 0) and [1, inf), -1 on (-inf, -1) and [0, 1), 0 at -1.
    """
    _check_form(form)
    if form == "literal":
        return np.full_like(weight, -1.0)
    grad = np.where(weight < 0,
                    np.where(weight > -1, 1.0, np.where(weight < -1, -1.0, 0.0)),
                    np.where(weight >= 1, 1.0, -1.0))
    return grad.astype(weight.dtype, copy=False)


def auxiliary_loss(model, form: str = "abs") -> Tuple[float, List[float]]:
    """(S_total, per-conv-layer S) over the Conv2d weights of ``model``."""
    indices = model.architecture.conv_indices
    if not indices:
        raise ConfigError("auxiliary loss needs at least one conv layer")
    per_layer = [filter_attraction(model.params[f"{i}.weight"], form) for i in indices]
    return float(sum(per_layer)), per_layer


def combine(data_loss: float, aux_total: float, lam: float) -> float:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return data_loss
    return data_loss + lam * aux_total


def total_loss(model, batch, labels: Sequence[int], lam: float, form: str = "abs") -> float:
    """C + lam * S for one batch (train-mode forward).

    BatchNorm running statistics are left as they were.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    saved = {k: v.copy() for k, v in model.buffers.items()}
    try:
        logits, _ = model.forward(batch, mode="train")
    finally:
        for k, v in saved.items():
            model.buffers[k][...] = v
    data_loss = cross_entropy(logits, np.asarray(labels))
    if lam == 0:
        return data_loss
    return combine(data_loss, auxiliary_loss(model, form)[0], lam)
