"""Classification objective: cross-entropy plus a proxy contrastive term.

The contrastive term reuses the classifier weight rows as class proxies
(same storage, no copy): each embedding is pulled toward its own class row
and pushed from the others through a temperature-scaled softmax over
proxy similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Array, softmax


@dataclass(frozen=True)
class LossReport:
    """Scalar terms of one objective evaluation; total = ce + beta * con."""

    ce: float
    con: float
    total: float
    beta: float
    tau: float


def one_hot(labels: Array, n_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _log_softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Array, targets: Array) -> float:
    """Mean cross-entropy between row-softmax of logits and one-hot targets."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    return float(-(targets * _log_softmax(logits)).sum() / logits.shape[0])


def cross_entropy_with_grad(logits: Array, targets: Array) -> tuple[float, Array]:
    ce = cross_entropy(logits, targets)
    dlogits = (softmax(np.asarray(logits, dtype=np.float64)) - targets) / logits.shape[0]
    return ce, dlogits


def proxy_contrastive(embeddings: Array, labels: Array, proxies: Array, tau: float = 0.1) -> float:
    """Softmax cross-entropy over embedding/proxy inner products scaled by 1/tau.

    proxies has one row per class (the classifier weight matrix); bias plays
    no part in the similarity.
    """
    loss, _, _ = proxy_contrastive_with_grad(embeddings, labels, proxies, tau)
    return loss


def proxy_contrastive_with_grad(
    embeddings: Array, labels: Array, proxies: Array, tau: float = 0.1
) -> tuple[float, Array, Array]:
    """Returns (loss, d_embeddings, d_proxies)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    prox = np.asarray(proxies, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if emb.ndim != 2 or prox.ndim != 2 or emb.shape[1] != prox.shape[1]:
        raise ValueError(f"shape mismatch: embeddings {emb.shape}, proxies {prox.shape}")
    n = emb.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    targets = one_hot(labels, prox.shape[0])
    sims = emb @ prox.T / tau
    loss = float(-(targets * _log_softmax(sims)).sum() / n)
    dsims = (softmax(sims) - targets) / (n * tau)
    demb = dsims @ prox
    dprox = dsims.T @ emb
    return loss, demb, dprox


def total_loss(ce: float, con: float, beta: float = 0.1, tau: float = 0.1) -> LossReport:
    """Combine the two scalar terms into a report; total = ce + beta * con."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return LossReport(ce=float(ce), con=float(con), total=float(ce) + beta * float(con), beta=beta, tau=tau)
