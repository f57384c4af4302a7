"""Cascade probability model and the joint accuracy + computation-cost objective.

A batch of chains is an ``(N, K)`` array of per-stage player probabilities
with an ``(N,)`` array of 0/1 labels.  A sample is positive only if every
stage calls it positive, so its positive probability is the product over
stages.
"""

from dataclasses import dataclass

import numpy as np

CLAMP = 1e-7
DEFAULT_BETA = 0.5


def clamp(probs):
    return np.clip(np.asarray(probs, dtype=np.float64), CLAMP, 1.0 - CLAMP)


def chain_positive_prob(chain):
    return np.prod(np.asarray(chain, dtype=np.float64), axis=-1)


def chain_negative_prob(chain):
    return 1.0 - chain_positive_prob(chain)


def _batch(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {probs.shape[0]} chains")
    return clamp(probs), labels


def loss_accuracy(probs, labels):
    """Summed negative log-likelihood of the cascade decision."""
    p, y = _batch(probs, labels)
    prod = np.prod(p, axis=1)
    return float(-np.sum(y * np.log(prod) + (1 - y) * np.log1p(-prod)))


def _costs(costs, k):
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != (k,):
        raise ValueError(f"expected {k} stage costs, got {costs.shape}")
    return costs


def loss_cost(probs, costs):
    """Expected computation: mean over samples of sum_j T_j * prod_{u<=j} p_u."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = _costs(costs, p.shape[1])
    return float(np.mean(np.cumprod(p, axis=1) @ t))


@dataclass
class LossBreakdown:
    lp: float
    lgamma: float
    total: float
    beta: float
    d_per_stage: np.ndarray


def loss_gradients(probs, labels, costs, beta=DEFAULT_BETA, reduction="sum"):
    """dL/dp for every chain entry, evaluated at the clamped probabilities.

    ``reduction="mean"`` divides the accuracy term by N so it is a per-sample
    average like the cost term.
    """
    p, y = _batch(probs, labels)
    n, k = p.shape
    t = _costs(costs, k)
    prod = np.prod(p, axis=1, keepdims=True)
    others = prod / p  # prod over u != j
    d_acc = np.where(y[:, None] == 1, -1.0 / p, others / (1.0 - prod))
    if reduction == "mean":
        d_acc = d_acc / n
    elif reduction != "sum":
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    # d/dp_j of sum_{j'} T_j' prod_{u<=j'} p_u = sum_{j'>=j} T_j' prod_{u<=j', u!=j} p_u
    cum = np.cumprod(p, axis=1)
    weighted = cum * t  # T_j' prod_{u<=j'} p_u
    tail = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
    d_cost = tail / p / n
    return d_acc + beta * d_cost


def loss_joint(probs, labels, costs, beta=DEFAULT_BETA, reduction="sum"):
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    lp = loss_accuracy(probs, labels)
    if reduction == "mean":
        lp /= np.atleast_2d(probs).shape[0]
    lgamma = loss_cost(clamp(probs), costs)
    grads = loss_gradients(probs, labels, costs, beta, reduction)
    return LossBreakdown(lp, lgamma, lp + beta * lgamma, beta, grads)
