"""Two-phase training of the cascade and threshold calibration.

Phase one trains stage ``j`` (trunk block ``j`` plus branch ``j``) as a
stand-alone classifier with earlier blocks frozen, then drops the negatives it
already rejects at the recall floor.  Phase two trains every parameter against
the joint cascade objective.  Thresholds are then fixed by a greedy grid
search on held-out patches.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .loss import DEFAULT_BETA, loss_joint
from .model import K, backward_stages, forward_stages

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.round(np.arange(0, 51) * 0.01, 2)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 128
    epochs_branch: int = 4
    epochs_e2e: int = 6
    beta: float = DEFAULT_BETA
    recall_floor: float = 0.97
    seed: int = 42

    def __post_init__(self):
        if min(self.learning_rate, self.adam_epsilon) <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate, epsilon and batch size must be positive")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("Adam decay rates must be in [0, 1)")
        if self.epochs_branch < 0 or self.epochs_e2e < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.recall_floor <= 1:
            raise ValueError(f"recall_floor must be in (0, 1], got {self.recall_floor}")


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(state, params, grads, cfg):
    """Bias-corrected Adam update of ``params`` (in place) from ``grads``.

    Only names present in ``grads`` are touched.
    """
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)).astype(p.dtype)


class TrainingLog:
    """Collects ``phase,epoch,batch,loss_p,loss_gamma,loss_total`` rows."""

    HEADER = "phase,epoch,batch,loss_p,loss_gamma,loss_total"

    def __init__(self, path=None):
        self.rows = []
        self.path = path

    def add(self, phase, epoch, batch, lp, lgamma, total):
        row = (phase, epoch, batch, lp, lgamma, total)
        self.rows.append(row)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a") as fh:
                if new:
                    fh.write(self.HEADER + "\n")
                fh.write(f"{phase},{epoch},{batch},{lp:.9g},{lgamma:.9g},{total:.9g}\n")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for phase, epoch, batch, lp, lgamma, total in self.rows:
                fh.write(f"{phase},{epoch},{batch},{lp:.9g},{lgamma:.9g},{total:.9g}\n")

    def epoch_means(self, phase, column=5):
        epochs = sorted({r[1] for r in self.rows if r[0] == phase})
        return [float(np.mean([r[column] for r in self.rows if r[0] == phase and r[1] == e])) for e in epochs]


def normalized_costs(net):
    t = net.stage_costs.astype(np.float64)
    return t / t[0]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _tap_inputs(net, patches, j, batch_size=256):
    """Input of trunk block ``j`` for every patch, from the frozen earlier blocks."""
    if j == 1:
        return patches
    out = [forward_stages(net, patches[s:s + batch_size], 1, j - 1)[1] for s in range(0, len(patches), batch_size)]
    return np.concatenate(out)


def branch_scores(net, patches, j, batch_size=256):
    """Stage-``j`` player probability of each patch (earlier stages ignored)."""
    x = _tap_inputs(net, patches, j, batch_size)
    return np.concatenate([forward_stages(net, x[s:s + batch_size], j, j)[0][:, 0] for s in range(0, len(x), batch_size)])


def train_branch(net, j, patches, labels, cfg, training_log=None):
    """Fit trunk block ``j`` and branch ``j`` by per-branch cross-entropy.

    Blocks before ``j`` are frozen; later ones are untouched.  Updates ``net``
    in place and returns it.
    """
    if len(patches) == 0:
        raise ValueError(f"no samples left to train branch {j}")
    labels = np.asarray(labels)
    params = net.parameters()
    x = _tap_inputs(net, patches, j)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 1000 * j)
    for epoch in range(cfg.epochs_branch):
        for b, idx in enumerate(_batches(len(x), cfg.batch_size, rng)):
            cache = {}
            probs, _ = forward_stages(net, x[idx], j, j, cache)
            lb = loss_joint(probs, labels[idx], [0.0], beta=0.0, reduction="mean")
            grads, _ = backward_stages(net, cache, lb.d_per_stage.astype(net.dtype), j, j)
            adam_step(state, params, grads, cfg)
            if training_log is not None:
                training_log.add(f"branch{j}", epoch, b, lb.lp, 0.0, lb.total)
    return net


def prune_negatives(scores, labels, recall_floor=0.97):
    """Cut-off keeping ``recall_floor`` of positives; negatives below it are dropped.

    Returns ``(kept_negative_indices, threshold)``.  The threshold is the
    largest score such that at least ``ceil(recall_floor * P)`` positives
    score at or above it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])[::-1]
    if len(pos) == 0:
        raise ValueError("cannot prune without positive samples")
    need = int(np.ceil(recall_floor * len(pos) - 1e-9))
    need = min(max(need, 1), len(pos))
    threshold = float(pos[need - 1])
    kept = np.flatnonzero((labels == 0) & (scores >= threshold))
    return kept, threshold


def train_branches(net, patches, labels, cfg, training_log=None):
    """Branch-level phase: stages trained in order on shrinking negative pools."""
    labels = np.asarray(labels)
    pool = np.arange(len(labels))
    history = []
    for j in range(1, K + 1):
        sub_x, sub_y = patches[pool], labels[pool]
        train_branch(net, j, sub_x, sub_y, cfg, training_log)
        kept_neg, threshold = prune_negatives(branch_scores(net, sub_x, j), sub_y, cfg.recall_floor)
        n_neg = int(np.sum(sub_y == 0))
        history.append({"stage": j, "pool": len(pool), "negatives": n_neg,
                        "kept_negatives": len(kept_neg), "threshold": threshold})
        log.info("branch %d: %d samples, kept %d/%d negatives at cut-off %.4f",
                 j, len(pool), len(kept_neg), n_neg, threshold)
        pool = np.sort(np.concatenate([pool[sub_y == 1], pool[kept_neg]]))
    return history


def train_end_to_end(net, patches, labels, cfg, training_log=None, costs=None):
    """Joint training of all stages against the accuracy + cost objective."""
    if len(patches) == 0:
        raise ValueError("no samples for end-to-end training")
    labels = np.asarray(labels)
    costs = normalized_costs(net) if costs is None else costs
    params = net.parameters()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 7)
    for epoch in range(cfg.epochs_e2e):
        for b, idx in enumerate(_batches(len(patches), cfg.batch_size, rng)):
            cache = {}
            probs, _ = forward_stages(net, patches[idx], cache=cache)
            lb = loss_joint(probs, labels[idx], costs, cfg.beta, reduction="mean")
            grads, _ = backward_stages(net, cache, lb.d_per_stage.astype(net.dtype))
            adam_step(state, params, grads, cfg)
            if training_log is not None:
                training_log.add("e2e", epoch, b, lb.lp, lb.lgamma, lb.total)
    return net


def cascade_recall(probs, labels, thresholds):
    probs = np.asarray(probs)
    passed = np.all(probs > np.asarray(thresholds)[None, :], axis=1)
    pos = np.asarray(labels) == 1
    return float(np.mean(passed[pos]))


class CalibrationError(ValueError):
    pass


def calibrate_thresholds(probs, labels, recall_floor=0.97, grid=THRESHOLD_GRID):
    """Greedy per-stage grid search, earliest stage first.

    Each stage takes the largest grid value that keeps the cascade recall on
    ``(probs, labels)`` at or above ``recall_floor``, with later stages at 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.any(labels == 1) or not np.any(labels == 0):
        raise CalibrationError("calibration needs both positive and negative samples")
    k = probs.shape[1]
    lam = np.zeros(k)
    base = cascade_recall(probs, labels, lam)
    if base < recall_floor:
        raise CalibrationError(
            f"recall floor {recall_floor} unreachable: recall with all thresholds at 0 is {base:.4f}"
        )
    candidates = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    for j in range(k):
        for value in candidates:
            trial = lam.copy()
            trial[j] = value
            if cascade_recall(probs, labels, trial) >= recall_floor:
                lam = trial
                break
    return lam
