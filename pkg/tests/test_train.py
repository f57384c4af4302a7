import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccnn.loss import loss_joint
from ccnn.model import K, CascadeConfig, build_network, stage_probabilities
from ccnn.train import (
    THRESHOLD_GRID,
    AdamState,
    CalibrationError,
    TrainConfig,
    TrainingLog,
    adam_step,
    branch_scores,
    calibrate_thresholds,
    cascade_recall,
    normalized_costs,
    prune_negatives,
    train_branch,
    train_branches,
    train_end_to_end,
)


def separable_patches(n, seed):
    """Bright sprite on flat texture (label 1) against the texture alone (label 0)."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.25, 0.35, (n, 64, 64, 3)).astype(np.float32)
    labels = np.arange(n) % 2
    for i in np.flatnonzero(labels):
        x[i, 12:52, 24:40] = rng.uniform(0.85, 1.0, 3)
    return x, labels


@pytest.fixture(scope="module")
def data():
    return separable_patches(192, 0)


def small_cfg(**kw):
    base = dict(batch_size=32, epochs_branch=3, epochs_e2e=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for kw in (dict(learning_rate=0), dict(batch_size=0), dict(recall_floor=0), dict(recall_floor=1.1),
               dict(adam_beta1=1.0), dict(beta=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# -- Adam ------------------------------------------------------------------------


def test_adam_first_step_is_minus_learning_rate():
    params = {"w": np.array([0.5])}
    adam_step(AdamState(), params, {"w": np.array([1.0])}, TrainConfig())
    assert params["w"][0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_is_fixed_point():
    params = {"w": np.array([0.5, -2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(state, params, {"w": np.zeros(2)}, TrainConfig())
    np.testing.assert_array_equal(params["w"], [0.5, -2.0])
    assert state.t == 3


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(2)}, TrainConfig())


def reference_adam(theta, curv, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam on f = sum(curv * theta**2) / 2, in plain Python."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t in range(1, steps + 1):
        for i in range(len(theta)):
            g = curv[i] * theta[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_matches_reference_on_quadratic():
    curv = np.array([0.5, 2.0, 10.0, 0.01])
    start = np.array([1.0, -0.3, 0.02, 4.0])
    params = {"w": start.copy()}
    state = AdamState()
    cfg = TrainConfig(learning_rate=0.01)
    for _ in range(100):
        adam_step(state, params, {"w": curv * params["w"]}, cfg)
    np.testing.assert_allclose(params["w"], reference_adam(start, curv, 100, lr=0.01), rtol=0, atol=1e-10)


# -- pruning ---------------------------------------------------------------------


def test_prune_perfect_separation():
    scores = np.r_[np.ones(10), np.zeros(30)]
    labels = np.r_[np.ones(10), np.zeros(30)].astype(int)
    kept, threshold = prune_negatives(scores, labels)
    assert len(kept) == 0 and threshold == 1.0


def sort_and_scan(scores, labels, floor):
    """Walk cut-offs from the top score down; the first one retaining the floor wins."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    for cut in sorted(set(scores), reverse=True):
        if sum(s >= cut for s in pos) >= floor * len(pos) - 1e-9:
            return cut
    return min(scores)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 99), st.integers(0, 1)), min_size=2, max_size=80),
       st.sampled_from([0.5, 0.9, 0.97, 1.0]))
def test_prune_cutoff_matches_sort_and_scan(data, floor):
    scores = np.array([s / 100 for s, _ in data])
    labels = np.array([y for _, y in data])
    if labels.sum() == 0:
        with pytest.raises(ValueError):
            prune_negatives(scores, labels, floor)
        return
    kept, threshold = prune_negatives(scores, labels, floor)
    assert threshold == sort_and_scan(scores.tolist(), labels.tolist(), floor)
    # only negatives are ever dropped, and every survivor clears the cut-off
    assert np.all(labels[kept] == 0)
    assert set(kept.tolist()) == set(np.flatnonzero((labels == 0) & (scores >= threshold)).tolist())


def test_prune_100_positives_keeps_97(rng):
    scores = rng.random(300)
    labels = np.r_[np.ones(100), np.zeros(200)].astype(int)
    _, threshold = prune_negatives(scores, labels, 0.97)
    assert np.sum(scores[:100] >= threshold) >= 97
    assert np.sum(scores[:100] > threshold) < 97


# -- calibration -----------------------------------------------------------------


def test_calibration_perfect_classifier():
    probs = np.r_[np.ones((5, K)), np.zeros((5, K))] * 0.98 + 0.01
    labels = np.r_[np.ones(5), np.zeros(5)].astype(int)
    lam = calibrate_thresholds(probs, labels)
    np.testing.assert_array_equal(lam, [0.5] * K)
    assert cascade_recall(probs, labels, lam) == 1.0


def test_calibration_unreachable_floor_reports_recall():
    probs = np.array([[0.9, 0.0], [0.9, 0.9], [0.1, 0.1]])
    labels = np.array([1, 1, 0])
    with pytest.raises(CalibrationError, match="0.5000"):
        calibrate_thresholds(probs, labels, 0.97)


def test_calibration_needs_both_classes():
    with pytest.raises(CalibrationError):
        calibrate_thresholds(np.ones((3, 4)) * 0.5, np.ones(3, int))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.8, 0.9, 0.97]))
def test_calibration_postcondition(seed, floor):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, 60)
    labels[:2] = [0, 1]
    probs = np.clip(rng.normal(0.3 + 0.4 * labels[:, None], 0.2, (60, K)), 0.001, 0.999)
    try:
        lam = calibrate_thresholds(probs, labels, floor)
    except CalibrationError:
        assert cascade_recall(probs, labels, np.zeros(K)) < floor
        return
    assert cascade_recall(probs, labels, lam) >= floor
    assert set(np.round(lam, 2)) <= set(THRESHOLD_GRID)
    # each counted positive clears every threshold
    pos = probs[labels == 1]
    recalled = np.all(pos > lam, axis=1)
    assert np.all(pos[recalled] > lam)


def expected_cost(probs, labels, lam, costs):
    """Mean MACs per negative sample when stage j runs only if stages < j passed."""
    neg = probs[labels == 0]
    passed = np.cumprod(neg > lam, axis=1)
    reach = np.c_[np.ones(len(neg)), passed[:, :-1]]
    return float(np.mean(reach @ costs))


def test_greedy_matches_exhaustive_on_two_stage_toy():
    grid = np.array([0.0, 0.2, 0.4])
    probs = np.array([
        [0.9, 0.8], [0.7, 0.9], [0.5, 0.6], [0.95, 0.45],  # positives
        [0.1, 0.9], [0.3, 0.3], [0.6, 0.1], [0.25, 0.5], [0.15, 0.05],  # negatives
    ])
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0])
    costs = np.array([1.0, 4.0])
    greedy = calibrate_thresholds(probs, labels, 1.0, grid)
    feasible = [np.array(c) for c in itertools.product(grid, repeat=2)
                if cascade_recall(probs, labels, np.array(c)) >= 1.0]
    best = min(feasible, key=lambda c: (expected_cost(probs, labels, c, costs), -c[0], -c[1]))
    np.testing.assert_array_equal(greedy, best)
    np.testing.assert_array_equal(greedy, [0.4, 0.4])


# -- training --------------------------------------------------------------------


def test_train_branch_rejects_empty():
    net = build_network(CascadeConfig(), 0)
    with pytest.raises(ValueError):
        train_branch(net, 1, np.zeros((0, 64, 64, 3), np.float32), np.zeros(0), small_cfg())
    with pytest.raises(ValueError):
        train_end_to_end(net, np.zeros((0, 64, 64, 3), np.float32), np.zeros(0), small_cfg())


def test_train_branch_freezes_earlier_blocks(data):
    x, y = data
    net = build_network(CascadeConfig(), 2)
    before = {k: v.copy() for k, v in net.parameters().items()}
    train_branch(net, 2, x[:64], y[:64], small_cfg(epochs_branch=1))
    after = net.parameters()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(("2" in k) for k in changed), changed
    for k in before:
        if "1" in k or "3" in k or "4" in k:
            assert np.array_equal(before[k], after[k]), k


def test_train_branch_learns_separable_data(data):
    x, y = data
    net = build_network(CascadeConfig(), 3)
    log = TrainingLog()
    train_branch(net, 1, x, y, small_cfg(epochs_branch=4, learning_rate=5e-3, batch_size=16), log)
    hx, hy = separable_patches(100, 99)
    acc = np.mean((branch_scores(net, hx, 1) > 0.5) == hy)
    assert acc >= 0.99
    means = log.epoch_means("branch1")
    assert means[-1] < means[0]


def test_train_branch_is_deterministic(data):
    x, y = data
    a = train_branch(build_network(CascadeConfig(), 4), 1, x[:64], y[:64], small_cfg(epochs_branch=1))
    b = train_branch(build_network(CascadeConfig(), 4), 1, x[:64], y[:64], small_cfg(epochs_branch=1))
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])


def test_train_branches_history_keeps_positives(data):
    x, y = data
    net = build_network(CascadeConfig(), 5)
    history = train_branches(net, x, y, small_cfg(epochs_branch=1))
    assert [h["stage"] for h in history] == [1, 2, 3, 4]
    pools = [h["pool"] for h in history]
    assert pools[0] == len(y) and all(a >= b for a, b in zip(pools, pools[1:]))
    assert all(h["pool"] - h["negatives"] == int(y.sum()) for h in history)


@pytest.fixture(scope="module")
def e2e_runs(data):
    x, y = data
    runs = {}
    for beta in (0.5, 0.0):
        net = build_network(CascadeConfig(), 6)
        log = TrainingLog()
        train_end_to_end(net, x, y, small_cfg(epochs_e2e=4, beta=beta), log)
        runs[beta] = (net, log)
    return runs


def test_end_to_end_loss_decreases(e2e_runs):
    totals = [r[5] for r in e2e_runs[0.5][1].rows]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_cost_weight_lowers_validation_cost_term(e2e_runs):
    hx, hy = separable_patches(100, 7)
    net_a, net_b = e2e_runs[0.5][0], e2e_runs[0.0][0]
    costs = normalized_costs(net_a)
    la = loss_joint(stage_probabilities(net_a, hx), hy, costs, 0.5, reduction="mean").lgamma
    lb = loss_joint(stage_probabilities(net_b, hx), hy, costs, 0.5, reduction="mean").lgamma
    assert la < lb


def test_end_to_end_is_bit_reproducible(data, e2e_runs):
    x, y = data
    net = build_network(CascadeConfig(), 6)
    train_end_to_end(net, x, y, small_cfg(epochs_e2e=4, beta=0.5))
    for k, v in e2e_runs[0.5][0].parameters().items():
        assert np.array_equal(v, net.parameters()[k])


def test_training_log_csv(tmp_path):
    log = TrainingLog(tmp_path / "live.csv")
    log.add("e2e", 0, 0, 0.5, 0.25, 0.625)
    log.add("e2e", 0, 1, 0.25, 0.25, 0.375)
    log.write_csv(tmp_path / "out.csv")
    expected = "phase,epoch,batch,loss_p,loss_gamma,loss_total\ne2e,0,0,0.5,0.25,0.625\ne2e,0,1,0.25,0.25,0.375\n"
    assert (tmp_path / "out.csv").read_text() == expected
    assert (tmp_path / "live.csv").read_text() == expected
    assert log.epoch_means("e2e") == [0.5]
