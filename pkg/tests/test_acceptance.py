"""Acceptance criteria 1-9, one PASS/FAIL line each.

The lines are collected in ``conftest.ACCEPTANCE`` and printed in the pytest
terminal summary.  Criteria 4, 5, 6 and 8 share one desk-scale pipeline run
(``synth``, ``train``, ``eval`` on the command-line defaults), which takes a
few minutes on one CPU core.
"""

import csv
import time

import numpy as np
import pytest

from ccnn.checks import dense_patch_error, network_gradient_error
from ccnn.cli import _sampler_kwargs, main, parse_args
from ccnn.loss import chain_positive_prob, loss_accuracy, loss_cost, loss_gradients, loss_joint
from ccnn.metrics import roc_points
from ccnn.model import CascadeConfig, build_network, load_model, stage_probabilities, weight_payload
from ccnn.synth import read_dataset, sample_patches, split_validation
from ccnn.tensor_ops import (
    ConvKernel,
    PoolSpec,
    conv_backward,
    conv_forward,
    pool_backward,
    pool_forward,
    relu,
    relu_backward,
    softmax2,
    softmax2_backward,
)
from ccnn.train import normalized_costs
from conftest import ACCEPTANCE, finite_difference, rel_err
from independent_oracles import FROZEN, compute

SEED = 42
PIPELINE_BUDGET_S = 600.0


def record(number, ok, detail):
    ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_dense_patch_equivalence():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    single = double = 0.0
    for i in range(10):
        image = rng.random((96, 96, 3))
        net = build_network(CascadeConfig(), seed=SEED + i)
        single = max(single, dense_patch_error(net, image))
        double = max(double, dense_patch_error(net.astype(np.float64), image))
    seconds = time.perf_counter() - t0
    ok = single <= 1e-5 and double <= 1e-10 and seconds <= 60
    record(1, ok, f"max error single {single:.2e} (<= 1e-5), double {double:.2e} (<= 1e-10), "
                  f"{seconds:.1f}s (<= 60s) over 10 images 96x96")


# -- 2 ------------------------------------------------------------------------------


def _layer_errors(rng):
    """Worst relative error per layer type, each over at least 100 coordinates."""
    out = {}

    def check(name, f, pairs):
        worst, n = 0.0, 0
        for arr, grad in pairs:
            coords = rng.choice(arr.size, size=min(arr.size, 120), replace=False)
            worst = max(worst, rel_err(grad.reshape(-1)[coords], finite_difference(f, arr, coords)).max())
            n += len(coords)
        out[name] = (worst, n)

    for dilation in (1, 2, 4):
        x = rng.normal(size=(2, 7 + 2 * dilation, 7 + 2 * dilation, 3))
        k = ConvKernel(rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4), dilation)
        probe = rng.normal(size=conv_forward(x, k).shape)
        d_x, d_w, d_b = conv_backward(x, k, probe)
        check(f"conv l={dilation}", lambda: float(np.sum(conv_forward(x, k) * probe)),
              [(x, d_x), (k.weights, d_w), (k.bias, d_b)])

    for spec in (PoolSpec("max", 3, 3, 2, 1), PoolSpec("max", 3, 3, 1, 4), PoolSpec("average", 11, 11, 1, 1)):
        if spec.kind == "max":
            # distinct, well separated values keep every argmax fixed under the step
            x = rng.permutation(2 * 13 * 13 * 3).reshape(2, 13, 13, 3) * 0.01
        else:
            x = rng.normal(size=(2, 13, 13, 3))
        y, routing = pool_forward(x, spec)
        probe = rng.normal(size=y.shape)
        d_x = pool_backward(routing, probe, spec)
        check(f"{spec.kind} pool {spec.kh}x{spec.kw} s={spec.stride} l={spec.dilation}",
              lambda: float(np.sum(pool_forward(x, spec)[0] * probe)), [(x, d_x)])

    x = rng.normal(size=300)
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    probe = rng.normal(size=300)
    check("relu", lambda: float(np.sum(relu(x) * probe)), [(x, relu_backward(x, probe))])

    z = rng.normal(size=(80, 2))
    probe = rng.normal(size=(80, 2))
    check("softmax2", lambda: float(np.sum(softmax2(z) * probe)), [(z, softmax2_backward(softmax2(z), probe))])

    p = rng.uniform(0.05, 0.95, size=(40, 4))
    y = rng.integers(0, 2, 40)
    costs = np.array([1.0, 1.4, 1.9, 2.2])
    check("joint loss", lambda: loss_joint(p, y, costs, 0.5).total, [(p, loss_gradients(p, y, costs, 0.5))])
    return out


def test_criterion_2_gradient_integrity():
    rng = np.random.default_rng(SEED)
    layers = _layer_errors(rng)
    net = build_network(CascadeConfig(), seed=SEED).astype(np.float64)
    patches = rng.random((4, 64, 64, 3))
    full = network_gradient_error(net, patches, np.array([1, 0, 1, 0]), n_coords=100, seed=SEED)
    layer_ok = all(err <= 1e-6 and n >= 100 for err, n in layers.values())
    worst_name = max(layers, key=lambda k: layers[k][0])
    ok = layer_ok and full <= 1e-4
    record(2, ok, f"worst layer {worst_name} {layers[worst_name][0]:.2e} (<= 1e-6, "
                  f"{len(layers)} layer checks of >= 100 coords), full network {full:.2e} (<= 1e-4, 100+ coords)")


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_loss_oracles():
    fresh = compute()
    got = {
        "positive_prob_0.9_0.8_1.0": float(chain_positive_prob([0.9, 0.8, 1.0])),
        "cost_T12_chain_0.9_0.8": loss_cost([[0.9, 0.8]], [1.0, 2.0]),
        "accuracy_positive_0.72": loss_accuracy([[0.9, 0.8]], [1]),
        "joint_beta_half": loss_joint([[0.9, 0.8]], [1], [1.0, 2.0], 0.5).total,
    }
    worst = max(max(abs(got[k] - FROZEN[k]), abs(fresh[k] - FROZEN[k])) for k in got)
    ok = worst <= 1e-9 and abs(got["accuracy_positive_0.72"] - 0.328504) < 5e-7 \
        and abs(got["joint_beta_half"] - 1.498504) < 5e-7
    record(3, ok, f"0.72 / 2.34 / 0.328504 / 1.498504 reproduced, worst gap to independent script {worst:.1e} "
                  f"(<= 1e-9)")


# -- shared desk-scale pipeline ---------------------------------------------------------


def _summary(path):
    with open(path) as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data, model, report = root / "data", root / "model", root / "report"
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(model)]) == 0
    assert main(["eval", "--model", str(model / "model.ccnn"), "--data", str(data), "--out", str(report)]) == 0
    seconds = time.perf_counter() - t0
    return {"root": root, "data": data, "model": model, "report": report, "seconds": seconds,
            "summary": _summary(report / "summary.csv")}


def test_criterion_4_desk_scale_detection(desk):
    s = desk["summary"]
    records = read_dataset(desk["data"])
    n_train = sum(r.split == "train" for r in records)
    ok = (s["auc"] >= 0.95 and s["detection_recall"] >= 0.90 and s["false_positives_per_image"] <= 1.0
          and desk["seconds"] <= PIPELINE_BUDGET_S)
    record(4, ok, f"{n_train} train / {len(records) - n_train} test scenes: patch AUC {s['auc']:.4f} (>= 0.95), "
                  f"detection recall {s['detection_recall']:.3f} at IoU 0.7 (>= 0.90) with "
                  f"{s['false_positives_per_image']:.2f} FP/image (<= 1), pipeline {desk['seconds']:.0f}s (<= 600s)")


def test_criterion_5_cascade_efficiency(desk):
    s = desk["summary"]
    net = load_model(desk["model"] / "model.ccnn")
    ok = s["background_rejected_stage1"] >= 0.5 and s["mac_ratio"] <= 0.6
    record(5, ok, f"thresholds {np.round(net.thresholds, 2).tolist()}: stage-1 background rejection "
                  f"{s['background_rejected_stage1']:.3f} (>= 0.5), early-exit MAC ratio {s['mac_ratio']:.3f} (<= 0.6)")


def _validation_cost_and_auc(net, data):
    """Mean L_gamma on validation patches and product-score AUC on test patches.

    Sampler settings and seeds match ``ccnn train`` (seed + 2) and ``ccnn eval`` (seed + 3).
    """
    args = parse_args(["train", "--data", str(data), "--out", "unused"])
    sampler = _sampler_kwargs(args)
    records = read_dataset(data)
    _, val = split_validation(records, args.val_fraction, SEED)
    test = [r for r in records if r.split == "test"]
    vs = sample_patches([(r.load(), r.boxes) for r in val], seed=SEED + 2, **sampler)
    ts = sample_patches([(r.load(), r.boxes) for r in test], seed=SEED + 3, **sampler)
    lg = loss_cost(stage_probabilities(net, vs.patches), normalized_costs(net))
    area = roc_points(np.prod(stage_probabilities(net, ts.patches), axis=1), ts.labels).auc
    return lg, area


def test_criterion_6_beta_ablation(desk):
    ablated = desk["root"] / "beta0"
    assert main(["train", "--data", str(desk["data"]), "--out", str(ablated), "--beta", "0"]) == 0
    lg_a, auc_a = _validation_cost_and_auc(load_model(desk["model"] / "model.ccnn"), desk["data"])
    lg_b, auc_b = _validation_cost_and_auc(load_model(ablated / "model.ccnn"), desk["data"])
    ok = lg_a < lg_b and auc_b - auc_a <= 0.02
    record(6, ok, f"validation L_gamma beta=0.5 {lg_a:.4f} vs beta=0 {lg_b:.4f} (strictly lower); "
                  f"AUC {auc_a:.4f} vs {auc_b:.4f} (drop <= 0.02)")


def test_criterion_7_compactness():
    payload = len(weight_payload(build_network(CascadeConfig.parse("16/16/32/32"), 0)))
    count = build_network(CascadeConfig(), 0).parameter_count()
    ok = payload < 100 * 1024 and count == 8568
    record(7, ok, f"16/16/32/32 payload {payload} bytes (< 102400); 16/16/16/16 parameters {count} (== 8568)")


def test_criterion_8_stage_monotonicity(desk):
    with open(desk["report"] / "stage_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    acc = [float(r["accuracy"]) for r in rows]
    rec = [float(r["recall"]) for r in rows]
    ok = all(b >= a for a, b in zip(acc, acc[1:])) and all(b <= a for a, b in zip(rec, rec[1:]))
    record(8, ok, f"cumulative accuracy {[round(v, 4) for v in acc]} (non-decreasing), "
                  f"cumulative recall {[round(v, 4) for v in rec]} (non-increasing)")


# -- 9 ------------------------------------------------------------------------------


def _small_pipeline(root):
    data, model, report = root / "data", root / "model", root / "report"
    assert main(["synth", "--out", str(data), "--scenes", "8", "--width", "160", "--height", "120",
                 "--players", "1,2", "--player-height", "60,100"]) == 0
    assert main(["train", "--data", str(data), "--out", str(model), "--epochs-branch", "1", "--epochs-e2e", "1",
                 "--val-fraction", "0.25"]) == 0
    assert main(["eval", "--model", str(model / "model.ccnn"), "--data", str(data), "--out", str(report)]) == 0
    assert main(["detect", "--model", str(model / "model.ccnn"), "--out", str(report / "detect.csv"),
                 str(data / "scenes" / "0000.ppm")]) == 0
    names = ["data/annotations.csv", "data/split.csv", "model/model.ccnn", "model/train_log.csv"]
    names += [f"report/{n}" for n in ("roc.csv", "stage_report.csv", "detections.csv", "summary.csv", "detect.csv")]
    return {n: (root / n).read_bytes() for n in names}


def test_criterion_9_determinism(tmp_path):
    a = _small_pipeline(tmp_path / "a")
    b = _small_pipeline(tmp_path / "b")
    differing = [n for n in a if a[n] != b[n]]
    record(9, not differing, f"{len(a)} model/CSV outputs of synth-train-eval-detect compared byte for byte, "
                             f"{len(differing)} differ {differing}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
