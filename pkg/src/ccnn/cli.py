"""Command-line entry point: ``ccnn synth|train|detect|eval|selfcheck``.

Every flag has a default.  ``--config FILE`` reads ``key=value`` lines (``#``
starts a comment; keys are flag names without the dashes) and flags given on
the command line win over the file.  Exit status is 0 on success, 1 on a usage
error and 2 when the run itself fails.
"""

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .images import PPMError, ppm_read, ppm_write
from .model import CascadeConfig, ModelFormatError, build_network, load_model, save_model, stage_probabilities
from .tensor_ops import SizingError, dtype_for

log = logging.getLogger("ccnn")

DETECTION_HEADER = ["image", "x", "y", "size", "score", "level"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_usage()}")


def _pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI integers, got {text!r}") from None
    return lo, hi


def _fraction(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p):
    p.add_argument("--config", type=Path, help="key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("-v", "--verbose", action="store_true")


def _sampler(p):
    p.add_argument("--ratio", type=float, default=3.0, help="negatives per positive")
    p.add_argument("--positives-per-box", type=_positive_int, default=4)
    p.add_argument("--positive-jitter", type=float, default=0.03)
    p.add_argument("--negative-iou", type=_fraction, default=0.5)
    p.add_argument("--near-fraction", type=_fraction, default=0.6)
    p.add_argument("--near-spread", type=float, default=0.35)


def _search(p):
    p.add_argument("--pyramid-scale", type=float, default=1.25)
    p.add_argument("--nms-iou", type=_fraction, default=0.3)
    p.add_argument("--min-size", type=float, default=64.0, help="smallest player side searched, pixels")
    p.add_argument("--score-threshold", type=_fraction, default=0.0)


def build_parser():
    parser = _Parser(prog="ccnn", description="Cascaded CNN player detector.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--scenes", type=_positive_int, default=400)
    p.add_argument("--width", type=_positive_int, default=320)
    p.add_argument("--height", type=_positive_int, default=240)
    p.add_argument("--players", type=_pair, default=(2, 5))
    p.add_argument("--player-height", type=_pair, default=(60, 180))
    p.add_argument("--texture", choices=("stripes", "plain", "court"), default="stripes")
    p.add_argument("--blur", type=_fraction, default=0.3)
    p.add_argument("--occlusion", type=_fraction, default=0.2)
    p.add_argument("--test-fraction", type=_fraction, default=0.5)

    p = sub.add_parser("train", help="train and calibrate a cascade")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--phase", choices=("branches", "e2e", "calibrate", "all"), default="all")
    p.add_argument("--model", type=Path, help="starting model for e2e/calibrate (default OUT/model.ccnn)")
    p.add_argument("--net", default="16/16/16/16", help="trunk filters per block")
    p.add_argument("--epochs-branch", type=int, default=3)
    p.add_argument("--epochs-e2e", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch-size", type=_positive_int, default=128)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--recall-floor", type=_fraction, default=0.97)
    p.add_argument("--val-fraction", type=_fraction, default=0.2)
    _sampler(p)

    p = sub.add_parser("detect", help="detect players in PPM images")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("detections.csv"))
    p.add_argument("--overlay", type=Path, help="directory for PPM copies with boxes drawn")
    _search(p)

    p = sub.add_parser("eval", help="patch ROC, detection counts and stage report on test scenes")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--iou", type=_fraction, default=0.7)
    p.add_argument("--fpr", type=_fraction, default=0.1)
    p.add_argument("--split", default="test")
    p.add_argument("--max-scenes", type=int, default=0, help="0 means all")
    _search(p)
    _sampler(p)

    p = sub.add_parser("selfcheck", help="dense/patch oracle and gradient checks")
    _common(p)
    p.add_argument("--images", type=_positive_int, default=3)
    return parser


def read_config_file(path):
    values = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    if not argv:
        raise UsageError(parser.format_usage())
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage())
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        values = read_config_file(args.config)
        for key in values:
            if key not in known or key in ("help", "config"):
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        # reparse with the file as defaults so explicit flags still win
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def effective_config(args):
    return " ".join(f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "config")


# ---------------------------------------------------------------------------
# subcommands


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_dataset(root):
    for name in ("annotations.csv", "split.csv"):
        _require_file(Path(root) / name, "dataset file")


def cmd_synth(args):
    from .synth import SceneParams, generate_dataset

    try:
        params = SceneParams(width=args.width, height=args.height, players=args.players,
                             player_height=args.player_height, blur_probability=args.blur,
                             occlusion_probability=args.occlusion, texture=args.texture, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = generate_dataset(args.out, params, args.scenes, seed=args.seed, test_fraction=args.test_fraction)
    n_test = sum(r.split == "test" for r in records)
    print(f"scenes={len(records)} train={len(records) - n_test} test={n_test} out={args.out}")


def _sampler_kwargs(args):
    return dict(ratio=args.ratio, positives_per_box=args.positives_per_box,
                positive_jitter=args.positive_jitter, negative_iou_max=args.negative_iou,
                near_fraction=args.near_fraction, near_spread=args.near_spread)


def _samples(records, seed, args):
    from .synth import sample_patches

    return sample_patches([(r.load(), r.boxes) for r in records], seed=seed, **_sampler_kwargs(args))


def cmd_train(args):
    from .plotting import plot_training_log
    from .synth import read_dataset, split_validation
    from .train import TrainConfig, TrainingLog, calibrate_thresholds, train_branches, train_end_to_end

    _require_dataset(args.data)
    try:
        config = CascadeConfig.parse(args.net)
        cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs_branch=args.epochs_branch,
                          epochs_e2e=args.epochs_e2e, beta=args.beta, recall_floor=args.recall_floor,
                          seed=args.seed)
    except (ValueError, SizingError) as exc:
        raise UsageError(str(exc)) from None
    start = args.model or args.out / "model.ccnn"
    if args.phase in ("e2e", "calibrate"):
        _require_file(start, "starting model")
        net = load_model(start)
    else:
        net = build_network(config, seed=args.seed)
    net = net.astype(dtype_for(args.precision))

    records = read_dataset(args.data)
    train_recs, val_recs = split_validation(records, args.val_fraction, args.seed)
    if not train_recs:
        raise RuntimeError("dataset has no training scenes")
    t0 = time.perf_counter()
    training_log = TrainingLog()
    if args.phase != "calibrate":
        train_set = _samples(train_recs, args.seed + 1, args)
        log.info("training patches: %d (%d positive)", len(train_set), int(train_set.labels.sum()))
        if args.phase in ("branches", "all"):
            train_branches(net, train_set.patches, train_set.labels, cfg, training_log)
        if args.phase in ("e2e", "all"):
            train_end_to_end(net, train_set.patches, train_set.labels, cfg, training_log)
    if args.phase in ("calibrate", "all"):
        if not val_recs:
            raise RuntimeError("no validation scenes to calibrate on; raise --val-fraction")
        val_set = _samples(val_recs, args.seed + 2, args)
        net.thresholds = calibrate_thresholds(stage_probabilities(net, val_set.patches), val_set.labels,
                                              args.recall_floor)
        log.info("calibrated thresholds: %s", " ".join(f"{v:.2f}" for v in net.thresholds))

    args.out.mkdir(parents=True, exist_ok=True)
    save_model(net, args.out / "model.ccnn")
    if training_log.rows:
        training_log.write_csv(args.out / "train_log.csv")
        plot_training_log(training_log.rows, args.out / "train_log.png")
    lam = ",".join(f"{v:.2f}" for v in net.thresholds)
    print(f"phase={args.phase} model={args.out / 'model.ccnn'} thresholds={lam} "
          f"seconds={time.perf_counter() - t0:.1f}")


def _detection_rows(name, boxes):
    return [[name, f"{b.x:.3f}", f"{b.y:.3f}", f"{b.size:.3f}", f"{b.score:.6f}", b.level] for b in boxes]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def draw_overlay(image, boxes, colour=(255, 0, 0)):
    from PIL import Image, ImageDraw

    canvas = Image.fromarray(image)
    draw = ImageDraw.Draw(canvas)
    for b in boxes:
        draw.rectangle([b.x, b.y, b.x + b.size - 1, b.y + b.size - 1], outline=colour, width=2)
    return np.asarray(canvas)


def _check_search(args):
    if args.pyramid_scale <= 1:
        raise UsageError(f"--pyramid-scale must be > 1, got {args.pyramid_scale}")
    if args.min_size <= 0:
        raise UsageError(f"--min-size must be positive, got {args.min_size}")


def cmd_detect(args):
    from .dense import pyramid_detect

    _check_search(args)
    _require_file(args.model, "model")
    for path in args.images:
        _require_file(path, "image")
    net = load_model(args.model).astype(dtype_for(args.precision))
    images = [(path, ppm_read(path)) for path in args.images]
    rows, total = [], 0
    results = []
    for path, image in images:
        boxes = pyramid_detect(net, image, args.pyramid_scale, args.min_size, nms_iou=args.nms_iou,
                               score_threshold=args.score_threshold)
        rows += _detection_rows(path.name, boxes)
        results.append((path, image, boxes))
        total += len(boxes)
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(args.out, DETECTION_HEADER, rows)
    if args.overlay is not None:
        args.overlay.mkdir(parents=True, exist_ok=True)
        for path, image, boxes in results:
            ppm_write(draw_overlay(image, boxes), args.overlay / f"{path.stem}_overlay.ppm")
    print(f"images={len(images)} detections={total} out={args.out}")


def cmd_eval(args):
    from .dense import EfficiencyCounts, count_efficiency, dense_position_costs, level_candidates, nms, \
        pyramid_levels, to_dense_plan
    from .metrics import match_detections, recall_at_fpr, roc_points, stage_report
    from .plotting import plot_roc, plot_stage_report
    from .synth import read_dataset

    _check_search(args)
    _require_file(args.model, "model")
    _require_dataset(args.data)
    net = load_model(args.model).astype(dtype_for(args.precision))
    records = [r for r in read_dataset(args.data) if r.split == args.split]
    if args.max_scenes > 0:
        records = records[:args.max_scenes]
    if not records:
        raise UsageError(f"no scenes in split {args.split!r}")

    t0 = time.perf_counter()
    test_set = _samples(records, args.seed + 3, args)
    probs = stage_probabilities(net, test_set.patches)
    curve = roc_points(np.prod(probs, axis=1), test_set.labels)
    report = stage_report(probs, test_set.labels, net.thresholds, args.fpr)

    plan = to_dense_plan(net)
    costs = dense_position_costs(net, plan)
    counts = EfficiencyCounts()
    det_rows = []
    tp = fp = n_gt = 0
    for r in records:
        candidates = []
        for level, s, res in pyramid_levels(net, r.load(), args.pyramid_scale, args.min_size, plan=plan):
            count_efficiency(counts, res, s, r.boxes, net.thresholds, costs, plan.patch_size)
            candidates += level_candidates(res, level, s, plan.patch_size, args.score_threshold)
        boxes = nms(candidates, args.nms_iou)
        m = match_detections(boxes, r.boxes, args.iou)
        tp, fp, n_gt = tp + m.tp, fp + m.fp, n_gt + len(r.boxes)
        det_rows += _detection_rows(r.path.name, boxes)

    summary = {
        "patches": len(test_set),
        "auc": curve.auc,
        "recall_at_fpr": recall_at_fpr(curve, args.fpr),
        "scenes": len(records),
        "ground_truth": n_gt,
        "true_positives": tp,
        "false_positives": fp,
        "detection_recall": tp / n_gt if n_gt else 0.0,
        "false_positives_per_image": fp / len(records),
        "background_rejected_stage1": counts.first_stage_rejection,
        "mac_ratio": counts.mac_ratio,
    }
    args.out.mkdir(parents=True, exist_ok=True)
    _write_csv(args.out / "roc.csv", ["threshold", "fpr", "tpr"],
               [[f"{t:.9g}", f"{f:.9g}", f"{v:.9g}"] for t, f, v in zip(curve.thresholds, curve.fpr, curve.tpr)])
    _write_csv(args.out / "stage_report.csv", list(report.COLUMNS) + ["threshold"],
               [[row[0]] + [f"{v:.6f}" for v in row[1:]] + [f"{net.thresholds[row[0] - 1]:.2f}"]
                for row in report.rows()])
    _write_csv(args.out / "detections.csv", DETECTION_HEADER, det_rows)
    _write_csv(args.out / "summary.csv", ["metric", "value"],
               [[k, f"{v:.6f}" if isinstance(v, float) else v] for k, v in summary.items()])
    plot_roc(curve, args.out / "roc.png", args.fpr)
    plot_stage_report(report, args.out / "stage_report.png")
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items())
          + f" seconds={time.perf_counter() - t0:.1f}")


def cmd_selfcheck(args):
    from .checks import run_selfcheck

    ok = True
    for name, value, tol in run_selfcheck(seed=args.seed, images=args.images):
        passed = value <= tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {value:.3e} (tolerance {tol:.0e})")
    if not ok:
        raise RuntimeError("self-check failed")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
            "selfcheck": cmd_selfcheck}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.stderr.write(f"ccnn {args.command}: {effective_config(args)}\n")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"ccnn {args.command}: {exc}\n")
        return 1
    except (OSError, ValueError, RuntimeError, ModelFormatError, PPMError) as exc:
        sys.stderr.write(f"ccnn {args.command}: error: {exc}\n")
        return 2
    return 0
