"""Whole-image detection with the patch-trained cascade.

Running the patch network at stride 1 over an image requires every layer that
follows a stride-2 pool to space its taps by the product of the strides before
it.  With that, entry ``(y, x)`` of every dense map equals the patch-mode value
for the patch whose top-left corner is ``(y, x)``.

Evaluation is tiled.  Each tile of each feature map is always computed from the
same crop of the previous map, so skipping tiles with no surviving anchors
changes nothing in the tiles that are computed.
"""

import math
from dataclasses import dataclass

import numpy as np

from .images import resample
from .model import K, PLAYER, TRUNK_POOL
from .tensor_ops import PoolSpec, SizingError, conv_forward, pool_forward, relu, softmax2


def layer_dilations(layers):
    """Dilation of each layer in a ``[(kind, stride), ...]`` chain.

    A layer's dilation is the product of the strides of the pools before it;
    pools themselves then run at stride 1.
    """
    out, acc = [], 1
    for kind, stride in layers:
        out.append(acc)
        if kind == "pool":
            acc *= stride
    return out


@dataclass(frozen=True)
class DensePlan:
    trunk_dilations: tuple  # C1, P1, C2, P2, C3, P3, C4
    branch_dilations: tuple
    gap_kernels: tuple
    gap_dilations: tuple
    patch_size: int
    pool_stride: int = 1
    anchor_offset: tuple = (0, 0)

    def conv_dilation(self, j):
        return self.trunk_dilations[2 * (j - 1)]

    def pool_dilation(self, j):
        return self.trunk_dilations[2 * (j - 1) + 1]

    def block_shrink(self, j):
        s = 2 * self.conv_dilation(j)
        if j < K:
            s += 2 * self.pool_dilation(j)
        return s

    def branch_shrink(self, j):
        d = self.branch_dilations[j - 1]
        return 2 * d + (self.gap_kernels[j - 1] - 1) * self.gap_dilations[j - 1]

    def anchors(self, height, width):
        p = self.patch_size
        return height - p + 1, width - p + 1


def to_dense_plan(net):
    chain = []
    for j in range(1, K + 1):
        chain.append(("conv", 1))
        if j < K:
            chain.append(("pool", TRUNK_POOL.stride))
    trunk = tuple(layer_dilations(chain))
    # branch j reads the output of block j: after its pool for j < K
    tap = [trunk[2 * j + 1] * TRUNK_POOL.stride for j in range(K - 1)] + [trunk[-1]]
    return DensePlan(
        trunk_dilations=trunk,
        branch_dilations=tuple(tap),
        gap_kernels=tuple(net.branch_extents),
        gap_dilations=tuple(tap),
        patch_size=net.config.patch_size,
    )


def dense_position_costs(net, plan=None):
    """MACs to evaluate one anchor position at each stage in dense mode."""
    plan = plan or to_dense_plan(net)
    costs = []
    for j in range(1, K + 1):
        k = net.trunk[j - 1]
        c = k.kh * k.kw * k.in_channels * k.out_channels
        if j < K:
            c += TRUNK_POOL.kh * TRUNK_POOL.kw * k.out_channels
        b = net.branches[j - 1]
        c += b.kh * b.kw * b.in_channels * b.out_channels
        c += plan.gap_kernels[j - 1] ** 2 * b.out_channels
        costs.append(c)
    return np.array(costs, dtype=np.int64)


@dataclass
class DenseResult:
    stage_maps: np.ndarray  # (K, AH, AW) per-stage player probability, 0 where skipped
    final: np.ndarray  # (AH, AW) cascade score, 0 where rejected
    evaluated: np.ndarray  # (K,) anchors reaching each stage
    alive: np.ndarray  # (AH, AW) anchors passing every stage


class _TiledCascade:
    def __init__(self, net, plan, image, tile):
        self.net, self.plan, self.tile = net, plan, tile
        h, w = image.shape[:2]
        self.maps = [image]
        self.done = [None]
        for j in range(1, K + 1):
            h -= plan.block_shrink(j)
            w -= plan.block_shrink(j)
            c = net.trunk[j - 1].out_channels
            self.maps.append(np.zeros((h, w, c), dtype=image.dtype))
            self.done.append(np.zeros((-(-h // tile), -(-w // tile)), dtype=bool))
        self.convs = [k.with_dilation(plan.conv_dilation(j)) for j, k in enumerate(net.trunk, 1)]
        self.pools = [PoolSpec("max", TRUNK_POOL.kh, TRUNK_POOL.kw, plan.pool_stride, plan.pool_dilation(j))
                      for j in range(1, K)]
        self.heads = [k.with_dilation(d) for k, d in zip(net.branches, plan.branch_dilations)]
        self.gaps = [PoolSpec("average", g, g, 1, d) for g, d in zip(plan.gap_kernels, plan.gap_dilations)]

    def _ensure_region(self, j, r0, r1, c0, c1):
        """Make rows [r0, r1) x cols [c0, c1) of map j available."""
        if j == 0:
            return
        t = self.tile
        for ty in range(r0 // t, (r1 - 1) // t + 1):
            for tx in range(c0 // t, (c1 - 1) // t + 1):
                if not self.done[j][ty, tx]:
                    self._compute_tile(j, ty, tx)

    def _compute_tile(self, j, ty, tx):
        t = self.tile
        out = self.maps[j]
        r0, c0 = ty * t, tx * t
        r1, c1 = min(r0 + t, out.shape[0]), min(c0 + t, out.shape[1])
        s = self.plan.block_shrink(j)
        self._ensure_region(j - 1, r0, r1 + s, c0, c1 + s)
        x = self.maps[j - 1][r0:r1 + s, c0:c1 + s]
        y = relu(conv_forward(x, self.convs[j - 1]))
        if j < K:
            y, _ = pool_forward(y, self.pools[j - 1], record=False)
        out[r0:r1, c0:c1] = y
        self.done[j][ty, tx] = True

    def branch(self, j, r0, r1, c0, c1):
        """Stage-j probabilities for anchors [r0, r1) x [c0, c1)."""
        s = self.plan.branch_shrink(j)
        self._ensure_region(j, r0, r1 + s, c0, c1 + s)
        x = self.maps[j][r0:r1 + s, c0:c1 + s]
        logits, _ = pool_forward(conv_forward(x, self.heads[j - 1]), self.gaps[j - 1])
        return softmax2(logits)[..., PLAYER]


def dense_forward(net, plan, image, thresholds=None, sparse=True, tile=64):
    """Per-stage and final cascade maps for every 64x64 anchor of ``image``.

    ``image`` is (H, W, 3) in [0, 1]; it is computed in the network's dtype.
    Anchors failing stage j are zeroed in the final map; with ``sparse`` the
    tiles holding no surviving anchor are not evaluated at later stages.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != net.config.input_channels:
        raise SizingError(f"image must be (H, W, {net.config.input_channels}), got {image.shape}")
    p = plan.patch_size
    if image.shape[0] < p or image.shape[1] < p:
        raise SizingError(f"image {image.shape[0]}x{image.shape[1]} is smaller than the {p}x{p} patch")
    thresholds = net.thresholds if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    image = image.astype(net.dtype, copy=False)
    ah, aw = plan.anchors(*image.shape[:2])
    run = _TiledCascade(net, plan, image, tile)
    stage_maps = np.zeros((K, ah, aw), dtype=image.dtype)
    alive = np.ones((ah, aw), dtype=bool)
    evaluated = np.zeros(K, dtype=np.int64)
    for j in range(1, K + 1):
        evaluated[j - 1] = alive.sum()
        for r0 in range(0, ah, tile):
            for c0 in range(0, aw, tile):
                r1, c1 = min(r0 + tile, ah), min(c0 + tile, aw)
                mask = alive[r0:r1, c0:c1]
                if sparse and not mask.any():
                    continue
                probs = run.branch(j, r0, r1, c0, c1)
                stage_maps[j - 1, r0:r1, c0:c1] = np.where(mask, probs, 0) if sparse else probs
        alive &= stage_maps[j - 1] > thresholds[j - 1]
    final = np.where(alive, np.prod(stage_maps, axis=0), 0).astype(image.dtype)
    return DenseResult(stage_maps, final, evaluated, alive)


# ---------------------------------------------------------------------------
# multi-scale search


@dataclass
class DetectionBox:
    x: float
    y: float
    size: float
    score: float
    level: int


def pyramid_scales(width, height, scale_factor=1.25, min_size=64, patch_size=64):
    """``(level, scale, level_width, level_height)`` until the level is smaller than a patch.

    ``scale`` is original pixels per level pixel; level 0 puts a ``min_size``
    object at patch size.
    """
    if scale_factor <= 1:
        raise ValueError(f"scale_factor must be > 1, got {scale_factor}")
    out = []
    level = 0
    while True:
        s = (min_size / patch_size) * scale_factor ** level
        w, h = int(math.floor(width / s + 1e-9)), int(math.floor(height / s + 1e-9))
        if w < patch_size or h < patch_size:
            return out
        out.append((level, s, w, h))
        level += 1


def anchor_to_box(ay, ax, scale, patch_size=64):
    return ax * scale, ay * scale, patch_size * scale


def box_to_anchor(x, y, scale):
    return int(round(y / scale)), int(round(x / scale))


@dataclass
class PyramidStats:
    positions: int = 0
    evaluated: np.ndarray = None  # anchors reaching each stage, summed over levels
    rejected_at: np.ndarray = None  # anchors rejected at each stage


def pyramid_levels(net, image, scale_factor=1.25, min_size=None, thresholds=None, plan=None,
                   sparse=True):
    """Yield ``(level, scale, DenseResult)`` for each level of the image pyramid.

    ``image`` is uint8 or float in [0, 1].  Level ``k`` is the image shrunk by
    ``scale = (min_size / patch) * scale_factor ** k``.
    """
    plan = plan or to_dense_plan(net)
    p = plan.patch_size
    min_size = p if min_size is None else min_size
    if min_size <= 0:
        raise ValueError(f"min_size must be positive, got {min_size}")
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    for level, s, lw, lh in pyramid_scales(w, h, scale_factor, min_size, p):
        level_img = resample(image, lw, lh, (0.0, 0.0, lw * s, lh * s)).astype(np.float32) / 255.0
        yield level, s, dense_forward(net, plan, level_img, thresholds, sparse=sparse)


def level_candidates(res, level, scale, patch_size=64, score_threshold=0.0):
    """Boxes, in original image coordinates, for anchors surviving every stage."""
    ys, xs = np.nonzero(res.alive & (res.final > score_threshold))
    out = []
    for ay, ax in zip(ys.tolist(), xs.tolist()):
        bx, by, bs = anchor_to_box(ay, ax, scale, patch_size)
        out.append(DetectionBox(bx, by, bs, float(res.final[ay, ax]), level))
    return out


def pyramid_detect(net, image, scale_factor=1.25, min_size=None, thresholds=None,
                   nms_iou=0.3, plan=None, sparse=True, stats=None, score_threshold=0.0):
    """Detect players at every pyramid level, then suppress overlaps across levels.

    Returns boxes in original image coordinates after NMS.
    """
    plan = plan or to_dense_plan(net)
    candidates = []
    for level, s, res in pyramid_levels(net, image, scale_factor, min_size, thresholds, plan, sparse):
        if stats is not None:
            _accumulate(stats, res)
        candidates += level_candidates(res, level, s, plan.patch_size, score_threshold)
    return nms(candidates, nms_iou)


def _accumulate(stats, res):
    ev = res.evaluated
    rejected = ev - np.r_[ev[1:], res.alive.sum()]
    if stats.evaluated is None:
        stats.evaluated = np.zeros_like(ev)
        stats.rejected_at = np.zeros_like(ev)
    stats.positions += int(ev[0])
    stats.evaluated += ev
    stats.rejected_at += rejected


@dataclass
class EfficiencyCounts:
    """Early-exit bookkeeping over dense anchor positions."""

    background: int = 0
    background_rejected_first: int = 0
    macs_exit: int = 0
    macs_full: int = 0

    @property
    def first_stage_rejection(self):
        return self.background_rejected_first / self.background if self.background else 0.0

    @property
    def mac_ratio(self):
        return self.macs_exit / self.macs_full if self.macs_full else 0.0


def stage_depth(res, thresholds):
    """Number of stages evaluated at each anchor under early exit."""
    passed = res.stage_maps > np.asarray(thresholds, dtype=np.float64)[:, None, None]
    through = np.cumprod(passed, axis=0)  # through[j]: passed stages 1..j+1
    return 1 + through[:-1].sum(axis=0)


def count_efficiency(counts, res, scale, boxes, thresholds, position_costs, patch_size=64,
                     background_iou=0.3):
    """Add one pyramid level to ``counts``.

    An anchor is background when its box overlaps every ground truth with
    IoU below ``background_iou``.  MACs are charged per anchor and stage.
    """
    depth = stage_depth(res, thresholds)
    cum = np.r_[0, np.cumsum(position_costs)]
    counts.macs_exit += int(cum[depth].sum())
    counts.macs_full += int(depth.size * cum[-1])
    ah, aw = depth.shape
    bx = np.arange(aw)[None, :] * scale
    by = np.arange(ah)[:, None] * scale
    bs = patch_size * scale
    background = np.ones((ah, aw), dtype=bool)
    for gx, gy, gs in boxes:
        iw = np.clip(np.minimum(bx + bs, gx + gs) - np.maximum(bx, gx), 0, None)
        ih = np.clip(np.minimum(by + bs, gy + gs) - np.maximum(by, gy), 0, None)
        inter = iw * ih
        background &= inter / (bs * bs + gs * gs - inter) < background_iou
    counts.background += int(background.sum())
    first = res.stage_maps[0] > thresholds[0]
    counts.background_rejected_first += int((background & ~first).sum())
    return counts


def nms(boxes, iou_threshold=0.3):
    """Greedy non-maximum suppression of square boxes.

    Boxes are visited by descending score (ties keep input order); a box is
    kept iff its IoU with every already-kept box is at most ``iou_threshold``.
    """
    if not 0 <= iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not boxes:
        return []
    scores = np.array([b.score for b in boxes])
    order = np.argsort(-scores, kind="mergesort")
    x = np.array([b.x for b in boxes])[order]
    y = np.array([b.y for b in boxes])[order]
    s = np.array([b.size for b in boxes])[order]
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in range(len(boxes)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        rest = slice(i + 1, None)
        iw = np.minimum(x[i] + s[i], x[rest] + s[rest]) - np.maximum(x[i], x[rest])
        ih = np.minimum(y[i] + s[i], y[rest] + s[rest]) - np.maximum(y[i], y[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ratio = inter / (s[i] ** 2 + s[rest] ** 2 - inter)
        suppressed[rest] |= ratio > iou_threshold
    return [boxes[k] for k in keep]
