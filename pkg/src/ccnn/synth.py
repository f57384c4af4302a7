"""Synthetic sports scenes and the labelled patch sets trained on them.

Scenes are a textured field with line markings and articulated two-tone
"players".  Every player's ground truth is the square of side equal to its
height, centred on the sprite.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter, uniform_filter1d

from .images import crop_patch, ppm_read, ppm_write
from .metrics import iou

POSITIVE_IOU_MIN = 0.7

KITS = [
    ((200, 30, 30), (245, 245, 245)),
    ((30, 60, 200), (250, 250, 250)),
    ((245, 245, 245), (25, 25, 25)),
    ((250, 210, 20), (30, 60, 170)),
    ((20, 20, 20), (20, 20, 20)),  # referee
    ((240, 120, 20), (40, 40, 40)),
    ((120, 30, 140), (230, 230, 230)),
    ((120, 200, 250), (250, 250, 250)),
]
SKIN = [(235, 200, 170), (200, 150, 110), (140, 95, 60), (90, 60, 40)]
TEXTURES = ("stripes", "plain", "court")


@dataclass(frozen=True)
class SceneParams:
    width: int = 640
    height: int = 360
    players: tuple = (3, 12)
    player_height: tuple = (20, 250)
    blur_probability: float = 0.3
    occlusion_probability: float = 0.2
    texture: str = "stripes"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.players
        if lo < 0 or hi < lo:
            raise ValueError(f"bad players range {self.players}")
        lo, hi = self.player_height
        if lo < 4 or hi < lo:
            raise ValueError(f"bad player_height range {self.player_height}")
        if lo > min(self.width, self.height):
            raise ValueError("smallest player does not fit in the frame")
        for p in (self.blur_probability, self.occlusion_probability):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must be in [0, 1]")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")


@dataclass
class Annotation:
    image_path: str
    boxes: list = field(default_factory=list)  # (x, y, size) squares


def _field(params, rng):
    h, w = params.height, params.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if params.texture == "court":
        base = np.array([196, 150, 100]) * rng.uniform(0.85, 1.1)
        period = rng.uniform(14, 30)
        pattern = 0.06 * np.sin(2 * np.pi * yy / period + rng.uniform(0, 6))
    else:
        base = np.array([rng.uniform(40, 80), rng.uniform(120, 170), rng.uniform(40, 80)])
        pattern = np.zeros((h, w))
        if params.texture == "stripes":
            angle = rng.uniform(-0.6, 0.6)
            period = rng.uniform(60, 140)
            coord = xx * math.cos(angle) + yy * math.sin(angle)
            pattern = 0.08 * np.sign(np.sin(2 * np.pi * coord / period))
    grain = gaussian_filter(rng.normal(0, 1, (h, w)), 2.0) * 0.05
    light = 1 + 0.12 * (xx / w - 0.5) * rng.uniform(-1, 1) + 0.1 * (yy / h - 0.5) * rng.uniform(-1, 1)
    img = base[None, None, :] * (1 + pattern + grain)[..., None] * light[..., None]
    return np.clip(img, 0, 255)


def _markings(draw, params, rng):
    w, h = params.width, params.height
    colour = (235, 235, 235)
    for _ in range(rng.integers(1, 4)):
        lw = int(rng.integers(2, 5))
        if rng.random() < 0.5:
            x = rng.uniform(0, w)
            draw.line([(x, 0), (x + rng.uniform(-0.4, 0.4) * h, h)], fill=colour, width=lw)
        else:
            y = rng.uniform(0, h)
            draw.line([(0, y), (w, y + rng.uniform(-0.2, 0.2) * w)], fill=colour, width=lw)
    if rng.random() < 0.5:
        r = rng.uniform(0.2, 0.6) * h
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        draw.ellipse([cx - r, cy - r * 0.6, cx + r, cy + r * 0.6], outline=colour, width=3)


def _limb(draw, start, angle, length, width, fill):
    end = (start[0] + length * math.sin(angle), start[1] + length * math.cos(angle))
    draw.line([start, end], fill=fill, width=max(1, int(round(width))))
    return end


def _player(draw, x, y, s, kit, skin, rng):
    """Sprite filling the vertical extent [y, y + s], centred at x + s/2."""
    cx = x + s / 2 + rng.uniform(-0.03, 0.03) * s
    jersey, shorts = kit
    limb_w = 0.075 * s
    # legs
    hip_y = y + 0.56 * s
    leg_len = 0.42 * s
    for side in (-1, 1):
        ang = side * rng.uniform(0.02, 0.35)
        knee = _limb(draw, (cx + side * 0.05 * s, hip_y), ang, leg_len * 0.5, limb_w, shorts)
        foot = _limb(draw, knee, ang * rng.uniform(-0.5, 1.2), leg_len * 0.5, limb_w * 0.85, skin)
        draw.ellipse([foot[0] - 0.04 * s, foot[1] - 0.02 * s, foot[0] + 0.04 * s, foot[1] + 0.02 * s],
                     fill=(30, 30, 30))
    # shorts and torso
    draw.rectangle([cx - 0.12 * s, y + 0.45 * s, cx + 0.12 * s, y + 0.6 * s], fill=shorts)
    draw.polygon([(cx - 0.14 * s, y + 0.16 * s), (cx + 0.14 * s, y + 0.16 * s),
                  (cx + 0.12 * s, y + 0.48 * s), (cx - 0.12 * s, y + 0.48 * s)], fill=jersey)
    # arms
    for side in (-1, 1):
        ang = side * rng.uniform(0.15, 1.1)
        elbow = _limb(draw, (cx + side * 0.13 * s, y + 0.19 * s), ang, 0.15 * s, limb_w, jersey)
        _limb(draw, elbow, ang * rng.uniform(0.3, 1.3), 0.14 * s, limb_w * 0.8, skin)
    # head
    hr = 0.07 * s
    hy = y + 0.085 * s
    draw.ellipse([cx - hr, hy - hr, cx + hr, hy + hr], fill=skin)


def _place(params, rng):
    n = int(rng.integers(params.players[0], params.players[1] + 1))
    lo = params.player_height[0]
    hi = min(params.player_height[1], params.width, params.height)
    boxes = []
    for _ in range(n):
        for _attempt in range(60):
            s = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
            s = min(max(s, lo), hi)
            x = int(rng.integers(0, params.width - s + 1))
            y = int(rng.integers(0, params.height - s + 1))
            if all(iou((x, y, s), b) <= 0.1 for b in boxes):
                boxes.append((x, y, s))
                break
    # paint far (small, high) players first
    return sorted(boxes, key=lambda b: (b[1] + b[2], b[0]))


def generate_scene(params, seed=None):
    """Render one scene; returns ``(uint8 image, Annotation)``."""
    rng = np.random.default_rng(params.seed if seed is None else seed)
    img = _field(params, rng)
    canvas = Image.fromarray(img.astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    _markings(draw, params, rng)
    boxes = _place(params, rng)
    for (x, y, s) in boxes:
        kit = KITS[int(rng.integers(len(KITS)))]
        skin = SKIN[int(rng.integers(len(SKIN)))]
        _player(draw, x, y, s, kit, skin, rng)
        if rng.random() < params.occlusion_probability:
            # board or another object covering one side of the sprite
            frac = rng.uniform(0.15, 0.3)
            colour = tuple(int(c) for c in rng.integers(0, 256, 3))
            if rng.random() < 0.5:
                draw.rectangle([x, y + s * (1 - frac), x + s, y + s], fill=colour)
            else:
                left = rng.random() < 0.5
                x0 = x + s * (0.5 - 0.25 - frac * 0.5) if left else x + s * (0.5 + 0.25 - frac * 0.5)
                draw.rectangle([x0, y, x0 + frac * s, y + s], fill=colour)
    out = np.asarray(canvas).astype(np.float64)
    if rng.random() < params.blur_probability:
        out = uniform_filter1d(out, size=int(rng.integers(3, 10)), axis=1, mode="nearest")
    out += rng.normal(0, 3.0, out.shape)
    image = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return image, Annotation("", list(boxes))


@dataclass
class SampleSet:
    patches: np.ndarray  # (N, P, P, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int
    provenance: list  # (scene index, x, y, size)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SampleSet(self.patches[idx], self.labels[idx], [self.provenance[i] for i in idx])


class SamplingError(RuntimeError):
    pass


def _inside(box, w, h):
    x, y, s = box
    return x >= 0 and y >= 0 and x + s <= w and y + s <= h


def _positive(gt, w, h, jitter, rng, retries=50):
    x, y, s = gt
    for _ in range(retries):
        ns = s * math.exp(rng.uniform(-jitter, jitter))
        cx = x + s / 2 + rng.uniform(-jitter, jitter) * s
        cy = y + s / 2 + rng.uniform(-jitter, jitter) * s
        box = (cx - ns / 2, cy - ns / 2, ns)
        if _inside(box, w, h) and iou(box, gt) >= POSITIVE_IOU_MIN:
            return box
    return tuple(float(v) for v in gt)


def _negative(gts, w, h, size_range, iou_max, near, rng, spread=1.0, retries=400):
    lo, hi = size_range
    hi = min(hi, w, h)
    lo = min(lo, hi)
    for _ in range(retries):
        if near and gts:
            x, y, s = gts[int(rng.integers(len(gts)))]
            ns = min(s * math.exp(rng.uniform(-spread, spread)), hi)
            cx = x + s / 2 + rng.uniform(-spread, spread) * s
            cy = y + s / 2 + rng.uniform(-spread, spread) * s
            box = (cx - ns / 2, cy - ns / 2, ns)
        else:
            ns = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            box = (rng.uniform(0, w - ns), rng.uniform(0, h - ns), ns)
        if _inside(box, w, h) and all(iou(box, g) < iou_max for g in gts):
            return box
    return None


def sample_patches(scenes, positive_jitter=0.08, negative_iou_max=0.3, ratio=3,
                   seed=0, positives_per_box=2, patch_size=64, size_range=None,
                   near_fraction=0.5, near_spread=1.0):
    """Labelled patches from ``(image, boxes)`` scenes.

    Positives are jittered copies of each ground-truth square (IoU >= 0.7 with
    it); negatives overlap every ground truth with IoU < ``negative_iou_max``.
    Each scene contributes ``ratio`` negatives per positive.  ``near_fraction``
    of the negatives are drawn around players.
    """
    if len(scenes) == 0:
        raise ValueError("no scenes to sample from")
    rng = np.random.default_rng(seed)
    if size_range is None:
        sizes = [b[2] for _, boxes in scenes for b in boxes]
        size_range = (0.6 * min(sizes), 1.6 * max(sizes)) if sizes else (patch_size / 2, 4 * patch_size)
    patches, labels, prov = [], [], []
    for index, (image, boxes) in enumerate(scenes):
        h, w = image.shape[:2]
        boxes = [tuple(b) for b in boxes]
        n_pos = positives_per_box * len(boxes)
        n_neg = int(round(ratio * n_pos)) if boxes else int(round(ratio * positives_per_box))
        for gt in boxes:
            for _ in range(positives_per_box):
                box = _positive(gt, w, h, positive_jitter, rng)
                patches.append(crop_patch(image, *box, patch_size))
                labels.append(1)
                prov.append((index,) + tuple(box))
        for k in range(n_neg):
            box = _negative(boxes, w, h, size_range, negative_iou_max, rng.random() < near_fraction, rng,
                            near_spread)
            if box is None:
                raise SamplingError(f"scene {index}: no negative square with IoU < {negative_iou_max} found")
            patches.append(crop_patch(image, *box, patch_size))
            labels.append(0)
            prov.append((index,) + tuple(box))
    arr = np.stack(patches) if patches else np.zeros((0, patch_size, patch_size, 3), np.float32)
    return SampleSet(arr, np.array(labels, dtype=np.int64), prov)


# ---------------------------------------------------------------------------
# dataset directory: scenes/NNNN.ppm, annotations.csv, split.csv


@dataclass
class SceneRecord:
    scene_id: int
    path: Path
    boxes: list
    split: str

    def load(self):
        return ppm_read(self.path)


def generate_dataset(root, params, n_scenes, seed=42, test_fraction=0.5):
    """Write ``n_scenes`` scenes (scene i uses seed + i) and a random train/test split."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    order = np.random.default_rng(seed).permutation(n_scenes)
    n_test = int(round(test_fraction * n_scenes))
    split = {int(i): ("test" if r < n_test else "train") for r, i in enumerate(order)}
    rows = []
    for i in range(n_scenes):
        image, ann = generate_scene(params, seed=seed + i)
        name = f"scenes/{i:04d}.ppm"
        ppm_write(image, root / name)
        rows.extend((name, *b) for b in ann.boxes)
    with open(root / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "x", "y", "size"])
        writer.writerows(rows)
    with open(root / "split.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene", "split"])
        writer.writerows((f"{i:04d}", split[i]) for i in range(n_scenes))
    return read_dataset(root)


def read_dataset(root):
    root = Path(root)
    boxes = {}
    with open(root / "annotations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            boxes.setdefault(row["image"], []).append((int(row["x"]), int(row["y"]), int(row["size"])))
    records = []
    with open(root / "split.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            name = f"scenes/{row['scene']}.ppm"
            records.append(SceneRecord(int(row["scene"]), root / name, boxes.get(name, []), row["split"]))
    return records


def split_validation(records, fraction=0.2, seed=42):
    """Carve a validation subset from the training scenes."""
    train = [r for r in records if r.split == "train"]
    order = np.random.default_rng(seed + 99).permutation(len(train))
    n_val = int(round(fraction * len(train)))
    val_idx = set(order[:n_val].tolist())
    return ([r for i, r in enumerate(train) if i not in val_idx],
            [r for i, r in enumerate(train) if i in val_idx])
