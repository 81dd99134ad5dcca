"""Synthetic shape-segmentation data.

Each image is a flat background (class 0) with 2-5 shapes drawn back to front.
Class ``k >= 1`` is a circle, axis-aligned rectangle or triangle for
``(k - 1) % 3 == 0, 1, 2``. Labels are exact point-in-shape rasterizations, and
each class has its own base colour, jittered per shape, plus Gaussian noise.
"""

from dataclasses import dataclass

import numpy as np

from . import tensors
from .ops import ContractError

SHAPE_KINDS = ("circle", "rectangle", "triangle")

# base RGB per class; class 0 is background
CLASS_COLORS = np.array(
    [
        (0.45, 0.45, 0.45), (0.85, 0.25, 0.20), (0.20, 0.65, 0.30), (0.25, 0.35, 0.85),
        (0.90, 0.80, 0.20), (0.70, 0.30, 0.75), (0.20, 0.80, 0.80), (0.95, 0.55, 0.15),
        (0.55, 0.35, 0.20), (0.60, 0.85, 0.45), (0.15, 0.15, 0.45), (0.95, 0.65, 0.75),
        (0.35, 0.55, 0.10), (0.10, 0.45, 0.55), (0.80, 0.10, 0.45), (0.65, 0.65, 0.90),
        (0.30, 0.20, 0.05), (0.95, 0.95, 0.60), (0.05, 0.30, 0.15), (0.75, 0.75, 0.75),
    ]
)
COLOR_JITTER = 0.08


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 100
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_shapes: int = 2
    max_shapes: int = 5
    noise_std: float = 0.05
    val_count: int = -1  # -1: odd positions of the shuffle, i.e. count // 2

    def __post_init__(self):
        if not 2 <= self.num_classes <= 20:
            raise ContractError("num_classes must be in [2, 20]")
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ContractError("image extents must be positive multiples of 32")
        if self.count < 0 or not 1 <= self.min_shapes <= self.max_shapes:
            raise ContractError("invalid count or shape range")
        if self.val_count > self.count:
            raise ContractError("val_count exceeds count")

    @property
    def n_val(self):
        return self.count // 2 if self.val_count < 0 else self.val_count


def _shape_mask(kind, rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    py, px = yy + 0.5, xx + 0.5
    scale = min(h, w)
    if kind == "circle":
        rad = rng.uniform(0.08, 0.25) * scale
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        return (py - cy) ** 2 + (px - cx) ** 2 <= rad * rad
    if kind == "rectangle":
        sh, sw = rng.uniform(0.15, 0.5, size=2) * scale
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        return (np.abs(py - cy) <= sh / 2) & (np.abs(px - cx) <= sw / 2)
    # triangle from three vertices around a centre
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    rad = rng.uniform(0.12, 0.35) * scale
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.uniform(-0.4, 0.4, size=3)
    vy, vx = cy + rad * np.sin(angles), cx + rad * np.cos(angles)
    inside = np.ones((h, w), dtype=bool)
    sign = np.sign((vx[1] - vx[0]) * (vy[2] - vy[0]) - (vy[1] - vy[0]) * (vx[2] - vx[0]))
    for a in range(3):
        b = (a + 1) % 3
        cross = (vx[b] - vx[a]) * (py - vy[a]) - (vy[b] - vy[a]) * (px - vx[a])
        inside &= sign * cross >= 0
    return inside


def render_sample(rng, spec, class_colors=CLASS_COLORS):
    """Draw one ``(image, labels)`` pair.

    ``rng`` consumption does not depend on ``class_colors``, so re-rendering
    with a recoloured class changes pixels only where that class is visible.
    """
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    image = np.empty((h, w, 3))
    bg_jitter = rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    image[:] = class_colors[0] + bg_jitter
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(SHAPE_KINDS[(cls - 1) % 3], rng, h, w)
        jitter = rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
        labels[mask] = cls
        image[mask] = class_colors[cls] + jitter
    image += spec.noise_std * rng.standard_normal((h, w, 3))
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate(spec):
    """Returns ``(images, labels, is_val)`` arrays."""
    rng = tensors.seeded_rng(spec.seed, "datagen/render")
    images = np.zeros((spec.count, spec.height, spec.width, 3), dtype=np.float32)
    labels = np.zeros((spec.count, spec.height, spec.width), dtype=np.int64)
    for i in range(spec.count):
        images[i], labels[i] = render_sample(rng, spec)
    order = tensors.seeded_rng(spec.seed, "datagen/split").permutation(spec.count)
    is_val = np.zeros(spec.count, dtype=bool)
    # default split: odd positions of a seeded shuffle; explicit val_count takes a prefix
    is_val[order[1::2] if spec.val_count < 0 else order[: spec.val_count]] = True
    return images, labels, is_val


def to_bundle(images, labels, is_val, spec=None):
    entries = []
    for i in range(len(images)):
        entries.append((f"img/{i:06d}", images[i].astype(np.float32)))
        entries.append((f"lbl/{i:06d}", labels[i].astype(np.float32)))
    entries.append(("split", is_val.astype(np.float32)))
    if spec is not None:
        from .config import dump_config

        entries.append(("meta/spec", tensors.text_to_tensor(dump_config(spec))))
    return entries


def gen_synthetic(spec, path):
    images, labels, is_val = generate(spec)
    tensors.bundle_write(to_bundle(images, labels, is_val, spec), path)


def load_dataset(path):
    """Read an NRDB dataset into ``(images, labels, is_val)``."""
    b = tensors.bundle_read(path)
    keys = sorted(k[4:] for k in b if k.startswith("img/"))
    missing = [k for k in keys if f"lbl/{k}" not in b]
    if missing:
        raise tensors.FormatError(f"dataset has images without labels: {missing[:3]}")
    if not keys:
        return np.zeros((0, 32, 32, 3), np.float32), np.zeros((0, 32, 32), np.int64), np.zeros(0, bool)
    images = np.stack([b[f"img/{k}"] for k in keys]).astype(np.float32)
    labels = np.stack([b[f"lbl/{k}"] for k in keys]).astype(np.int64)
    is_val = b["split"].astype(bool) if "split" in b else np.zeros(len(keys), dtype=bool)
    return images, labels, is_val
