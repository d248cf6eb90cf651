"""Procedural four-task dense-prediction scenes.

Each sample is a 64x64 noisy image with one to four shapes (circle,
rectangle, triangle) and four aligned targets:

* ``seg``: class per pixel, 0 background, 1 circle, 2 rectangle, 3 triangle
* ``parts``: 0 background, 1 upper half of a shape, 2 lower half
* ``sal``: foreground mask
* ``normals``: unit 2-vector field, the gradient direction of the signed
  distance to the nearest shape boundary
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64
SHAPE_KINDS = ("circle", "rectangle", "triangle")
# base colours per shape class; each shape jitters around its class colour
_PALETTE = np.array([[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.85]])


@dataclass(frozen=True)
class TaskSpec:
    name: str
    output_channels: int
    metric: str  # "miou" or "mean_angular_error"
    higher_is_better: bool

    def __post_init__(self):
        if (self.metric == "miou") != self.higher_is_better:
            raise ValueError(f"{self.name}: metric {self.metric} has the wrong direction")


TASKS = {
    "seg": TaskSpec("seg", 4, "miou", True),
    "parts": TaskSpec("parts", 3, "miou", True),
    "sal": TaskSpec("sal", 2, "miou", True),
    "normals": TaskSpec("normals", 2, "mean_angular_error", False),
}


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    seg: np.ndarray  # [H, W] int64
    parts: np.ndarray
    sal: np.ndarray
    normals: np.ndarray  # [2, H, W]
    num_shapes: int

    def target(self, task: str) -> np.ndarray:
        return getattr(self, task)


def _shape_mask(kind: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    r = rng.uniform(0.1 * size, 0.2 * size)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == "rectangle":
        hy, hx = r * rng.uniform(0.6, 1.0, size=2)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # upright isosceles triangle, apex on top
    top, bottom = cy - r, cy + r
    half_width = r * (yy - top) / (bottom - top)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half_width)


def _unit_field(foreground: np.ndarray) -> np.ndarray:
    """Normalized gradient of the signed distance (positive outside shapes)."""
    coords = np.indices(foreground.shape).astype(np.float64)
    # outside pixels point away from their nearest foreground pixel
    _, near_fg = ndimage.distance_transform_edt(~foreground, return_indices=True)
    # inside pixels point towards their nearest background pixel
    _, near_bg = ndimage.distance_transform_edt(foreground, return_indices=True)
    vec = np.where(foreground[None], near_bg - coords, coords - near_fg)
    norm = np.sqrt((vec**2).sum(axis=0, keepdims=True))
    field = vec / norm
    return field[::-1].copy()  # (x, y) channel order


def generate_sample(seed: int, size: int = IMAGE_SIZE) -> Sample:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    background = rng.uniform(0.3, 0.6, size=3)
    image = background[:, None, None] + 0.08 * rng.standard_normal((3, size, size))
    seg = np.zeros((size, size), dtype=np.int64)
    parts = np.zeros((size, size), dtype=np.int64)
    count = int(rng.integers(1, 5))
    for _ in range(count):
        cls = int(rng.integers(len(SHAPE_KINDS)))
        mask = _shape_mask(SHAPE_KINDS[cls], rng, yy, xx, size)
        if not mask.any():
            continue
        colour = np.clip(_PALETTE[cls] + 0.1 * rng.standard_normal(3), 0.0, 1.0)
        image[:, mask] = colour[:, None] + 0.05 * rng.standard_normal((3, int(mask.sum())))
        rows = np.nonzero(mask.any(axis=1))[0]
        middle = 0.5 * (rows[0] + rows[-1] + 1)
        seg[mask] = cls + 1
        parts[mask] = np.where(yy[mask] < middle, 1, 2)
    if not (seg > 0).any():
        # shapes are centred well inside the canvas, so this only guards the contract
        seg[size // 2, size // 2] = 1
        parts[size // 2, size // 2] = 1
    sal = (seg > 0).astype(np.int64)
    return Sample(
        image=np.clip(image, 0.0, 1.0),
        seg=seg,
        parts=parts,
        sal=sal,
        normals=_unit_field(sal.astype(bool)),
        num_shapes=count,
    )


def make_dataset(seeds) -> list[Sample]:
    return [generate_sample(int(s)) for s in seeds]


def collate(samples: list[Sample], tasks) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Stack images to [B, 3, H, W] and targets to [B, H, W] (normals [B, H, W, 2])."""
    images = np.stack([s.image for s in samples])
    targets = {}
    for task in dict.fromkeys(tasks):
        stacked = np.stack([s.target(task) for s in samples])
        targets[task] = np.moveaxis(stacked, 1, -1) if task == "normals" else stacked
    return images, targets
