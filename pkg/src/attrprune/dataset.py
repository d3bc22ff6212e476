"""Synthetic shape-detection scenes (circle / square / triangle on noise).

Each scene is a pure function of ``(seed, index)``, so any slice of a split can
be regenerated independently and in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import iou
from .container import read_container, write_container
from .errors import ConfigurationError, InputError

CLASS_NAMES = ("circle", "square", "triangle")
MAX_PAIR_IOU = 0.3


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    objects: list  # [(class_id, (cx, cy, w, h)), ...]


def _rasterize(kind: int, box_px, size: int) -> np.ndarray:
    x0, y0, side = box_px
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - x0) / side  # [0, 1] across the box
    v = (ys - y0) / side
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == 0:
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25)
    if kind == 1:
        return inside
    return inside & (np.abs(u - 0.5) <= 0.5 * v)  # apex at the top edge


def _scene(seed: int, index: int, size: int, grid: int) -> Scene:
    rng = np.random.default_rng([seed, index])
    image = rng.uniform(0.0, 0.35, (3, size, size))
    count = int(rng.integers(1, 4))
    objects, used_cells = [], set()
    lo, hi = max(4, size // 5), max(5, size // 2)
    attempts = 0
    while len(objects) < count and attempts < 200:
        attempts += 1
        side = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        box = ((x0 + side / 2) / size, (y0 + side / 2) / size, side / size, side / size)
        cell = (min(int(box[0] * grid), grid - 1), min(int(box[1] * grid), grid - 1))
        if cell in used_cells or any(iou(box, b) > MAX_PAIR_IOU for _, b in objects):
            continue
        kind = int(rng.integers(0, len(CLASS_NAMES)))
        mask = _rasterize(kind, (x0, y0, side), size)
        color = rng.uniform(0.55, 1.0, 3)
        image[:, mask] = color[:, None]
        objects.append((kind, box))
        used_cells.add(cell)
    return Scene(image, objects)


def generate(seed: int, count: int, image_size: int = 32, grid: int = 4, start: int = 0) -> list:
    """``count`` scenes with indices ``start .. start+count-1``.

    Object centres land in distinct cells of a ``grid x grid`` partition so every
    object owns one prediction cell; ground-truth boxes overlap by IoU <= 0.3.
    Later objects are painted over earlier ones.
    """
    if count < 0 or image_size < 8:
        raise ConfigurationError(f"need count >= 0 and image_size >= 8, got {count}, {image_size}")
    if grid < 1 or image_size % grid:
        raise ConfigurationError(f"grid {grid} must divide image size {image_size}")
    return [_scene(seed, i, image_size, grid) for i in range(start, start + count)]


def encode_targets(scene: Scene, grid: int, classes: int = len(CLASS_NAMES)) -> np.ndarray:
    """``[grid, grid, 6]`` array: (objectness, class, frac_x, frac_y, log(w*grid), log(h*grid))."""
    t = np.zeros((grid, grid, 6))
    for cls, (cx, cy, w, h) in scene.objects:
        if not 0 <= cls < classes:
            raise InputError(f"class id {cls} outside [0, {classes})")
        col = min(int(cx * grid), grid - 1)
        row = min(int(cy * grid), grid - 1)
        if t[row, col, 0]:
            raise InputError(f"two objects share grid cell ({row}, {col}) at grid {grid}")
        t[row, col] = (1.0, cls, cx * grid - col, cy * grid - row, math.log(w * grid), math.log(h * grid))
    return t


def stack(scenes: list, grid: int, classes: int = len(CLASS_NAMES)):
    """Images ``[N, 3, H, W]`` and encoded targets ``[N, grid, grid, 6]``."""
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, 1, 1))
    targets = np.stack([encode_targets(s, grid, classes) for s in scenes]) if scenes else np.zeros((0, grid, grid, 6))
    return images, targets


def ground_truth(scenes: list) -> list:
    return [list(s.objects) for s in scenes]


def load_or_generate(cache_dir, seed: int, count: int, image_size: int = 32, grid: int = 4) -> list:
    """:func:`generate` backed by an on-disk cache keyed by (seed, count, size, grid)."""
    if cache_dir is None:
        return generate(seed, count, image_size, grid)
    path = Path(cache_dir) / f"scenes-s{seed}-n{count}-px{image_size}-g{grid}.zip"
    if path.exists():
        manifest, arrays = read_container(path)
        return [Scene(arrays[f"scene{i:06d}"], [(int(c), tuple(b)) for c, b in objs])
                for i, objs in enumerate(manifest["objects"])]
    scenes = generate(seed, count, image_size, grid)
    write_container(path, {"format": "attrprune-scenes", "seed": seed, "count": count,
                           "image_size": image_size, "grid": grid,
                           "objects": [[[c, list(b)] for c, b in s.objects] for s in scenes]},
                    {f"scene{i:06d}": s.image for i, s in enumerate(scenes)})
    return scenes
