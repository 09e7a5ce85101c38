"""Procedural images and HPatches-layout scene sets for desk-scale runs."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .burstsynth import homography_from_points, translation
from .interop import write_image_png


def procedural_image(rng: np.random.Generator, height: int = 256, width: int = 256,
                     shapes: int = 40) -> np.ndarray:
    """RGB float image in [0, 1]: smooth background plus random filled shapes and lines."""
    low = rng.uniform(0.0, 1.0, (4, 4, 3)).astype(np.float32)
    img = cv2.resize(low, (width, height), interpolation=cv2.INTER_CUBIC)
    img = np.clip(img * 0.5 + 0.25, 0.0, 1.0)
    for _ in range(shapes):
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, 3))
        kind = rng.integers(0, 4)
        cx, cy = int(rng.integers(0, width)), int(rng.integers(0, height))
        size = int(rng.integers(6, max(8, min(height, width) // 5)))
        if kind == 0:
            cv2.rectangle(img, (cx, cy), (cx + size, cy + int(rng.integers(6, size + 6))), color, -1)
        elif kind == 1:
            cv2.ellipse(img, (cx, cy), (size, int(rng.integers(4, size + 4))), float(rng.uniform(0, 180)),
                        0, 360, color, -1)
        elif kind == 2:
            pts = np.stack([cx + rng.integers(-size, size, 3), cy + rng.integers(-size, size, 3)], axis=1)
            cv2.fillPoly(img, [pts.astype(np.int32)], color)
        else:
            end = (cx + int(rng.integers(-2 * size, 2 * size)), cy + int(rng.integers(-2 * size, 2 * size)))
            cv2.line(img, (cx, cy), end, color, int(rng.integers(1, 4)))
    return np.clip(img, 0.0, 1.0)


def write_corpus(out_dir, count: int, seed: int = 0, size: int = 256) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out / f"img_{i:04d}.png"
        write_image_png(p, procedural_image(np.random.default_rng([seed, i]), size, size))
        paths.append(p)
    return paths


def random_view_homography(rng: np.random.Generator, size: int, jitter: float) -> np.ndarray:
    c = float(size)
    corners = np.array([[0.0, 0.0], [c, 0.0], [c, c], [0.0, c]])
    quad = corners + rng.uniform(-jitter * c, jitter * c, (4, 2))
    return homography_from_points(corners, quad)


def write_scene_set(out_dir, scenes: int = 20, seed: int = 0, size: int = 192,
                    jitter: float = 0.12) -> list[Path]:
    """HPatches layout: <scene>/1.png..6.png and H_1_2..H_1_6.

    Even-numbered scenes are viewpoint scenes (``v_``: random homographies),
    odd-numbered ones illumination scenes (``i_``: identity geometry, changed
    gain and gamma).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    margin = size // 2
    dirs = []
    for s in range(scenes):
        rng = np.random.default_rng([seed, 1000 + s])
        viewpoint = s % 2 == 0
        name = f"{'v' if viewpoint else 'i'}_synth{s:03d}"
        d = out / name
        d.mkdir(exist_ok=True)
        big = procedural_image(rng, size + 2 * margin, size + 2 * margin, shapes=90)
        origin = translation(margin, margin)
        for k in range(1, 7):
            if k == 1 or not viewpoint:
                h = np.eye(3)
            else:
                h = random_view_homography(rng, size, jitter)
            a = origin @ np.linalg.inv(h)
            img = cv2.warpPerspective(big, a, (size, size), flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                                      borderMode=cv2.BORDER_REFLECT)
            if not viewpoint and k > 1:
                gain = rng.uniform(0.6, 1.3)
                gamma = rng.uniform(0.7, 1.4)
                img = np.clip(img * gain, 0.0, 1.0) ** gamma
            write_image_png(d / f"{k}.png", img)
            if k > 1:
                np.savetxt(d / f"H_1_{k}", h)
        dirs.append(d)
    return dirs
