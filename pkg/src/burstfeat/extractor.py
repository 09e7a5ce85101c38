"""Multi-scale keypoint extraction from a burst."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .burstsynth import Burst
from .network import DESCRIPTOR_DIM, forward

log = logging.getLogger(__name__)
_small_warned = set()


@dataclass
class ExtractParams:
    max_keypoints: int = 4000
    detection_threshold: float = 0.7
    reliability_threshold: float = 0.7
    nms_window: int = 16
    scale_max_dim: int = 2 ** 10
    scale_min_dim: int = 2 ** 8
    scale_step: float = 2 ** 0.25
    multiscale: bool = True
    duplicate_radius: float = 2.0

    def __post_init__(self):
        for name in ("detection_threshold", "reliability_threshold"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.scale_max_dim < self.scale_min_dim:
            raise ValueError("scale_max_dim must be >= scale_min_dim")
        if self.scale_step <= 1:
            raise ValueError("scale_step must be > 1")
        if self.max_keypoints < 0:
            raise ValueError("max_keypoints must be >= 0")


@dataclass
class FeatureSet:
    """keypoints: (K, 4) float32 rows (x, y, scale, score); descriptors: (K, 128) float32."""

    keypoints: np.ndarray
    descriptors: np.ndarray
    image_id: str = ""
    height: int = 0
    width: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 4)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError(f"{len(self.keypoints)} keypoints but {len(self.descriptors)} descriptors")

    def __len__(self):
        return len(self.keypoints)

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2].astype(np.float64)

    @property
    def scores(self) -> np.ndarray:
        return self.keypoints[:, 3]

    @property
    def empty(self) -> bool:
        return len(self.keypoints) == 0

    def equals(self, other: "FeatureSet") -> bool:
        return (self.image_id == other.image_id and self.height == other.height and self.width == other.width
                and self.keypoints.tobytes() == other.keypoints.tobytes()
                and self.descriptors.tobytes() == other.descriptors.tobytes())

    @classmethod
    def empty_set(cls, image_id="", height=0, width=0) -> "FeatureSet":
        return cls(np.zeros((0, 4)), np.zeros((0, DESCRIPTOR_DIM)), image_id, height, width)


def level_sizes(height: int, width: int, params: ExtractParams) -> list[tuple[int, int]]:
    """(h, w) of every pyramid level."""
    big = max(height, width)
    if big < params.scale_min_dim:
        # once per (size, bound) so scene sets of small bursts do not flood the log
        if (big, params.scale_min_dim) not in _small_warned:
            _small_warned.add((big, params.scale_min_dim))
            log.warning("burst max dim %d is below %d; using a single level", big, params.scale_min_dim)
        return [(height, width)]
    s0 = min(1.0, params.scale_max_dim / big)
    sizes = []
    k = 0
    while True:
        s = s0 * params.scale_step ** (-k)
        h, w = max(1, round(height * s)), max(1, round(width * s))
        if max(h, w) < params.scale_min_dim:
            break
        sizes.append((h, w))
        if not params.multiscale:
            break
        k += 1
    return sizes


def resize_frame(frame: np.ndarray, h: int, w: int) -> np.ndarray:
    """Halve with 2x2 box averaging per full octave, then bilinear to (h, w)."""
    img = np.asarray(frame, dtype=np.float32)
    while img.shape[0] >= 2 * h and img.shape[1] >= 2 * w:
        img = cv2.resize(img, (img.shape[1] // 2, img.shape[0] // 2), interpolation=cv2.INTER_AREA)
    if img.shape[:2] != (h, w):
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
    return img


def build_scale_pyramid(burst: Burst, params: ExtractParams) -> list[tuple[float, Burst]]:
    levels = []
    for h, w in level_sizes(burst.height, burst.width, params):
        scale = w / burst.width
        if (h, w) == (burst.height, burst.width):
            levels.append((1.0, burst))
            continue
        frames = np.stack([resize_frame(f, h, w) for f in burst.frames])
        levels.append((scale, replace(burst, frames=frames, intra_offsets=burst.intra_offsets * scale)))
    return levels


def nms(k: np.ndarray, window: int = 16, threshold: float = 0.0) -> np.ndarray:
    """Strict local maxima of k in a window x window neighbourhood that reach threshold.

    Returns (n, 3) rows (x, y, value) sorted by value descending, then (y, x).
    For even windows the neighbourhood spans offsets [-window//2, window//2 - 1].
    """
    if window < 3:
        raise ValueError(f"nms window must be >= 3, got {window}")
    k = np.asarray(k, dtype=np.float64)
    footprint = np.ones((window, window), dtype=bool)
    footprint[window // 2, window // 2] = False
    neighbours = ndimage.maximum_filter(k, footprint=footprint, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((k > neighbours) & (k >= threshold))
    vals = k[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    return np.stack([xs[order], ys[order], vals[order]], axis=1) if len(order) else np.zeros((0, 3))


def to_original(xy: np.ndarray, level_hw: tuple[int, int], orig_hw: tuple[int, int]) -> np.ndarray:
    """Pixel-centre mapping from a resized level back to the original frame."""
    sy = orig_hw[0] / level_hw[0]
    sx = orig_hw[1] / level_hw[1]
    return np.stack([(xy[:, 0] + 0.5) * sx - 0.5, (xy[:, 1] + 0.5) * sy - 0.5], axis=1)


def suppress_duplicates(xy: np.ndarray, radius: float) -> np.ndarray:
    """Greedy keep-mask over points already sorted by score."""
    keep = np.ones(len(xy), dtype=bool)
    if radius <= 0 or len(xy) < 2:
        return keep
    tree = cKDTree(xy)
    for i, nbrs in enumerate(tree.query_ball_point(xy, r=radius)):
        if not keep[i]:
            continue
        for j in nbrs:
            if j > i:
                keep[j] = False
    return keep


def to_grayscale(frames: np.ndarray) -> np.ndarray:
    return (frames[..., 0] * 0.299 + frames[..., 1] * 0.587 + frames[..., 2] * 0.114).astype(np.float32)


def fit_burst_to_model(burst: Burst, frame_count: int, channels: int) -> Burst:
    """Centre sub-burst of frame_count frames, converted to the model's channel count."""
    if burst.frame_count < frame_count:
        raise ValueError(f"burst has {burst.frame_count} frames, model needs {frame_count}")
    lo = burst.common_index - frame_count // 2
    frames = burst.frames[lo:lo + frame_count]
    if channels == 1 and frames.ndim == 4:
        frames = to_grayscale(frames)
    elif channels == 3 and frames.ndim == 3:
        frames = np.repeat(frames[..., None], 3, axis=-1)
    return replace(burst, frames=frames, common_index=frame_count // 2,
                   intra_offsets=burst.intra_offsets[lo:lo + frame_count])


def extract_features(model, burst: Burst, params: ExtractParams | None = None, forward_fn=forward,
                     image_id: str = "") -> FeatureSet:
    params = params or ExtractParams()
    orig = (burst.height, burst.width)
    cands = []
    for level, (scale, lb) in enumerate(build_scale_pyramid(burst, params)):
        out = forward_fn(model, lb)
        peaks = nms(out.detection, params.nms_window, params.detection_threshold)
        if len(peaks) == 0:
            continue
        xs, ys = peaks[:, 0].astype(int), peaks[:, 1].astype(int)
        rel = np.asarray(out.reliability)[ys, xs]
        ok = rel >= params.reliability_threshold
        if not ok.any():
            continue
        xs, ys, kval, rel = xs[ok], ys[ok], peaks[ok, 2], rel[ok]
        desc = np.asarray(out.descriptors)[ys, xs].astype(np.float64)
        desc /= np.linalg.norm(desc, axis=1, keepdims=True).clip(min=1e-12)
        xy = to_original(np.stack([xs, ys], axis=1).astype(np.float64), (lb.height, lb.width), orig)
        for i in range(len(xs)):
            cands.append((kval[i] * rel[i], level, ys[i], xs[i], xy[i, 0], xy[i, 1], scale, desc[i]))

    if not cands:
        fs = FeatureSet.empty_set(image_id, *orig)
        fs.meta["empty"] = True
        return fs
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    xy = np.array([[c[4], c[5]] for c in cands])
    keep = suppress_duplicates(xy, params.duplicate_radius)
    kept = [c for c, k in zip(cands, keep) if k][: params.max_keypoints]
    kps = np.array([[c[4], c[5], c[6], c[0]] for c in kept])
    desc = np.stack([c[7] for c in kept])
    return FeatureSet(kps, desc, image_id, *orig)
