"""Synthetic low-light robotic burst pairs with exact ground-truth flow.

A single source image is cropped, warped by two sampled homographies and
rendered as two bursts.  Inside each burst every frame is the same view
shifted along one line at a uniform step, so the middle (common) frame has
zero offset.  The flow map relates the two common frames and is computed from
the noise-free geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MAX_HOMOGRAPHY_RETRIES = 100

RngLike = np.random.Generator | int | None


def as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class BurstSpec:
    frame_count: int = 5
    max_translation: float = 30.0
    noise_variance_range: tuple[float, float] = (0.3, 0.6)
    homography_jitter: float = 0.1
    crop_size: int = 192
    seed: int = 0
    # "variance" adds N(0, v); "std" reads the drawn value as a standard deviation.
    noise_param: str = "variance"
    # Bound of the per-axis inter-burst translation; None means max_translation.
    inter_translation: float | None = None

    def __post_init__(self):
        self.noise_variance_range = tuple(float(v) for v in self.noise_variance_range)
        if self.frame_count < 1 or self.frame_count % 2 == 0:
            raise ValueError(f"frame_count must be a positive odd integer, got {self.frame_count}")
        lo, hi = self.noise_variance_range
        if not 0 <= lo <= hi:
            raise ValueError(f"noise_variance_range must satisfy 0 <= low <= high, got {self.noise_variance_range}")
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")
        if self.homography_jitter < 0:
            raise ValueError("homography_jitter must be >= 0")
        if self.crop_size < 2:
            raise ValueError("crop_size must be >= 2")
        if self.noise_param not in ("variance", "std"):
            raise ValueError(f"noise_param must be 'variance' or 'std', got {self.noise_param!r}")
        if self.inter_translation is not None and self.inter_translation < 0:
            raise ValueError("inter_translation must be >= 0")

    @property
    def common_index(self) -> int:
        return self.frame_count // 2

    @property
    def inter_bound(self) -> float:
        return self.max_translation if self.inter_translation is None else self.inter_translation


@dataclass
class Burst:
    """N frames (N, H, W) or (N, H, W, 3), float32 in [0, 1]."""

    frames: np.ndarray
    common_index: int
    intra_offsets: np.ndarray
    noise_variance: float = 0.0
    warp: np.ndarray = field(default_factory=lambda: np.eye(3))
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.intra_offsets = np.asarray(self.intra_offsets, dtype=np.float64).reshape(-1, 2)
        self.warp = np.asarray(self.warp, dtype=np.float64).reshape(3, 3)
        n = self.frames.shape[0]
        if self.frames.ndim not in (3, 4):
            raise ValueError(f"frames must be (N,H,W) or (N,H,W,C), got shape {self.frames.shape}")
        if self.common_index != n // 2:
            raise ValueError(f"common_index must be {n // 2} for {n} frames, got {self.common_index}")
        if len(self.intra_offsets) != n:
            raise ValueError(f"{len(self.intra_offsets)} offsets for {n} frames")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return 1 if self.frames.ndim == 3 else self.frames.shape[3]

    @property
    def common_frame(self) -> np.ndarray:
        return self.frames[self.common_index]


@dataclass
class FlowMap:
    """vectors[y, x] = (x', y') in the partner frame; valid marks in-bounds targets."""

    vectors: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass
class BurstPair:
    burst_a: Burst
    burst_b: Burst
    flow_ab: FlowMap
    homography_ab: np.ndarray


def check_source_image(image: np.ndarray, crop_size: int | None = None) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] not in (1, 3)):
        raise ValueError(f"source image must be HxW or HxWx3, got shape {image.shape}")
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("source image intensities must lie in [0, 1]")
    if crop_size is not None and min(image.shape[:2]) < crop_size:
        raise ValueError(f"source image {image.shape[1]}x{image.shape[0]} is smaller than crop size {crop_size}")
    return image


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den
    return np.stack([u, v], axis=-1)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 4-point homography with h33 = 1."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex_quad(quad: np.ndarray) -> bool:
    edges = np.roll(quad, -1, axis=0) - quad
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def sample_homography(spec: BurstSpec, rng: RngLike = None) -> np.ndarray:
    """Perturb the crop's corners inside discs of radius jitter * crop_size."""
    rng = as_rng(rng)
    if spec.homography_jitter == 0:
        return np.eye(3)
    c = float(spec.crop_size)
    corners = np.array([[0.0, 0.0], [c, 0.0], [c, c], [0.0, c]])
    radius = spec.homography_jitter * c
    for _ in range(MAX_HOMOGRAPHY_RETRIES):
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, 4))
        theta = rng.uniform(0.0, 2 * np.pi, 4)
        quad = corners + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if not _is_convex_quad(quad):
            continue
        try:
            h = homography_from_points(corners, quad)
        except np.linalg.LinAlgError:
            continue
        if np.isfinite(h).all() and np.linalg.cond(h) < 1e12:
            return h
    raise RuntimeError(
        f"no valid homography after {MAX_HOMOGRAPHY_RETRIES} draws; "
        f"homography_jitter={spec.homography_jitter} is too large for a {spec.crop_size}px crop"
    )


def noise_sigma(value: float, noise_param: str = "variance") -> float:
    return float(np.sqrt(value)) if noise_param == "variance" else float(value)


def add_gaussian_noise(image: np.ndarray, variance: float, rng: RngLike = None,
                       noise_param: str = "variance") -> np.ndarray:
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    rng = as_rng(rng)
    image = np.asarray(image)
    if variance == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, noise_sigma(variance, noise_param), size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype, copy=False)


def sample_image(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup of image at coords[..., (x, y)]."""
    rc = [coords[..., 1], coords[..., 0]]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, rc, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(image[..., ch], rc, order=1, mode="nearest") for ch in range(image.shape[2])],
        axis=-1,
    )


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def burst_offsets(frame_count: int, step: np.ndarray) -> np.ndarray:
    k = np.arange(frame_count) - frame_count // 2
    return k[:, None] * np.asarray(step, dtype=np.float64)[None, :]


def synthesize_burst(image: np.ndarray, warp: np.ndarray, spec: BurstSpec, rng: RngLike = None,
                     seed: int | None = None, size: tuple[int, int] | None = None) -> Burst:
    """Render a burst whose frame k samples the source at warp @ (p + offset_k).

    ``size`` is the (height, width) of the frames; defaults to a square crop.
    """
    rng = as_rng(rng)
    image = check_source_image(image)
    src = image.astype(np.float64)
    n = spec.frame_count
    fh, fw = size or (spec.crop_size, spec.crop_size)
    half = n // 2

    theta = rng.uniform(0.0, 2 * np.pi)
    extreme = rng.uniform(0.0, spec.max_translation)
    step = np.zeros(2) if half == 0 else (extreme / half) * np.array([np.cos(theta), np.sin(theta)])
    offsets = burst_offsets(n, step)
    offsets[half] = 0.0

    grid = pixel_grid(fh, fw)
    h_src, w_src = src.shape[:2]
    coords = [apply_homography(warp, grid + off) for off in offsets]
    for k, xy in enumerate(coords):
        if (not np.isfinite(xy).all() or xy[..., 0].min() < 0 or xy[..., 1].min() < 0
                or xy[..., 0].max() > w_src - 1 or xy[..., 1].max() > h_src - 1):
            raise ValueError(
                f"frame {k} of the burst leaves the {w_src}x{h_src} source image; "
                f"use a larger source image or a smaller crop/max_translation"
            )

    lo, hi = spec.noise_variance_range
    variance = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    frames = []
    for xy in coords:
        frame = sample_image(src, xy)
        frames.append(add_gaussian_noise(frame, variance, rng, spec.noise_param))
    return Burst(
        frames=np.stack(frames).astype(np.float32),
        common_index=half,
        intra_offsets=offsets,
        noise_variance=variance,
        warp=warp,
        seed=seed,
    )


def compute_flow_map(homography_ab: np.ndarray, height: int, width: int) -> FlowMap:
    h = np.asarray(homography_ab, dtype=np.float64)
    if h.shape != (3, 3) or not np.isfinite(h).all() or abs(np.linalg.det(h)) < 1e-12:
        raise ValueError("flow homography must be a finite, invertible 3x3 matrix")
    grid = pixel_grid(height, width)
    x, y = grid[..., 0], grid[..., 1]
    den = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        vectors = apply_homography(h, grid)
    valid = (
        (den > 0)
        & np.isfinite(vectors).all(axis=-1)
        & (vectors[..., 0] >= 0) & (vectors[..., 0] <= width - 1)
        & (vectors[..., 1] >= 0) & (vectors[..., 1] <= height - 1)
    )
    return FlowMap(vectors=vectors, valid=valid)


def _footprint(local: np.ndarray, spec: BurstSpec) -> np.ndarray:
    """Bounding box (xmin, ymin, xmax, ymax) of every frame of a burst in crop-local coordinates."""
    m = spec.max_translation
    c = spec.crop_size - 1
    corners = np.array([[-m, -m], [c + m, -m], [c + m, c + m], [-m, c + m]], dtype=np.float64)
    t = np.linspace(0.0, 1.0, 9)[:, None]
    edges = np.concatenate([corners[i] + t * (corners[(i + 1) % 4] - corners[i]) for i in range(4)])
    pts = apply_homography(local, edges)
    return np.concatenate([pts.min(axis=0), pts.max(axis=0)])


def make_burst_pair(image: np.ndarray, spec: BurstSpec, rng: RngLike = None) -> BurstPair:
    """Two bursts of one scene under different homographies, plus the flow b -> a."""
    seed = rng if isinstance(rng, int) else None
    rng = as_rng(rng)
    image = check_source_image(image, spec.crop_size)
    h_src, w_src = image.shape[:2]

    local_a = sample_homography(spec, rng)
    local_b = sample_homography(spec, rng)
    bound = spec.inter_bound
    shift = rng.uniform(-bound, bound, 2) if bound > 0 else np.zeros(2)
    local_b = translation(*shift) @ local_b

    box = np.concatenate([_footprint(local_a, spec), _footprint(local_b, spec)]).reshape(2, 4)
    xmin, ymin = box[:, 0].min(), box[:, 1].min()
    xmax, ymax = box[:, 2].max(), box[:, 3].max()
    ox_lo, ox_hi = -xmin, (w_src - 1) - xmax
    oy_lo, oy_hi = -ymin, (h_src - 1) - ymax
    if ox_hi < ox_lo or oy_hi < oy_lo:
        raise ValueError(
            f"source image {w_src}x{h_src} cannot hold a {spec.crop_size}px burst pair with "
            f"max_translation={spec.max_translation}; use a larger image or smaller crop"
        )
    origin = translation(rng.uniform(ox_lo, ox_hi), rng.uniform(oy_lo, oy_hi))
    warp_a = origin @ local_a
    warp_b = origin @ local_b

    burst_a = synthesize_burst(image, warp_a, spec, rng, seed=seed)
    burst_b = synthesize_burst(image, warp_b, spec, rng, seed=seed)
    h_ab = np.linalg.solve(warp_a, warp_b)
    h_ab = h_ab / h_ab[2, 2]
    flow = compute_flow_map(h_ab, spec.crop_size, spec.crop_size)
    return BurstPair(burst_a=burst_a, burst_b=burst_b, flow_ab=flow, homography_ab=h_ab)
