import numpy as np
import pytest

from burstfeat.burstsynth import (
    BurstSpec, add_gaussian_noise, apply_homography, burst_offsets, compute_flow_map, homography_from_points,
    make_burst_pair, sample_homography, synthesize_burst, translation,
)
from burstfeat.toydata import procedural_image


def flow_oracle(h, height, width):
    """Per-pixel homogeneous evaluation with plain Python loops."""
    vec = np.zeros((height, width, 2))
    valid = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            u, v, w = h @ np.array([x, y, 1.0])
            vec[y, x] = (u / w, v / w)
            valid[y, x] = w > 0 and 0 <= u / w <= width - 1 and 0 <= v / w <= height - 1
    return vec, valid


def test_flow_map_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    spec = BurstSpec(crop_size=24, homography_jitter=0.2)
    for _ in range(5):
        h = translation(*rng.uniform(-5, 5, 2)) @ sample_homography(spec, rng)
        flow = compute_flow_map(h, 24, 24)
        vec, valid = flow_oracle(h, 24, 24)
        assert np.abs(flow.vectors - vec).max() < 1e-9
        assert np.array_equal(flow.valid, valid)


def test_flow_map_rejects_singular():
    with pytest.raises(ValueError):
        compute_flow_map(np.zeros((3, 3)), 8, 8)


def test_homography_from_points_reproduces_correspondences():
    rng = np.random.default_rng(0)
    src = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    dst = src + rng.uniform(-2, 2, (4, 2))
    h = homography_from_points(src, dst)
    assert np.allclose(apply_homography(h, src), dst, atol=1e-9)


def test_zero_jitter_gives_identity():
    assert np.array_equal(sample_homography(BurstSpec(homography_jitter=0.0), 1), np.eye(3))


def test_sampled_corners_stay_in_disc():
    spec = BurstSpec(crop_size=100, homography_jitter=0.1)
    rng = np.random.default_rng(1)
    corners = np.array([[0, 0], [100, 0], [100, 100], [0, 100]], dtype=float)
    for _ in range(1000):
        h = sample_homography(spec, rng)
        moved = np.linalg.norm(apply_homography(h, corners) - corners, axis=1)
        assert moved.max() <= 10.0 + 1e-9
        assert abs(np.linalg.det(h)) > 1e-9


class _BowtieRng(np.random.Generator):
    """Always pushes the first two corners past each other, giving a self-intersecting quad."""

    def __init__(self):
        super().__init__(np.random.PCG64(0))

    def uniform(self, low=0.0, high=1.0, size=None):
        if high == 1.0:
            return np.ones(size)
        return np.array([0.0, np.pi, 0.0, 0.0])


def test_degenerate_draws_hit_retry_cap():
    with pytest.raises(RuntimeError, match="homography_jitter"):
        sample_homography(BurstSpec(crop_size=10, homography_jitter=2.0), _BowtieRng())


def test_sampling_deterministic():
    spec = BurstSpec(homography_jitter=0.1)
    assert np.array_equal(sample_homography(spec, 42), sample_homography(spec, 42))


def test_noise_variance_statistics():
    img = np.full((512, 512), 0.5)
    rng = np.random.default_rng(11)
    field = np.random.default_rng(11).normal(0.0, np.sqrt(0.3), img.shape)
    out = add_gaussian_noise(img, 0.3, rng)
    assert abs(field.var() - 0.3) / 0.3 < 0.05
    assert np.allclose(out, np.clip(img + field, 0, 1))


def test_noise_clipped_and_input_untouched():
    img = np.full((64, 64), 0.5)
    out = add_gaussian_noise(img, 0.6, 0)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(img == 0.5)
    assert np.array_equal(add_gaussian_noise(img, 0.0, 0), img)
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -0.1, 0)


def test_std_reading_of_noise_parameter():
    img = np.full((256, 256), 0.5)
    a = add_gaussian_noise(img, 0.04, np.random.default_rng(2), noise_param="std")
    b = np.clip(img + np.random.default_rng(2).normal(0, 0.04, img.shape), 0, 1)
    assert np.allclose(a, b)


def test_even_frame_count_rejected():
    with pytest.raises(ValueError, match="odd"):
        BurstSpec(frame_count=4)


def test_burst_offsets_uniform_and_centred():
    off = burst_offsets(5, np.array([2.0, -1.0]))
    assert np.array_equal(off[2], [0, 0])
    assert np.allclose(np.diff(off, axis=0), [2.0, -1.0])


def test_synthesized_frames_are_shifted_copies():
    img = procedural_image(np.random.default_rng(0), 200, 200)
    spec = BurstSpec(crop_size=64, noise_variance_range=(0.0, 0.0), max_translation=20)
    warp = translation(60, 60)
    burst = synthesize_burst(img, warp, spec, np.random.default_rng(4))
    assert burst.frames.shape == (5, 64, 64, 3)
    off = burst.intra_offsets
    assert np.abs(off).max() <= 20 + 1e-9
    assert np.array_equal(off[2], [0, 0])
    from burstfeat.burstsynth import pixel_grid, sample_image
    for k in range(5):
        ref = sample_image(img.astype(np.float64), apply_homography(warp, pixel_grid(64, 64) + off[k]))
        assert np.allclose(burst.frames[k], ref, atol=1e-6)


def test_burst_leaving_source_raises():
    img = np.zeros((70, 70))
    with pytest.raises(ValueError, match="leaves"):
        synthesize_burst(img, np.eye(3), BurstSpec(crop_size=64, max_translation=30), 0)


def test_pair_flow_aligns_common_frames():
    img = procedural_image(np.random.default_rng(5), 320, 320)
    img = np.asarray(img, dtype=np.float64)
    spec = BurstSpec(crop_size=96, noise_variance_range=(0.0, 0.0))
    pair = make_burst_pair(img, spec, np.random.default_rng(9))
    a, b = pair.burst_a.common_frame, pair.burst_b.common_frame
    ys, xs = np.nonzero(pair.flow_ab.valid)
    assert len(ys) > 500
    from burstfeat.burstsynth import sample_image
    # the source point seen at b's pixel p equals the one seen at a's pixel flow(p)
    src_b = apply_homography(pair.burst_b.warp, np.stack([xs, ys], axis=1).astype(float))
    src_a = apply_homography(pair.burst_a.warp, pair.flow_ab.vectors[ys, xs])
    assert np.abs(src_a - src_b).max() < 1e-8
    warped = sample_image(a.astype(np.float64), pair.flow_ab.vectors[ys, xs])
    assert np.median(np.abs(warped - b[ys, xs])) < 0.05


def test_pair_deterministic_under_seed():
    img = procedural_image(np.random.default_rng(5), 320, 320)
    spec = BurstSpec(crop_size=64)
    p1 = make_burst_pair(img, spec, np.random.default_rng(1))
    p2 = make_burst_pair(img, spec, np.random.default_rng(1))
    assert np.array_equal(p1.burst_a.frames, p2.burst_a.frames)
    assert np.array_equal(p1.flow_ab.vectors, p2.flow_ab.vectors)


def test_small_source_rejected():
    with pytest.raises(ValueError):
        make_burst_pair(np.zeros((100, 100)), BurstSpec(crop_size=96), 0)
