"""Evaluation protocols: matching accuracy, repeatability, the HPatches burst
benchmark, trajectory errors and reconstruction statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import cv2
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .burstsynth import Burst, BurstSpec, apply_homography, synthesize_burst, translation
from .extractor import FeatureSet
from .interop import IMAGE_SUFFIXES, read_image

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(range(1, 11))


# -- matching ----------------------------------------------------------------

@dataclass
class MatchSet:
    pairs: np.ndarray          # (M, 2) int: (a_idx, b_idx)
    distances: np.ndarray      # (M,)
    method: str = "mutual_nn"

    def __len__(self):
        return len(self.pairs)


def match_descriptors(fs_a: FeatureSet, fs_b: FeatureSet) -> MatchSet:
    """Mutual nearest neighbours in Euclidean descriptor space; ties go to the lower index."""
    if fs_a.empty or fs_b.empty:
        return MatchSet(np.zeros((0, 2), dtype=int), np.zeros(0))
    a = fs_a.descriptors.astype(np.float64)
    b = fs_b.descriptors.astype(np.float64)
    d = cdist(a, b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    ia = np.nonzero(nn_ba[nn_ab] == np.arange(len(a)))[0]
    pairs = np.stack([ia, nn_ab[ia]], axis=1)
    dist = np.linalg.norm(a[pairs[:, 0]] - b[pairs[:, 1]], axis=1)
    return MatchSet(pairs, dist)


@dataclass
class MMAResult:
    thresholds: tuple
    accuracy: np.ndarray
    n_matches: int
    flags: list = field(default_factory=list)

    def at(self, t: float) -> float:
        return float(self.accuracy[list(self.thresholds).index(t)])


def mma(fs_a: FeatureSet, fs_b: FeatureSet, h_ab: np.ndarray, thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
        matches: MatchSet | None = None) -> MMAResult:
    """Fraction of mutual-NN matches whose a-keypoint, mapped by h_ab, lands within t px of its b match."""
    thresholds = tuple(thresholds)
    matches = match_descriptors(fs_a, fs_b) if matches is None else matches
    if len(matches) == 0:
        return MMAResult(thresholds, np.zeros(len(thresholds)), 0, ["no_matches"])
    proj = apply_homography(np.asarray(h_ab, dtype=np.float64), fs_a.xy[matches.pairs[:, 0]])
    err = np.linalg.norm(proj - fs_b.xy[matches.pairs[:, 1]], axis=1)
    err = np.where(np.isfinite(err), err, np.inf)
    acc = np.array([(err <= t).mean() for t in thresholds])
    return MMAResult(thresholds, acc, len(matches))


def _inside(xy: np.ndarray, h: int, w: int) -> np.ndarray:
    if h <= 0 or w <= 0:
        return np.isfinite(xy).all(axis=1)
    return (xy[:, 0] >= -0.5) & (xy[:, 1] >= -0.5) & (xy[:, 0] <= w - 0.5) & (xy[:, 1] <= h - 0.5)


def _one_way(src: FeatureSet, dst: FeatureSet, h: np.ndarray, eps: float) -> float | None:
    proj = apply_homography(h, src.xy)
    inside = _inside(proj, dst.height, dst.width)
    if not inside.any():
        return None
    dist, _ = cKDTree(dst.xy).query(proj[inside], k=1)
    return float((dist <= eps).mean())


def repeatability(fs_a: FeatureSet, fs_b: FeatureSet, h_ab: np.ndarray, eps: float = 3.0) -> tuple[float, list]:
    """Symmetric proximity repeatability; keypoints projecting outside the other image are ignored.

    Returns (score, flags).
    """
    if fs_a.empty or fs_b.empty:
        return 0.0, ["empty_set"]
    h_ab = np.asarray(h_ab, dtype=np.float64)
    scores = [s for s in (_one_way(fs_a, fs_b, h_ab, eps), _one_way(fs_b, fs_a, np.linalg.inv(h_ab), eps))
              if s is not None]
    if not scores:
        return 0.0, ["no_overlap"]
    return float(np.mean(scores)), []


# -- HPatches-style burst benchmark -----------------------------------------

@dataclass
class Scene:
    name: str
    images: list[Path]
    homographies: list[np.ndarray]   # H_1_k for k = 2..6


def load_scene(path: Path) -> Scene:
    images = []
    for k in range(1, 7):
        found = [p for p in path.glob(f"{k}.*") if p.suffix.lower() in IMAGE_SUFFIXES]
        if len(found) != 1:
            raise ValueError(f"{path}: expected one image named {k}.*, found {len(found)}")
        images.append(found[0])
    homs = []
    for k in range(2, 7):
        hp = path / f"H_1_{k}"
        if not hp.exists():
            raise ValueError(f"{path}: missing H_1_{k}")
        h = np.loadtxt(hp, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"{hp}: not a 3x3 matrix")
        homs.append(h)
    return Scene(path.name, images, homs)


@dataclass
class BenchmarkReport:
    rows: list[dict]                 # per (scene, noise)
    summary: list[dict]              # per noise level, all pairs pooled
    skipped_scenes: list[str]
    thresholds: tuple

    def mma_at(self, noise: float, t: float = 3) -> float:
        for s in self.summary:
            if s["noise"] == noise and s["subset"] == "all":
                return s[f"mma@{t:g}"]
        raise KeyError(noise)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_tsv(out / "scenes.tsv", self.rows)
        _write_tsv(out / "summary.tsv", self.summary)
        (out / "summary.json").write_text(json.dumps({
            "summary": self.summary, "skipped_scenes": self.skipped_scenes,
            "thresholds": list(self.thresholds)}, indent=2))
        for s in self.summary:
            name = f"mma_curve_{s['subset']}_noise{s['noise']:g}.dat"
            with open(out / name, "w") as fh:
                for t in self.thresholds:
                    fh.write(f"{t:g} {s[f'mma@{t:g}']:.6f}\n")


def _write_tsv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), delimiter="\t")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def scene_bursts(scene: Scene, spec: BurstSpec, noise: float, rng, channels: int = 3,
                 max_dim: int | None = None) -> tuple[list[Burst], list[np.ndarray]]:
    """One burst per scene image, plus common-frame homographies 1 -> k."""
    margin = int(math.ceil(spec.max_translation)) + 1
    spec_n = BurstSpec(frame_count=spec.frame_count, max_translation=spec.max_translation,
                       noise_variance_range=(noise, noise), homography_jitter=0.0,
                       crop_size=spec.crop_size, noise_param=spec.noise_param)
    bursts, scales = [], []
    for path in scene.images:
        img = read_image(path, channels)
        s = 1.0
        if max_dim and max(img.shape[:2]) > max_dim:
            s = max_dim / max(img.shape[:2])
            img = cv2.resize(img, (round(img.shape[1] * s), round(img.shape[0] * s)), interpolation=cv2.INTER_AREA)
            img = np.clip(img, 0.0, 1.0)
        h, w = img.shape[:2]
        size = (h - 2 * margin, w - 2 * margin)
        if min(size) < 16:
            raise ValueError(f"{path}: image too small for margin {margin}")
        bursts.append(synthesize_burst(img, translation(margin, margin), spec_n, rng, size=size))
        scales.append(s)
    t = translation(margin, margin)
    homs = []
    for k, h in enumerate(scene.homographies, start=1):
        # rescale: image-1 coords use scales[0], image-k coords use scales[k]
        hk = np.diag([scales[k], scales[k], 1.0]) @ h @ np.diag([1 / scales[0], 1 / scales[0], 1.0])
        homs.append(np.linalg.inv(t) @ hk @ t)
    return bursts, homs


Extractor = Callable[[Burst, str], FeatureSet]


def hpatches_burst_benchmark(dataset_dir, extractor: Extractor, noise_levels=(0.0, 0.3, 0.6),
                             spec: BurstSpec | None = None, seed: int = 0,
                             thresholds: Iterable[float] = DEFAULT_THRESHOLDS, eps: float = 3.0,
                             channels: int = 3, max_dim: int | None = None,
                             scenes: Iterable[str] | None = None) -> BenchmarkReport:
    """Synthesize a burst per image and noise level, extract, and score pairs (1, k)."""
    spec = spec or BurstSpec()
    thresholds = tuple(thresholds)
    root = Path(dataset_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if scenes is not None:
        keep = set(scenes)
        dirs = [d for d in dirs if d.name in keep]
    loaded, skipped = [], []
    for d in dirs:
        try:
            loaded.append(load_scene(d))
        except ValueError as exc:
            log.warning("skipping scene %s: %s", d.name, exc)
            skipped.append(d.name)

    rows = []
    pooled: dict[tuple[str, float], list] = {}
    for si, scene in enumerate(loaded):
        for ni, noise in enumerate(noise_levels):
            rng = np.random.default_rng([seed, si, ni])
            bursts, homs = scene_bursts(scene, spec, noise, rng, channels, max_dim)
            feats = [extractor(b, f"{scene.name}/{k + 1}") for k, b in enumerate(bursts)]
            accs, reps, nmatch = [], [], []
            for k in range(1, 6):
                res = mma(feats[0], feats[k], homs[k - 1], thresholds)
                rep, _ = repeatability(feats[0], feats[k], homs[k - 1], eps)
                accs.append(res.accuracy)
                reps.append(rep)
                nmatch.append(res.n_matches)
            subset = "viewpoint" if scene.name.startswith("v_") else "illumination" if scene.name.startswith("i_") else "other"
            for key in ((subset, noise), ("all", noise)):
                pooled.setdefault(key, []).append((accs, reps, nmatch))
            row = {"scene": scene.name, "noise": float(noise),
                   "keypoints": float(np.mean([len(f) for f in feats])),
                   "matches": float(np.mean(nmatch))}
            mean_acc = np.mean(accs, axis=0)
            row.update({f"mma@{t:g}": float(a) for t, a in zip(thresholds, mean_acc)})
            row["repeatability"] = float(np.mean(reps))
            rows.append(row)

    summary = []
    for (subset, noise), items in sorted(pooled.items(), key=lambda kv: (kv[0][0] != "all", kv[0][0], kv[0][1])):
        accs = np.concatenate([np.asarray(a) for a, _, _ in items])
        reps = np.concatenate([r for _, r, _ in items])
        entry = {"subset": subset, "noise": float(noise), "scenes": len(items), "pairs": len(accs)}
        entry.update({f"mma@{t:g}": float(a) for t, a in zip(thresholds, accs.mean(axis=0))})
        entry["repeatability"] = float(reps.mean())
        summary.append(entry)
    return BenchmarkReport(rows, summary, skipped, thresholds)


# -- trajectories ------------------------------------------------------------

@dataclass
class Pose:
    """World-to-camera pose: x_cam = rotation @ x_world + translation."""

    image_id: str
    rotation: np.ndarray
    translation: np.ndarray
    registered: bool = True

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class PoseTrajectory:
    poses: list[Pose]

    def __post_init__(self):
        for p in self.poses:
            p.rotation = np.asarray(p.rotation, dtype=np.float64).reshape(3, 3)
            p.translation = np.asarray(p.translation, dtype=np.float64).reshape(3)
            if not np.allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-6):
                raise ValueError(f"pose {p.image_id}: rotation is not orthonormal")

    def registered(self) -> dict[str, Pose]:
        return {p.image_id: p for p in self.poses if p.registered}

    @classmethod
    def from_centers(cls, ids, rotations_cw, centers) -> "PoseTrajectory":
        """Build from camera-to-world rotations and camera centres."""
        poses = []
        for i, r, c in zip(ids, rotations_cw, centers):
            r = np.asarray(r, dtype=np.float64)
            poses.append(Pose(str(i), r.T, -r.T @ np.asarray(c, dtype=np.float64)))
        return cls(poses)


@dataclass
class Similarity:
    """x_gt = scale * rotation @ x_est + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, x: np.ndarray) -> np.ndarray:
        return self.scale * x @ self.rotation.T + self.translation

    def apply(self, traj: PoseTrajectory) -> PoseTrajectory:
        out = []
        for p in traj.poses:
            r_cw = self.rotation @ p.rotation.T
            c = self.apply_points(p.center[None])[0]
            out.append(Pose(p.image_id, r_cw.T, -r_cw.T @ c, p.registered))
        return PoseTrajectory(out)


def _common(est: PoseTrajectory, gt: PoseTrajectory) -> list[str]:
    e, g = est.registered(), gt.registered()
    return [p.image_id for p in est.poses if p.image_id in e and p.image_id in g]


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing sum ||R src + t - dst||^2."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, mu_d - r @ mu_s


def align_trajectory(est: PoseTrajectory, gt: PoseTrajectory) -> Similarity:
    """Scale from the first two registered centres, then least-squares rigid fit."""
    ids = _common(est, gt)
    if len(ids) < 2:
        raise ValueError(f"need >= 2 common registered poses, found {len(ids)}")
    e, g = est.registered(), gt.registered()
    ce = np.array([e[i].center for i in ids])
    cg = np.array([g[i].center for i in ids])
    de = np.linalg.norm(ce[1] - ce[0])
    if de == 0:
        raise ValueError("first two registered estimated centres coincide; scale undefined")
    s = float(np.linalg.norm(cg[1] - cg[0]) / de)
    r, t = kabsch(s * ce, cg)
    return Similarity(s, r, t)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle, accurate near zero."""
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.degrees(math.atan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(r) - 1.0))))


@dataclass
class TrajectoryErrors:
    ate_trans: float
    ate_rot_deg: float
    rpe_trans: float
    rpe_rot_deg: float
    poses: int = 0


def _cw(p: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = p.rotation.T
    m[:3, 3] = p.center
    return m


def ate_rpe(est: PoseTrajectory, gt: PoseTrajectory, align: bool = True) -> TrajectoryErrors:
    ids = _common(est, gt)
    if len(ids) < 2:
        raise ValueError(f"need >= 2 common registered poses, found {len(ids)}")
    if align:
        est = align_trajectory(est, gt).apply(est)
    e, g = est.registered(), gt.registered()
    at, ar = [], []
    for i in ids:
        at.append(np.linalg.norm(e[i].center - g[i].center))
        ar.append(rotation_angle_deg(g[i].rotation @ e[i].rotation.T))
    rt, rr = [], []
    for i, j in zip(ids[:-1], ids[1:]):
        de = np.linalg.inv(_cw(e[i])) @ _cw(e[j])
        dg = np.linalg.inv(_cw(g[i])) @ _cw(g[j])
        err = np.linalg.inv(dg) @ de
        rt.append(np.linalg.norm(err[:3, 3]))
        rr.append(rotation_angle_deg(err[:3, :3]))
    return TrajectoryErrors(float(np.mean(at)), float(np.mean(ar)), float(np.mean(rt)), float(np.mean(rr)), len(ids))


def read_poses(path) -> PoseTrajectory:
    """Lines "image_id qw qx qy qz tx ty tz [registered]" (world-to-camera, '#' comments)."""
    from scipy.spatial.transform import Rotation

    poses = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        if len(f) not in (8, 9):
            raise ValueError(f"{path}: bad pose line {line!r}")
        qw, qx, qy, qz = (float(v) for v in f[1:5])
        r = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        reg = True if len(f) == 8 else f[8] not in ("0", "false", "False")
        poses.append(Pose(f[0], r, np.array([float(v) for v in f[5:8]]), reg))
    return PoseTrajectory(poses)


def write_poses(path, traj: PoseTrajectory) -> None:
    from scipy.spatial.transform import Rotation

    with open(path, "w") as fh:
        for p in traj.poses:
            qx, qy, qz, qw = Rotation.from_matrix(p.rotation).as_quat()
            t = p.translation
            vals = " ".join(repr(float(v)) for v in (qw, qx, qy, qz, *t))
            fh.write(f"{p.image_id} {vals} {int(p.registered)}\n")


# -- reconstruction statistics ----------------------------------------------

REPORT_COLUMNS = ("image_id", "keypoints", "putative", "inliers", "points3d")


@dataclass
class ReconstructionStats:
    convergence_rate: float
    images_passed_pct: float
    keypoints_per_image: float
    putative_matches: float
    inliers: float
    match_ratio: float
    match_score: float
    precision: float
    points3d_per_image: float
    images: int = 0
    method: str = ""
    dataset: str = ""
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def read_sfm_report(path) -> list[dict]:
    """Tab-separated rows with a header; REPORT_COLUMNS are required, method,
    dataset, scene, registered and converged are optional."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty report")
    reader = csv.DictReader(lines, delimiter="\t")
    missing = [c for c in REPORT_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return list(reader)


def _stats(rows: list[dict]) -> ReconstructionStats:
    flags = []
    kp = np.array([float(r["keypoints"]) for r in rows])
    put = np.array([float(r["putative"]) for r in rows])
    inl = np.array([float(r["inliers"]) for r in rows])
    p3d = np.array([float(r["points3d"]) for r in rows])
    reg = np.array([float(r.get("registered") or 1) for r in rows])

    def ratio(num, den, flag):
        out = np.zeros_like(num)
        ok = den > 0
        if not ok.all():
            flags.append(flag)
        out[ok] = num[ok] / den[ok]
        return float(out.mean())

    scenes: dict[str, list[bool]] = {}
    for r, g in zip(rows, reg):
        name = r.get("scene") or ""
        conv = r.get("converged")
        scenes.setdefault(name, []).append(bool(int(float(conv))) if conv not in (None, "") else g > 0)
    return ReconstructionStats(
        convergence_rate=float(np.mean([any(v) for v in scenes.values()])),
        images_passed_pct=float(100.0 * reg.mean()),
        keypoints_per_image=float(kp.mean()),
        putative_matches=float(put.mean()),
        inliers=float(inl.mean()),
        match_ratio=ratio(put, kp, "zero_keypoints"),
        match_score=ratio(inl, kp, "zero_keypoints"),
        precision=ratio(inl, put, "zero_putative"),
        points3d_per_image=float(p3d.mean()),
        images=len(rows),
        method=rows[0].get("method") or "",
        dataset=rows[0].get("dataset") or "",
        flags=sorted(set(flags)),
    )


def reconstruction_stats(report) -> ReconstructionStats:
    rows = read_sfm_report(report) if isinstance(report, (str, Path)) else list(report)
    if not rows:
        raise ValueError("empty report")
    return _stats(rows)


def grouped_reconstruction_stats(report) -> list[ReconstructionStats]:
    rows = read_sfm_report(report) if isinstance(report, (str, Path)) else list(report)
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.get("method") or "", r.get("dataset") or ""), []).append(r)
    return [_stats(v) for _, v in sorted(groups.items())]
