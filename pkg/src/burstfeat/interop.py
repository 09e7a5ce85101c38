"""On-disk formats: feature files, flow files, burst directories, SfM text export.

LBFT feature file (little-endian)::

    b"LBFT" | u32 version | u32 count | u32 descriptor_dim | u32 height | u32 width
    | u32 id_len | id (UTF-8) | count x (f32 x, y, scale, score) | count x dim f32

LBFW flow file (little-endian)::

    b"LBFW" | u32 version | u32 H | u32 W | H*W*2 f32 (x, y) | H*W u8 valid

Burst directory: ``frame_00.tiff`` ... (float32 TIFF, lossless) plus
``burst.txt`` holding ``key value...`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .burstsynth import Burst, FlowMap
from .extractor import FeatureSet
from .network import DESCRIPTOR_DIM

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp", ".tif", ".tiff"}

FEATURE_MAGIC = b"LBFT"
FEATURE_VERSION = 1
FLOW_MAGIC = b"LBFW"
FLOW_VERSION = 1
BURST_META = "burst.txt"

_FEAT_HEAD = struct.Struct("<4sIIIIII")
_FLOW_HEAD = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: truncated, expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class BurstDirError(FormatError):
    pass


# -- images ------------------------------------------------------------------

def read_image(path, channels: int = 3) -> np.ndarray:
    """Decode to float32 in [0, 1]; (H, W) for channels=1, (H, W, 3) RGB otherwise."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot decode image {path}")
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    elif img.dtype == np.uint16:
        img = img.astype(np.float32) / 65535.0
    else:
        img = np.clip(img.astype(np.float32), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    if img.ndim == 3:
        img = img[..., ::-1]
    if channels == 1 and img.ndim == 3:
        img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    elif channels == 3 and img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.ascontiguousarray(img, dtype=np.float32)


def write_image_png(path, img: np.ndarray) -> None:
    """8-bit PNG of an [0, 1] image (for map dumps and synthetic corpora)."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write {path}")


def _write_float_tiff(path: Path, img: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(img, dtype=np.float32))
    if arr.ndim == 3:
        arr = np.ascontiguousarray(arr[..., ::-1])
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write {path}")


def _read_float_tiff(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise BurstDirError(f"cannot decode frame {path}")
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(arr, dtype=np.float32)


# -- feature files -----------------------------------------------------------

def feature_file_size(count: int, image_id: str = "", dim: int = DESCRIPTOR_DIM) -> int:
    return _FEAT_HEAD.size + len(image_id.encode("utf-8")) + count * (16 + 4 * dim)


def write_feature_file(path, fs: FeatureSet) -> None:
    ident = fs.image_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEAD.pack(FEATURE_MAGIC, FEATURE_VERSION, len(fs), DESCRIPTOR_DIM,
                                 fs.height, fs.width, len(ident)))
        fh.write(ident)
        fh.write(np.ascontiguousarray(fs.keypoints, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes())


def read_feature_file(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < _FEAT_HEAD.size:
        raise TruncatedFileError(path, _FEAT_HEAD.size, len(raw))
    magic, version, count, dim, h, w, id_len = _FEAT_HEAD.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: feature file version {version}, expected {FEATURE_VERSION}")
    expected = _FEAT_HEAD.size + id_len + count * (16 + 4 * dim)
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))
    if dim != DESCRIPTOR_DIM:
        raise FormatError(f"{path}: descriptor dim {dim}, expected {DESCRIPTOR_DIM}")
    off = _FEAT_HEAD.size
    ident = raw[off:off + id_len].decode("utf-8")
    off += id_len
    kps = np.frombuffer(raw, dtype="<f4", count=count * 4, offset=off).reshape(count, 4)
    off += count * 16
    desc = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    return FeatureSet(kps.astype(np.float32), desc.astype(np.float32), ident, h, w)


# -- flow files --------------------------------------------------------------

def write_flow_file(path, flow: FlowMap) -> None:
    h, w = flow.valid.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEAD.pack(FLOW_MAGIC, FLOW_VERSION, h, w))
        fh.write(np.ascontiguousarray(flow.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes())


def read_flow_file(path) -> FlowMap:
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] != FLOW_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(raw) < _FLOW_HEAD.size:
        raise TruncatedFileError(path, _FLOW_HEAD.size, len(raw))
    _, version, h, w = _FLOW_HEAD.unpack_from(raw)
    if version != FLOW_VERSION:
        raise VersionMismatchError(f"{path}: flow file version {version}, expected {FLOW_VERSION}")
    expected = _FLOW_HEAD.size + h * w * 9
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))
    off = _FLOW_HEAD.size
    vec = np.frombuffer(raw, dtype="<f4", count=h * w * 2, offset=off).reshape(h, w, 2)
    valid = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off + h * w * 8).reshape(h, w)
    return FlowMap(vectors=vec.astype(np.float32), valid=valid.astype(bool))


# -- burst directories -------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_burst_dir(path, burst: Burst) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(burst.frames):
        _write_float_tiff(path / f"frame_{k:02d}.tiff", frame)
    lines = [
        f"frame_count {burst.frame_count}",
        f"common_index {burst.common_index}",
        f"noise_variance {_fmt(burst.noise_variance)}",
        f"seed {'none' if burst.seed is None else int(burst.seed)}",
    ]
    lines += [f"offset {k} {_fmt(o[0])} {_fmt(o[1])}" for k, o in enumerate(burst.intra_offsets)]
    lines += ["homography " + " ".join(_fmt(v) for v in row) for row in burst.warp]
    (path / BURST_META).write_text("\n".join(lines) + "\n")


def read_burst_dir(path) -> Burst:
    path = Path(path)
    meta_path = path / BURST_META
    if not meta_path.exists():
        raise BurstDirError(f"{path}: missing {BURST_META}")
    meta: dict = {"offset": {}, "homography": []}
    for line in meta_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        key, vals = parts[0], parts[1:]
        if key == "offset":
            meta["offset"][int(vals[0])] = (float(vals[1]), float(vals[2]))
        elif key == "homography":
            meta["homography"].append([float(v) for v in vals])
        else:
            meta[key] = vals[0]
    n = int(meta["frame_count"])
    frames = []
    for k in range(n):
        fp = path / f"frame_{k:02d}.tiff"
        if not fp.exists():
            raise BurstDirError(f"{path}: missing frame_{k:02d} (metadata lists {n} frames)")
        frames.append(_read_float_tiff(fp))
    extra = sorted(p.name for p in path.glob("frame_*.tiff") if int(p.stem.split("_")[1]) >= n)
    if extra:
        raise BurstDirError(f"{path}: metadata lists {n} frames but found extra {extra}")
    if sorted(meta["offset"]) != list(range(n)):
        raise BurstDirError(f"{path}: offsets do not cover frames 0..{n - 1}")
    seed = None if meta.get("seed", "none") == "none" else int(meta["seed"])
    warp = np.array(meta["homography"]) if meta["homography"] else np.eye(3)
    return Burst(
        frames=np.stack(frames),
        common_index=int(meta["common_index"]),
        intra_offsets=np.array([meta["offset"][k] for k in range(n)]),
        noise_variance=float(meta["noise_variance"]),
        warp=warp,
        seed=seed,
    )


def read_manifest(path) -> list[Path]:
    """One burst directory per line, relative to the manifest; '#' starts a comment."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(path, dirs) -> None:
    Path(path).write_text("".join(f"{d}\n" for d in dirs))


# -- SfM text export ---------------------------------------------------------

def quantize_descriptors(desc: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(desc, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def dequantize_descriptors(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 127.5 - 1.0


def _num(v: float) -> str:
    return "%.9g" % float(v)


def export_sfm_text(fs: FeatureSet, path) -> None:
    """Keypoint text file: header "count 128", then "x y scale orientation d1 .. d128" per row."""
    if fs.empty:
        raise ValueError("cannot export an empty feature set")
    q = quantize_descriptors(fs.descriptors)
    rows = [f"{len(fs)} {DESCRIPTOR_DIM}"]
    for kp, d in zip(fs.keypoints, q):
        head = f"{_num(kp[0])} {_num(kp[1])} {_num(kp[2])} 0"
        rows.append(head + " " + " ".join(str(int(v)) for v in d))
    Path(path).write_text("\n".join(rows) + "\n")


def read_sfm_text(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ((K, 4) float64 x, y, scale, orientation; (K, dim) uint8)."""
    lines = Path(path).read_text().split("\n")
    count, dim = (int(v) for v in lines[0].split())
    kps = np.zeros((count, 4))
    desc = np.zeros((count, dim), dtype=np.uint8)
    for i in range(count):
        vals = lines[1 + i].split()
        if len(vals) != 4 + dim:
            raise FormatError(f"{path}: line {i + 2} has {len(vals)} fields, expected {4 + dim}")
        kps[i] = [float(v) for v in vals[:4]]
        desc[i] = [int(v) for v in vals[4:]]
    return kps, desc
