"""Fully convolutional joint detector/descriptor over a burst of frames.

The N frames are stacked along channels, passed through a burst layer and an
L2-Net style backbone where strides are replaced by dilations so the output
keeps the input resolution.  The last 8x8 stage is replaced by three dilated
2x2 convolutions.  Two 1x1 heads over the squared descriptor activations give
the detection (K) and reliability (R) confidence maps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .burstsynth import Burst

DESCRIPTOR_DIM = 128
CHECKPOINT_MAGIC = b"LBCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    frame_count: int = 5
    input_channels: int = 3
    descriptor_dim: int = DESCRIPTOR_DIM
    # the last width/dilation pair describes the replaced 8x8 stage
    backbone_widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 128)
    dilation_schedule: tuple[int, ...] = (1, 1, 1, 2, 2, 4, 4)
    weight_init_seed: int = 0

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        if self.frame_count < 1:
            raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.descriptor_dim != DESCRIPTOR_DIM:
            raise ValueError(f"descriptor_dim is fixed at {DESCRIPTOR_DIM}, got {self.descriptor_dim}")
        if len(self.backbone_widths) < 2:
            raise ValueError("backbone_widths needs at least one 3x3 layer and the final stage")
        if len(self.backbone_widths) != len(self.dilation_schedule):
            raise ValueError("backbone_widths and dilation_schedule must have equal length")
        if any(w <= 0 for w in self.backbone_widths):
            raise ValueError(f"backbone widths must be positive, got {self.backbone_widths}")
        if any(d <= 0 for d in self.dilation_schedule):
            raise ValueError(f"dilations must be positive, got {self.dilation_schedule}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class NetworkOutput:
    """Dense outputs for the common frame.

    From ``BurstNet.forward``: torch tensors, descriptors/c_feature (B, D, H, W),
    detection/reliability (B, H, W).  From :func:`forward`: numpy arrays,
    descriptors/c_feature (H, W, D), detection/reliability (H, W).
    """

    descriptors: object
    detection: object
    reliability: object
    c_feature: object = field(default=None, repr=False)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, dilation, norm_relu=True):
        super().__init__()
        total = (kernel - 1) * dilation
        # (left, right, top, bottom); odd totals only occur for even kernels with odd dilation
        self.pad = (total // 2, total - total // 2, total // 2, total - total // 2)
        self.conv = nn.Conv2d(cin, cout, kernel, dilation=dilation)
        self.norm = nn.BatchNorm2d(cout, affine=False) if norm_relu else None

    def forward(self, x):
        x = self.conv(F.pad(x, self.pad))
        if self.norm is not None:
            x = F.relu(self.norm(x))
        return x


class BurstNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.step = 0
        widths, dils = config.backbone_widths, config.dilation_schedule
        cin = config.frame_count * config.input_channels
        self.burst_layer = ConvBlock(cin, widths[0], 3, 1)
        layers = []
        prev = widths[0]
        for w, d in zip(widths[:-1], dils[:-1]):
            layers.append(ConvBlock(prev, w, 3, d))
            prev = w
        base = dils[-1]
        layers.append(ConvBlock(prev, widths[-1], 2, base))
        layers.append(ConvBlock(widths[-1], widths[-1], 2, 2 * base))
        layers.append(ConvBlock(widths[-1], config.descriptor_dim, 2, 4 * base, norm_relu=False))
        self.backbone = nn.Sequential(*layers)
        self.detection_head = nn.Conv2d(config.descriptor_dim, 2, 1)
        self.reliability_head = nn.Conv2d(config.descriptor_dim, 2, 1)

    @property
    def final_layers(self) -> list[ConvBlock]:
        return list(self.backbone)[-3:]

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        """x: (B, N*C, H, W) frames stacked frame-major along channels."""
        expected = self.config.frame_count * self.config.input_channels
        if x.shape[1] != expected:
            raise ValueError(
                f"input has {x.shape[1]} channels, model expects {expected} "
                f"({self.config.frame_count} frames x {self.config.input_channels} channels)"
            )
        raw = self.backbone(self.burst_layer(x))
        c_feature = raw ** 2
        detection = F.softmax(self.detection_head(c_feature), dim=1)[:, 1]
        reliability = F.softmax(self.reliability_head(c_feature), dim=1)[:, 1]
        return NetworkOutput(F.normalize(raw, p=2, dim=1), detection, reliability, c_feature)


def init_model(config: ModelConfig, seed: int | None = None) -> BurstNet:
    seed = config.weight_init_seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BurstNet(config)
    return model


def burst_tensor(frames: np.ndarray) -> torch.Tensor:
    """(N, H, W[, C]) -> (N*C, H, W) float32 tensor."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[..., None]
    n, h, w, c = frames.shape
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2).reshape(n * c, h, w)))


def forward(model: BurstNet, burst: Burst | np.ndarray) -> NetworkOutput:
    """Inference on one burst; returns numpy maps in (H, W[, D]) layout."""
    frames = burst.frames if isinstance(burst, Burst) else np.asarray(burst)
    cfg = model.config
    channels = 1 if frames.ndim == 3 else frames.shape[3]
    if frames.shape[0] != cfg.frame_count or channels != cfg.input_channels:
        raise ValueError(
            f"burst has {frames.shape[0]} frames x {channels} channels, "
            f"model expects {cfg.frame_count} x {cfg.input_channels}"
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(burst_tensor(frames)[None])
    finally:
        model.train(was_training)
    return NetworkOutput(
        descriptors=out.descriptors[0].permute(1, 2, 0).numpy(),
        detection=out.detection[0].numpy(),
        reliability=out.reliability[0].numpy(),
        c_feature=out.c_feature[0].permute(1, 2, 0).numpy(),
    )


# -- checkpoint archive ------------------------------------------------------
#
# b"LBCK" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | data
#
# The manifest lists every tensor as {name, dtype, shape, offset, nbytes};
# offsets are relative to the start of the data block, arrays are row-major
# little-endian ("<f4" or "<i8").  It also echoes the model config and any
# caller metadata (step, epoch, optimizer hyperparameters).

_HEADER = struct.Struct("<4sII")


def save_checkpoint(path: str | Path, model: BurstNet, extra_tensors: dict | None = None,
                    meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        data = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(model.step),
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (manifest, tensors) without building a model."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
    base = _HEADER.size + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                                           offset=start).reshape(e["shape"]).copy()
    return manifest, tensors


def load_checkpoint(path: str | Path) -> tuple[BurstNet, dict, dict[str, np.ndarray]]:
    """Return (model, manifest, non-model tensors)."""
    manifest, tensors = read_checkpoint(path)
    model = BurstNet(ModelConfig.from_dict(manifest["config"]))
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    model.step = int(manifest["step"])
    model.eval()
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, manifest, rest
