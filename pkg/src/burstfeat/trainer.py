"""Corpus ingestion and the training loop.

Burst pairs are synthesized on the fly from single corpus images.  Every
random draw is derived from (seed, epoch) or (seed, global step), so a run
resumed from an epoch checkpoint follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .burstsynth import BurstSpec, make_burst_pair
from .interop import IMAGE_SUFFIXES, read_image
from .losses import LossConfig, NoValidPatchError, total_loss
from .network import BurstNet, ModelConfig, burst_tensor, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

_TAG_ORDER = 1
_TAG_PAIR = 2


class EmptyCorpusError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.terms = terms


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 25
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 4
    crop_size: int = 192
    burst_spec: BurstSpec = field(default_factory=BurstSpec)
    loss_config: LossConfig = field(default_factory=LossConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    corpus_dirs: list[str] = field(default_factory=list)
    checkpoint_dir: str = "checkpoints"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pair_retries: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size < 2 * self.loss_config.patch_size:
            raise ValueError(
                f"crop_size {self.crop_size} must be >= 2 * patch_size ({2 * self.loss_config.patch_size})"
            )
        if self.burst_spec.frame_count != self.model_config.frame_count:
            raise ValueError(
                f"burst_spec.frame_count={self.burst_spec.frame_count} differs from "
                f"model_config.frame_count={self.model_config.frame_count}"
            )
        self.burst_spec.crop_size = self.crop_size

    def echo(self) -> dict:
        """Config fields that define the trajectory (paths excluded)."""
        d = asdict(self)
        d.pop("corpus_dirs")
        d.pop("checkpoint_dir")
        return d


@dataclass
class CorpusManifest:
    entries: list[tuple[str, int, int]]
    skipped: int
    content_hash: str

    @property
    def count(self) -> int:
        return len(self.entries)


def ingest_corpus(dirs, crop_size: int = 0) -> CorpusManifest:
    paths = []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(f"corpus directory not found: {d}")
        paths.extend(p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    paths = sorted(paths, key=lambda p: str(p))

    entries, skipped = [], 0
    digest = hashlib.sha256()
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ValueError(f"cannot decode corpus image {p}")
        h, w = img.shape[:2]
        if min(h, w) < crop_size:
            skipped += 1
            continue
        entries.append((str(p), w, h))
        digest.update(f"{p.name}\0{w}\0{h}\0".encode())
        digest.update(hashlib.sha256(p.read_bytes()).digest())
    if skipped:
        log.warning("skipped %d corpus images smaller than %d px", skipped, crop_size)
    if not entries:
        raise EmptyCorpusError("empty corpus: no decodable images of sufficient size")
    return CorpusManifest(entries=entries, skipped=skipped, content_hash=digest.hexdigest())


def required_source_size(spec: BurstSpec) -> int:
    """Smallest square source that always fits a burst pair for this spec."""
    jitter = spec.homography_jitter * spec.crop_size
    reach = spec.crop_size + 2 * (spec.max_translation + spec.inter_bound + 2 * jitter)
    return int(math.ceil(reach)) + 4


def load_corpus_images(manifest: CorpusManifest, spec: BurstSpec, channels: int) -> list[np.ndarray]:
    need = required_source_size(spec)
    images = []
    for path, w, h in manifest.entries:
        img = read_image(path, channels)
        if min(h, w) < need:
            f = need / min(h, w)
            img = cv2.resize(img, (int(math.ceil(w * f)), int(math.ceil(h * f))), interpolation=cv2.INTER_LINEAR)
            img = np.clip(img, 0.0, 1.0)
        images.append(img)
    return images


def _rng(seed: int, tag: int, *idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *idx])


def draw_pair(image, spec: BurstSpec, seed: int, step: int, slot: int, retries: int, loss_cfg: LossConfig):
    for attempt in range(retries):
        pair = make_burst_pair(image, spec, _rng(seed, _TAG_PAIR, step, slot, attempt))
        # need at least one fully overlapping patch and two flow-valid AP queries
        if _usable(pair.flow_ab.valid, loss_cfg.patch_size):
            return pair
    raise NoValidPatchError(f"step {step}: no usable burst pair after {retries} draws")


def _usable(valid: np.ndarray, m: int) -> bool:
    stride = max(1, m // 2)
    h, w = valid.shape
    full = any(valid[y:y + m, x:x + m].all() for y in range(0, h - m + 1, stride) for x in range(0, w - m + 1, stride))
    off = m // 2
    return full and valid[off::m, off::m].sum() >= 2


def make_optimizer(model: BurstNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas),
                             eps=cfg.eps, weight_decay=cfg.weight_decay)


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"optim.{idx}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    return tensors, sd["param_groups"]


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict, groups: list) -> None:
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


@dataclass
class TrainResult:
    model: BurstNet
    epoch_losses: list[float]
    checkpoints: list[Path]
    log_path: Path


def check_compatible(saved: ModelConfig, wanted: ModelConfig) -> None:
    for name in ("frame_count", "input_channels", "descriptor_dim", "backbone_widths", "dilation_schedule"):
        a, b = getattr(saved, name), getattr(wanted, name)
        if a != b:
            raise ConfigMismatchError(f"checkpoint {name}={a} but config {name}={b}")


def train(config: TrainConfig, resume_from: str | Path | None = None,
          manifest: CorpusManifest | None = None) -> TrainResult:
    torch.use_deterministic_algorithms(True)
    manifest = manifest or ingest_corpus(config.corpus_dirs, config.crop_size)
    spec = config.burst_spec
    images = load_corpus_images(manifest, spec, config.model_config.input_channels)
    n = len(images)
    bs = config.batch_size
    steps_per_epoch = math.ceil(n / bs)

    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "loss_log.jsonl"

    if resume_from is not None:
        model, manifest_ck, extra = load_checkpoint(resume_from)
        check_compatible(model.config, config.model_config)
        model.train()
        opt = make_optimizer(model, config)
        restore_optimizer(opt, extra, manifest_ck["meta"]["param_groups"])
        start_epoch = int(manifest_ck["meta"]["epoch"])
        epoch_losses = list(manifest_ck["meta"]["epoch_losses"])
        if model.step != start_epoch * steps_per_epoch:
            raise ConfigMismatchError(
                f"checkpoint step {model.step} does not match epoch {start_epoch} x {steps_per_epoch} steps"
            )
        mode = "a"
    else:
        model = init_model(config.model_config, config.model_config.weight_init_seed + config.seed)
        model.train()
        opt = make_optimizer(model, config)
        start_epoch, epoch_losses, mode = 0, [], "w"

    checkpoints = []
    with open(log_path, mode) as logf:
        for epoch in range(start_epoch, config.epochs):
            order = _rng(config.seed, _TAG_ORDER, epoch).permutation(n)
            step_losses = []
            for s in range(steps_per_epoch):
                step = epoch * steps_per_epoch + s
                idx = order[s * bs:(s + 1) * bs]
                pairs = [draw_pair(images[i], spec, config.seed, step, j, config.pair_retries, config.loss_config)
                         for j, i in enumerate(idx)]
                xa = torch.stack([burst_tensor(p.burst_a.frames) for p in pairs])
                xb = torch.stack([burst_tensor(p.burst_b.frames) for p in pairs])
                out = model(torch.cat([xa, xb]))
                k = len(pairs)
                out_a = type(out)(out.descriptors[:k], out.detection[:k], out.reliability[:k], out.c_feature[:k])
                out_b = type(out)(out.descriptors[k:], out.detection[k:], out.reliability[k:], out.c_feature[k:])
                loss, terms = total_loss(out_a, out_b, [p.flow_ab for p in pairs], config.loss_config)
                values = terms.as_dict()
                if not all(math.isfinite(v) for v in values.values()):
                    raise NonFiniteLossError(step, values)
                opt.zero_grad(set_to_none=False)
                loss.backward()
                opt.step()
                model.step = step + 1
                step_losses.append(values["L"])
                logf.write(json.dumps({"step": step, "epoch": epoch + 1, **values}) + "\n")
            logf.flush()
            epoch_losses.append(float(np.mean(step_losses)))
            log.info("epoch %d/%d mean loss %.4f", epoch + 1, config.epochs, epoch_losses[-1])
            opt_t, groups = optimizer_tensors(opt)
            path = ckpt_dir / f"epoch_{epoch + 1:03d}.ckpt"
            save_checkpoint(path, model, opt_t, meta={
                "epoch": epoch + 1,
                "steps_per_epoch": steps_per_epoch,
                "epoch_losses": epoch_losses,
                "param_groups": groups,
                "train_config": config.echo(),
                "corpus_hash": manifest.content_hash,
            })
            checkpoints.append(path)
    model.eval()
    return TrainResult(model=model, epoch_losses=epoch_losses, checkpoints=checkpoints, log_path=log_path)


def resume(checkpoint: str | Path, config: TrainConfig, manifest: CorpusManifest | None = None) -> TrainResult:
    """Continue training from an epoch checkpoint with the optimizer state restored."""
    return train(config, resume_from=checkpoint, manifest=manifest)
