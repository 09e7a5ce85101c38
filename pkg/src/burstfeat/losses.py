"""Detection and reliability losses over burst pairs with ground-truth flow.

Detection: cosine similarity between overlapping M x M patches of the two
common-frame K maps (after aligning them through the flow) plus a local
peakiness term on each map.  Reliability: a histogram-binned, differentiable
average precision of descriptor ranking, weighted by the predicted R.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .burstsynth import FlowMap


@dataclass
class LossConfig:
    patch_size: int = 16
    ap_kappa: float = 0.5
    ap_bins: int = 20
    reliability_weight: float = 1.0
    sample_count: int = 1024
    positive_tolerance: float = 4.0

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError(f"patch_size must be >= 2, got {self.patch_size}")
        if not 0 < self.ap_kappa < 1:
            raise ValueError(f"ap_kappa must lie in (0, 1), got {self.ap_kappa}")
        if self.ap_bins < 2:
            raise ValueError(f"ap_bins must be >= 2, got {self.ap_bins}")
        if self.sample_count < 2:
            raise ValueError("sample_count must be >= 2")

    @property
    def stride(self) -> int:
        return max(1, self.patch_size // 2)


@dataclass
class LossTerms:
    total: torch.Tensor
    detection: torch.Tensor
    cosim: torch.Tensor
    peaky_a: torch.Tensor
    peaky_b: torch.Tensor
    reliability: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "L": self.total.item(), "L_det": self.detection.item(), "L_c": self.cosim.item(),
            "L_p_a": self.peaky_a.item(), "L_p_b": self.peaky_b.item(), "L_rel": self.reliability.item(),
        }


class NoValidPatchError(ValueError):
    pass


def _batched(k: torch.Tensor) -> torch.Tensor:
    return k[None] if k.dim() == 2 else k


def flow_tensors(flow, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """FlowMap, list of FlowMaps or (vectors, valid) -> ((B,H,W,2), (B,H,W) bool)."""
    if isinstance(flow, FlowMap):
        flow = [flow]
    if isinstance(flow, (list, tuple)) and flow and isinstance(flow[0], FlowMap):
        vec = torch.stack([torch.as_tensor(f.vectors) for f in flow])
        valid = torch.stack([torch.as_tensor(f.valid) for f in flow])
    else:
        vec, valid = flow
        vec, valid = torch.as_tensor(vec), torch.as_tensor(valid)
        if vec.dim() == 3:
            vec, valid = vec[None], valid[None]
    vec = vec.to(dtype=dtype, device=device)
    valid = valid.to(dtype=torch.bool, device=device) & torch.isfinite(vec).all(dim=-1)
    return torch.nan_to_num(vec), valid


def sample_at(maps: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (B,C,H,W) maps at pixel coords (B,...,2) -> (B,C,...)."""
    b, _, h, w = maps.shape
    shape = coords.shape[1:-1]
    xy = coords.reshape(b, 1, -1, 2)
    scale = torch.tensor([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)], dtype=coords.dtype, device=coords.device)
    grid = xy * scale - 1.0
    out = F.grid_sample(maps, grid.to(maps.dtype), mode="bilinear", padding_mode="border", align_corners=True)
    return out.reshape(b, maps.shape[1], *shape)


def warp_by_flow(k_a: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Resample (B,H,W) maps of frame a onto the pixel grid of frame b."""
    return sample_at(k_a[:, None], vectors)[:, 0]


def _patches(x: torch.Tensor, size: int, stride: int) -> torch.Tensor:
    """(B,H,W) -> (B, L, size*size) overlapping patches."""
    return F.unfold(x[:, None], kernel_size=size, stride=stride).transpose(1, 2)


def cosim_loss(k_a: torch.Tensor, k_b: torch.Tensor, flow, patch_size: int = 16) -> torch.Tensor:
    """1 - mean patch cosine similarity between K_b and K_a aligned onto b's grid."""
    k_a, k_b = _batched(k_a), _batched(k_b)
    vectors, valid = flow_tensors(flow, dtype=k_a.dtype, device=k_a.device)
    stride = max(1, patch_size // 2)
    warped = warp_by_flow(k_a, vectors)
    pa = _patches(warped, patch_size, stride)
    pb = _patches(k_b, patch_size, stride)
    pv = _patches(valid.to(k_a.dtype), patch_size, stride)
    keep = pv.min(dim=-1).values > 0.5
    if not keep.any():
        raise NoValidPatchError("no fully valid patch: the burst pair overlaps too little")
    cos = F.cosine_similarity(pa[keep], pb[keep], dim=-1, eps=1e-12)
    return 1.0 - cos.mean()


def peakiness_loss(k: torch.Tensor, patch_size: int = 16) -> torch.Tensor:
    """1 - mean over overlapping patches of (max - mean)."""
    patches = _patches(_batched(k), patch_size, max(1, patch_size // 2))
    # mean of (max - x) rather than max - mean: a constant patch gives exactly 0
    peak = (patches.max(dim=-1, keepdim=True).values - patches).mean(dim=-1)
    return 1.0 - peak.mean()


def detection_loss(out_a, out_b, flow, cfg: LossConfig) -> tuple[torch.Tensor, LossTerms]:
    lc = cosim_loss(out_a.detection, out_b.detection, flow, cfg.patch_size)
    lpa = peakiness_loss(out_a.detection, cfg.patch_size)
    lpb = peakiness_loss(out_b.detection, cfg.patch_size)
    ldet = lc + (lpa + lpb) / 2
    zero = torch.zeros((), dtype=ldet.dtype)
    return ldet, LossTerms(ldet, ldet, lc, lpa, lpb, zero)


def soft_average_precision(dist: torch.Tensor, labels: torch.Tensor, bins: int = 20) -> torch.Tensor:
    """Histogram-binned AP per query row.

    dist: (Q, C) distances; labels: (Q, C) in {0, 1}.  Bin centres span each
    row's own [min, max] distance range and every distance spreads unit mass
    over its two nearest centres with triangular weights.  Inside a bin the
    other items count half (random tie order), the item itself fully.
    """
    lo = dist.min(dim=-1, keepdim=True).values
    hi = dist.max(dim=-1, keepdim=True).values
    delta = ((hi - lo) / (bins - 1)).clamp(min=1e-8)
    centers = lo + torch.arange(bins, dtype=dist.dtype, device=dist.device)[None, :] * delta
    weights = (1.0 - (dist[:, None, :] - centers[:, :, None]).abs() / delta[:, :, None]).clamp(min=0.0)
    labels = labels.to(dist.dtype)
    hist = weights.sum(dim=-1)
    hist_pos = (weights * labels[:, None, :]).sum(dim=-1)
    prec = (hist_pos.cumsum(dim=-1) - hist_pos / 2 + 0.5) / (hist.cumsum(dim=-1) - hist / 2 + 0.5)
    rec = hist_pos / labels.sum(dim=-1, keepdim=True).clamp(min=1e-16)
    return (prec * rec).sum(dim=-1)


def grid_queries(valid: torch.Tensor, stride: int, cap: int) -> list[torch.Tensor]:
    """Per batch item, (Q, 2) integer (x, y) grid points with valid flow."""
    b, h, w = valid.shape
    off = stride // 2
    ys, xs = torch.meshgrid(torch.arange(off, h, stride), torch.arange(off, w, stride), indexing="ij")
    pts = torch.stack([xs.flatten(), ys.flatten()], dim=-1)
    out = []
    for i in range(b):
        sel = pts[valid[i, pts[:, 1], pts[:, 0]]]
        if len(sel) > cap:
            sel = sel[torch.linspace(0, len(sel) - 1, cap).round().long()]
        out.append(sel)
    return out


def ap_reliability_loss(f_a: torch.Tensor, f_b: torch.Tensor, r_a: torch.Tensor, flow,
                        cfg: LossConfig) -> torch.Tensor:
    """Mean over queries of 1 - [AP * R + kappa * (1 - R)].

    Candidates are descriptors of frame b on a stride-M grid of valid flow;
    each query is frame a's descriptor (and reliability) at the flow target of
    one candidate.  Positives are candidates whose flow target lies within
    ``positive_tolerance`` pixels of the query; every other candidate in the
    batch is a negative.
    """
    if f_a.dim() == 3:
        f_a, f_b, r_a = f_a[None], f_b[None], r_a[None]
    vectors, valid = flow_tensors(flow, dtype=f_a.dtype, device=f_a.device)
    b = f_a.shape[0]
    per_item = max(1, -(-cfg.sample_count // b))
    pts = grid_queries(valid, cfg.patch_size, per_item)

    queries, rels, cands, targets, owner = [], [], [], [], []
    for i, p in enumerate(pts):
        if len(p) == 0:
            continue
        tgt = vectors[i, p[:, 1], p[:, 0]]
        queries.append(sample_at(f_a[i:i + 1], tgt[None])[0].T)
        rels.append(sample_at(r_a[i:i + 1, None], tgt[None])[0, 0])
        cands.append(f_b[i, :, p[:, 1], p[:, 0]].T)
        targets.append(tgt)
        owner.append(torch.full((len(p),), i))
    if sum(len(q) for q in queries) < 2:
        raise ValueError("fewer than 2 valid queries for the AP loss")
    q = F.normalize(torch.cat(queries), dim=-1)
    c = torch.cat(cands)
    rel = torch.cat(rels)
    tgt = torch.cat(targets)
    own = torch.cat(owner)

    dist = torch.sqrt((2.0 - 2.0 * q @ c.T).clamp(min=1e-12))
    near = torch.cdist(tgt, tgt) <= cfg.positive_tolerance
    labels = near & (own[:, None] == own[None, :])
    ap = soft_average_precision(dist, labels, cfg.ap_bins)
    return (1.0 - (ap * rel + cfg.ap_kappa * (1.0 - rel))).mean()


def total_loss(out_a, out_b, flow, cfg: LossConfig) -> tuple[torch.Tensor, LossTerms]:
    ldet, terms = detection_loss(out_a, out_b, flow, cfg)
    lrel = ap_reliability_loss(out_a.descriptors, out_b.descriptors, out_a.reliability, flow, cfg)
    total = ldet + cfg.reliability_weight * lrel
    return total, LossTerms(total, ldet, terms.cosim, terms.peaky_a, terms.peaky_b, lrel)
