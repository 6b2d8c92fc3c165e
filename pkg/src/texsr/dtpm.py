"""Hierarchical (global x8 / local x4) quantization and cross-resolution losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from texsr.errors import ConfigError
from texsr.vq import Codebook, QuantizedMap, ShapeError, codebook_loss, quantize

SCALES = ("global", "local")
# downsampling factor of each scale's grid relative to the HR image
SCALE_FACTORS = {"global": 8, "local": 4}


class HierarchicalCodebooks(nn.Module):
    def __init__(self, size: int = 512, global_dim: int = 128, local_dim: int = 64, seed: int = 0):
        super().__init__()
        self.cbs = nn.ModuleDict({
            "global": Codebook(size, global_dim, "global", seed=seed),
            "local": Codebook(size, local_dim, "local", seed=seed + 1),
        })

    def __getitem__(self, scale: str) -> Codebook:
        return self.cbs[scale]

    @property
    def size(self) -> int:
        return self.cbs["global"].size


@dataclass
class MultiScaleFeatures:
    scales: dict[str, torch.Tensor]
    resolution: str

    def __post_init__(self):
        if self.resolution not in ("HR", "LR"):
            raise ValueError(f"resolution tag must be HR or LR, got {self.resolution!r}")
        g, l = self.scales["global"], self.scales["local"]
        if l.shape[-2] != 2 * g.shape[-2] or l.shape[-1] != 2 * g.shape[-1]:
            raise ShapeError(f"local grid {tuple(l.shape[-2:])} is not twice the global grid {tuple(g.shape[-2:])}")

    def __getitem__(self, scale: str) -> torch.Tensor:
        return self.scales[scale]


def _check_active(active_scales: Iterable[str]) -> frozenset:
    active = frozenset(active_scales)
    if not active:
        raise ConfigError("at least one scale must be active")
    unknown = active - set(SCALES)
    if unknown:
        raise ConfigError(f"unknown scales {sorted(unknown)}")
    return active


def dtpm_quantize(hc: HierarchicalCodebooks, ms: MultiScaleFeatures,
                  active_scales: Iterable[str] = SCALES) -> dict[str, QuantizedMap]:
    """Quantize each active scale independently; inactive scales pass through."""
    active = _check_active(active_scales)
    out = {}
    for scale in SCALES:
        feat = ms[scale]
        if scale in active:
            out[scale] = quantize(hc[scale], feat)
        else:
            out[scale] = QuantizedMap(pre_quant=feat, quantized=feat, indices=None)
    return out


def dtpm_loss(hr_maps: Mapping[str, QuantizedMap], lr_maps: Mapping[str, QuantizedMap],
              beta: float = 0.25) -> torch.Tensor:
    """Sum of codebook losses over every (resolution, quantized scale) pair."""
    if set(hr_maps) != set(lr_maps):
        raise ShapeError(f"scale sets differ: {sorted(hr_maps)} vs {sorted(lr_maps)}")
    total = None
    for scale in SCALES:
        if scale not in hr_maps:
            continue
        h, l = hr_maps[scale], lr_maps[scale]
        if h.passthrough != l.passthrough:
            raise ShapeError(f"scale {scale} quantized at one resolution only")
        if h.passthrough:
            continue
        if h.pre_quant.shape != l.pre_quant.shape:
            raise ShapeError(f"scale {scale}: HR map {tuple(h.pre_quant.shape)} vs LR map {tuple(l.pre_quant.shape)}")
        term = codebook_loss(h, beta) + codebook_loss(l, beta)
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("no quantized scale to take a codebook loss over")
    return total


def dtpm_loss_terms(hr_maps, lr_maps, beta: float = 0.25) -> dict[str, torch.Tensor]:
    """Per (resolution, scale) codebook losses, keyed like ``code/hr/global``."""
    terms = {}
    for res, maps in (("hr", hr_maps), ("lr", lr_maps)):
        for scale, qm in maps.items():
            if not qm.passthrough:
                terms[f"code/{res}/{scale}"] = codebook_loss(qm, beta)
    return terms


def rep_consistency_loss(hr_feats: MultiScaleFeatures, lr_feats: MultiScaleFeatures,
                         scales: Iterable[str] = SCALES) -> torch.Tensor:
    total = None
    for scale in scales:
        a, b = hr_feats[scale], lr_feats[scale]
        if a.shape != b.shape:
            raise ShapeError(f"scale {scale}: HR features {tuple(a.shape)} vs LR features {tuple(b.shape)}")
        term = F.mse_loss(a, b)
        total = term if total is None else total + term
    return total


@dataclass
class DecodeJob:
    decoder: str  # "hr" or "lr"
    source: str  # resolution the quantized maps came from
    maps: dict[str, torch.Tensor]
    target: torch.Tensor

    @property
    def name(self) -> str:
        return f"{self.decoder}_recon_{self.source}"


def rec_consistency_targets(hr_q: Mapping[str, torch.Tensor], lr_q: Mapping[str, torch.Tensor],
                            i_hr: torch.Tensor, i_lr: torch.Tensor) -> list[DecodeJob]:
    """The four cross-resolution decode jobs: each decoder reconstructs its own
    resolution from both the HR- and LR-derived quantized maps."""
    return [
        DecodeJob("lr", "lr", dict(lr_q), i_lr),
        DecodeJob("lr", "hr", dict(hr_q), i_lr),
        DecodeJob("hr", "lr", dict(lr_q), i_hr),
        DecodeJob("hr", "hr", dict(hr_q), i_hr),
    ]
