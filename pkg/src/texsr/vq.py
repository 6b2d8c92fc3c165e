"""Single-scale vector quantization.

Feature maps are NCHW tensors. A codebook holds N codes of dimension C; each
spatial position of a map is replaced by its nearest code under L2 distance,
with ties going to the lowest code index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class Codebook(nn.Module):
    """Learnable N x C code matrix."""

    def __init__(self, size: int = 512, dim: int = 64, scale_tag: str = "global", seed: int = 0):
        super().__init__()
        if size <= 0 or dim <= 0:
            raise ValueError("codebook size and dim must be positive")
        if scale_tag not in ("global", "local"):
            raise ValueError(f"unknown scale tag {scale_tag!r}")
        self.scale_tag = scale_tag
        g = torch.Generator().manual_seed(seed)
        entries = torch.randn(size, dim, generator=g) / math.sqrt(dim)
        if len(torch.unique(entries, dim=0)) != size:
            raise RuntimeError("duplicate codebook entries at initialization")
        self.entries = nn.Parameter(entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def init_sigma(self) -> float:
        return 1.0 / math.sqrt(self.dim)

    def dump_text(self) -> str:
        """Entries as a comma-separated text matrix, one code per line."""
        rows = self.entries.detach().cpu().double().numpy()
        return "\n".join(",".join(f"{v:.9g}" for v in r) for r in rows) + "\n"


@dataclass
class QuantizedMap:
    """Pre-quantization features, their quantized version and code indices.

    ``pre_quant`` and ``quantized`` are B x C x H x W, ``indices`` B x H x W.
    For a scale that is not quantized (pass-through) ``indices`` is None and
    ``quantized`` is ``pre_quant`` itself.
    """

    pre_quant: torch.Tensor
    quantized: torch.Tensor
    indices: torch.Tensor | None

    @property
    def passthrough(self) -> bool:
        return self.indices is None

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.pre_quant.shape[-2:])


def nearest_indices(entries: torch.Tensor, flat: torch.Tensor) -> torch.Tensor:
    """Index of the nearest code for every row of ``flat`` (M x C).

    Distances are first computed in expanded form |f|^2 - 2 f.z + |z|^2. Rows
    whose runner-up lies within rounding error of the minimum are re-scored
    with direct float64 differences. torch.argmin returns the first minimal
    index, which gives the lowest-index tie-break.
    """
    with torch.no_grad():
        f2 = (flat * flat).sum(1, keepdim=True)
        z2 = (entries * entries).sum(1)[None, :]
        d = f2 - 2.0 * flat @ entries.t() + z2
        idx = torch.argmin(d, dim=1)
        dmin = d.gather(1, idx[:, None])
        tol = 1e-5 * (f2 + z2.max()) + 1e-12
        ambiguous = ((d <= dmin + tol).sum(1) > 1).nonzero().flatten()
        if len(ambiguous):
            sub = flat[ambiguous].double()
            exact = ((sub[:, None, :] - entries.double()[None, :, :]) ** 2).sum(-1)
            idx[ambiguous] = torch.argmin(exact, dim=1)
        return idx


def quantize(cb: Codebook, feat: torch.Tensor) -> QuantizedMap:
    if feat.dim() != 4:
        raise ShapeError(f"expected a B x C x H x W feature map, got {tuple(feat.shape)}")
    b, c, h, w = feat.shape
    if c != cb.dim:
        raise ShapeError(f"feature dim {c} does not match codebook dim {cb.dim}")
    flat = feat.permute(0, 2, 3, 1).reshape(-1, c)
    idx = nearest_indices(cb.entries.detach().to(flat.dtype), flat.detach())
    q = cb.entries[idx].to(feat.dtype).reshape(b, h, w, c).permute(0, 3, 1, 2)
    return QuantizedMap(pre_quant=feat, quantized=q, indices=idx.reshape(b, h, w))


def codebook_loss(qm: QuantizedMap, beta: float = 0.25) -> torch.Tensor:
    """Codebook term plus beta-weighted commitment term, both mean squared L2.

    The first term moves codes toward (detached) features; the commitment term
    moves features toward (detached) codes.
    """
    if qm.quantized.shape != qm.pre_quant.shape:
        raise ShapeError("quantized and pre-quantization maps differ in shape")
    codebook_term = F.mse_loss(qm.quantized, qm.pre_quant.detach())
    commitment = F.mse_loss(qm.quantized.detach(), qm.pre_quant)
    return codebook_term + beta * commitment


def straight_through(qm: QuantizedMap) -> torch.Tensor:
    """Forward value of the quantized map with an identity gradient to pre_quant."""
    if qm.passthrough:
        return qm.pre_quant
    return qm.pre_quant + (qm.quantized - qm.pre_quant).detach()


@dataclass
class UseStats:
    counts: np.ndarray

    @property
    def size(self) -> int:
        return len(self.counts)

    @property
    def used(self) -> int:
        return int(np.count_nonzero(self.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def ratio_string(self) -> str:
        return f"{self.used} / {self.size}"

    @property
    def ratio(self) -> float:
        return self.used / self.size

    def __add__(self, other: "UseStats") -> "UseStats":
        return UseStats(self.counts + other.counts)

    def to_dict(self) -> dict:
        return {"used": self.used, "size": self.size, "ratio": self.ratio_string,
                "total_positions": self.total, "counts": self.counts.tolist()}


def count_indices(indices: Sequence, size: int) -> UseStats:
    counts = np.zeros(size, dtype=np.int64)
    for idx in indices:
        arr = idx.detach().cpu().numpy() if isinstance(idx, torch.Tensor) else np.asarray(idx)
        counts += np.bincount(arr.ravel().astype(np.int64), minlength=size)[:size]
    return UseStats(counts)


def utilization(maps: Sequence[QuantizedMap], cb: Codebook) -> UseStats:
    for m in maps:
        if m.passthrough:
            raise ValueError("cannot count usage of a pass-through map")
    return count_indices([m.indices for m in maps], cb.size)


@torch.no_grad()
def revive_dead_codes(cb: Codebook, stats: UseStats, feat_pool: torch.Tensor, rng_seed: int,
                      noise_scale: float = 0.01) -> int:
    """Re-seed unused codes from ``feat_pool`` (M x C) plus small Gaussian noise.

    Noise has standard deviation ``noise_scale`` times the init sigma. Returns
    the number of revived codes; the codebook is updated in place.
    """
    dead = np.flatnonzero(stats.counts == 0)
    if len(dead) == 0:
        return 0
    if feat_pool is None or len(feat_pool) == 0:
        log.warning("revive_dead_codes: empty feature pool, %d dead codes left as is", len(dead))
        return 0
    if feat_pool.shape[1] != cb.dim:
        raise ShapeError(f"pool dim {feat_pool.shape[1]} does not match codebook dim {cb.dim}")
    g = torch.Generator().manual_seed(int(rng_seed))
    pick = torch.randint(len(feat_pool), (len(dead),), generator=g)
    eps = noise_scale * cb.init_sigma
    noise = torch.randn(len(dead), cb.dim, generator=g) * eps
    new = feat_pool[pick].to(cb.entries.dtype) + noise
    cb.entries.data[torch.as_tensor(dead)] = new
    return len(dead)
