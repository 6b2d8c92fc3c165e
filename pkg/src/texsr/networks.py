"""Desk-scale encoders, decoders and discriminator, plus the train/infer wiring.

Grid contract for an HR input of size H x W: local features live on an
(H/4) x (W/4) grid, global features on (H/8) x (W/8). The LR encoder first
upsamples its input x4 (bicubic) so both encoders see the same grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from texsr.dtpm import (
    SCALES,
    ConfigError,
    DecodeJob,
    HierarchicalCodebooks,
    MultiScaleFeatures,
    dtpm_quantize,
    rec_consistency_targets,
)
from texsr.images import ImageBuffer
from texsr.ptpm import PriorHeads, PriorNet, PriorSet, freeze
from texsr.vq import QuantizedMap, straight_through

SR_FACTOR = 4


class StageError(RuntimeError):
    """Raised when a model is used before the training stage it needs."""


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_width: int = Field(default=16, gt=0)
    global_dim: int = Field(default=128, gt=0)
    local_dim: int = Field(default=64, gt=0)
    codebook_size: int = Field(default=512, gt=1)
    lr_extra_blocks: int = Field(default=4, ge=1)
    disc_width: int = Field(default=16, gt=0)
    prior_widths: tuple[int, int, int] = (16, 32, 64)
    global_prior_tap: str = "pool3"
    local_prior_tap: str = "pool2"


def _act():
    return nn.LeakyReLU(0.2)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), _act(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), _act(), ResBlock(cout))


def _up(cin, cout):
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, padding=1), _act())


class Encoder(nn.Module):
    """Image -> {local: x4 grid, global: x8 grid} features.

    Global features are computed from the local ones, so training the global
    path in stage 1 also shapes the local representation used in stage 2.
    """

    def __init__(self, cfg: NetConfig, extra_blocks: int = 0, upsample: int = 1):
        super().__init__()
        b = cfg.base_width
        self.upsample = upsample
        self.stem = nn.Sequential(nn.Conv2d(3, b, 3, padding=1), _act())
        self.down1 = _down(b, 2 * b)
        self.down2 = _down(2 * b, 2 * b)
        self.extra = nn.Sequential(*[ResBlock(2 * b) for _ in range(extra_blocks)])
        self.to_local = nn.Conv2d(2 * b, cfg.local_dim, 3, padding=1)
        self.down3 = _down(cfg.local_dim, 4 * b)
        self.to_global = nn.Conv2d(4 * b, cfg.global_dim, 3, padding=1)

    def forward(self, x):
        if self.upsample > 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bicubic", align_corners=False)
        local = self.to_local(self.extra(self.down2(self.down1(self.stem(x)))))
        return {"local": local, "global": self.to_global(self.down3(local))}


class Decoder(nn.Module):
    """Quantized maps -> image. ``kind`` selects the output resolution:

    ``hr``: 4x the local grid, ``lr``: the local grid, ``temp``: like ``hr``
    but reading only the global map.
    """

    def __init__(self, cfg: NetConfig, kind: str):
        super().__init__()
        if kind not in ("hr", "lr", "temp"):
            raise ValueError(kind)
        b = cfg.base_width
        self.kind = kind
        self.from_global = nn.Sequential(nn.Conv2d(cfg.global_dim, 2 * b, 3, padding=1), _act(), _up(2 * b, 2 * b))
        if kind == "temp":
            self.fuse = nn.Sequential(ResBlock(2 * b), ResBlock(2 * b))
        else:
            self.from_local = nn.Sequential(nn.Conv2d(cfg.local_dim, 2 * b, 3, padding=1), _act())
            self.fuse = nn.Sequential(nn.Conv2d(4 * b, 2 * b, 3, padding=1), _act(), ResBlock(2 * b), ResBlock(2 * b))
        if kind == "lr":
            self.tail = nn.Conv2d(2 * b, 3, 3, padding=1)
        else:
            self.tail = nn.Sequential(_up(2 * b, b), ResBlock(b), _up(b, b), nn.Conv2d(b, 3, 3, padding=1))

    def forward(self, maps: Mapping[str, torch.Tensor]):
        g = self.from_global(maps["global"])
        if self.kind == "temp":
            h = self.fuse(g)
        else:
            h = self.fuse(torch.cat([g, self.from_local(maps["local"])], dim=1))
        return torch.sigmoid(self.tail(h))


class UNetDiscriminator(nn.Module):
    """Three-level encoder-decoder with skip connections.

    The first convolution is strided, so the score map has one value per 2x2
    input patch. Every convolution is spectrally normalized to keep the
    adversarial gradient bounded on tiny training sets.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.c0 = nn.Sequential(nn.Conv2d(3, w, 4, stride=2, padding=1), _act())
        self.c1 = nn.Sequential(nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), _act())
        self.c2 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), _act())
        self.u1 = _up(4 * w, 2 * w)
        self.u0 = _up(4 * w, w)
        self.out = nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1), _act(), nn.Conv2d(w, 1, 3, padding=1))
        for m in list(self.modules()):
            if isinstance(m, nn.Conv2d):
                spectral_norm(m)

    def forward(self, x):
        x = x * 2.0 - 1.0
        h0 = self.c0(x)
        h1 = self.c1(h0)
        h2 = self.c2(h1)
        u1 = torch.cat([self.u1(h2), h1], dim=1)
        u0 = torch.cat([self.u0(u1), h0], dim=1)
        return self.out(u0)


class PerceptualNet(nn.Module):
    """Fixed random-weight conv feature extractor used for the perceptual term."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.layers = nn.ModuleList([
                nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.ReLU()),
            ])
        freeze(self)

    def forward(self, x):
        feats = []
        h = x - 0.5
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        return feats


# parameter groups that make up a bundle, in checkpoint order
GROUPS = ("e_hr", "e_lr", "codebook_global", "codebook_local", "d_temp", "d_hr", "d_lr",
          "disc", "heads", "prior_global", "prior_local", "perceptual")


class ModelBundle(nn.Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0,
                 prior_global: PriorNet | None = None, prior_local: PriorNet | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.e_hr = Encoder(cfg)
            self.e_lr = Encoder(cfg, extra_blocks=cfg.lr_extra_blocks, upsample=SR_FACTOR)
            self.hc = HierarchicalCodebooks(cfg.codebook_size, cfg.global_dim, cfg.local_dim, seed=seed)
            self.d_temp = Decoder(cfg, "temp")
            self.d_hr = Decoder(cfg, "hr")
            self.d_lr = Decoder(cfg, "lr")
            self.disc = UNetDiscriminator(cfg.disc_width)
            # fixed-seed random priors unless trained ones are supplied
            self.prior_global = freeze(prior_global or PriorNet(4, cfg.prior_widths))
            self.prior_local = freeze(prior_local or PriorNet(4, cfg.prior_widths))
            self.heads = PriorHeads(cfg.global_dim, cfg.local_dim,
                                    self.prior_global.tap_channels(cfg.global_prior_tap),
                                    self.prior_local.tap_channels(cfg.local_prior_tap))
        self.perceptual = PerceptualNet()
        self.register_buffer("trained_stage", torch.zeros((), dtype=torch.long))

    @property
    def priors(self) -> PriorSet:
        return PriorSet(self.prior_global, self.prior_local, self.cfg.global_prior_tap, self.cfg.local_prior_tap)

    def group(self, name: str) -> nn.Module:
        if name == "codebook_global":
            return self.hc["global"]
        if name == "codebook_local":
            return self.hc["local"]
        return getattr(self, name)

    def group_parameters(self, names) -> list[nn.Parameter]:
        return [p for n in names for p in self.group(n).parameters()]


def _as_tensor(img) -> tuple[torch.Tensor, bool]:
    if isinstance(img, ImageBuffer):
        return img.to_tensor(), True
    return img, False


def encode(bundle: ModelBundle, img, resolution_tag: str) -> MultiScaleFeatures:
    x, _ = _as_tensor(img)
    h, w = x.shape[-2:]
    if resolution_tag == "HR":
        if h % 8 or w % 8:
            raise ConfigError(f"HR input {h}x{w} is not a multiple of 8")
        feats = bundle.e_hr(x)
    elif resolution_tag == "LR":
        if h % 2 or w % 2:
            raise ConfigError(f"LR input {h}x{w} is not a multiple of 2")
        feats = bundle.e_lr(x)
    else:
        raise ValueError(f"unknown resolution tag {resolution_tag!r}")
    return MultiScaleFeatures(feats, resolution_tag)


def decode(bundle: ModelBundle, maps: Mapping[str, torch.Tensor], which: str) -> torch.Tensor:
    if which == "temp":
        if "local" in maps:
            raise ConfigError("the temporary decoder reads the global map only")
        return bundle.d_temp(maps)
    if which not in ("hr", "lr"):
        raise ValueError(f"unknown decoder {which!r}")
    missing = set(SCALES) - set(maps)
    if missing:
        raise ConfigError(f"decoder {which} needs maps for {sorted(missing)}")
    return (bundle.d_hr if which == "hr" else bundle.d_lr)(maps)


@dataclass
class TrainForward:
    stage: int
    i_hr: torch.Tensor
    i_lr: torch.Tensor
    feats_hr: MultiScaleFeatures
    feats_lr: MultiScaleFeatures
    q_hr: dict[str, QuantizedMap]
    q_lr: dict[str, QuantizedMap]
    st_hr: dict[str, torch.Tensor]
    st_lr: dict[str, torch.Tensor]
    jobs: list[DecodeJob] = field(default_factory=list)
    recons: list[torch.Tensor] = field(default_factory=list)

    @property
    def active_scales(self) -> tuple[str, ...]:
        return tuple(s for s in SCALES if not self.q_hr[s].passthrough)


def active_scales_for(stage: int) -> tuple[str, ...]:
    if stage == 1:
        return ("global",)
    if stage == 2:
        return SCALES
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def forward_train(bundle: ModelBundle, i_lr: torch.Tensor, i_hr: torch.Tensor, stage: int) -> TrainForward:
    if i_hr.shape[0] != i_lr.shape[0] or i_hr.shape[-2] != SR_FACTOR * i_lr.shape[-2] \
            or i_hr.shape[-1] != SR_FACTOR * i_lr.shape[-1]:
        raise ConfigError(f"unpaired inputs: LR {tuple(i_lr.shape)} vs HR {tuple(i_hr.shape)}")
    active = active_scales_for(stage)
    f_hr = encode(bundle, i_hr, "HR")
    f_lr = encode(bundle, i_lr, "LR")
    q_hr = dtpm_quantize(bundle.hc, f_hr, active)
    q_lr = dtpm_quantize(bundle.hc, f_lr, active)
    st_hr = {s: straight_through(q) for s, q in q_hr.items()}
    st_lr = {s: straight_through(q) for s, q in q_lr.items()}
    out = TrainForward(stage, i_hr, i_lr, f_hr, f_lr, q_hr, q_lr, st_hr, st_lr)
    if stage == 1:
        out.jobs = [DecodeJob("temp", "lr", {"global": st_lr["global"]}, i_hr),
                    DecodeJob("temp", "hr", {"global": st_hr["global"]}, i_hr)]
    else:
        out.jobs = rec_consistency_targets(st_hr, st_lr, i_hr, i_lr)
    out.recons = [decode(bundle, job.maps, job.decoder) for job in out.jobs]
    return out


def infer_maps(bundle: ModelBundle, i_lr: torch.Tensor) -> dict[str, QuantizedMap]:
    if int(bundle.trained_stage) < 2:
        raise StageError("the local codebook is untrained; run stage 2 before inference")
    return dtpm_quantize(bundle.hc, encode(bundle, i_lr, "LR"), SCALES)


def forward_infer(bundle: ModelBundle, i_lr):
    """SR output at 4x the LR size, using only the LR encoder, codebooks and HR decoder."""
    x, was_buffer = _as_tensor(i_lr)
    maps = infer_maps(bundle, x)
    sr = decode(bundle, {s: straight_through(q) for s, q in maps.items()}, "hr")
    return ImageBuffer.from_tensor(sr) if was_buffer else sr
