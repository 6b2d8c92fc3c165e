"""Seeded blind-degradation chain and LR/HR patch confusion statistics.

The chain is fixed to blur -> downscale -> noise -> JPEG. Every random
parameter is drawn from a generator seeded by ``(cfg.seed, stream)`` so the
same image and config always give the same LR output, and corpora built in
parallel match corpora built serially.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from texsr.images import ImageBuffer

_INTERP = {
    "bicubic": cv2.INTER_CUBIC,
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
}


class DegradationError(ValueError):
    pass


class AnalysisError(ValueError):
    pass


class DegradationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    blur_sigma_range: tuple[float, float] = (0.2, 1.5)
    downscale_factor: Literal[1, 2, 4] = 4
    resize_kernel: Literal["bicubic", "bilinear", "nearest"] = "bicubic"
    noise_sigma_range: tuple[float, float] = (0.0, 5.0)
    jpeg_quality_range: tuple[int, int] = (60, 95)
    second_order: bool = False
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("blur_sigma_range", "noise_sigma_range")
    @classmethod
    def _nonneg(cls, v):
        if v[0] < 0:
            raise ValueError("range bounds must be >= 0")
        return v

    @field_validator("jpeg_quality_range")
    @classmethod
    def _quality(cls, v):
        if not (1 <= v[0] <= 100 and 1 <= v[1] <= 100):
            raise ValueError("JPEG quality bounds must lie in [1, 100]")
        return v

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("blur_sigma_range", "noise_sigma_range", "jpeg_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        return self

    @classmethod
    def identity(cls, seed: int = 0) -> "DegradationConfig":
        return cls(blur_sigma_range=(0, 0), downscale_factor=1, noise_sigma_range=(0, 0),
                   jpeg_quality_range=(100, 100), seed=seed)

    @classmethod
    def light(cls, seed: int = 0, factor: int = 4) -> "DegradationConfig":
        return cls(blur_sigma_range=(0.0, 0.5), downscale_factor=factor, noise_sigma_range=(0, 2),
                   jpeg_quality_range=(90, 100), seed=seed)

    @classmethod
    def heavy(cls, seed: int = 0, factor: int = 4) -> "DegradationConfig":
        return cls(blur_sigma_range=(1.0, 3.0), downscale_factor=factor, noise_sigma_range=(10, 30),
                   jpeg_quality_range=(30, 60), seed=seed)


def _check_finite(x: np.ndarray, stage: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DegradationError(f"non-finite values after {stage}")
    return np.clip(x, 0.0, 1.0)


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3.0 * sigma)))
    k = 2 * radius + 1
    return cv2.GaussianBlur(x, (k, k), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


def resize(x: np.ndarray, height: int, width: int, kernel: str = "bicubic") -> np.ndarray:
    if x.shape[:2] == (height, width):
        return x
    return cv2.resize(x, (width, height), interpolation=_INTERP[kernel])


def jpeg_roundtrip(x: np.ndarray, quality: int) -> np.ndarray:
    if quality >= 100:
        # quality 100 is treated as "no compression" so identity chains stay bit-exact
        return x
    u8 = np.round(np.clip(x, 0, 1) * 255.0).astype(np.uint8)
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise DegradationError("JPEG encoding failed")
    dec = cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)
    return dec.astype(np.float64) / 255.0


def _sample_pass(rng: np.random.Generator, blur, noise, quality):
    # Draw all three parameters unconditionally so the stream layout never depends on skips.
    sigma = rng.uniform(blur[0], blur[1]) if blur[1] > blur[0] else float(blur[0])
    noise_sigma = rng.uniform(noise[0], noise[1]) if noise[1] > noise[0] else float(noise[0])
    q = int(rng.integers(quality[0], quality[1] + 1))
    return sigma, noise_sigma, q


def _apply_noise(x, noise_sigma, rng):
    n = rng.standard_normal(x.shape)
    if noise_sigma <= 0:
        return x
    return x + n * (noise_sigma / 255.0)


def degrade(hr: ImageBuffer, cfg: DegradationConfig, stream: int | tuple[int, ...] = 0) -> ImageBuffer:
    """Degrade ``hr`` into an LR image of size (H/s) x (W/s).

    ``stream`` selects an independent random stream under the same seed
    (e.g. the image index within a corpus, or a (stage, step, sample) tuple).
    """
    s = cfg.downscale_factor
    if hr.height % s or hr.width % s:
        raise DegradationError(f"image size {hr.height}x{hr.width} not divisible by factor {s}")
    stream = (stream,) if isinstance(stream, int) else tuple(stream)
    rng = np.random.default_rng([int(cfg.seed), *(int(v) for v in stream)])

    x = hr.pixels.copy()
    sigma, noise_sigma, q = _sample_pass(rng, cfg.blur_sigma_range, cfg.noise_sigma_range, cfg.jpeg_quality_range)
    x = _check_finite(gaussian_blur(x, sigma), "blur")
    x = _check_finite(resize(x, hr.height // s, hr.width // s, cfg.resize_kernel), "downscale")
    x = _check_finite(_apply_noise(x, noise_sigma, rng), "noise")
    x = _check_finite(jpeg_roundtrip(x, q), "compression")

    if cfg.second_order:
        blur2 = tuple(v / 2 for v in cfg.blur_sigma_range)
        noise2 = tuple(v / 2 for v in cfg.noise_sigma_range)
        # halving the distortion means moving quality halfway toward 100
        q_lo, q_hi = cfg.jpeg_quality_range
        quality2 = (100 - (100 - q_lo) // 2, 100 - (100 - q_hi) // 2)
        sigma, noise_sigma, q = _sample_pass(rng, blur2, noise2, quality2)
        x = _check_finite(gaussian_blur(x, sigma), "blur (2nd order)")
        x = _check_finite(_apply_noise(x, noise_sigma, rng), "noise (2nd order)")
        x = _check_finite(jpeg_roundtrip(x, q), "compression (2nd order)")

    return ImageBuffer(x)


def degrade_corpus(hr_set: Sequence[ImageBuffer], cfg: DegradationConfig) -> list[ImageBuffer]:
    return [degrade(hr, cfg, stream=i) for i, hr in enumerate(hr_set)]


def upsample_to(lr: ImageBuffer, height: int, width: int, kernel: str = "bicubic") -> ImageBuffer:
    return ImageBuffer(np.clip(resize(lr.pixels, height, width, kernel), 0.0, 1.0))


def extract_grid_patches(img: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch grid in row-major order, shape (n, patch, patch, C)."""
    h, w, c = img.shape
    if h % patch or w % patch:
        raise AnalysisError(f"patch size {patch} does not divide image size {h}x{w}")
    g = img.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return g.reshape(-1, patch, patch, c)


def pairwise_mse(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """MSE between every row of ``a`` and every row of ``b`` (flattened patches)."""
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), chunk):
        d = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.mean(d * d, axis=-1)
    return out


@dataclass
class ConfusionStats:
    patch_size: int
    patch_count: int
    hr_hr_hist: list[int]
    lr_lr_hist: list[int]
    hist_edges: list[float]
    hr_hr_mse_var: float
    lr_lr_mse_var: float
    own_hr_ranks: list[int]
    own_hr_rank_histogram: list[int]
    nearest_hr_selection_counts: list[int]
    mismatch_rate: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion_analysis(hr_set: Sequence[ImageBuffer], cfg: DegradationConfig, patch: int,
                       bins: int = 50) -> ConfusionStats:
    """Rank every HR patch by MSE against each bicubically re-upsampled LR patch.

    The rank of a patch's own HR counterpart is ``1 + #{strictly closer HR
    patches}``, so exact ties share the best rank. The nearest-HR selection
    breaks ties toward the lower flat patch index.
    """
    hr_patches, lr_patches = [], []
    for i, hr in enumerate(hr_set):
        if hr.height % patch or hr.width % patch:
            raise AnalysisError(f"patch size {patch} does not divide image {i} ({hr.height}x{hr.width})")
        lr = degrade(hr, cfg, stream=i)
        up = upsample_to(lr, hr.height, hr.width, cfg.resize_kernel)
        hr_patches.append(extract_grid_patches(hr.pixels, patch))
        lr_patches.append(extract_grid_patches(up.pixels, patch))
    if not hr_patches:
        raise AnalysisError("need at least 2 patches, got 0")
    hr_p = np.concatenate(hr_patches)
    lr_p = np.concatenate(lr_patches)
    n = len(hr_p)
    if n < 2:
        raise AnalysisError(f"need at least 2 patches, got {n}")

    cross = pairwise_mse(lr_p, hr_p)
    own = np.diag(cross)
    ranks = 1 + np.sum(cross < own[:, None], axis=1)
    nearest = np.argmin(cross, axis=1)

    iu = np.triu_indices(n, k=1)
    hh = pairwise_mse(hr_p, hr_p)[iu]
    ll = pairwise_mse(lr_p, lr_p)[iu]
    hi = max(float(hh.max()), float(ll.max()), 1e-12)
    edges = np.linspace(0.0, hi, bins + 1)

    return ConfusionStats(
        patch_size=patch,
        patch_count=n,
        hr_hr_hist=np.histogram(hh, edges)[0].tolist(),
        lr_lr_hist=np.histogram(ll, edges)[0].tolist(),
        hist_edges=edges.tolist(),
        hr_hr_mse_var=float(np.var(hh)),
        lr_lr_mse_var=float(np.var(ll)),
        own_hr_ranks=ranks.astype(int).tolist(),
        own_hr_rank_histogram=np.bincount(ranks, minlength=n + 1)[1:].tolist(),
        nearest_hr_selection_counts=np.bincount(nearest, minlength=n).tolist(),
        mismatch_rate=float(np.mean(ranks > 1)),
    )
