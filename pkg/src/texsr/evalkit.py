"""PSNR/SSIM metrics, dataset evaluation and the local-scale noise ablation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from texsr.images import ImageBuffer
from texsr.networks import ModelBundle, decode, infer_maps
from texsr.vq import UseStats, count_indices, straight_through

Pair = tuple[ImageBuffer, ImageBuffer]  # (lr, hr)


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageBuffer) else np.asarray(x, dtype=np.float64)


def quantize_8bit(x: np.ndarray, peak: float = 1.0) -> np.ndarray:
    return np.round(np.clip(x / peak, 0.0, 1.0) * 255.0) / 255.0 * peak


def psnr(a, b, peak: float = 1.0, quantize: bool = True) -> float:
    """10 log10(peak^2 / MSE) in dB; ``math.inf`` when the images are identical."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if quantize:
        a, b = quantize_8bit(a, peak), quantize_8bit(b, peak)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(x, len(k), axis=0) @ k
    return sliding_window_view(rows, len(k), axis=1) @ k


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, sigma: float = 1.5,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian-window positions, averaged over channels."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}px SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    use: dict[str, UseStats] = field(default_factory=dict)
    positions: dict[str, int] = field(default_factory=dict)
    index_maps: dict[str, list[np.ndarray]] = field(default_factory=dict, repr=False)
    notes: list[str] = field(default_factory=lambda: ["LPIPS not computed (needs a pretrained perceptual network)"])

    @property
    def image_count(self) -> int:
        return len(self.psnr)

    @property
    def inf_count(self) -> int:
        return sum(1 for v in self.psnr if math.isinf(v))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        def num(v):
            return "inf" if math.isinf(v) else v

        return {
            "image_count": self.image_count,
            "mean_psnr": num(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "inf_psnr_count": self.inf_count,
            "psnr": [num(v) for v in self.psnr],
            "ssim": self.ssim,
            "codebook_use": {k: v.ratio_string for k, v in self.use.items()},
            "codebook_counts": {k: v.counts.tolist() for k, v in self.use.items()},
            "positions": self.positions,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'image':>6}  {'PSNR (dB)':>10}  {'SSIM':>7}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            lines.append(f"{i:>6}  {p:>10.3f}  {s:>7.4f}")
        lines.append(f"{'mean':>6}  {self.mean_psnr:>10.3f}  {self.mean_ssim:>7.4f}")
        for k, v in self.use.items():
            lines.append(f"codebook use ({k}): {v.ratio_string}")
        return "\n".join(lines)


def _check_dataset(dataset):
    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")


def _infer(bundle: ModelBundle, lr: ImageBuffer, noisy_local_seed: int | None = None):
    with torch.no_grad():
        maps = infer_maps(bundle, lr.to_tensor())
        if noisy_local_seed is not None:
            cb = bundle.hc["local"]
            q = maps["local"]
            g = torch.Generator().manual_seed(noisy_local_seed)
            idx = torch.randint(cb.size, q.indices.shape, generator=g)
            noisy = cb.entries[idx].permute(0, 3, 1, 2)
            maps["local"] = type(q)(pre_quant=q.pre_quant, quantized=noisy, indices=idx)
        sr = decode(bundle, {s: straight_through(m) for s, m in maps.items()}, "hr")
    return ImageBuffer.from_tensor(sr), maps


def evaluate(model: ModelBundle | Callable[[ImageBuffer], ImageBuffer], dataset: Sequence[Pair],
             sr_callback: Callable[[int, ImageBuffer], None] | None = None,
             _noisy_seed: int | None = None) -> MetricReport:
    """Super-resolve every LR image and score it against its HR partner.

    ``model`` may be a trained ModelBundle or any callable LR -> SR image
    (codebook usage is only reported for bundles).
    """
    _check_dataset(dataset)
    report = MetricReport([], [])
    is_bundle = isinstance(model, ModelBundle)
    indices = {"global": [], "local": []}
    for i, (lr, hr) in enumerate(dataset):
        if is_bundle:
            seed = None if _noisy_seed is None else _noisy_seed * 1_000_003 + i
            sr, maps = _infer(model, lr, seed)
            for scale in indices:
                indices[scale].append(maps[scale].indices.numpy().copy())
        else:
            sr = model(lr)
        if sr.shape != hr.shape:
            raise ValueError(f"SR output {sr.shape} does not match HR {hr.shape}")
        report.psnr.append(psnr(sr, hr))
        report.ssim.append(ssim(sr, hr))
        if sr_callback is not None:
            sr_callback(i, sr)
    if is_bundle:
        for scale, idx in indices.items():
            stats = count_indices(idx, model.hc[scale].size)
            report.use[scale] = stats
            report.positions[scale] = int(sum(a.size for a in idx))
            report.index_maps[scale] = idx
    return report


def local_noise_ablation(bundle: ModelBundle, dataset: Sequence[Pair], seed: int = 0) -> tuple[MetricReport, MetricReport]:
    """Evaluate normally and with local-scale codes replaced by uniformly random ones."""
    normal = evaluate(bundle, dataset)
    noisy = evaluate(bundle, dataset, _noisy_seed=seed)
    noisy.notes = noisy.notes + [f"local-scale indices replaced by uniform random codes (seed {seed})"]
    return normal, noisy
