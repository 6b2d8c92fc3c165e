"""Patch-aware texture prior.

Covers patch harvesting from segmentation masks, CE + InfoNCE pre-training of
a small patch classifier, embedding export for manual label curation, label
remapping, and the regularization that ties quantized features to the frozen
prior activations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from texsr.errors import ConfigError
from texsr.images import ImageBuffer, read_rgb, write_rgb

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.85


@dataclass
class PatchRecord:
    patch: np.ndarray  # H_p x W_p x 3 in [0, 1]
    label: int
    source_id: str
    coverage: float = 1.0

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float64)
        if self.patch.ndim != 3 or self.patch.shape[2] != 3:
            raise ValueError(f"patch must be H x W x 3, got {self.patch.shape}")


def generate_patches(img: ImageBuffer, mask: np.ndarray, gamma: float = DEFAULT_GAMMA,
                     patch_size: int = 96, source_id: str = "img") -> list[PatchRecord]:
    """Tile ``img`` into non-overlapping patches and keep those whose dominant
    mask label covers strictly more than ``gamma`` of the patch.

    Partial tiles along the right and bottom edges are dropped.
    """
    if not 0.5 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0.5, 1) so the dominant label is unique, got {gamma}")
    mask = np.asarray(mask)
    if mask.shape != (img.height, img.width):
        raise ConfigError(f"mask shape {mask.shape} does not match image {img.height}x{img.width}")
    area = patch_size * patch_size
    out = []
    for r in range(img.height // patch_size):
        for c in range(img.width // patch_size):
            ys, xs = r * patch_size, c * patch_size
            m = mask[ys:ys + patch_size, xs:xs + patch_size]
            labels, counts = np.unique(m, return_counts=True)
            passing = counts / area > gamma
            if passing.sum() > 1:
                raise AssertionError("two labels exceed gamma > 0.5")
            if not passing.any():
                continue
            k = int(np.argmax(passing))
            out.append(PatchRecord(
                patch=img.pixels[ys:ys + patch_size, xs:xs + patch_size].copy(),
                label=int(labels[k]),
                source_id=source_id,
                coverage=float(counts[k] / area),
            ))
    return out


def sharpness(patch: np.ndarray) -> float:
    """Variance of the Laplacian of the luma channel."""
    import cv2

    gray = patch @ np.array([0.299, 0.587, 0.114])
    return float(cv2.Laplacian(gray, cv2.CV_64F).var())


# ---------------------------------------------------------------------------
# Prior network


class PriorNet(nn.Module):
    """Three conv blocks, each ending in a 2x max-pool, then GAP and a linear head.

    Taps ``pool1``..``pool3`` sit at 1/2, 1/4 and 1/8 of the input size.
    """

    def __init__(self, num_classes: int, widths: Sequence[int] = (16, 32, 64),
                 tau: float = 0.2, lam: float = 0.5):
        super().__init__()
        blocks = []
        cin = 3
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, w, 3, padding=1), nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
                nn.MaxPool2d(2),
            ))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(cin, num_classes)
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.tau = tau
        self.lam = lam

    def tap_channels(self, tap: str) -> int:
        return self.widths[int(tap[-1]) - 1]

    def taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        out = {}
        h = x - 0.5
        for i, blk in enumerate(self.blocks, 1):
            h = blk(h)
            out[f"pool{i}"] = h
        return out

    def tap(self, x: torch.Tensor, name: str) -> torch.Tensor:
        h = x - 0.5
        for i, blk in enumerate(self.blocks, 1):
            h = blk(h)
            if f"pool{i}" == name:
                return h
        raise KeyError(name)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = x - 0.5
        for blk in self.blocks:
            h = blk(h)
        return h.mean(dim=(2, 3))

    def forward(self, x):
        q = self.embed(x)
        return self.classifier(q), q

    def config(self) -> dict:
        return {"num_classes": self.num_classes, "widths": list(self.widths), "tau": self.tau, "lam": self.lam}


def save_prior(net: PriorNet, path) -> None:
    torch.save({"config": net.config(), "state": net.state_dict()}, path)


def load_prior(path) -> PriorNet:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    net = PriorNet(**blob["config"])
    net.load_state_dict(blob["state"])
    return net.eval()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# Losses


def pairwise_l2(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    d2 = (q[:, None, :] - q[None, :, :]).pow(2).sum(-1)
    return torch.sqrt(d2 + eps)


def sample_positives(labels: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """One same-label partner per anchor, -1 where the anchor has none."""
    n = len(labels)
    same = (labels[:, None] == labels[None, :]) & ~torch.eye(n, dtype=torch.bool)
    noise = torch.rand(n, n, generator=generator)
    scores = torch.where(same, noise, torch.full_like(noise, -1.0))
    pos = scores.argmax(dim=1)
    return torch.where(same.any(dim=1), pos, torch.full_like(pos, -1))


def info_nce(q: torch.Tensor, labels: torch.Tensor, tau: float = 0.2,
             positive_index: torch.Tensor | None = None,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """InfoNCE with similarity -||q_i - q_j|| / tau.

    Each anchor is scored against one same-label positive and every
    different-label batch member. Anchors without a positive are skipped.
    """
    if positive_index is None:
        positive_index = sample_positives(labels, generator)
    has_pos = positive_index >= 0
    neg_mask = labels[:, None] != labels[None, :]
    if not neg_mask.any():
        log.warning("info_nce: batch holds a single class; contrastive term is 0")
        return q.sum() * 0.0
    if not has_pos.any():
        return q.sum() * 0.0
    sim = -pairwise_l2(q) / tau
    anchors = has_pos.nonzero().flatten()
    pos = sim[anchors, positive_index[anchors]]
    neg = sim[anchors].masked_fill(~neg_mask[anchors], float("-inf"))
    logits = torch.cat([pos[:, None], neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def prior_loss(q: torch.Tensor, labels: torch.Tensor, logits: torch.Tensor, tau: float = 0.2,
               lam: float = 0.5, positive_index: torch.Tensor | None = None,
               generator: torch.Generator | None = None) -> torch.Tensor:
    ce = F.cross_entropy(logits, labels)
    if lam == 0:
        return ce
    return ce + lam * info_nce(q, labels, tau, positive_index, generator)


# ---------------------------------------------------------------------------
# Pre-training


class PretrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=5, gt=0)
    batch_size: int = Field(default=32, gt=1)
    lr: float = Field(default=1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.99)
    tau: float = Field(default=0.2, gt=0)
    lam: float = Field(default=0.5, ge=0)
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
    widths: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0


@dataclass
class PretrainResult:
    net: PriorNet
    val_accuracy: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    train_sources: list[str] = field(default_factory=list)
    val_sources: list[str] = field(default_factory=list)


def split_by_source(dataset: Sequence[PatchRecord], val_fraction: float, seed: int):
    sources = sorted({r.source_id for r in dataset})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_val = max(1, int(round(val_fraction * len(sources))))
    val_src = {sources[i] for i in order[:n_val]}
    train = [r for r in dataset if r.source_id not in val_src]
    val = [r for r in dataset if r.source_id in val_src]
    return train, val


def _batch(records: Sequence[PatchRecord]):
    x = torch.from_numpy(np.stack([r.patch for r in records]).transpose(0, 3, 1, 2).copy()).float()
    y = torch.tensor([r.label for r in records], dtype=torch.long)
    return x, y


@torch.no_grad()
def accuracy(net: PriorNet, records: Sequence[PatchRecord], batch_size: int = 256) -> float:
    net.eval()
    correct = 0
    for i in range(0, len(records), batch_size):
        x, y = _batch(records[i:i + batch_size])
        correct += int((net(x)[0].argmax(1) == y).sum())
    return correct / len(records)


def pretrain(dataset: Sequence[PatchRecord], config: PretrainConfig | None = None,
             num_classes: int | None = None) -> PretrainResult:
    """Train a PriorNet with CE + lambda * InfoNCE, splitting train/val by source id."""
    cfg = config or PretrainConfig()
    train, val = split_by_source(dataset, cfg.val_fraction, cfg.seed)
    if not train or not val:
        raise ValueError(f"empty split: {len(train)} train / {len(val)} val records")
    if num_classes is None:
        num_classes = max(r.label for r in dataset) + 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = PriorNet(num_classes, cfg.widths, cfg.tau, cfg.lam)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    g = torch.Generator().manual_seed(cfg.seed)
    result = PretrainResult(net, train_sources=sorted({r.source_id for r in train}),
                            val_sources=sorted({r.source_id for r in val}))
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(len(train), generator=g).tolist()
        for i in range(0, len(order), cfg.batch_size):
            recs = [train[j] for j in order[i:i + cfg.batch_size]]
            if len(recs) < 2:
                continue
            x, y = _batch(recs)
            logits, q = net(x)
            loss = prior_loss(q, y, logits, cfg.tau, cfg.lam, generator=g)
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.losses.append(float(loss.detach()))
        acc = accuracy(net, val)
        result.val_accuracy.append(acc)
        log.info("prior epoch %d: loss %.4f val acc %.4f", epoch + 1, result.losses[-1], acc)
    net.eval()
    return result


# ---------------------------------------------------------------------------
# Embedding export and label reorganization


@dataclass
class EmbeddingTable:
    source_ids: list[str]
    labels: np.ndarray
    q: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.labels)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_id", "label", "x", "y"] + [f"q{i}" for i in range(self.q.shape[1])])
            for sid, lab, pt, qv in zip(self.source_ids, self.labels, self.points, self.q):
                w.writerow([sid, int(lab), f"{pt[0]:.6g}", f"{pt[1]:.6g}"] + [f"{v:.6g}" for v in qv])


def project_2d(q: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    if method == "tsne" and len(q) > 5:
        from sklearn.manifold import TSNE

        perplexity = min(30.0, (len(q) - 1) / 3.0)
        return TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(q)
    if method not in ("tsne", "pca"):
        raise ValueError(f"unknown projection {method!r}")
    centered = q - q.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    pts = centered @ vt[:2].T
    if pts.shape[1] < 2:
        pts = np.pad(pts, ((0, 0), (0, 2 - pts.shape[1])))
    return pts


@torch.no_grad()
def embed_records(net: PriorNet, dataset: Sequence[PatchRecord], batch_size: int = 256) -> np.ndarray:
    net.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        x, _ = _batch(dataset[i:i + batch_size])
        out.append(net.embed(x).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, net.widths[-1]))


def export_embeddings(net: PriorNet, dataset: Sequence[PatchRecord], projection: str = "tsne",
                      seed: int = 0) -> EmbeddingTable:
    q = embed_records(net, dataset)
    return EmbeddingTable(
        source_ids=[r.source_id for r in dataset],
        labels=np.array([r.label for r in dataset]),
        q=q,
        points=project_2d(q, projection, seed),
    )


@dataclass
class LabelMap:
    original_to_reorganized: dict[int, int]

    def __post_init__(self):
        self.original_to_reorganized = {int(k): int(v) for k, v in self.original_to_reorganized.items()}
        values = set(self.original_to_reorganized.values())
        if values != set(range(len(values))):
            raise ConfigError(f"label map must be onto [0, {len(values)}), got targets {sorted(values)}")

    @property
    def class_count(self) -> int:
        return len(set(self.original_to_reorganized.values()))

    @classmethod
    def identity(cls, labels: Iterable[int]) -> "LabelMap":
        labels = sorted(set(int(x) for x in labels))
        if labels != list(range(len(labels))):
            return cls({lab: i for i, lab in enumerate(labels)})
        return cls({lab: lab for lab in labels})

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "LabelMap":
        """Each group of original labels becomes one new label, numbered in order."""
        return cls({int(lab): i for i, grp in enumerate(groups) for lab in grp})

    def to_json(self) -> str:
        return json.dumps({"class_count": self.class_count,
                           "mapping": {str(k): v for k, v in sorted(self.original_to_reorganized.items())}},
                          indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LabelMap":
        """Accepts the ``to_json`` layout or a bare ``{"old": new}`` object."""
        try:
            blob = json.loads(text)
            mapping = blob.get("mapping", blob)
            lm = cls({int(k): int(v) for k, v in mapping.items() if k != "class_count"})
        except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"malformed label map: {e}") from e
        if "class_count" in blob and blob["class_count"] != lm.class_count:
            raise ConfigError(f"class_count {blob['class_count']} disagrees with mapping ({lm.class_count})")
        return lm


def remap_labels(dataset: Sequence[PatchRecord], lm: LabelMap) -> list[PatchRecord]:
    missing = sorted({r.label for r in dataset} - set(lm.original_to_reorganized))
    if missing:
        raise ConfigError(f"label map does not cover labels {missing}")
    return [PatchRecord(r.patch, lm.original_to_reorganized[r.label], r.source_id, r.coverage) for r in dataset]


# ---------------------------------------------------------------------------
# Patch dataset storage: a directory of PNGs plus a tab-separated manifest

MANIFEST = "manifest.tsv"


def save_patch_dataset(records: Sequence[PatchRecord], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        for i, r in enumerate(records):
            name = f"patch_{i:06d}.png"
            write_rgb(directory / name, r.patch)
            w.writerow([name, r.label, f"{r.coverage:.6f}", r.source_id])
    return directory / MANIFEST


def load_patch_dataset(directory) -> list[PatchRecord]:
    directory = Path(directory)
    records = []
    with open(directory / MANIFEST, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            path, label, coverage, source_id = row
            records.append(PatchRecord(read_rgb(directory / path), int(label), source_id, float(coverage)))
    return records


# ---------------------------------------------------------------------------
# Texture-prior regularization


class PriorHeads(nn.Module):
    """Single 3x3 convolutions mapping codebook space to each prior space."""

    def __init__(self, global_dim: int, local_dim: int, global_prior_ch: int, local_prior_ch: int):
        super().__init__()
        self.heads = nn.ModuleDict({
            "global": nn.Conv2d(global_dim, global_prior_ch, 3, padding=1),
            "local": nn.Conv2d(local_dim, local_prior_ch, 3, padding=1),
        })

    def __getitem__(self, scale):
        return self.heads[scale]


@dataclass
class PriorSet:
    """Frozen prior networks with the tap used for each scale."""

    global_net: PriorNet
    local_net: PriorNet
    global_tap: str = "pool3"
    local_tap: str = "pool2"

    def targets(self, i_hr: torch.Tensor, scales: Iterable[str] = ("global", "local")) -> dict[str, torch.Tensor]:
        out = {}
        with torch.no_grad():
            if "global" in scales:
                out["global"] = self.global_net.tap(i_hr, self.global_tap)
            if "local" in scales:
                out["local"] = self.local_net.tap(i_hr, self.local_tap)
        return out


def ptpm_reg_loss(i_hr: torch.Tensor, quantized: Mapping[str, torch.Tensor], priors: PriorSet,
                  heads: PriorHeads, scales: Iterable[str] = ("global", "local"),
                  targets: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Mean squared distance between prior activations of ``i_hr`` and the
    head-projected quantized maps, summed over ``scales``."""
    scales = list(scales)
    if targets is None:
        targets = priors.targets(i_hr, scales)
    total = None
    for scale in scales:
        pred = heads[scale](quantized[scale])
        tgt = targets[scale].detach()
        if pred.shape != tgt.shape:
            raise ConfigError(f"{scale} head output {tuple(pred.shape)} does not match prior activation {tuple(tgt.shape)}")
        term = F.mse_loss(pred, tgt)
        total = term if total is None else total + term
    return total
