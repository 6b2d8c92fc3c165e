"""Training losses: image reconstruction, hinge adversarial terms, the
codebook objective and the PTPM regularization, assembled into a LossReport."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from texsr.dtpm import dtpm_loss_terms, rep_consistency_loss
from texsr.ptpm import ptpm_reg_loss

TERMS = ("l1", "perceptual", "adversarial_g", "adversarial_d", "code", "rep_con", "rec_con", "ptpm", "total")


class LossError(FloatingPointError):
    """A loss term became NaN or infinite."""


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(default=0.25, ge=0)
    lambda_per: float = Field(default=1.0, ge=0)
    lambda_adv: float = Field(default=0.1, ge=0)
    lambda_contrastive: float = Field(default=0.5, ge=0)
    adv_warmup: int = Field(default=500, ge=0)
    use_perceptual: bool = True
    use_adversarial: bool = True
    use_rep_con: bool = True
    use_ptpm: bool = True


@contextlib.contextmanager
def frozen(module: nn.Module | None):
    """Temporarily stop parameter gradients while letting input gradients through."""
    if module is None:
        yield
        return
    saved = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), saved):
            p.requires_grad_(flag)


def perceptual_distance(phi_per, gt: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        target = phi_per(gt)
    with frozen(phi_per):
        pred = phi_per(recon)
    return sum(F.l1_loss(p, t) for p, t in zip(pred, target))


def reconstruction_terms(gt, recon, w: LossWeights, disc=None, phi_per=None) -> dict[str, torch.Tensor]:
    """Unweighted L1, perceptual and generator-hinge terms.

    The adversarial term is ``-mean(D(recon))`` and is present only when a
    discriminator is given; discriminator weights get no gradient from it.
    """
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch: gt {tuple(gt.shape)} vs recon {tuple(recon.shape)}")
    zero = recon.new_zeros(())
    terms = {"l1": F.l1_loss(recon, gt), "perceptual": zero, "adversarial_g": zero}
    if phi_per is not None and w.use_perceptual and w.lambda_per > 0:
        terms["perceptual"] = perceptual_distance(phi_per, gt, recon)
    if disc is not None and w.use_adversarial:
        with frozen(disc):
            terms["adversarial_g"] = -disc(recon).mean()
    return terms


def weigh_reconstruction(terms, w: LossWeights) -> torch.Tensor:
    return terms["l1"] + w.lambda_per * terms["perceptual"] + w.lambda_adv * terms["adversarial_g"]


def reconstruction_loss(gt, recon, w: LossWeights, disc=None, phi_per=None) -> torch.Tensor:
    return weigh_reconstruction(reconstruction_terms(gt, recon, w, disc, phi_per), w)


def discriminator_loss(disc, gt, recon) -> torch.Tensor:
    return F.relu(1.0 - disc(gt)).mean() + F.relu(1.0 + disc(recon.detach())).mean()


def codebook_objective(parts: dict[str, torch.Tensor], stage: int = 2) -> torch.Tensor:
    """Unweighted sum of the DTPM code loss, representation and reconstruction consistency."""
    required = ("code", "rep_con", "rec_con")
    missing = [k for k in required if parts.get(k) is None]
    if missing and stage == 2:
        raise ValueError(f"codebook objective is missing {missing}")
    return sum(parts[k] for k in required if parts.get(k) is not None)


@dataclass
class LossReport:
    terms: dict[str, float]
    components: dict[str, float] = field(default_factory=dict)
    total_tensor: torch.Tensor | None = None
    stage: int = 0

    @property
    def total(self) -> float:
        return self.terms["total"]

    def local_terms(self) -> list[str]:
        return [k for k in self.components if "local" in k]

    def recomputed_total(self, w: LossWeights) -> float:
        t = self.terms
        return t["code"] + t["rep_con"] + t["rec_con"] + (t["ptpm"] if w.use_ptpm else 0.0)


def _check(name, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise LossError(f"loss term {name!r} is not finite ({float(value)})")


def total_loss(parts: dict[str, torch.Tensor], w: LossWeights, components: dict[str, torch.Tensor] | None = None,
               extra_terms: dict[str, torch.Tensor] | None = None, stage: int = 2) -> LossReport:
    """Total = codebook objective + PTPM regularization (when enabled)."""
    for name, v in {**parts, **(components or {}), **(extra_terms or {})}.items():
        if v is not None:
            _check(name, v)
    total = codebook_objective(parts, stage)
    if w.use_ptpm and parts.get("ptpm") is not None:
        total = total + parts["ptpm"]
    _check("total", total)
    terms = {k: 0.0 for k in TERMS}
    for k, v in {**parts, **(extra_terms or {})}.items():
        if v is not None:
            terms[k] = float(v.detach())
    terms["total"] = float(total.detach())
    return LossReport(terms, {k: float(v.detach()) for k, v in (components or {}).items()}, total, stage)


def generator_losses(bundle, fwd, w: LossWeights, adversarial: bool = False) -> LossReport:
    """All generator-side losses for one forward_train result.

    LR-side reconstructions use L1 + perceptual only; HR-side (and stage-1
    temporary) reconstructions add the adversarial term when ``adversarial``.
    """
    comps: dict[str, torch.Tensor] = {}
    code_terms = dtpm_loss_terms(fwd.q_hr, fwd.q_lr, w.beta)
    comps.update(code_terms)
    code = sum(code_terms.values())

    rep = None
    if w.use_rep_con:
        for scale in ("global", "local"):
            comps[f"rep_con/{scale}"] = rep_consistency_loss(fwd.feats_hr, fwd.feats_lr, [scale])
        rep = comps["rep_con/global"] + comps["rep_con/local"]

    rec = l1 = per = adv = None
    for job, recon in zip(fwd.jobs, fwd.recons):
        disc = bundle.disc if adversarial and job.decoder != "lr" else None
        t = reconstruction_terms(job.target, recon, w, disc, bundle.perceptual)
        r = weigh_reconstruction(t, w)
        comps[f"rec/{job.name}"] = r
        rec = r if rec is None else rec + r
        l1 = t["l1"] if l1 is None else l1 + t["l1"]
        per = t["perceptual"] if per is None else per + t["perceptual"]
        adv = t["adversarial_g"] if adv is None else adv + t["adversarial_g"]

    ptpm = None
    if w.use_ptpm:
        scales = fwd.active_scales
        targets = bundle.priors.targets(fwd.i_hr, scales)
        for res, st in (("hr", fwd.st_hr), ("lr", fwd.st_lr)):
            for scale in scales:
                comps[f"ptpm/{res}/{scale}"] = ptpm_reg_loss(fwd.i_hr, st, bundle.priors, bundle.heads, [scale], targets)
        ptpm = sum(v for k, v in comps.items() if k.startswith("ptpm/"))

    parts = {"code": code, "rep_con": rep, "rec_con": rec, "ptpm": ptpm}
    if rep is None:
        parts["rep_con"] = code.new_zeros(())
    extra = {"l1": l1, "perceptual": per, "adversarial_g": adv}
    return total_loss(parts, w, comps, extra, fwd.stage)
