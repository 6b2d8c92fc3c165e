"""Two-stage deep-to-shallow training, checkpointing and reproducibility.

Stage 1 trains both encoders, the global codebook and the temporary decoder.
Stage 2 freezes those, then trains the local codebook, both multi-scale
decoders, the prior heads and (after warm-up) the discriminator. Frozen groups
are removed from the optimizer and have ``requires_grad`` cleared; their
content digests are recorded in every checkpoint so freezing can be audited.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import pickle
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from texsr.degradation import DegradationConfig, degrade
from texsr.images import ImageBuffer, stack
from texsr.networks import GROUPS, ModelBundle, NetConfig, forward_train
from texsr.objectives import LossError, LossReport, LossWeights, discriminator_loss, generator_losses
from texsr.ptpm import PriorNet
from texsr.vq import UseStats, count_indices, revive_dead_codes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

STAGE_GROUPS = {
    1: ("e_hr", "e_lr", "codebook_global", "d_temp", "heads"),
    2: ("codebook_local", "d_hr", "d_lr", "heads"),
}
# groups that must stay bit-identical through stage 2
STAGE1_FROZEN = ("e_hr", "e_lr", "codebook_global")


class CheckpointError(RuntimeError):
    pass


class TrainingHalted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: int = Field(default=1, ge=1, le=2)
    stage1_steps: int = Field(default=1500, gt=0)
    stage2_steps: int = Field(default=1500, gt=0)
    batch_size: int = Field(default=8, gt=0)
    hr_patch: int = Field(default=64, gt=0)
    lr: float = Field(default=1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.99)
    seed: int = 0
    weights: LossWeights = Field(default_factory=LossWeights)
    degradation: DegradationConfig = Field(default_factory=DegradationConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    disc_stage1: bool = False
    disc_stage2: bool = True
    revive_every: int = Field(default=100, ge=0)
    revive_noise: float = Field(default=0.01, ge=0)
    checkpoint_every: int = Field(default=0, ge=0)
    log_every: int = Field(default=50, gt=0)

    @field_validator("hr_patch")
    @classmethod
    def _patch_multiple_of_8(cls, v):
        if v % 8:
            raise ValueError("hr_patch must be divisible by 8")
        return v

    def steps_for(self, stage: int) -> int:
        return self.stage1_steps if stage == 1 else self.stage2_steps

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoints


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def group_digests(bundle: ModelBundle) -> dict[str, str]:
    return {g: tensor_digest(bundle.group(g).state_dict()) for g in GROUPS}


@dataclass
class Checkpoint:
    stage: int
    step: int
    complete: bool
    model_state: dict[str, torch.Tensor]
    frozen: dict[str, bool]
    config: dict
    digests: dict[str, str]
    prior_configs: dict[str, dict]
    optimizer_state: dict | None = None
    disc_optimizer_state: dict | None = None
    usage_counts: torch.Tensor | None = None
    rng_state: torch.Tensor | None = None
    history: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return TrainConfig.model_validate(self.config).digest()

    def manifest(self) -> dict:
        return {
            "version": self.version, "stage": self.stage, "step": self.step, "complete": self.complete,
            "frozen": self.frozen, "config": self.config, "config_hash": self.config_hash,
            "digests": self.digests, "prior_configs": self.prior_configs,
        }


def make_checkpoint(bundle, cfg: TrainConfig, stage, step, complete, opt=None, d_opt=None,
                    usage=None, history=None) -> Checkpoint:
    trainable = set(STAGE_GROUPS[stage])
    if (stage == 1 and cfg.disc_stage1) or (stage == 2 and cfg.disc_stage2):
        trainable.add("disc")
    return Checkpoint(
        stage=stage, step=step, complete=complete,
        model_state={k: v.detach().clone() for k, v in bundle.state_dict().items()},
        frozen={g: g not in trainable for g in GROUPS},
        config=json.loads(cfg.model_dump_json()),
        digests=group_digests(bundle),
        prior_configs={"prior_global": bundle.prior_global.config(), "prior_local": bundle.prior_local.config()},
        optimizer_state=opt.state_dict() if opt is not None else None,
        disc_optimizer_state=d_opt.state_dict() if d_opt is not None else None,
        usage_counts=None if usage is None else torch.as_tensor(usage).clone(),
        rng_state=torch.get_rng_state(),
        history=list(history or []),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: serialize to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "manifest": json.dumps(ckpt.manifest(), sort_keys=True),
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "disc_optimizer_state": ckpt.disc_optimizer_state,
        "usage_counts": ckpt.usage_counts,
        "rng_state": ckpt.rng_state,
        "history": json.dumps(ckpt.history),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        manifest = json.loads(payload["manifest"])
    except (OSError, KeyError, RuntimeError, ValueError, pickle.UnpicklingError, EOFError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}")
    ckpt = Checkpoint(
        stage=manifest["stage"], step=manifest["step"], complete=manifest["complete"],
        model_state=payload["model_state"], frozen=manifest["frozen"], config=manifest["config"],
        digests=manifest["digests"], prior_configs=manifest["prior_configs"],
        optimizer_state=payload["optimizer_state"], disc_optimizer_state=payload["disc_optimizer_state"],
        usage_counts=payload["usage_counts"], rng_state=payload["rng_state"],
        history=json.loads(payload["history"]),
    )
    if ckpt.config_hash != manifest["config_hash"]:
        raise CheckpointError("config hash mismatch: checkpoint manifest was modified")
    bundle = bundle_from_checkpoint(ckpt, verify=False)
    actual = group_digests(bundle)
    bad = sorted(g for g in GROUPS if actual[g] != ckpt.digests.get(g))
    if bad:
        raise CheckpointError(f"content digest mismatch for groups {bad}")
    return ckpt


def bundle_from_checkpoint(ckpt: Checkpoint, verify: bool = True) -> ModelBundle:
    cfg = TrainConfig.model_validate(ckpt.config)
    priors = {k: PriorNet(**v) for k, v in ckpt.prior_configs.items()}
    bundle = ModelBundle(cfg.net, seed=cfg.seed, prior_global=priors["prior_global"],
                         prior_local=priors["prior_local"])
    bundle.load_state_dict(ckpt.model_state)
    if verify and group_digests(bundle) != ckpt.digests:
        raise CheckpointError("content digest mismatch")
    return bundle


# ---------------------------------------------------------------------------
# Data


def sample_batch(hr_images: Sequence[ImageBuffer], cfg: TrainConfig, stage: int, step: int):
    """HR crops and freshly degraded LR partners for one step.

    Image choice and crop position come from (seed, stage, step); each LR
    is degraded on stream (stage, step, sample index).
    """
    rng = np.random.default_rng([cfg.seed, stage, step])
    dcfg = cfg.degradation.model_copy(update={"seed": cfg.seed})
    p = cfg.hr_patch
    hrs, lrs = [], []
    for k in range(cfg.batch_size):
        img = hr_images[int(rng.integers(len(hr_images)))]
        if img.height < p or img.width < p:
            raise ValueError(f"training image {img.height}x{img.width} smaller than hr_patch {p}")
        y = int(rng.integers(0, img.height - p + 1))
        x = int(rng.integers(0, img.width - p + 1))
        crop = ImageBuffer(img.pixels[y:y + p, x:x + p])
        hrs.append(crop)
        lrs.append(degrade(crop, dcfg, stream=(stage, step, k)))
    return stack(hrs), stack(lrs)


# ---------------------------------------------------------------------------
# Training


def _set_trainable(bundle: ModelBundle, groups: Sequence[str]):
    for g in GROUPS:
        flag = g in groups
        for p in bundle.group(g).parameters():
            p.requires_grad_(flag)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list[dict]


def run_stage(bundle: ModelBundle, data: Sequence[ImageBuffer], cfg: TrainConfig, stage: int,
              resume: Checkpoint | None = None, max_steps: int | None = None,
              out_dir: str | Path | None = None, metrics_path: str | Path | None = None,
              on_step: Callable[[int, LossReport], None] | None = None) -> Checkpoint:
    """Train one stage from scratch (or from ``resume``) and return the final checkpoint.

    ``max_steps`` stops early at that absolute step; the returned checkpoint
    is then marked incomplete and can be resumed.
    """
    disc_on = cfg.disc_stage1 if stage == 1 else cfg.disc_stage2
    groups = list(STAGE_GROUPS[stage]) + (["disc"] if disc_on else [])
    _set_trainable(bundle, groups)
    w = cfg.weights
    opt = torch.optim.Adam(bundle.group_parameters(STAGE_GROUPS[stage]), lr=cfg.lr, betas=cfg.betas)
    d_opt = torch.optim.Adam(bundle.disc.parameters(), lr=cfg.lr, betas=cfg.betas) if disc_on else None
    cb = bundle.hc["global" if stage == 1 else "local"]
    usage = np.zeros(cb.size, dtype=np.int64)
    start, history = 0, []

    if resume is not None and resume.stage == stage and not resume.complete:
        bundle.load_state_dict(resume.model_state)
        opt.load_state_dict(resume.optimizer_state)
        if d_opt is not None and resume.disc_optimizer_state is not None:
            d_opt.load_state_dict(resume.disc_optimizer_state)
        if resume.usage_counts is not None:
            usage = resume.usage_counts.numpy().copy()
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        start, history = resume.step, list(resume.history)

    total_steps = cfg.steps_for(stage)
    end = total_steps if max_steps is None else min(max_steps, total_steps)
    metrics = open(metrics_path, "a") if metrics_path else None
    scale = cb.scale_tag
    try:
        for step in range(start, end):
            i_hr, i_lr = sample_batch(data, cfg, stage, step)
            fwd = forward_train(bundle, i_lr, i_hr, stage)
            adversarial = disc_on and w.use_adversarial and step >= w.adv_warmup
            try:
                report = generator_losses(bundle, fwd, w, adversarial=adversarial)
            except LossError as e:
                ck = make_checkpoint(bundle, cfg, stage, step, False, opt, d_opt, usage, history)
                if out_dir is not None:
                    save_checkpoint(ck, Path(out_dir) / f"last_good_stage{stage}.ckpt")
                raise TrainingHalted(f"stage {stage} step {step}: {e}", ck) from e
            opt.zero_grad(set_to_none=True)
            report.total_tensor.backward()
            opt.step()

            if adversarial:
                fakes = torch.cat([r for j, r in zip(fwd.jobs, fwd.recons) if j.decoder != "lr"])
                reals = torch.cat([j.target for j in fwd.jobs if j.decoder != "lr"])
                d_loss = discriminator_loss(bundle.disc, reals, fakes)
                d_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                d_opt.step()
                report.terms["adversarial_d"] = float(d_loss.detach())

            usage += count_indices([fwd.q_hr[scale].indices, fwd.q_lr[scale].indices], cb.size).counts
            if cfg.revive_every and (step + 1) % cfg.revive_every == 0:
                pool = torch.cat([
                    q.pre_quant.detach().permute(0, 2, 3, 1).reshape(-1, cb.dim)
                    for q in (fwd.q_hr[scale], fwd.q_lr[scale])
                ])
                seed = int(np.random.SeedSequence([cfg.seed, stage, step]).generate_state(1)[0])
                n = revive_dead_codes(cb, UseStats(usage), pool, rng_seed=seed, noise_scale=cfg.revive_noise)
                if n:
                    log.debug("stage %d step %d: revived %d %s codes", stage, step + 1, n, scale)
                usage[:] = 0

            record = {"stage": stage, "step": step + 1, **report.terms}
            history.append(record)
            if metrics is not None:
                for k, v in report.terms.items():
                    metrics.write(f"{stage}\t{step + 1}\t{k}\t{v:.8g}\n")
            if on_step is not None:
                on_step(step + 1, report)
            if (step + 1) % cfg.log_every == 0:
                log.info("stage %d step %d total %.4f", stage, step + 1, report.total)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                    and step + 1 < end:
                save_checkpoint(make_checkpoint(bundle, cfg, stage, step + 1, False, opt, d_opt, usage, history),
                                Path(out_dir) / f"stage{stage}_step{step + 1}.ckpt")
    finally:
        if metrics is not None:
            metrics.close()

    complete = end == total_steps
    if complete:
        bundle.trained_stage.fill_(max(int(bundle.trained_stage), stage))
    ck = make_checkpoint(bundle, cfg, stage, end, complete, opt, d_opt, usage, history)
    if out_dir is not None:
        save_checkpoint(ck, Path(out_dir) / f"stage{stage}.ckpt")
    return ck


def train_stage1(bundle: ModelBundle, data: Sequence[ImageBuffer], cfg: TrainConfig,
                 resume: Checkpoint | None = None, **kw) -> Checkpoint:
    if resume is not None and resume.stage != 1:
        raise CheckpointError(f"cannot resume stage 1 from a stage-{resume.stage} checkpoint")
    return run_stage(bundle, data, cfg, 1, resume=resume, **kw)


def train_stage2(bundle: ModelBundle, stage1_ckpt: Checkpoint | None, data: Sequence[ImageBuffer],
                 cfg: TrainConfig, resume: Checkpoint | None = None, **kw) -> Checkpoint:
    """Stage 2 from a completed stage-1 checkpoint (or resume a stage-2 one)."""
    if resume is not None:
        if resume.stage != 2:
            raise CheckpointError(f"cannot resume stage 2 from a stage-{resume.stage} checkpoint")
        return run_stage(bundle, data, cfg, 2, resume=resume, **kw)
    if stage1_ckpt is None:
        raise CheckpointError("stage 2 needs a completed stage-1 checkpoint")
    if stage1_ckpt.stage != 1 or not stage1_ckpt.complete:
        raise CheckpointError("stage 2 needs a *completed* stage-1 checkpoint")
    if not any(k.startswith("hc.cbs.global.") for k in stage1_ckpt.model_state):
        raise CheckpointError("stage-1 checkpoint has no global codebook")
    bundle.load_state_dict(stage1_ckpt.model_state)
    if int(bundle.trained_stage) < 1:
        raise CheckpointError("bundle state does not record a finished stage 1")
    return run_stage(bundle, data, cfg, 2, **kw)


def train_full(data: Sequence[ImageBuffer], cfg: TrainConfig, bundle: ModelBundle | None = None,
               **kw) -> tuple[ModelBundle, Checkpoint, Checkpoint]:
    bundle = bundle or ModelBundle(cfg.net, seed=cfg.seed)
    ck1 = train_stage1(bundle, data, cfg, **kw)
    ck2 = train_stage2(bundle, ck1, data, cfg, **kw)
    return bundle, ck1, ck2
