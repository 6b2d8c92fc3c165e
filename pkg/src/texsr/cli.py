"""``texsr`` command line: one subcommand per workflow.

Every run writes ``resolved_config.json`` next to its outputs; feeding that
file back through ``--config`` (with the same paths) reproduces the run.
Exit codes: 0 success, 2 bad configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from texsr import dtpm, ptpm
from texsr.degradation import AnalysisError, DegradationConfig, DegradationError, confusion_analysis, degrade
from texsr.errors import ConfigError
from texsr.evalkit import evaluate, local_noise_ablation
from texsr.images import ImageBuffer, ImageError, list_images, read_png, write_png
from texsr.networks import ModelBundle, StageError, forward_infer, infer_maps
from texsr.synthetic import toy_hr_images
from texsr.trainer import (CheckpointError, TrainConfig, TrainingHalted, bundle_from_checkpoint,
                           load_checkpoint, train_stage1, train_stage2)
from texsr.vq import count_indices

log = logging.getLogger("texsr")

SNAPSHOT = "resolved_config.json"


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


class PatchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(default=ptpm.DEFAULT_GAMMA, gt=0.5, lt=1.0)
    patch_size: int = Field(default=96, gt=0)
    min_sharpness: float | None = Field(default=None, ge=0)


class EmbedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    projection: str = Field(default="tsne", pattern="^(tsne|pca)$")
    seed: int = 0


class EvalConfig(BaseModel):
    """LR inputs are synthesized from HR with ``degradation`` when no LR directory is given."""

    model_config = ConfigDict(extra="forbid")

    degradation: DegradationConfig = Field(default_factory=DegradationConfig)
    ablation_runs: int = Field(default=5, gt=0)
    seed: int = 0


# ---------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return data


def resolve_config(model: type[BaseModel], path: str | None, overrides: list[str], seed: int | None,
                   base: dict | None = None) -> BaseModel:
    data = dict(base or {})
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    data = apply_overrides(data, overrides)
    if seed is not None and "seed" in model.model_fields:
        data["seed"] = seed
    return model.model_validate(data)


def write_snapshot(out_dir: Path, command: str, args: argparse.Namespace, cfg: BaseModel | None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in vars(args).items() if k not in ("func", "config", "set")}
    snap = {"command": command, "args": argv, "config": None if cfg is None else json.loads(cfg.model_dump_json())}
    path = out_dir / SNAPSHOT
    path.write_text(json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def load_image_dir(directory) -> list[tuple[str, ImageBuffer]]:
    files = list_images(_need(directory, "image directory"))
    if not files:
        raise UsageError(f"no PNG images in {directory}")
    return [(f.name, read_png(f)) for f in files]


def read_mask(path: Path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if m is None:
        raise ImageError(f"cannot read mask {path}")
    return m if m.ndim == 2 else m[..., 0]


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_patches(args) -> int:
    cfg = resolve_config(PatchConfig, args.config, args.set, None)
    out = _out_dir(args)
    write_snapshot(out, "make-patches", args, cfg)
    masks_dir = _need(args.masks, "--masks")
    records, dropped = [], 0
    for name, img in load_image_dir(args.images):
        mask_path = masks_dir / name
        if not mask_path.exists():
            raise UsageError(f"no mask for {name} in {masks_dir}")
        recs = ptpm.generate_patches(img, read_mask(mask_path), cfg.gamma, cfg.patch_size, source_id=Path(name).stem)
        if cfg.min_sharpness is not None:
            kept = [r for r in recs if ptpm.sharpness(r.patch) >= cfg.min_sharpness]
            dropped += len(recs) - len(kept)
            recs = kept
        records.extend(recs)
    ptpm.save_patch_dataset(records, out)
    print(f"wrote {len(records)} patches to {out} ({dropped} dropped by sharpness filter)")
    return 0


def cmd_pretrain_prior(args) -> int:
    cfg = resolve_config(ptpm.PretrainConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "pretrain-prior", args, cfg)
    data = ptpm.load_patch_dataset(_need(args.patches, "--patches"))
    result = ptpm.pretrain(data, cfg, num_classes=args.num_classes)
    ptpm.save_prior(result.net, out / "prior.pt")
    summary = {"val_accuracy": result.val_accuracy, "final_loss": result.losses[-1] if result.losses else None,
               "train_sources": len(result.train_sources), "val_sources": len(result.val_sources)}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"val accuracy per epoch: {', '.join(f'{a:.4f}' for a in result.val_accuracy)}")
    return 0


def cmd_export_embeddings(args) -> int:
    from texsr import plots

    cfg = resolve_config(EmbedConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "export-embeddings", args, cfg)
    net = ptpm.load_prior(_need(args.prior, "--prior"))
    data = ptpm.load_patch_dataset(_need(args.patches, "--patches"))
    table = ptpm.export_embeddings(net, data, cfg.projection, cfg.seed)
    table.write_csv(out / "embeddings.csv")
    plots.embedding_scatter(table.points, table.labels, out / "embeddings.png")
    print(f"wrote {len(data)} embeddings to {out / 'embeddings.csv'}")
    return 0


def cmd_remap_labels(args) -> int:
    out = _out_dir(args)
    write_snapshot(out, "remap-labels", args, None)
    lm = ptpm.LabelMap.from_json(_need(args.map, "--map").read_text())
    data = ptpm.remap_labels(ptpm.load_patch_dataset(_need(args.patches, "--patches")), lm)
    ptpm.save_patch_dataset(data, out)
    (out / "label_map.json").write_text(lm.to_json() + "\n")
    print(f"remapped {len(data)} patches into {lm.class_count} classes")
    return 0


def cmd_degrade(args) -> int:
    cfg = resolve_config(DegradationConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "degrade", args, cfg)
    images = load_image_dir(args.hr)
    for i, (name, hr) in enumerate(images):
        write_png(out / name, degrade(hr, cfg, stream=i))
    print(f"degraded {len(images)} images into {out}")
    return 0


def cmd_analyze_confusion(args) -> int:
    from texsr import plots

    cfg = resolve_config(DegradationConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "analyze-confusion", args, cfg)
    hr = [img for _, img in load_image_dir(args.hr)]
    stats = confusion_analysis(hr, cfg, args.patch, bins=args.bins)
    (out / "confusion.json").write_text(stats.to_json() + "\n")
    plots.confusion_figure(stats, out / "confusion.png")
    print(f"patches {stats.patch_count}  mismatch_rate {stats.mismatch_rate:.6f}")
    return 0


def _training_data(args, seed: int) -> list[ImageBuffer]:
    if args.toy:
        return toy_hr_images(args.toy, 64, seed=seed)
    return [img for _, img in load_image_dir(args.hr)]


def cmd_train(args) -> int:
    from texsr import plots

    resume = load_checkpoint(args.resume) if args.resume else None
    base = resume.config if (resume is not None and not args.config) else None
    cfg = resolve_config(TrainConfig, args.config, args.set, args.seed, base=base)
    out = _out_dir(args)
    write_snapshot(out, "train", args, cfg)
    data = _training_data(args, cfg.seed)
    metrics = out / "metrics.tsv"

    if resume is not None:
        bundle = bundle_from_checkpoint(resume)
    else:
        priors = {}
        if args.prior_global:
            priors["prior_global"] = ptpm.load_prior(args.prior_global)
        if args.prior_local:
            priors["prior_local"] = ptpm.load_prior(args.prior_local)
        bundle = ModelBundle(cfg.net, seed=cfg.seed, **priors)

    stages = {"1": [1], "2": [2], "all": [1, 2]}[args.stage]
    history = []
    ck = resume
    for stage in stages:
        kw = dict(out_dir=out, metrics_path=metrics, max_steps=args.max_steps)
        if stage == 1:
            if ck is not None and ck.stage == 1 and ck.complete:
                log.info("stage 1 already complete in the resumed checkpoint")
                continue
            if ck is not None and ck.stage != 1:
                raise UsageError(f"--stage 1 cannot resume a stage-{ck.stage} checkpoint")
            ck = train_stage1(bundle, data, cfg, resume=ck, **kw)
        else:
            if ck is None:
                raise UsageError("stage 2 needs --resume with a completed stage-1 checkpoint")
            if ck.stage == 2:
                ck = train_stage2(bundle, None, data, cfg, resume=ck, **kw)
            else:
                ck = train_stage2(bundle, ck, data, cfg, **kw)
        history.extend(ck.history)
        if not ck.complete:
            break
    if ck is None:
        raise UsageError("nothing to train")
    if history:
        plots.loss_curves(history, out / "loss_curves.png")
    state = "complete" if ck.complete else f"stopped at step {ck.step}"
    print(f"stage {ck.stage} {state}; checkpoint {out / f'stage{ck.stage}.ckpt'}")
    return 0


def _load_model(path) -> ModelBundle:
    return bundle_from_checkpoint(load_checkpoint(_need(path, "--ckpt")))


def cmd_infer(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    bundle = _load_model(args.ckpt)
    src, dst = _need(args.inp, "--in"), Path(args.out)
    if src.is_dir():
        write_snapshot(dst, "infer", args, None)
        pairs = [(dst / name, img) for name, img in load_image_dir(src)]
    else:
        write_snapshot(dst.parent if str(dst.parent) else Path("."), "infer", args, None)
        pairs = [(dst, read_png(src))]
    with torch.no_grad():
        for path, lr in pairs:
            write_png(path, forward_infer(bundle, lr))
    print(f"wrote {len(pairs)} SR image(s)")
    return 0


def _paired(args, cfg: EvalConfig) -> tuple[list[str], list[tuple[ImageBuffer, ImageBuffer]]]:
    hr = load_image_dir(args.hr)
    if args.lr:
        lr = dict(load_image_dir(args.lr))
        missing = [n for n, _ in hr if n not in lr]
        if missing:
            raise UsageError(f"no LR image for {missing}")
        return [n for n, _ in hr], [(lr[n], img) for n, img in hr]
    dcfg = cfg.degradation.model_copy(update={"seed": cfg.seed})
    return [n for n, _ in hr], [(degrade(img, dcfg, stream=i), img) for i, (_, img) in enumerate(hr)]


def cmd_eval(args) -> int:
    from texsr import plots

    cfg = resolve_config(EvalConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "eval", args, cfg)
    bundle = _load_model(args.ckpt)
    names, pairs = _paired(args, cfg)
    dump = None
    if args.dump_sr:
        (out / "sr").mkdir(parents=True, exist_ok=True)
        dump = lambda i, img: write_png(out / "sr" / names[i], img)  # noqa: E731
    report = evaluate(bundle, pairs, sr_callback=dump)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.table() + "\n")
    plots.codebook_usage({k: v.counts for k, v in report.use.items()}, out / "codebook_usage.png")
    print(report.table())
    return 0


def cmd_ablate_local(args) -> int:
    from texsr import plots

    cfg = resolve_config(EvalConfig, args.config, args.set, args.seed)
    out = _out_dir(args)
    write_snapshot(out, "ablate-local", args, cfg)
    bundle = _load_model(args.ckpt)
    _, pairs = _paired(args, cfg)
    normal, noisy = None, []
    for k in range(cfg.ablation_runs):
        n, z = local_noise_ablation(bundle, pairs, seed=cfg.seed + k)
        normal = normal or n
        noisy.append(z)
    rows = ["run\tmean_psnr\tmean_ssim", f"normal\t{normal.mean_psnr:.6f}\t{normal.mean_ssim:.6f}"]
    rows += [f"noisy_seed{cfg.seed + k}\t{z.mean_psnr:.6f}\t{z.mean_ssim:.6f}" for k, z in enumerate(noisy)]
    (out / "ablation.tsv").write_text("\n".join(rows) + "\n")
    plots.ablation_bars(normal, noisy, out / "ablation.png")
    print("\n".join(rows))
    return 0


def cmd_codebook_stats(args) -> int:
    from texsr import plots

    out = _out_dir(args)
    write_snapshot(out, "codebook-stats", args, None)
    bundle = _load_model(args.ckpt)
    indices = {s: [] for s in dtpm.SCALES}
    with torch.no_grad():
        for _, lr in load_image_dir(args.lr):
            maps = infer_maps(bundle, lr.to_tensor())
            for s in indices:
                indices[s].append(maps[s].indices)
    stats = {s: count_indices(v, bundle.hc[s].size) for s, v in indices.items()}
    (out / "codebook_stats.json").write_text(json.dumps({s: v.to_dict() for s, v in stats.items()}, indent=2) + "\n")
    for s in dtpm.SCALES:
        (out / f"codebook_{s}.csv").write_text(bundle.hc[s].dump_text())
    plots.codebook_usage({s: v.counts for s, v in stats.items()}, out / "codebook_usage.png")
    for s, v in stats.items():
        print(f"{s}\t{v.ratio_string}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texsr", description="Texture-prior blind super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, seed=True, config=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", help="output directory (infer: output file or directory)")
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config field, dotted keys for nested sections")
        else:
            sp.set_defaults(config=None, set=[])
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="the single seed for all randomness")
        return sp

    sp = add("make-patches", cmd_make_patches, "tile segmented images into labelled texture patches", seed=False)
    sp.add_argument("--images", required=True)
    sp.add_argument("--masks", required=True, help="label masks with the same file names as the images")

    sp = add("pretrain-prior", cmd_pretrain_prior, "pre-train a texture prior network")
    sp.add_argument("--patches", required=True)
    sp.add_argument("--num-classes", type=int, default=None)

    sp = add("export-embeddings", cmd_export_embeddings, "write prior embeddings and a 2-D projection")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--patches", required=True)

    sp = add("remap-labels", cmd_remap_labels, "merge patch labels with a label map", seed=False, config=False)
    sp.add_argument("--patches", required=True)
    sp.add_argument("--map", required=True, help="JSON label map")

    sp = add("degrade", cmd_degrade, "synthesize LR images from an HR directory")
    sp.add_argument("--hr", required=True)

    sp = add("analyze-confusion", cmd_analyze_confusion, "LR/HR patch confusion statistics")
    sp.add_argument("--hr", required=True)
    sp.add_argument("--patch", type=int, required=True)
    sp.add_argument("--bins", type=int, default=50)

    sp = add("train", cmd_train, "two-stage training")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--hr", help="directory of HR training images")
    g.add_argument("--toy", type=int, help="train on this many synthetic 64x64 images instead")
    sp.add_argument("--stage", choices=("1", "2", "all"), default="all")
    sp.add_argument("--resume", help="checkpoint to resume (or a completed stage-1 checkpoint for stage 2)")
    sp.add_argument("--max-steps", type=int, default=None, help="stop early at this step (resumable)")
    sp.add_argument("--prior-global")
    sp.add_argument("--prior-local")

    sp = add("infer", cmd_infer, "super-resolve LR images", seed=False, config=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True, help="LR PNG file or directory")

    for name, func, help_ in (("eval", cmd_eval, "PSNR/SSIM and codebook use on a paired set"),
                              ("ablate-local", cmd_ablate_local, "compare against random local-scale codes")):
        sp = add(name, func, help_)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--hr", required=True)
        sp.add_argument("--lr", help="LR directory with matching names (default: degrade the HR set)")
        if name == "eval":
            sp.add_argument("--dump-sr", action="store_true", help="also write SR PNGs")

    sp = add("codebook-stats", cmd_codebook_stats, "codebook use over an LR directory", seed=False, config=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--lr", required=True)
    return p


def _field_errors(e: ValidationError) -> str:
    return "\n".join(f"  {'.'.join(str(x) for x in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())


CONFIG_ERRORS = (UsageError, ConfigError)
RUNTIME_ERRORS = (CheckpointError, TrainingHalted, StageError, ImageError, DegradationError, AnalysisError,
                  OSError, RuntimeError, ValueError)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("RTC_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"config error ({e.error_count()} field(s)):\n{_field_errors(e)}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
