import json

import numpy as np
import pytest
import torch
from pydantic import ValidationError

import texsr.trainer as trainer
from texsr.networks import ModelBundle
from texsr.objectives import LossError
from texsr.trainer import (STAGE1_FROZEN, CheckpointError, TrainConfig, TrainingHalted, bundle_from_checkpoint,
                           group_digests, load_checkpoint, make_checkpoint, sample_batch, save_checkpoint,
                           train_stage1, train_stage2)


def _cfg(**kw):
    base = dict(stage1_steps=4, stage2_steps=4, batch_size=2, revive_every=2, log_every=2,
                weights={"adv_warmup": 2})
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(hr_patch=60)
    with pytest.raises(ValidationError):
        TrainConfig(stage=3)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=1.0)
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_sample_batch_is_deterministic(toy_data):
    cfg = _cfg()
    a, b = sample_batch(toy_data, cfg, 1, 3), sample_batch(toy_data, cfg, 1, 3)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 3, 64, 64) and a[1].shape == (2, 3, 16, 16)
    c = sample_batch(toy_data, cfg, 1, 4)
    assert not torch.equal(a[1], c[1])


def test_checkpoint_round_trip_is_byte_identical(tiny_run, tmp_path):
    _, ck1, _ = tiny_run
    p1 = save_checkpoint(ck1, tmp_path / "a.ckpt")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_reload_reproduces_outputs(tiny_run, tmp_path):
    bundle, _, ck2 = tiny_run
    back = bundle_from_checkpoint(load_checkpoint(save_checkpoint(ck2, tmp_path / "s2.ckpt")))
    assert int(back.trained_stage) == 2
    x = torch.rand(1, 3, 16, 16)
    from texsr.networks import forward_infer
    assert torch.equal(forward_infer(bundle, x), forward_infer(back, x))


def _tamper(path, fn):
    payload = torch.load(path, weights_only=True)
    fn(payload)
    torch.save(payload, path)


def test_tampered_weights_detected(tiny_run, tmp_path):
    p = save_checkpoint(tiny_run[1], tmp_path / "t.ckpt")

    def poke(payload):
        key = next(k for k in payload["model_state"] if k.startswith("d_temp"))
        payload["model_state"][key].view(-1)[0] += 1.0
    _tamper(p, poke)
    with pytest.raises(CheckpointError, match="d_temp"):
        load_checkpoint(p)


def test_tampered_config_detected(tiny_run, tmp_path):
    p = save_checkpoint(tiny_run[1], tmp_path / "t.ckpt")

    def poke(payload):
        m = json.loads(payload["manifest"])
        m["config"]["lr"] = 0.5
        payload["manifest"] = json.dumps(m)
    _tamper(p, poke)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(p)


def test_unreadable_and_wrong_version(tmp_path, tiny_run):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    p = save_checkpoint(tiny_run[1], tmp_path / "v.ckpt")

    def poke(payload):
        m = json.loads(payload["manifest"])
        m["version"] = 99
        payload["manifest"] = json.dumps(m)
    _tamper(p, poke)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_stage_two_keeps_stage_one_groups_bit_identical(tiny_run):
    _, ck1, ck2 = tiny_run
    for g in STAGE1_FROZEN:
        assert ck1.digests[g] == ck2.digests[g], g
        assert ck2.frozen[g]
    for g in ("codebook_local", "d_hr", "d_lr"):
        assert ck1.digests[g] != ck2.digests[g], g
        assert not ck2.frozen[g]


def test_stage_one_leaves_local_codebook_and_decoders_untouched(tiny_cfg, toy_data):
    bundle = ModelBundle(tiny_cfg.net, seed=tiny_cfg.seed)
    before = group_digests(bundle)
    ck = train_stage1(bundle, toy_data, tiny_cfg)
    for g in ("codebook_local", "d_hr", "d_lr", "disc"):
        assert ck.digests[g] == before[g], g
    for g in ("e_hr", "e_lr", "codebook_global", "d_temp"):
        assert ck.digests[g] != before[g], g
    assert ck.complete and int(bundle.trained_stage) == 1


def test_history_terms(tiny_run):
    _, ck1, ck2 = tiny_run
    assert [h["step"] for h in ck1.history] == [1, 2, 3, 4]
    assert [h["step"] for h in ck2.history] == [1, 2, 3, 4]
    for h in ck1.history + ck2.history:
        for k in ("total", "code", "rep_con", "rec_con", "ptpm"):
            assert np.isfinite(h[k])
    # adversarial terms start after the warm-up
    assert [h["adversarial_d"] == 0.0 for h in ck2.history] == [True, True, False, False]
    assert all(h["adversarial_g"] == 0.0 and h["adversarial_d"] == 0.0 for h in ck1.history)


def test_stage_two_requires_completed_stage_one(toy_data):
    cfg = _cfg()
    bundle = ModelBundle(cfg.net)
    with pytest.raises(CheckpointError):
        train_stage2(bundle, None, toy_data, cfg)
    partial = train_stage1(bundle, toy_data, cfg, max_steps=2)
    assert not partial.complete
    with pytest.raises(CheckpointError, match="completed"):
        train_stage2(ModelBundle(cfg.net), partial, toy_data, cfg)
    with pytest.raises(CheckpointError):
        train_stage1(ModelBundle(cfg.net), toy_data, cfg,
                     resume=make_checkpoint(bundle, cfg, 2, 1, False))


@pytest.mark.parametrize("stage", [1, 2])
def test_resume_matches_uninterrupted_run(toy_data, tiny_run, tmp_path, stage):
    cfg = _cfg()
    _, ck1, _ = tiny_run

    def run(resume_at=None):
        torch.manual_seed(0)
        bundle = ModelBundle(cfg.net, seed=cfg.seed)
        if stage == 1:
            if resume_at is None:
                return train_stage1(bundle, toy_data, cfg)
            part = train_stage1(bundle, toy_data, cfg, max_steps=resume_at)
            part = load_checkpoint(save_checkpoint(part, tmp_path / "part.ckpt"))
            torch.manual_seed(123)  # resume must not depend on ambient RNG state
            return train_stage1(ModelBundle(cfg.net, seed=cfg.seed), toy_data, cfg, resume=part)
        if resume_at is None:
            return train_stage2(bundle, ck1, toy_data, cfg)
        part = train_stage2(bundle, ck1, toy_data, cfg, max_steps=resume_at)
        part = load_checkpoint(save_checkpoint(part, tmp_path / "part.ckpt"))
        torch.manual_seed(123)
        return train_stage2(ModelBundle(cfg.net, seed=cfg.seed), None, toy_data, cfg, resume=part)

    full, resumed = run(), run(resume_at=3)
    assert full.digests == resumed.digests
    assert [h["total"] for h in full.history] == [h["total"] for h in resumed.history]


def test_nan_loss_halts_with_last_good_checkpoint(toy_data, tmp_path, monkeypatch):
    cfg = _cfg()
    real = trainer.generator_losses
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise LossError("non-finite loss term 'code': nan")
        return real(*a, **kw)

    monkeypatch.setattr(trainer, "generator_losses", flaky)
    bundle = ModelBundle(cfg.net)
    with pytest.raises(TrainingHalted) as info:
        train_stage1(bundle, toy_data, cfg, out_dir=tmp_path)
    ck = info.value.checkpoint
    assert ck.step == 2 and not ck.complete
    saved = load_checkpoint(tmp_path / "last_good_stage1.ckpt")
    assert saved.digests == ck.digests
    assert all(torch.isfinite(v).all() for v in saved.model_state.values() if v.is_floating_point())


def test_metrics_file_written(toy_data, tmp_path):
    cfg = _cfg(stage1_steps=2)
    train_stage1(ModelBundle(cfg.net), toy_data, cfg, metrics_path=tmp_path / "m.tsv", out_dir=tmp_path)
    rows = [line.split("\t") for line in (tmp_path / "m.tsv").read_text().splitlines()]
    assert {r[1] for r in rows} == {"1", "2"}
    assert {"total", "code", "rep_con", "rec_con"} <= {r[2] for r in rows}
    assert (tmp_path / "stage1.ckpt").exists()
