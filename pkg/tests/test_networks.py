import pytest
import torch

from texsr.dtpm import ConfigError
from texsr.images import ImageBuffer
from texsr.networks import (GROUPS, ModelBundle, NetConfig, StageError, decode, encode, forward_infer,
                            forward_train, infer_maps)
from texsr.vq import straight_through


def test_hr_encoder_grid(fresh_bundle):
    f = encode(fresh_bundle, torch.rand(2, 3, 64, 64), "HR")
    assert f["local"].shape == (2, 64, 16, 16)
    assert f["global"].shape == (2, 128, 8, 8)


def test_lr_encoder_matches_hr_grid(fresh_bundle):
    f = encode(fresh_bundle, torch.rand(1, 3, 16, 16), "LR")
    assert f["local"].shape == (1, 64, 16, 16)
    assert f["global"].shape == (1, 128, 8, 8)


def test_encoder_deterministic_in_eval_mode(fresh_bundle):
    fresh_bundle.eval()
    x = torch.rand(1, 3, 64, 64)
    a, b = encode(fresh_bundle, x, "HR"), encode(fresh_bundle, x, "HR")
    assert all(torch.equal(a[s], b[s]) for s in ("global", "local"))


def test_encoder_rejects_bad_sizes(fresh_bundle):
    with pytest.raises(ConfigError):
        encode(fresh_bundle, torch.rand(1, 3, 60, 60), "HR")
    with pytest.raises(ConfigError):
        encode(fresh_bundle, torch.rand(1, 3, 15, 15), "LR")


def test_decoder_shapes_and_range(fresh_bundle):
    maps = {"global": torch.randn(2, 128, 8, 8) * 10, "local": torch.randn(2, 64, 16, 16) * 10}
    hr = decode(fresh_bundle, maps, "hr")
    lr = decode(fresh_bundle, maps, "lr")
    assert hr.shape == (2, 3, 64, 64) and lr.shape == (2, 3, 16, 16)
    for out in (hr, lr):
        assert float(out.detach().min()) >= 0.0 and float(out.detach().max()) <= 1.0
    assert decode(fresh_bundle, {"global": maps["global"]}, "temp").shape == (2, 3, 64, 64)


def test_temp_decoder_refuses_local_maps(fresh_bundle):
    maps = {"global": torch.randn(1, 128, 8, 8), "local": torch.randn(1, 64, 16, 16)}
    with pytest.raises(ConfigError):
        decode(fresh_bundle, maps, "temp")


def test_forward_train_stage_shapes(fresh_bundle):
    i_hr, i_lr = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 16, 16)
    s1 = forward_train(fresh_bundle, i_lr, i_hr, 1)
    assert len(s1.recons) == 2 and all(j.decoder == "temp" for j in s1.jobs)
    assert s1.q_hr["local"].passthrough and s1.active_scales == ("global",)
    s2 = forward_train(fresh_bundle, i_lr, i_hr, 2)
    assert len(s2.recons) == 4
    assert s2.active_scales == ("global", "local")
    for maps in (s2.q_hr, s2.q_lr):
        for qm in maps.values():
            assert qm.quantized.shape == qm.pre_quant.shape
            assert qm.indices.shape == (qm.pre_quant.shape[0], *qm.pre_quant.shape[-2:])


def test_forward_train_rejects_unpaired(fresh_bundle):
    with pytest.raises(ConfigError):
        forward_train(fresh_bundle, torch.rand(2, 3, 8, 8), torch.rand(2, 3, 64, 64), 2)


def test_codebook_gradient_only_from_code_loss(fresh_bundle):
    from texsr.dtpm import dtpm_loss, rep_consistency_loss
    from texsr.ptpm import ptpm_reg_loss

    fwd = forward_train(fresh_bundle, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 64, 64), 2)
    rest = sum((r - j.target).abs().mean() for j, r in zip(fwd.jobs, fwd.recons))
    rest = rest + rep_consistency_loss(fwd.feats_hr, fwd.feats_lr)
    for st in (fwd.st_hr, fwd.st_lr):
        rest = rest + ptpm_reg_loss(fwd.i_hr, st, fresh_bundle.priors, fresh_bundle.heads)
    rest.backward(retain_graph=True)
    for cb in (fresh_bundle.hc["global"], fresh_bundle.hc["local"]):
        assert cb.entries.grad is None or torch.count_nonzero(cb.entries.grad) == 0
    dtpm_loss(fwd.q_hr, fwd.q_lr).backward()
    for cb in (fresh_bundle.hc["global"], fresh_bundle.hc["local"]):
        assert torch.count_nonzero(cb.entries.grad) > 0


def test_inference_touches_only_lr_encoder_codebooks_and_hr_decoder(fresh_bundle):
    fresh_bundle.trained_stage.fill_(2)
    sr = forward_infer(fresh_bundle, torch.rand(1, 3, 16, 16))
    assert sr.shape == (1, 3, 64, 64)
    fresh_bundle.zero_grad(set_to_none=True)
    maps = infer_maps(fresh_bundle, torch.rand(1, 3, 16, 16))
    out = decode(fresh_bundle, {s: straight_through(q) for s, q in maps.items()}, "hr")
    (out * torch.rand_like(out)).sum().backward()
    for g in ("e_hr", "d_lr", "d_temp", "disc", "heads", "prior_global", "prior_local"):
        for p in fresh_bundle.group(g).parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, g
    touched = [p for p in fresh_bundle.e_lr.parameters() if p.grad is not None and p.grad.abs().sum() > 0]
    assert touched
    assert any(p.grad is not None for p in fresh_bundle.d_hr.parameters())


def test_inference_requires_stage_two(fresh_bundle):
    with pytest.raises(StageError):
        forward_infer(fresh_bundle, torch.rand(1, 3, 16, 16))
    fresh_bundle.trained_stage.fill_(1)
    with pytest.raises(StageError):
        forward_infer(fresh_bundle, torch.rand(1, 3, 16, 16))


def test_inference_on_image_buffer(fresh_bundle):
    fresh_bundle.trained_stage.fill_(2)
    img = ImageBuffer(torch.rand(16, 16, 3).double().numpy())
    a = forward_infer(fresh_bundle, img)
    b = forward_infer(fresh_bundle, img)
    assert isinstance(a, ImageBuffer) and a.shape == (64, 64, 3)
    assert (a.pixels == b.pixels).all()


def test_discriminator_score_map_finite(fresh_bundle):
    for x in (torch.zeros(1, 3, 64, 64), torch.ones(1, 3, 64, 64), torch.rand(2, 3, 64, 64)):
        d = fresh_bundle.disc(x)
        assert d.shape == (x.shape[0], 1, 32, 32)
        assert torch.isfinite(d).all()


def test_priors_and_perceptual_frozen(fresh_bundle):
    for g in ("prior_global", "prior_local", "perceptual"):
        assert all(not p.requires_grad for p in fresh_bundle.group(g).parameters())


def test_bundle_construction_is_seeded():
    a, b = ModelBundle(NetConfig(), seed=3), ModelBundle(NetConfig(), seed=3)
    c = ModelBundle(NetConfig(), seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa if sa[k].is_floating_point())


def test_groups_cover_every_parameter(fresh_bundle):
    grouped = {id(p) for g in GROUPS for p in fresh_bundle.group(g).parameters()}
    assert grouped == {id(p) for p in fresh_bundle.parameters()}
