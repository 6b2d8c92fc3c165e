import math

import pytest
import torch
from torch import nn

from texsr.networks import PerceptualNet, forward_train
from texsr.objectives import (LossError, LossWeights, codebook_objective, discriminator_loss, generator_losses,
                              reconstruction_loss, reconstruction_terms, total_loss)


class ConstDisc(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = nn.Parameter(torch.tensor(float(value)))

    def forward(self, x):
        return self.value.expand(x.shape[0], 1, x.shape[2], x.shape[3]) + 0 * x[:, :1]


def test_reconstruction_zero_for_exact_recon():
    x = torch.rand(2, 3, 16, 16)
    w = LossWeights(lambda_adv=0.0)
    assert float(reconstruction_loss(x, x.clone(), w, phi_per=PerceptualNet())) == 0.0


def test_reconstruction_constant_offset_is_l1():
    x = torch.rand(1, 3, 8, 8) * 0.5
    w = LossWeights(lambda_per=0.0, lambda_adv=0.0)
    assert float(reconstruction_loss(x, x + 0.125, w)) == pytest.approx(0.125)


def test_perceptual_matches_cached_activations():
    phi = PerceptualNet()
    gt, rec = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    t = reconstruction_terms(gt, rec, LossWeights(), phi_per=phi)
    ref = sum(float((a - b).abs().mean()) for a, b in zip(phi(rec), phi(gt)))
    assert float(t["perceptual"]) == pytest.approx(ref, rel=1e-6)


def test_generator_adversarial_term_leaves_disc_untouched():
    disc = ConstDisc(0.3)
    rec = torch.rand(1, 3, 8, 8, requires_grad=True)
    t = reconstruction_terms(torch.rand(1, 3, 8, 8), rec, LossWeights(), disc=disc)
    assert float(t["adversarial_g"].detach()) == pytest.approx(-0.3)
    (t["l1"] + t["adversarial_g"]).backward()
    assert disc.value.grad is None
    assert disc.value.requires_grad


def test_adversarial_bound():
    disc = ConstDisc(-2.0)
    w = LossWeights()
    t = reconstruction_terms(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), w, disc=disc)
    assert w.lambda_adv * float(t["adversarial_g"]) >= -w.lambda_adv * 2.0 - 1e-9


def test_reconstruction_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4), LossWeights())


def test_discriminator_loss_examples():
    gt, rec = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    assert float(discriminator_loss(ConstDisc(0.0), gt, rec).detach()) == pytest.approx(2.0)

    class Perfect(nn.Module):
        def forward(self, x):
            return torch.where(x.mean() > 0.5, 1.5, -1.5) * torch.ones(x.shape[0], 1, 4, 4)

    assert float(discriminator_loss(Perfect(), torch.ones(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))) == 0.0


def test_discriminator_loss_sends_no_gradient_to_generator():
    gen = nn.Conv2d(3, 3, 1)
    rec = gen(torch.rand(1, 3, 8, 8))
    discriminator_loss(ConstDisc(0.2), torch.rand(1, 3, 8, 8), rec).backward()
    assert all(p.grad is None for p in gen.parameters())


def test_codebook_objective():
    z = torch.zeros(())
    assert float(codebook_objective({"code": z, "rep_con": z, "rec_con": z})) == 0.0
    parts = {"code": torch.tensor(0.3), "rep_con": torch.tensor(0.2), "rec_con": torch.tensor(1.1)}
    assert float(codebook_objective(parts)) == pytest.approx(1.6)
    with pytest.raises(ValueError):
        codebook_objective({"code": z, "rec_con": z}, stage=2)


def test_total_loss_ptpm_flag_and_nan():
    parts = {"code": torch.tensor(0.3), "rep_con": torch.tensor(0.2), "rec_con": torch.tensor(1.1),
             "ptpm": torch.tensor(0.4)}
    on = total_loss(parts, LossWeights())
    off = total_loss(parts, LossWeights(use_ptpm=False))
    assert on.total == pytest.approx(2.0)
    assert off.total == pytest.approx(float(codebook_objective(parts)))
    assert on.total == pytest.approx(on.recomputed_total(LossWeights()))
    with pytest.raises(LossError):
        total_loss({**parts, "code": torch.tensor(math.nan)}, LossWeights())


def _fwd(bundle, stage):
    torch.manual_seed(0)
    return forward_train(bundle, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 64, 64), stage)


def test_generator_report_bookkeeping(fresh_bundle):
    w = LossWeights()
    rep = generator_losses(fresh_bundle, _fwd(fresh_bundle, 2), w, adversarial=True)
    assert rep.total == pytest.approx(rep.recomputed_total(w), rel=1e-6)
    comps = rep.components
    assert sum(v for k, v in comps.items() if k.startswith("code/")) == pytest.approx(rep.terms["code"], rel=1e-5)
    assert sum(v for k, v in comps.items() if k.startswith("rec/")) == pytest.approx(rep.terms["rec_con"], rel=1e-5)
    assert sum(v for k, v in comps.items() if k.startswith("ptpm/")) == pytest.approx(rep.terms["ptpm"], rel=1e-5)
    assert len([k for k in comps if k.startswith("rec/")]) == 4
    assert all(math.isfinite(v) for v in rep.terms.values())


def test_stage_one_report_has_no_local_code_or_prior_terms(fresh_bundle):
    rep = generator_losses(fresh_bundle, _fwd(fresh_bundle, 1), LossWeights())
    assert [k for k in rep.components if k.startswith("code/")] == ["code/hr/global", "code/lr/global"]
    assert not [k for k in rep.components if k.startswith("ptpm/") and "local" in k]
    assert len([k for k in rep.components if k.startswith("rec/")]) == 2
    s2 = generator_losses(fresh_bundle, _fwd(fresh_bundle, 2), LossWeights())
    assert len([k for k in s2.components if k.startswith("code/")]) == 4


def test_generator_step_leaves_discriminator_without_gradient(fresh_bundle):
    rep = generator_losses(fresh_bundle, _fwd(fresh_bundle, 2), LossWeights(), adversarial=True)
    rep.total_tensor.backward()
    assert all(p.grad is None for p in fresh_bundle.disc.parameters())
    assert all(p.requires_grad for p in fresh_bundle.disc.parameters())


def test_lr_reconstructions_have_no_adversarial_term(fresh_bundle):
    fwd = _fwd(fresh_bundle, 2)
    w = LossWeights(lambda_per=0.0)
    rep = generator_losses(fresh_bundle, fwd, w, adversarial=True)
    for job, recon in zip(fwd.jobs, fwd.recons):
        if job.decoder == "lr":
            l1 = float((recon - job.target).abs().mean())
            assert rep.components[f"rec/{job.name}"] == pytest.approx(l1, rel=1e-5)
