import pytest
import torch

from texsr.dtpm import (SCALES, ConfigError, HierarchicalCodebooks, MultiScaleFeatures, dtpm_loss,
                        dtpm_loss_terms, dtpm_quantize, rec_consistency_targets, rep_consistency_loss)
from texsr.vq import ShapeError, codebook_loss


def _features(b=2, gdim=16, ldim=8, g=4, seed=0, resolution="HR"):
    gen = torch.Generator().manual_seed(seed)
    return MultiScaleFeatures({
        "global": torch.randn(b, gdim, g, g, generator=gen),
        "local": torch.randn(b, ldim, 2 * g, 2 * g, generator=gen),
    }, resolution)


@pytest.fixture
def hc():
    return HierarchicalCodebooks(size=32, global_dim=16, local_dim=8, seed=0)


def test_inactive_scale_passes_through(hc):
    ms = _features()
    out = dtpm_quantize(hc, ms, ["global"])
    assert out["local"].passthrough
    assert out["local"].quantized is out["local"].pre_quant
    assert not out["global"].passthrough


def test_exact_code_rows_are_recovered(hc):
    gi = torch.tensor([[3, 7], [0, 31]])
    li = torch.randint(0, 32, (1, 4, 4))
    g = hc["global"].entries.detach()[gi].permute(2, 0, 1)[None]
    l = hc["local"].entries.detach()[li].permute(0, 3, 1, 2)
    out = dtpm_quantize(hc, MultiScaleFeatures({"global": g, "local": l}, "HR"))
    assert torch.equal(out["global"].indices[0], gi)
    assert torch.equal(out["local"].indices, li)


def test_grid_contract_rejected():
    with pytest.raises(ShapeError):
        MultiScaleFeatures({"global": torch.zeros(1, 4, 4, 4), "local": torch.zeros(1, 4, 4, 4)}, "HR")


def test_bad_active_scales(hc):
    with pytest.raises(ConfigError):
        dtpm_quantize(hc, _features(), [])
    with pytest.raises(ConfigError):
        dtpm_quantize(hc, _features(), ["middle"])


def test_local_perturbation_never_changes_global_indices(hc):
    ms = _features()
    a = dtpm_quantize(hc, ms)
    ms2 = MultiScaleFeatures({"global": ms["global"], "local": ms["local"] + 5 * torch.randn_like(ms["local"])}, "HR")
    b = dtpm_quantize(hc, ms2)
    assert torch.equal(a["global"].indices, b["global"].indices)


def test_dtpm_loss_zero_when_exact(hc):
    g = hc["global"].entries.detach()[:4].t().reshape(1, 16, 2, 2).clone()
    l = hc["local"].entries.detach()[:16].t().reshape(1, 8, 4, 4).clone()
    ms = MultiScaleFeatures({"global": g, "local": l}, "HR")
    q = dtpm_quantize(hc, ms)
    assert float(dtpm_loss(q, q).detach()) == 0.0


def test_dtpm_loss_single_scale_reduction(hc):
    hr = dtpm_quantize(hc, _features(seed=1), ["global"])
    lr = dtpm_quantize(hc, _features(seed=2, resolution="LR"), ["global"])
    expected = codebook_loss(hr["global"]) + codebook_loss(lr["global"])
    assert torch.allclose(dtpm_loss(hr, lr), expected)


def test_dtpm_loss_matches_independent_recomputation(hc):
    hr = dtpm_quantize(hc, _features(seed=1))
    lr = dtpm_quantize(hc, _features(seed=2, resolution="LR"))
    beta = 0.25
    ref = 0.0
    for maps in (hr, lr):
        for s in SCALES:
            d = (maps[s].quantized - maps[s].pre_quant).double() ** 2
            ref += (1 + beta) * float(d.mean())
    assert float(dtpm_loss(hr, lr, beta)) == pytest.approx(ref, rel=1e-6)
    terms = dtpm_loss_terms(hr, lr, beta)
    assert sorted(terms) == ["code/hr/global", "code/hr/local", "code/lr/global", "code/lr/local"]
    assert float(sum(terms.values())) == pytest.approx(ref, rel=1e-6)


def test_dtpm_loss_mismatch(hc):
    hr = dtpm_quantize(hc, _features())
    lr = dtpm_quantize(hc, _features(g=2, resolution="LR"))
    with pytest.raises(ShapeError):
        dtpm_loss(hr, lr)


def test_rep_consistency_examples():
    a = _features()
    assert float(rep_consistency_loss(a, a)) == 0.0
    b = MultiScaleFeatures({s: a[s] + 1 for s in SCALES}, "LR")
    assert float(rep_consistency_loss(a, b)) == pytest.approx(2.0)
    c = _features(seed=5, resolution="LR")
    assert float(rep_consistency_loss(a, c)) == float(rep_consistency_loss(c, a))


def test_rep_consistency_grad_reaches_both_sides():
    a = _features()
    b = _features(seed=3, resolution="LR")
    for ms in (a, b):
        for t in ms.scales.values():
            t.requires_grad_(True)
    rep_consistency_loss(a, b).backward()
    assert all(t.grad is not None and t.grad.abs().sum() > 0 for ms in (a, b) for t in ms.scales.values())


def test_rep_consistency_shape_error():
    with pytest.raises(ShapeError):
        rep_consistency_loss(_features(), _features(g=2))


def test_rec_consistency_jobs():
    hr_q, lr_q = {"global": torch.zeros(1)}, {"global": torch.ones(1)}
    i_hr, i_lr = torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 2, 2)
    jobs = rec_consistency_targets(hr_q, lr_q, i_hr, i_lr)
    assert len(jobs) == 4
    assert sorted(j.decoder for j in jobs) == ["hr", "hr", "lr", "lr"]
    for j in jobs:
        assert j.target is (i_hr if j.decoder == "hr" else i_lr)
        assert j.maps == (hr_q if j.source == "hr" else lr_q)
    assert len({j.name for j in jobs}) == 4


def test_four_job_loss_is_twice_two_job_loss_when_maps_agree():
    torch.manual_seed(0)
    q = {"global": torch.randn(1, 4, 2, 2)}
    i_hr, i_lr = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4)
    dec = {"hr": lambda m: torch.sigmoid(m["global"]).mean(1, keepdim=True).repeat_interleave(4, -1)
           .repeat_interleave(4, -2).expand(-1, 3, -1, -1),
           "lr": lambda m: torch.sigmoid(m["global"]).mean(1, keepdim=True).repeat_interleave(2, -1)
           .repeat_interleave(2, -2).expand(-1, 3, -1, -1)}
    jobs4 = rec_consistency_targets(q, dict(q), i_hr, i_lr)
    four = sum(float((dec[j.decoder](j.maps) - j.target).abs().mean()) for j in jobs4)
    two = sum(float((dec[j.decoder](j.maps) - j.target).abs().mean()) for j in jobs4 if j.source == "hr")
    assert four == pytest.approx(2 * two)
