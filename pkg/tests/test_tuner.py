import pytest
import torch
from hypothesis import given, strategies as st

from tcvedit.edits import direction_library
from tcvedit.generator import same_parameters
from tcvedit.perceptual import get_extractor
from tcvedit.refiner import Phase1Config, run_phase1
from tcvedit.rng import substream
from tcvedit.temporal import PairFlows
from tcvedit.tuner import (PRESERVATION_BOUND, Phase2Config, edit_preservation, interpolation_codes, local_reg_loss,
                           masked_input_loss, phase2_loss, run_phase2)

from helpers import small_session
from oracles import param_fd_rel_err


def test_published_defaults():
    c = Phase2Config()
    assert (c.lambda_eps, c.lambda_r, c.lr, c.epochs) == (10.0, 200.0, 1e-4, 5)
    o = Phase2Config.for_mode("out_of_domain")
    assert o.lr == 8e-4
    assert o.frozen_layers(8) == 4
    assert c.frozen_layers(8) == 0


@pytest.mark.parametrize("kw", [{"lambda_r": -1.0}, {"alpha_interp": 0.0}, {"alpha_interp": 1.5},
                                {"mode": "both"}, {"epochs": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        Phase2Config(**kw)


@given(st.floats(1e-3, 1.0), st.integers(0, 1000))
def test_interpolation_step_length(alpha, seed):
    w = torch.randn(3, 4, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    w_r = interpolation_codes(w, alpha, torch.Generator().manual_seed(seed + 1))
    dist = torch.linalg.vector_norm((w_r - w).reshape(3, -1), dim=-1)
    assert torch.allclose(dist, torch.full_like(dist, alpha), rtol=0, atol=1e-12)


def test_interpolation_limit():
    w = torch.randn(2, 4, 8, dtype=torch.float64)
    assert torch.allclose(interpolation_codes(w, 1e-9, torch.Generator().manual_seed(0)), w, atol=1e-8)


def test_identical_generators_have_zero_reg(tmp_path):
    s = small_session(tmp_path)
    old = s.generator.clone()
    loss = local_reg_loss(s.latents[:2], old, s.generator, torch.Generator().manual_seed(0))
    assert float(loss.detach()) == 0.0


def test_masked_input_trivial_cases():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 3, 16, 16, generator=g)
    assert float(masked_input_loss(a, b, torch.ones(16, 16))) == 0.0
    assert float(masked_input_loss(a, a, torch.zeros(16, 16))) == 0.0


def test_masked_input_gradient_localized():
    g = torch.Generator().manual_seed(0)
    inp = torch.rand(3, 64, 64, generator=g)
    edited = (inp + 0.05 * torch.randn(3, 64, 64, generator=g)).requires_grad_(True)
    with torch.no_grad():
        edited[:, 12:52, 12:52] += 0.3
    m = torch.zeros(64, 64)
    m[12:52, 12:52] = 1.0
    masked_input_loss(edited, inp, m).backward()
    grad = edited.grad.abs().sum(0)
    r = get_extractor().receptive_radius
    core = grad[12 + r + 4:52 - r - 4, 12 + r + 4:52 - r - 4]
    outside = grad.clone()
    outside[12:52, 12:52] = 0
    assert float(core.max()) == 0.0
    assert float(outside.sum()) > 0.0


def test_epochs_zero_is_identity(tmp_path):
    s = small_session(tmp_path)
    res = run_phase2(s, Phase2Config(epochs=0))
    assert same_parameters(res.generator, s.generator)
    with torch.no_grad():
        assert torch.equal(res.frames, s.generator(s.latents))


def test_out_of_domain_freezes_last_half(tmp_path):
    s = small_session(tmp_path, mode="out_of_domain")
    before = {n: p.detach().clone() for n, p in s.generator.named_parameters()}
    res = run_phase2(s, Phase2Config.for_mode("out_of_domain", epochs=2, lr=1e-2))
    L = s.generator.n_layers
    changed = set()
    for n, p in res.generator.named_parameters():
        layer = res.generator.layer_of(n)
        if layer >= L - L // 2:
            assert torch.equal(p, before[n]), n
        elif not torch.equal(p, before[n]):
            changed.add(layer)
    assert changed
    # the session's own generator is never touched
    assert all(torch.equal(p, before[n]) for n, p in s.generator.named_parameters())


def test_mode_mismatch_rejected(tmp_path):
    s = small_session(tmp_path)
    with pytest.raises(ValueError):
        run_phase2(s, Phase2Config(mode="out_of_domain"))


def test_deterministic(tmp_path):
    s = small_session(tmp_path)
    a = run_phase2(s, Phase2Config(epochs=1, lr=1e-3))
    b = run_phase2(s, Phase2Config(epochs=1, lr=1e-3))
    assert torch.equal(a.frames, b.frames)


def _phase2_terms(s, gen, old, flows):
    w = s.latents[[s.anchor, 0]]
    cfg = Phase2Config(mode=s.mode)
    m_pd = torch.rand(2, 16, 16, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    return {
        "photo": lambda: phase2_loss((s.anchor, 0), s, s.latents, gen, old, flows,
                                     Phase2Config(mode=s.mode, lambda_r=0.0, lambda_m=0.0)).photo,
        "reg": lambda: local_reg_loss(w, old, gen, torch.Generator().manual_seed(3), cfg.alpha_interp,
                                      cfg.lambda_l2_r, s.extractor),
        "input": lambda: masked_input_loss(gen(w), s.inputs[[s.anchor, 0]], m_pd, s.extractor).sum(),
    }


def test_phase2_terms_gradients_match_fd(tmp_path):
    # out-of-domain masks depend only on the fixed flows, so L_photo is smooth in the parameters
    s = small_session(tmp_path, mode="out_of_domain", dtype=torch.float64)
    old = s.generator.clone()
    gen = s.generator.clone()
    with torch.no_grad():
        for p in gen.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()),
                                      dtype=torch.float64))
    gen.freeze_last(gen.n_layers // 2)
    flows = PairFlows(s.flow_provider)
    pieces = _phase2_terms(s, gen, old, flows)
    params = dict(gen.named_parameters())
    names = [n for n in params if gen.layer_of(n) not in gen.frozen]
    assert names
    for key, fn in pieces.items():
        for n in names[:3]:
            assert param_fd_rel_err(params[n], fn) <= 1e-2, (key, n)


def test_eps_term_has_no_generator_gradient(tmp_path):
    s = small_session(tmp_path)
    gen = s.generator.clone()
    loss = phase2_loss((s.anchor, 0), s, s.latents, gen, s.generator, PairFlows(s.flow_provider),
                       Phase2Config(lambda_r=0.0, lambda_m=0.0, lambda_eps=10.0))
    assert not loss.eps.requires_grad


def test_phase2_preserves_held_out_edit(tmp_path):
    s = small_session(tmp_path, T=5)
    w = run_phase1(s, Phase1Config(epochs=2)).latents
    res = run_phase2(s, Phase2Config(epochs=2), latents=w)
    d = direction_library(tuple(w.shape[-2:]), seed=99)[0]
    dist = edit_preservation(s.generator, res.generator, w, d, strength=3.0)
    assert dist < PRESERVATION_BOUND


def test_loss_uses_fresh_interpolation_codes(tmp_path):
    s = small_session(tmp_path)
    gen = s.generator.clone()
    with torch.no_grad():
        next(iter(gen.parameters())).add_(0.1)
    rng = substream(0, "phase2.wz")
    flows = PairFlows(s.flow_provider)
    cfg = Phase2Config(lambda_m=0.0)
    a = phase2_loss((s.anchor, 0), s, s.latents, gen, s.generator, flows, cfg, rng).reg
    b = phase2_loss((s.anchor, 0), s, s.latents, gen, s.generator, flows, cfg, rng).reg
    assert float(a.detach()) != float(b.detach())
