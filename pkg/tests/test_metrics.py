import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tcvedit.imaging import load_frame
from tcvedit.metrics import (EvalReport, occlusion_mask, pair_warping_error, save_xt_slice, similarity_to_direct,
                             warping_error, warping_errors, xt_slice)
from tcvedit.synthdata import SceneSpec, SpriteSpec, render_sequence

from oracles import occlusion_loop, warping_error_loop


def const_flow(dx, dy, h=8, w=8):
    f = torch.zeros(2, h, w, dtype=torch.float64)
    f[0], f[1] = dx, dy
    return f


def test_hand_example():
    a = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
    b = torch.full((3, 2, 2), 0.6, dtype=torch.float64)
    err = pair_warping_error(a, b, torch.zeros(2, 2, 2, dtype=torch.float64), torch.ones(2, 2))
    assert err == pytest.approx(0.01, abs=1e-12)


def test_static_zero():
    frames = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(0)).expand(4, 3, 8, 8).clone()
    frames[:] = frames[0]
    flows = [torch.zeros(2, 8, 8)] * 3
    masks = [torch.ones(8, 8)] * 3
    assert warping_error(frames, flows, masks) == 0.0


def test_occlusion_hand_cases():
    assert bool((occlusion_mask(const_flow(3, 0), const_flow(-2, 0)) == 0).all())
    assert bool((occlusion_mask(const_flow(0, 0), const_flow(0, 0)) == 1).all())
    # inverse constant flow: interior pixels land in bounds, border ones clamp onto the same value
    assert bool((occlusion_mask(const_flow(1.5, -1), const_flow(-1.5, 1)) == 1).all())


def test_occlusion_matches_loop():
    g = torch.Generator().manual_seed(5)
    for _ in range(20):
        f = torch.randn(2, 8, 8, generator=g, dtype=torch.float64) * 2
        b = torch.randn(2, 8, 8, generator=g, dtype=torch.float64) * 2
        ref = occlusion_loop(f.numpy(), b.numpy())
        assert np.array_equal(occlusion_mask(f, b).numpy(), ref)


def test_warping_error_matches_loop():
    g = torch.Generator().manual_seed(6)
    for _ in range(10):
        a, b = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
        f = torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
        m = (torch.rand(8, 8, generator=g) > 0.3).double()
        ref = warping_error_loop(a.numpy(), b.numpy(), f.numpy(), m.numpy())
        assert pair_warping_error(a, b, f, m) == pytest.approx(ref, rel=1e-10)


def test_empty_mask_skipped():
    frames = torch.rand(3, 3, 8, 8)
    flows = [torch.zeros(2, 8, 8)] * 2
    masks = [torch.zeros(8, 8), torch.ones(8, 8)]
    res = warping_errors(frames, flows, masks)
    assert res.skipped == [0]
    assert res.per_pair[0] is None
    assert res.mean == pytest.approx(res.per_pair[1], abs=1e-12)


def test_monotone_in_noise():
    base = render_sequence(SceneSpec(frames=4, height=32, width=32, sprite=SpriteSpec(center=(12.0, 15.0), radius=5.0)))
    flows = base.consecutive_flows()
    masks = [torch.ones(32, 32)] * 3
    wins = 0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        noise = torch.randn(base.frames.shape, generator=g)
        e1 = warping_error(base.frames + 0.02 * noise, flows, masks)
        e2 = warping_error(base.frames + 0.05 * noise, flows, masks)
        wins += e2 > e1
    assert wins == 20


@given(st.integers(0, 7))
def test_xt_slice_static_rows(y):
    frame = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(y))
    sl = xt_slice(frame.expand(5, 3, 8, 8), y)
    assert sl.shape == (3, 5, 8)
    assert torch.equal(sl, sl[:, :1].expand_as(sl))


def test_xt_slice_follows_motion():
    video = render_sequence(SceneSpec(frames=8, velocity=(2.0, 0.0)))
    sl = xt_slice(video.frames, 10)
    assert sl.shape[1] == 8
    # away from the sprite the background shifts by the known velocity
    for t in range(7):
        assert torch.allclose(sl[:, t + 1, 50:62], sl[:, t, 48:60], atol=1e-4)


def test_xt_slice_rejects_bad_row(tmp_path):
    with pytest.raises(ValueError):
        xt_slice(torch.zeros(2, 3, 4, 4), 4)
    save_xt_slice(tmp_path / "s.png", torch.rand(6, 3, 4, 5), 2)
    assert load_frame(tmp_path / "s.png").shape == (3, 6, 5)


def test_similarity_to_direct():
    d = torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert similarity_to_direct(d, d) == 0.0
    noisy = d + 0.05 * torch.randn(d.shape, generator=torch.Generator().manual_seed(1))
    assert similarity_to_direct(noisy, d) > 0
    with pytest.raises(ValueError):
        similarity_to_direct(d[:2], d)


def test_report_round_trip(tmp_path):
    rep = EvalReport(warping_errors=[0.1, None, 0.3], mean_warping_error=0.2, similarity_to_direct=0.01,
                     inversion_psnr=[31.0, 32.0], skipped_pairs=[1], config={"b": 1, "a": 2}, seed=3)
    rep.write(tmp_path)
    text = (tmp_path / "report.json").read_text()
    assert list(json.loads(text)) == sorted(json.loads(text))
    assert EvalReport.from_dict(json.loads(text)) == rep
    logged = [v for v in rep.warping_errors if v is not None]
    assert abs(rep.mean_warping_error - sum(logged) / len(logged)) < 1e-9
    assert (tmp_path / "report.csv").exists()
