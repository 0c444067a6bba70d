import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tcvedit.imaging import (bilinear_sample, identity_grid, load_frame, load_frames, psnr, quantize,
                             save_frame, save_frames, to_uint8, warp)

from oracles import warp_loop


def test_identity_grid_samples_every_pixel(rng):
    img = torch.rand(3, 6, 5, generator=rng, dtype=torch.float64)
    out, inside = bilinear_sample(img, identity_grid(6, 5, torch.float64))
    assert torch.equal(out, img)
    assert torch.all(inside == 1)


def test_zero_flow_is_identity(rng):
    img = torch.rand(2, 3, 8, 8, generator=rng)
    out, _ = warp(img, torch.zeros(2, 2, 8, 8))
    assert torch.allclose(out, img, atol=1e-6)


def test_integer_shift():
    img = torch.arange(32, dtype=torch.float64).reshape(1, 4, 8)
    flow = torch.zeros(2, 4, 8, dtype=torch.float64)
    flow[0] = 1.0
    out, inside = warp(img, flow)
    assert torch.equal(out[0, :, :-1], img[0, :, 1:])
    assert torch.equal(inside[:, -1], torch.zeros(4, dtype=torch.float64))
    # border clamps to the last column
    assert torch.equal(out[0, :, -1], img[0, :, -1])


def test_bilinear_midpoint():
    img = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]], dtype=torch.float64)
    grid = torch.full((2, 2, 2), 0.5, dtype=torch.float64)
    out, _ = bilinear_sample(img, grid)
    assert torch.allclose(out, torch.full_like(out, 1.5))


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 6.0))
def test_warp_matches_loop_oracle(seed, scale):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
    flow = (torch.rand(2, 8, 8, generator=g, dtype=torch.float64) * 2 - 1) * scale
    out, _ = warp(img, flow)
    ref = warp_loop(img.numpy(), flow.numpy())
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)


def test_inside_mask_flags_out_of_bounds():
    flow = torch.zeros(2, 4, 4)
    flow[0, 0, 0] = -0.5
    flow[1, 3, 3] = 0.25
    _, inside = warp(torch.rand(3, 4, 4), flow)
    assert inside[0, 0] == 0 and inside[3, 3] == 0 and inside.sum() == 14


def test_grid_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        bilinear_sample(torch.rand(3, 4, 4), torch.zeros(4, 5, 2))
    with pytest.raises(ValueError):
        warp(torch.rand(3, 4, 4), torch.zeros(2, 4, 5))
    with pytest.raises(ValueError):
        bilinear_sample(torch.rand(2, 3, 4, 4), torch.zeros(3, 4, 4, 2))


def test_warp_gradients_flow_to_frame_and_flow(rng):
    img = torch.rand(3, 6, 6, generator=rng, dtype=torch.float64, requires_grad=True)
    flow = (torch.rand(2, 6, 6, generator=rng, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    out, _ = warp(img, flow)
    out.sum().backward()
    assert img.grad.abs().sum() > 0 and flow.grad.abs().sum() > 0


def test_to_uint8_rounds_half_up():
    vals = torch.tensor([0.0, 0.5 / 255, 1.5 / 255, 1.0, 1.2, -0.1], dtype=torch.float64)
    assert to_uint8(vals).tolist() == [0, 1, 2, 255, 255, 0]


def test_frame_io_round_trip(tmp_path, rng):
    frames = torch.rand(3, 3, 8, 8, generator=rng)
    save_frames(tmp_path, frames)
    back = load_frames(tmp_path)
    assert torch.allclose(back, quantize(frames), atol=1e-6)
    save_frame(tmp_path / "mask.png", torch.ones(8, 8))
    assert torch.all(load_frame(tmp_path / "mask.png") == 1)


def test_psnr():
    a = torch.zeros(3, 4, 4)
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-4)
