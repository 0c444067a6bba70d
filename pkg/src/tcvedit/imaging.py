"""Frames, bilinear sampling and backward warping.

Layout conventions used throughout the package (torch, channels-first):

* frame: ``(..., C, H, W)`` real tensor, values in [0, 1]
* flow:  ``(..., 2, H, W)`` pixel displacements ``(dx, dy)``
* grid:  ``(..., H, W, 2)`` absolute pixel coordinates ``(x, y)``
* mask:  ``(..., H, W)`` values in [0, 1]

Integer coordinates address pixel centres, so the identity grid samples
every pixel exactly.
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

FRAME_PATTERN = "frame_{:05d}.png"
_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def check_frame_shape(height: int, width: int) -> None:
    if height < 4 or width < 4 or height % 4 or width % 4:
        raise ValueError(f"frame size {height}x{width} must be >= 4 and divisible by 4")


def identity_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(frame: torch.Tensor, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``frame`` at ``grid`` with border clamping.

    Returns the sampled frame and a 0/1 mask that is 1 where the requested
    coordinate lies inside ``[0, W-1] x [0, H-1]``. Differentiable in both
    the frame values and the grid coordinates (coordinate gradients vanish
    where clamping is active).
    """
    *lead, C, H, W = frame.shape
    if grid.shape[-1] != 2 or tuple(grid.shape[-3:-1]) != (H, W):
        raise ValueError(f"grid shape {tuple(grid.shape)} does not match frame {tuple(frame.shape)}")
    if tuple(grid.shape[:-3]) != tuple(lead):
        raise ValueError(f"batch dims differ: frame {tuple(lead)} vs grid {tuple(grid.shape[:-3])}")
    if H < 2 or W < 2:
        raise ValueError("bilinear sampling needs at least 2x2 pixels")

    grid = grid.to(frame.dtype)
    x, y = grid[..., 0], grid[..., 1]
    inside = ((x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)).to(frame.dtype)

    xc = x.clamp(0, W - 1)
    yc = y.clamp(0, H - 1)
    # non-finite coordinates index pixel 0 and leave NaN in the weights, so they propagate
    x0 = xc.detach().nan_to_num(0.0).floor().clamp(max=W - 2)
    y0 = yc.detach().nan_to_num(0.0).floor().clamp(max=H - 2)
    fx = (xc - x0).unsqueeze(-3)
    fy = (yc - y0).unsqueeze(-3)
    x0 = x0.long()
    y0 = y0.long()

    flat = frame.reshape(-1, C, H * W)
    B = flat.shape[0]

    def corner(yy, xx):
        idx = (yy * W + xx).reshape(B, 1, H * W).expand(B, C, H * W)
        return torch.gather(flat, 2, idx).reshape(*lead, C, H, W)

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top), inside


def warp(frame: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward warp: ``out(p) = frame(p + flow(p))``."""
    if flow.shape[-3] != 2 or flow.shape[-2:] != frame.shape[-2:]:
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match frame {tuple(frame.shape)}")
    H, W = frame.shape[-2:]
    base = identity_grid(H, W, dtype=frame.dtype, device=frame.device)
    grid = base + flow.to(frame.dtype).movedim(-3, -1)
    return bilinear_sample(frame, grid)


def to_uint8(values: torch.Tensor | np.ndarray) -> np.ndarray:
    """[0,1] reals to 8-bit with round-half-up."""
    arr = values.detach().cpu().double().numpy() if isinstance(values, torch.Tensor) else np.asarray(values, float)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_frame(path: str | Path, frame: torch.Tensor) -> None:
    arr = to_uint8(frame)
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 0, -1)
    Image.fromarray(arr).save(path)


def load_frame(path: str | Path, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(np.moveaxis(arr, -1, 0).copy()).to(dtype)


def save_frames(directory: str | Path, frames: Sequence[torch.Tensor] | torch.Tensor) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        path = directory / FRAME_PATTERN.format(t)
        save_frame(path, frame)
        paths.append(path)
    return paths


def list_frames(directory: str | Path) -> list[Path]:
    found = []
    for path in Path(directory).iterdir():
        m = _FRAME_RE.match(path.name)
        if m:
            found.append((int(m.group(1)), path))
    return [p for _, p in sorted(found)]


def load_frames(directory: str | Path, dtype=torch.float32) -> torch.Tensor:
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    frames = torch.stack([load_frame(p, dtype) for p in paths])
    check_frame_shape(*frames.shape[-2:])
    return frames


def quantize(frame: torch.Tensor) -> torch.Tensor:
    """Round-trip through the 8-bit on-disk representation."""
    return torch.floor(frame.clamp(0, 1) * 255.0 + 0.5) / 255.0


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
