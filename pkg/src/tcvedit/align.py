"""Affine alignment to the canonical square and feathered compositing back into the original frame."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .imaging import identity_grid

FEATHER_PX = 8.0
MIN_DET = 1e-6


@dataclass(frozen=True)
class AlignTransform:
    """Per-frame 2x3 affine maps from original-frame pixel coordinates to the aligned square."""

    matrices: torch.Tensor  # (T, 2, 3) float64
    size: tuple[int, int]  # aligned (H, W)

    def __post_init__(self):
        m = torch.as_tensor(self.matrices, dtype=torch.float64)
        if m.ndim == 2:
            m = m[None]
        if m.shape[-2:] != (2, 3):
            raise ValueError("affine matrices must be 2x3")
        det = torch.linalg.det(m[:, :, :2])
        if bool((det.abs() < MIN_DET).any()):
            bad = (det.abs() < MIN_DET).nonzero().flatten().tolist()
            raise ValueError(f"non-invertible alignment transform for frames {bad}")
        object.__setattr__(self, "matrices", m)
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))

    @classmethod
    def identity(cls, frames: int, size: tuple[int, int]) -> "AlignTransform":
        eye = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        return cls(eye.expand(frames, 2, 3).clone(), size)

    def matrix(self, t: int) -> torch.Tensor:
        return self.matrices[t if len(self.matrices) > 1 else 0]

    def inverse(self, t: int) -> torch.Tensor:
        m = self.matrix(t)
        a_inv = torch.linalg.inv(m[:, :2])
        return torch.cat([a_inv, -(a_inv @ m[:, 2:])], dim=1)

    def to_dict(self) -> dict:
        return {"matrices": self.matrices.tolist(), "size": list(self.size)}

    @classmethod
    def from_dict(cls, d: dict) -> "AlignTransform":
        return cls(torch.tensor(d["matrices"], dtype=torch.float64), tuple(d["size"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "AlignTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _apply(m: torch.Tensor, H: int, W: int, dtype) -> torch.Tensor:
    grid = identity_grid(H, W, torch.float64)
    out = grid @ m[:, :2].T + m[:, 2]
    return out.to(dtype)


def align(frame: torch.Tensor, transform: AlignTransform, t: int = 0) -> torch.Tensor:
    """Resample an original frame ``(3, h, w)`` onto the aligned square."""
    H, W = transform.size
    src = _apply(transform.inverse(t), H, W, frame.dtype)
    return _sample_any(frame, src)


def feather_alpha(coords: torch.Tensor, size: tuple[int, int], ramp: float = FEATHER_PX) -> torch.Tensor:
    """Linear ramp from 0 at the aligned square's border to 1 at ``ramp`` pixels inside it."""
    H, W = size
    x, y = coords[..., 0], coords[..., 1]
    dist = torch.minimum(torch.minimum(x, (W - 1) - x), torch.minimum(y, (H - 1) - y))
    return (dist / ramp).clamp(0.0, 1.0)


def unalign(edited: torch.Tensor, original: torch.Tensor, transform: AlignTransform, t: int = 0) -> torch.Tensor:
    """Map an edited aligned frame back into ``original`` and blend with a feathered border."""
    h, w = original.shape[-2:]
    coords = _apply(transform.matrix(t), h, w, edited.dtype)
    back = _sample_any(edited, coords)
    alpha = feather_alpha(coords, transform.size).to(edited.dtype)[None]
    return alpha * back + (1.0 - alpha) * original


def _sample_any(frame: torch.Tensor, coords: torch.Tensor):
    """Bilinear lookup where the query grid may differ in size from the frame."""
    H, W = frame.shape[-2:]
    x = coords[..., 0].clamp(0, W - 1)
    y = coords[..., 1].clamp(0, H - 1)
    x0 = x.floor().clamp(max=W - 2)
    y0 = y.floor().clamp(max=H - 2)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()

    def at(yy, xx):
        return frame[:, yy, xx]

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bottom = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy

