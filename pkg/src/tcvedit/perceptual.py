"""Fixed random-feature perceptual distance and the masks derived from it.

The extractor is a frozen, seeded two-layer conv stack applied at several
image scales. Feature vectors are unit-normalised across channels at each
pixel and compared with squared differences, in the spirit of LPIPS but
without any pretrained weights.
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import torch
import torch.nn.functional as F

from .imaging import save_frame

CHANNELS = 16
SCALES = (1, 2, 4)
_NORM_EPS = 1e-10


class PerceptualExtractor:
    def __init__(self, seed: int = 0, scales=SCALES, channels: int = CHANNELS):
        self.seed = seed
        self.scales = tuple(scales)
        self.channels = channels
        g = torch.Generator().manual_seed(seed)
        self._weights = []
        for _ in self.scales:
            w1 = torch.randn(channels, 3, 3, 3, generator=g, dtype=torch.float64) / 27 ** 0.5
            b1 = torch.randn(channels, generator=g, dtype=torch.float64) * 0.1
            w2 = torch.randn(channels, channels, 3, 3, generator=g, dtype=torch.float64) / (9 * channels) ** 0.5
            self._weights.append((w1, b1, w2))
        self._cast: dict = {}

    def _params(self, dtype):
        if dtype not in self._cast:
            self._cast[dtype] = [tuple(t.to(dtype) for t in ws) for ws in self._weights]
        return self._cast[dtype]

    # receptive field radius in full-resolution pixels (two 3x3 convs at the coarsest scale)
    @property
    def receptive_radius(self) -> int:
        return 2 * max(self.scales) + max(self.scales)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Unit-normalised features per scale for a batch ``(N, 3, H, W)``."""
        x = 2.0 * x - 1.0
        out = []
        for s, (w1, b1, w2) in zip(self.scales, self._params(x.dtype)):
            h = F.avg_pool2d(x, s) if s > 1 else x
            h = F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), w1, b1)
            h = F.leaky_relu(h, 0.2)
            h = F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), w2)
            norm = torch.sqrt((h * h).sum(dim=1, keepdim=True) + _NORM_EPS)
            out.append(h / norm)
        return out

    def scale_maps(self, a: torch.Tensor, b: torch.Tensor) -> list[torch.Tensor]:
        """Per-scale per-pixel squared feature distance, each ``(N, H/s, W/s)``."""
        n = a.shape[0]
        feats = self.features(torch.cat([a, b]))
        return [((f[:n] - f[n:]) ** 2).sum(dim=1) for f in feats]


@lru_cache(maxsize=8)
def get_extractor(seed: int = 0) -> PerceptualExtractor:
    return PerceptualExtractor(seed)


def _flatten(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    lead = a.shape[:-3]
    return a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:]), lead


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, weights: torch.Tensor | None = None,
                        extractor: PerceptualExtractor | None = None) -> torch.Tensor:
    """Mean over scales of the (weighted) mean per-pixel feature distance.

    ``weights`` is a mask ``(..., H, W)`` multiplied into each scale's
    distance map after area downsampling. Returns one value per leading
    batch index (a 0-d tensor for single frames).
    """
    extractor = extractor or get_extractor()
    a2, b2, lead = _flatten(a, b)
    if weights is not None:
        if weights.shape[-2:] != a.shape[-2:]:
            raise ValueError("weight mask size differs from frames")
        w = weights.to(a.dtype).expand(*lead, *a.shape[-2:]).reshape(-1, 1, *a.shape[-2:])
    total = 0.0
    for s, d in zip(extractor.scales, extractor.scale_maps(a2, b2)):
        if weights is not None:
            ws = F.avg_pool2d(w, s) if s > 1 else w
            d = d * ws[:, 0]
        total = total + d.mean(dim=(-2, -1))
    return (total / len(extractor.scales)).reshape(lead)


def perceptual_difference_map(a: torch.Tensor, b: torch.Tensor,
                              extractor: PerceptualExtractor | None = None) -> torch.Tensor:
    """Full-resolution map of feature distance, averaged over scales."""
    extractor = extractor or get_extractor()
    a2, b2, lead = _flatten(a, b)
    H, W = a.shape[-2:]
    acc = 0.0
    for s, d in zip(extractor.scales, extractor.scale_maps(a2, b2)):
        if s > 1:
            d = F.interpolate(d[:, None], size=(H, W), mode="bilinear", align_corners=False)[:, 0]
        acc = acc + d
    return (acc / len(extractor.scales)).reshape(*lead, H, W)


def mask_from_difference_map(d: torch.Tensor, quantile: float = 0.95, floor: float = 1e-6) -> torch.Tensor:
    """Normalise by the 95th percentile, clamp to [0, 1], then 5x5 box smoothing."""
    H, W = d.shape[-2:]
    flat = d.reshape(-1, H * W)
    q = torch.quantile(flat, quantile, dim=1).clamp_min(floor)
    m = (flat / q[:, None]).clamp(0.0, 1.0).reshape(-1, 1, H, W)
    m = F.avg_pool2d(F.pad(m, (2, 2, 2, 2), mode="replicate"), 5, stride=1)
    return m.reshape(d.shape).clamp(0.0, 1.0)


def perceptual_difference_mask(edited: torch.Tensor, input_frame: torch.Tensor,
                               extractor: PerceptualExtractor | None = None) -> torch.Tensor:
    with torch.no_grad():
        d = perceptual_difference_map(edited.detach(), input_frame.detach(), extractor)
    return mask_from_difference_map(d)


def fuse_masks(m_vis: torch.Tensor, m_pd: torch.Tensor) -> torch.Tensor:
    if m_vis.shape != m_pd.shape:
        raise ValueError("mask shapes differ")
    return (m_vis + m_pd).clamp(0.0, 1.0)


def save_mask(path: str | Path, mask: torch.Tensor) -> None:
    save_frame(path, mask)
