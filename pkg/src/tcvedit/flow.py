"""Flow fields, forward-backward consistency, visibility masks and flow providers.

Naming: ``F_{a->b}`` lives on the pixel grid of frame ``a`` and points into
frame ``b``, so ``warp(I_b, F_{a->b})`` brings ``I_b`` into the geometry of
``I_a``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import warp

FLOW_MAGIC = b"TCVF"
FLOW_VERSION = 1


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowPair:
    forward: torch.Tensor  # anc -> i
    backward: torch.Tensor  # i -> anc
    source_index: int
    anchor_index: int

    def __post_init__(self):
        if self.forward.shape != self.backward.shape:
            raise ValueError("flow pair fields must share dimensions")


@dataclass(frozen=True)
class FlowProviderConfig:
    kind: str = "builtin"  # "builtin" | "file"
    directory: str | None = None
    levels: int = 3
    iterations: int = 20
    smoothness: float = 0.05
    flow_grad: str = "none"  # "none" | "through_sampling"

    def __post_init__(self):
        if self.kind not in ("builtin", "file"):
            raise ValueError(f"unknown flow provider {self.kind!r}")
        if self.flow_grad not in ("none", "through_sampling"):
            raise ValueError(f"unknown flow_grad mode {self.flow_grad!r}")
        if self.kind == "file" and not self.directory:
            raise ValueError("file provider needs a directory")


def _check_pair(f_ab: torch.Tensor, f_ba: torch.Tensor) -> None:
    if f_ab.shape != f_ba.shape or f_ab.shape[-3] != 2:
        raise ValueError(f"flow shapes differ or are not (...,2,H,W): {tuple(f_ab.shape)} {tuple(f_ba.shape)}")


def round_trip(f_ab: torch.Tensor, f_ba: torch.Tensor):
    """Return ``(f_ab + f_ba(p + f_ab), f_ba(p + f_ab), in-bounds mask)``."""
    _check_pair(f_ab, f_ba)
    sampled, inside = warp(f_ba, f_ab)
    return f_ab + sampled, sampled, inside


def fb_consistency_error(f_ab: torch.Tensor, f_ba: torch.Tensor) -> torch.Tensor:
    """Round-trip residual ``||F_ab(p) + F_ba(p + F_ab(p))||_2`` in pixels."""
    residual, _, _ = round_trip(f_ab, f_ba)
    return torch.linalg.vector_norm(residual, dim=-3)


def visibility_mask(error_map: torch.Tensor, inside: torch.Tensor | None = None) -> torch.Tensor:
    if bool((error_map < 0).any()):
        raise ValueError("consistency error must be non-negative")
    mask = torch.exp(-10.0 * error_map)
    if inside is not None:
        mask = mask * inside
    return mask


def pair_visibility(f_ab: torch.Tensor, f_ba: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Consistency error and visibility mask on the grid of frame ``a``."""
    residual, _, inside = round_trip(f_ab, f_ba)
    eps = torch.linalg.vector_norm(residual, dim=-3)
    return eps, visibility_mask(eps, inside)


# -- file format -------------------------------------------------------------

def flow_filename(src: int, dst: int) -> str:
    return f"flow_{src:05d}_{dst:05d}.tcvf"


def write_flow(path: str | Path, flow: torch.Tensor) -> None:
    flow = flow.detach()
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError("expected a (2, H, W) flow field")
    _, H, W = flow.shape
    payload = flow.permute(1, 2, 0).contiguous().cpu().numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<III", FLOW_VERSION, H, W))
        fh.write(payload.tobytes())


def read_flow(path: str | Path, dtype=torch.float32) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise FlowError(f"{path}: bad magic {data[:4]!r}")
    version, H, W = struct.unpack("<III", data[4:16])
    if version != FLOW_VERSION:
        raise FlowError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * H * W * 2
    if len(data) != expected:
        raise FlowError(f"{path}: truncated ({len(data)} bytes, expected {expected})")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(H, W, 2)
    flow = torch.from_numpy(arr.copy()).permute(2, 0, 1).to(dtype)
    if not torch.isfinite(flow).all():
        raise FlowError(f"{path}: non-finite values")
    if float(torch.linalg.vector_norm(flow, dim=0).max()) > max(H, W):
        raise FlowError(f"{path}: displacement exceeds frame size, file is likely corrupt")
    return flow


# -- builtin estimator ---------------------------------------------------------

_HS_AVG = torch.tensor([[1.0, 2.0, 1.0], [2.0, 0.0, 2.0], [1.0, 2.0, 1.0]]) / 12.0
_BLUR = torch.tensor([1.0, 2.0, 1.0]) / 4.0


def _conv_replicate(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # x: (N,1,H,W)
    k = kernel.to(x.dtype).reshape(1, 1, *kernel.shape)
    pad = kernel.shape[-1] // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="replicate"), k)


def _gray(frame: torch.Tensor) -> torch.Tensor:
    g = frame.mean(dim=-3, keepdim=True).unsqueeze(0)
    blur = torch.outer(_BLUR, _BLUR)
    return _conv_replicate(g, blur)


def _gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    ix = 0.5 * (padded[..., 1:-1, 2:] - padded[..., 1:-1, :-2])
    iy = 0.5 * (padded[..., 2:, 1:-1] - padded[..., :-2, 1:-1])
    return ix, iy


def _refine_level(a, b, flow, iterations, alpha2):
    # a, b: (1,1,H,W); flow: (2,H,W)
    for _ in range(iterations):
        bw, _ = warp(b[0], flow)
        bw = bw.unsqueeze(0)
        ix, iy = _gradients(0.5 * (bw + a))
        it = bw - a
        u0, v0 = flow[0:1].unsqueeze(0), flow[1:2].unsqueeze(0)
        ubar = _conv_replicate(u0, _HS_AVG)
        vbar = _conv_replicate(v0, _HS_AVG)
        r = it + ix * (ubar - u0) + iy * (vbar - v0)
        denom = alpha2 + ix * ix + iy * iy
        u = ubar - ix * r / denom
        v = vbar - iy * r / denom
        flow = torch.cat([u, v], dim=1)[0]
    return flow


def builtin_flow(a: torch.Tensor, b: torch.Tensor, levels: int = 3, iterations: int = 20,
                 smoothness: float = 0.05) -> torch.Tensor:
    """Coarse-to-fine Horn-Schunck with per-iteration re-warping.

    Returns ``F_{a->b}`` such that ``warp(b, F) ~= a``. Fully deterministic.
    """
    if a.shape != b.shape:
        raise ValueError("frames must share dimensions")
    ga, gb = _gray(a), _gray(b)
    pyramid = [(ga, gb)]
    for _ in range(levels - 1):
        ga, gb = F.avg_pool2d(ga, 2), F.avg_pool2d(gb, 2)
        pyramid.append((ga, gb))
    flow = None
    for la, lb in reversed(pyramid):
        H, W = la.shape[-2:]
        if flow is None:
            flow = la.new_zeros(2, H, W)
        else:
            flow = 2.0 * F.interpolate(flow.unsqueeze(0), size=(H, W), mode="bilinear", align_corners=False)[0]
        flow = _refine_level(la, lb, flow, iterations, smoothness ** 2)
    return flow


def estimate_flow(a: torch.Tensor, b: torch.Tensor, provider: FlowProviderConfig,
                  indices: tuple[int, int] | None = None) -> torch.Tensor:
    """Flow ``F_{a->b}`` from the configured provider.

    ``indices`` names the frame pair; it is required by the file provider and
    used in error reports otherwise.
    """
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if provider.kind == "file":
        if indices is None:
            raise ValueError("file provider needs frame indices")
        flow = load_flow(provider, *indices, dtype=a.dtype)
        if flow.shape[-2:] != a.shape[-2:]:
            raise FlowError(f"flow file for {indices} has size {tuple(flow.shape[-2:])}, frames are {tuple(a.shape[-2:])}")
        return flow
    if provider.flow_grad == "through_sampling":
        flow = builtin_flow(a, b, provider.levels, provider.iterations, provider.smoothness)
    else:
        with torch.no_grad():
            flow = builtin_flow(a.detach(), b.detach(), provider.levels, provider.iterations, provider.smoothness)
    if not torch.isfinite(flow).all():
        raise FlowError(f"flow estimator diverged on frames {indices}")
    return flow


def load_flow(provider: FlowProviderConfig, src: int, dst: int, dtype=torch.float32) -> torch.Tensor:
    path = Path(provider.directory) / flow_filename(src, dst)
    if not path.exists():
        raise FlowError(f"missing flow file for frames {(src, dst)}: {path}")
    return read_flow(path, dtype=dtype)


def load_pair(provider: FlowProviderConfig, anchor: int, source: int) -> FlowPair:
    return FlowPair(forward=load_flow(provider, anchor, source), backward=load_flow(provider, source, anchor),
                    source_index=source, anchor_index=anchor)


def estimate_pair(frames, anchor: int, source: int, provider: FlowProviderConfig) -> FlowPair:
    """Both directions between the anchor and a sampled frame."""
    fwd = estimate_flow(frames[anchor], frames[source], provider, (anchor, source))
    bwd = estimate_flow(frames[source], frames[anchor], provider, (source, anchor))
    return FlowPair(forward=fwd, backward=bwd, source_index=source, anchor_index=anchor)
