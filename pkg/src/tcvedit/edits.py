"""Direct (per-frame) edits: latent-space shifts and generator restyling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .generator import Generator
from .inversion import optimize_latents
from .perceptual import perceptual_distance

log = logging.getLogger(__name__)

STYLES = ("sepia", "sketch")

_SEPIA = torch.tensor([
    [0.393, 0.769, 0.189],
    [0.349, 0.686, 0.168],
    [0.272, 0.534, 0.131],
])
_LUMA = torch.tensor([0.299, 0.587, 0.114])


class EditDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class EditSpec:
    kind: str = "in_domain"  # "in_domain" | "out_of_domain"
    strength: float = 0.0
    per_frame_noise_sigma: float = 0.0
    style_target: str = "sepia"
    finetune_steps: int = 100  # out-of-domain only
    finetune_lr: float = 3e-3
    direction: torch.Tensor | None = None  # (L, D), in-domain only

    def __post_init__(self):
        if self.kind not in ("in_domain", "out_of_domain"):
            raise ValueError(f"unknown edit kind {self.kind!r}")
        if self.per_frame_noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.style_target not in STYLES:
            raise ValueError(f"style must be one of {STYLES}")


def stylize(frames: torch.Tensor, style: str) -> torch.Tensor:
    """Fixed per-pixel restyling used as the out-of-domain target."""
    if style == "sepia":
        m = _SEPIA.to(frames.dtype)
        return torch.einsum("oc,...chw->...ohw", m, frames).clamp(0.0, 1.0)
    if style == "sketch":
        luma = torch.einsum("c,...chw->...hw", _LUMA.to(frames.dtype), frames)
        gx = torch.zeros_like(luma)
        gy = torch.zeros_like(luma)
        gx[..., :, 1:-1] = 0.5 * (luma[..., :, 2:] - luma[..., :, :-2])
        gy[..., 1:-1, :] = 0.5 * (luma[..., 2:, :] - luma[..., :-2, :])
        edges = torch.sqrt(gx * gx + gy * gy)
        sketch = (1.0 - 8.0 * edges).clamp(0.0, 1.0) * (0.7 + 0.3 * luma)
        return sketch.unsqueeze(-3).expand(*luma.shape[:-2], 3, *luma.shape[-2:]).clone()
    raise ValueError(f"unknown style {style!r}")


def direction_library(shape: tuple[int, int], seed: int = 0, count: int = 4) -> list[torch.Tensor]:
    """Seeded unit-norm (Frobenius) edit directions."""
    g = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(count):
        d = torch.randn(*shape, generator=g)
        out.append(d / torch.linalg.vector_norm(d))
    return out


def data_driven_direction(frames_a: torch.Tensor, frames_b: torch.Tensor, gen: Generator,
                          latents_a: torch.Tensor | None = None, steps: int = 100, lr: float = 0.05) -> torch.Tensor:
    """Difference of mean latents between two attribute variants.

    Both variants are fitted in latent space only (``gen`` is left as is);
    ``latents_a`` may seed the fits, typically with the inversion codes.
    Returns the unnormalised mean difference ``mean(W_b) - mean(W_a)``.
    """
    for p in gen.parameters():
        p.requires_grad_(False)
    try:
        init = latents_a if latents_a is not None else torch.zeros(len(frames_a), *gen.latent_shape())
        wa = optimize_latents(frames_a, gen, init, steps, lr, 0.1)
        wb = optimize_latents(frames_b, gen, wa, steps, lr, 0.1)
    finally:
        for p in gen.parameters():
            p.requires_grad_(True)
    return (wb - wa).mean(dim=0)


def apply_in_domain_edit(latents: torch.Tensor, spec: EditSpec, rng: torch.Generator | None = None) -> torch.Tensor:
    """``W_edit_t = W_inv_t + strength * direction + eta_t`` with seeded per-frame noise."""
    if spec.kind != "in_domain":
        raise ValueError("apply_in_domain_edit needs an in_domain spec")
    out = latents.clone()
    if spec.strength != 0.0:
        if spec.direction is None:
            raise ValueError("non-zero strength needs a direction")
        out = out + spec.strength * spec.direction.to(latents.dtype)
    if spec.per_frame_noise_sigma > 0:
        noise = torch.randn(latents.shape, generator=rng, dtype=torch.float64).to(latents.dtype)
        out = out + spec.per_frame_noise_sigma * noise
    return out


def apply_out_of_domain_edit(gen: Generator, latents: torch.Tensor, frames: torch.Tensor, spec: EditSpec,
                             rng: torch.Generator | None = None) -> Generator:
    """Finetune a copy of ``gen`` towards ``stylize(frames)``.

    Steps visit one frame at a time in seeded order with no temporal term,
    so the restyling is free to drift from frame to frame.
    """
    if spec.kind != "out_of_domain":
        raise ValueError("apply_out_of_domain_edit needs an out_of_domain spec")
    edited = gen.clone()
    if spec.finetune_steps == 0:
        return edited
    targets = stylize(frames, spec.style_target)
    T = len(frames)
    frozen = edited.frozen_state()
    opt = torch.optim.Adam(edited.trainable_parameters(), lr=spec.finetune_lr)
    order: list[int] = []
    for step in range(spec.finetune_steps):
        if not order:
            order = torch.randperm(T, generator=rng).tolist()
        t = order.pop()
        out = edited(latents[t])
        loss = perceptual_distance(out, targets[t]) + ((out - targets[t]) ** 2).mean()
        if not torch.isfinite(loss):
            raise EditDivergence(f"out-of-domain finetuning diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    edited.check_frozen(frozen)
    return edited
