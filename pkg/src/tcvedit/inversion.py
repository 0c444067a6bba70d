"""Two-stage inversion: per-frame latent optimisation, then generator finetuning."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import torch

from .generator import Generator
from .imaging import psnr
from .perceptual import PerceptualExtractor, perceptual_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InversionConfig:
    warm_steps: int = 10
    latent_steps: int = 150
    latent_lr: float = 0.05
    mse_weight: float = 0.1
    finetune_steps: int = 400
    finetune_lr: float = 0.03
    finetune_mse_weight: float = 100.0
    finetune_perceptual_weight: float = 1.0
    finetune_warmup: int = 20
    psnr_threshold: float = 20.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InversionResult:
    latents: torch.Tensor  # (T, L, D)
    generator: Generator
    psnr: list[float]
    failed: list[int] = field(default_factory=list)


def _recon_loss(out, target, mse_weight, extractor, perceptual_weight=1.0):
    loss = mse_weight * ((out - target) ** 2).mean(dim=(-3, -2, -1))
    if perceptual_weight:
        loss = loss + perceptual_weight * perceptual_distance(out, target, extractor=extractor)
    return loss


def _cosine(opt, steps, warmup=0):
    def factor(s):
        if s < warmup:
            return (s + 1) / warmup
        return 0.5 * (1 + math.cos(math.pi * min(s, steps) / steps))
    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def optimize_latents(frames: torch.Tensor, gen: Generator, init: torch.Tensor, steps: int, lr: float,
                     mse_weight: float, extractor=None, decay: bool = False) -> torch.Tensor:
    """Independent per-frame latent fits (batched; Adam is elementwise so frames do not interact)."""
    w = init.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    sched = _cosine(opt, steps) if decay else None
    for _ in range(steps):
        loss = _recon_loss(gen(w), frames, mse_weight, extractor).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched:
            sched.step()
    return w.detach()


def invert_frames(frames: torch.Tensor, gen: Generator, config: InversionConfig = InversionConfig(),
                  extractor: PerceptualExtractor | None = None) -> InversionResult:
    """Invert ``frames`` ``(T, 3, H, W)`` against a copy of ``gen``.

    Stage A warm-starts every frame from the zero code, averages the warm
    starts over the sequence, and refines each frame's code from that mean.
    Stage B finetunes the generator on all frames with the codes held fixed.
    """
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError("need a (T, 3, H, W) stack with T >= 2")
    T = frames.shape[0]
    gen = gen.clone()
    for p in gen.parameters():
        p.requires_grad_(False)

    zero = torch.zeros(T, *gen.latent_shape(), dtype=frames.dtype)
    warm = optimize_latents(frames, gen, zero, config.warm_steps, config.latent_lr, config.mse_weight, extractor)
    start = warm.mean(dim=0, keepdim=True).expand_as(warm)
    latents = optimize_latents(frames, gen, start, config.latent_steps, config.latent_lr, config.mse_weight,
                               extractor, decay=True)

    for p in gen.parameters():
        p.requires_grad_(True)
    params = gen.trainable_parameters()
    frozen = gen.frozen_state()
    if config.finetune_steps > 0 and params:
        opt = torch.optim.Adam(params, lr=config.finetune_lr)
        sched = _cosine(opt, config.finetune_steps, config.finetune_warmup)
        for _ in range(config.finetune_steps):
            loss = _recon_loss(gen(latents), frames, config.finetune_mse_weight, extractor,
                              config.finetune_perceptual_weight).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    gen.check_frozen(frozen)

    with torch.no_grad():
        recon = gen(latents)
    scores = [psnr(recon[t], frames[t]) for t in range(T)]
    failed = [t for t, s in enumerate(scores) if s < config.psnr_threshold]
    if failed:
        log.warning("inversion below %.1f dB on frames %s", config.psnr_threshold, failed)
    return InversionResult(latents=latents, generator=gen, psnr=scores, failed=failed)
