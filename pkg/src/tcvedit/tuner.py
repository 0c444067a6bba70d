"""Phase 2: generator finetuning with the latents held at their refined values."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .generator import Generator
from .perceptual import perceptual_difference_mask, perceptual_distance
from .refiner import write_loss_log
from .rng import substream
from .temporal import EditSession, PairFlows, epoch_order, pair_terms

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "pair", "L_photo", "L_eps", "L_r", "L_M", "total")
PRESERVATION_BOUND = 0.05  # extractor units


class TunerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Phase2Config:
    mode: str = "in_domain"
    lambda_eps: float = 10.0
    lambda_r: float = 200.0
    lambda_m: float = 1.0
    lambda_l2_r: float = 1.0
    alpha_interp: float = 0.5
    lr: float = 1e-4
    epochs: int = 5
    freeze_last_k: int | None = None  # None: half the layers out-of-domain, none in-domain
    flow_policy: str = "recompute"

    def __post_init__(self):
        if self.mode not in ("in_domain", "out_of_domain"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("lambda_eps", "lambda_r", "lambda_m", "lambda_l2_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.alpha_interp <= 1.0:
            raise ValueError("alpha_interp must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "Phase2Config":
        base = {"mode": mode}
        if mode == "out_of_domain":
            base["lr"] = 8e-4
        return cls(**{**base, **overrides})

    def frozen_layers(self, n_layers: int) -> int:
        if self.freeze_last_k is not None:
            return self.freeze_last_k
        return n_layers // 2 if self.mode == "out_of_domain" else 0

    def to_dict(self) -> dict:
        return asdict(self)


def interpolation_codes(w_hat: torch.Tensor, alpha_interp: float, rng: torch.Generator | None = None) -> torch.Tensor:
    """Step ``alpha_interp`` from each code towards a Gaussian draw (unit direction, global norm over L x D)."""
    w_z = torch.randn(w_hat.shape, generator=rng, dtype=torch.float64).to(w_hat.dtype)
    gap = torch.linalg.vector_norm((w_z - w_hat).reshape(-1, w_hat.shape[-2] * w_hat.shape[-1]), dim=-1)
    while bool((gap < 1e-8).any()):
        w_z = torch.randn(w_hat.shape, generator=rng, dtype=torch.float64).to(w_hat.dtype)
        gap = torch.linalg.vector_norm((w_z - w_hat).reshape(-1, w_hat.shape[-2] * w_hat.shape[-1]), dim=-1)
    gap = gap.reshape(*w_hat.shape[:-2], 1, 1)
    return w_hat + alpha_interp * (w_z - w_hat) / gap


def local_reg_loss(w_hat: torch.Tensor, gen_old: Generator, gen_new: Generator, rng: torch.Generator | None = None,
                   alpha_interp: float = 0.5, lambda_l2: float = 1.0, extractor=None) -> torch.Tensor:
    """Keep ``gen_new`` close to ``gen_old`` on codes near ``w_hat``."""
    w_r = interpolation_codes(w_hat.detach(), alpha_interp, rng)
    with torch.no_grad():
        x_old = gen_old(w_r)
    x_new = gen_new(w_r)
    pd = perceptual_distance(x_new, x_old, extractor=extractor)
    mse = ((x_new - x_old) ** 2).mean(dim=(-3, -2, -1))
    return (pd + lambda_l2 * mse).mean()


def edit_preservation(gen_old: Generator, gen_new: Generator, latents: torch.Tensor, direction: torch.Tensor,
                      strength: float = 1.0, extractor=None) -> float:
    """Mean perceptual distance between the two generators under a held-out latent edit."""
    w = latents + strength * direction.to(latents.dtype)
    with torch.no_grad():
        return float(perceptual_distance(gen_new(w), gen_old(w), extractor=extractor).mean())


def masked_input_loss(edited: torch.Tensor, input_frame: torch.Tensor, m_pd: torch.Tensor,
                      extractor=None) -> torch.Tensor:
    """Perceptual distance to the input, switched off where the edit is (``1 - M_PD``)."""
    return perceptual_distance(edited, input_frame, (1.0 - m_pd).detach(), extractor)


@dataclass
class Phase2Loss:
    total: torch.Tensor
    photo: torch.Tensor
    eps: torch.Tensor
    reg: torch.Tensor
    input: torch.Tensor

    def row(self) -> dict:
        return {k: float(v.detach()) for k, v in (("L_photo", self.photo), ("L_eps", self.eps), ("L_r", self.reg),
                                                  ("L_M", self.input), ("total", self.total))}


def phase2_loss(pair: tuple[int, int], session: EditSession, latents: torch.Tensor, gen: Generator,
                gen_old: Generator, flows: PairFlows, config: Phase2Config,
                rng: torch.Generator | None = None) -> Phase2Loss:
    anc, i = pair
    if anc == i:
        raise ValueError("pair must join two different frames")
    w = latents[[anc, i]]
    frames = gen(w)
    flow_pair = flows.get(anc, i, (frames[0], frames[1]))
    inputs = session.inputs[[anc, i]]
    terms = pair_terms(frames[0], frames[1], flow_pair, config.mode, inputs[0], inputs[1], session.extractor)
    zero = frames.new_zeros(())
    reg = (local_reg_loss(w, gen_old, gen, rng, config.alpha_interp, config.lambda_l2_r, session.extractor)
           if config.lambda_r > 0 else zero)
    if config.mode == "in_domain" and config.lambda_m > 0:
        m_pd = perceptual_difference_mask(frames, inputs, session.extractor)
        l_m = masked_input_loss(frames, inputs, m_pd, session.extractor).sum()
    else:
        l_m = zero
    total = terms.photo + config.lambda_eps * terms.eps + config.lambda_r * reg + config.lambda_m * l_m
    if not torch.isfinite(total):
        raise TunerError(f"non-finite phase-2 loss on pair {pair}: photo={float(terms.photo)} "
                         f"eps={float(terms.eps)} reg={float(reg)} input={float(l_m)}")
    return Phase2Loss(total=total, photo=terms.photo, eps=terms.eps, reg=reg, input=l_m)


@dataclass
class Phase2Result:
    generator: Generator
    frames: torch.Tensor
    history: list[dict]


def run_phase2(session: EditSession, config: Phase2Config = Phase2Config(), latents: torch.Tensor | None = None,
               log_path: str | Path | None = None) -> Phase2Result:
    """Finetune a copy of the session generator; ``latents`` default to the session's direct-edit codes."""
    if config.mode != session.mode:
        raise ValueError(f"config mode {config.mode} does not match session mode {session.mode}")
    latents = (session.latents if latents is None else latents).detach()
    gen_old = session.generator.clone()
    for p in gen_old.parameters():
        p.requires_grad_(False)
    gen = session.generator.clone()
    gen.freeze_last(config.frozen_layers(gen.n_layers))
    params = gen.trainable_parameters()
    for n, p in gen.named_parameters():
        p.requires_grad_(gen.layer_of(n) not in gen.frozen)
    frozen = gen.frozen_state()

    flows = PairFlows(session.flow_provider, config.flow_policy)
    order_rng = substream(session.seed, "phase2.order")
    wz_rng = substream(session.seed, "phase2.wz")
    history: list[dict] = []
    if config.epochs > 0 and params:
        opt = torch.optim.Adam(params, lr=config.lr)
        for epoch in range(config.epochs):
            with torch.no_grad():
                flows.refresh(gen(latents))
            for i in epoch_order(session, order_rng):
                loss = phase2_loss((session.anchor, i), session, latents, gen, gen_old, flows, config, wz_rng)
                opt.zero_grad()
                loss.total.backward()
                opt.step()
                history.append({"epoch": epoch, "pair": f"{session.anchor}-{i}", **loss.row()})
    gen.check_frozen(frozen)
    for p in gen.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        frames = gen(latents)
    if log_path is not None:
        write_loss_log(log_path, history, LOG_FIELDS)
    return Phase2Result(generator=gen, frames=frames, history=history)
