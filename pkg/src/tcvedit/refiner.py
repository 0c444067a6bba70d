"""Phase 1: a residual MLP over the per-layer latent codes, fitted for temporal consistency."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from . import containers
from .rng import substream
from .temporal import EditSession, PairFlows, epoch_order, pair_terms

log = logging.getLogger(__name__)

REFINER_MAGIC = b"TCVR"
LOG_FIELDS = ("epoch", "pair", "L_photo", "L_rf", "L_eps", "total")


class RefinerError(RuntimeError):
    pass


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling; ``lr_mul`` shrinks the effective step size."""

    def __init__(self, cin: int, cout: int, lr_mul: float, g: torch.Generator, zero: bool = False):
        super().__init__()
        w = torch.zeros(cout, cin) if zero else torch.randn(cout, cin, generator=g) / lr_mul
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout))
        self.scale = lr_mul / cin ** 0.5
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ (self.weight * self.scale).t() + self.bias * self.lr_mul


class LatentRefiner(nn.Module):
    """One MLP shared by all latent layers, told apart by a learned layer embedding.

    The output layer starts at zero, so a fresh refiner is an exact no-op.
    """

    def __init__(self, num_layers: int, latent_dim: int, alpha: float = 0.04, embed_dim: int = 16,
                 hidden: int = 128, depth: int = 4, lr_mul: float = 1.0, seed: int = 0):
        super().__init__()
        self.num_layers, self.latent_dim, self.alpha = num_layers, latent_dim, float(alpha)
        self.embed_dim, self.hidden, self.depth, self.lr_mul, self.seed = embed_dim, hidden, depth, lr_mul, seed
        g = torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(torch.randn(num_layers, embed_dim, generator=g))
        layers: list[nn.Module] = []
        width = latent_dim + embed_dim
        for _ in range(depth):
            layers += [EqualLinear(width, hidden, lr_mul, g), nn.LeakyReLU(0.2)]
            width = hidden
        self.body = nn.Sequential(*layers)
        self.head = EqualLinear(hidden, latent_dim, lr_mul, g, zero=True)

    def residual(self, w: torch.Tensor) -> torch.Tensor:
        if tuple(w.shape[-2:]) != (self.num_layers, self.latent_dim):
            raise ValueError(f"latents {tuple(w.shape)} do not match refiner ({self.num_layers}, {self.latent_dim})")
        emb = self.embedding.to(w.dtype).expand(*w.shape[:-1], self.embed_dim)
        return self.head(self.body(torch.cat([w, emb], dim=-1)))

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return refine(w, self)

    def meta(self) -> dict:
        return {"num_layers": self.num_layers, "latent_dim": self.latent_dim, "alpha": self.alpha,
                "embed_dim": self.embed_dim, "hidden": self.hidden, "depth": self.depth, "lr_mul": self.lr_mul,
                "seed": self.seed}


def refine(w: torch.Tensor, refiner: LatentRefiner) -> torch.Tensor:
    """``W + alpha * f(W)``."""
    if refiner.alpha == 0.0:
        return w.clone()
    res = refiner.residual(w)
    if not torch.isfinite(res).all():
        bad = (~torch.isfinite(res)).reshape(-1, *res.shape[-2:]).any(dim=-1).nonzero().tolist()
        raise RefinerError(f"non-finite refiner residual at (frame, layer) {bad[:8]}")
    return w + refiner.alpha * res


def save_refiner(path: str | Path, refiner: LatentRefiner) -> None:
    containers.write(path, REFINER_MAGIC, dict(refiner.state_dict()), refiner.meta())


def load_refiner(path: str | Path) -> LatentRefiner:
    tensors, meta = containers.read(path, REFINER_MAGIC)
    ref = LatentRefiner(**meta)
    ref.load_state_dict(tensors)
    return ref


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 10
    lr: float = 0.05
    alpha: float = 0.04
    lr_mul: float = 1.0
    lambda_rf: float = 0.1
    lambda_eps: float = 10.0
    flow_policy: str = "recompute"

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "Phase1Config":
        base = {} if mode == "in_domain" else {"epochs": 5, "lr": 0.005}
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Phase1Loss:
    total: torch.Tensor
    photo: torch.Tensor
    rf: torch.Tensor
    eps: torch.Tensor

    def row(self) -> dict:
        return {k: float(v.detach()) for k, v in
                (("L_photo", self.photo), ("L_rf", self.rf), ("L_eps", self.eps), ("total", self.total))}


def phase1_loss(pair: tuple[int, int], session: EditSession, refiner: LatentRefiner, flows: PairFlows,
                config: Phase1Config = Phase1Config()) -> Phase1Loss:
    """``L_photo + lambda_rf * L_rf + lambda_eps * L_eps`` for one (anchor, source) pair."""
    anc, i = pair
    if anc == i:
        raise ValueError("pair must join two different frames")
    w = session.latents[[anc, i]]
    residual = refiner.residual(w)
    frames = session.generator(w + refiner.alpha * residual)
    flow_pair = flows.get(anc, i, (frames[0], frames[1]))
    terms = pair_terms(frames[0], frames[1], flow_pair, session.mode, session.inputs[anc], session.inputs[i],
                       session.extractor)
    rf = residual[0].abs().mean() + residual[1].abs().mean()
    total = terms.photo + config.lambda_rf * rf + config.lambda_eps * terms.eps
    if not torch.isfinite(total):
        raise RefinerError(f"non-finite phase-1 loss on pair {pair}: photo={float(terms.photo)} "
                           f"rf={float(rf)} eps={float(terms.eps)}")
    return Phase1Loss(total=total, photo=terms.photo, rf=rf, eps=terms.eps)


@dataclass
class Phase1Result:
    latents: torch.Tensor
    refiner: LatentRefiner
    history: list[dict]


def new_refiner(session: EditSession, config: Phase1Config) -> LatentRefiner:
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=substream(session.seed, "phase1.init")))
    L, D = session.latents.shape[-2:]
    return LatentRefiner(L, D, alpha=config.alpha, lr_mul=config.lr_mul, seed=seed).to(session.latents.dtype)


def run_phase1(session: EditSession, config: Phase1Config = Phase1Config(), refiner: LatentRefiner | None = None,
               log_path: str | Path | None = None) -> Phase1Result:
    """Fit the refiner over anchor-centred pairs and return refined codes for every frame."""
    refiner = refiner if refiner is not None else new_refiner(session, config)
    gen = session.generator
    grads = [p.requires_grad for p in gen.parameters()]
    for p in gen.parameters():
        p.requires_grad_(False)
    flows = PairFlows(session.flow_provider, config.flow_policy)
    rng = substream(session.seed, "phase1.order")
    opt = torch.optim.Adam(refiner.parameters(), lr=config.lr)
    history: list[dict] = []
    rises, prev = 0, None
    try:
        for epoch in range(config.epochs):
            with torch.no_grad():
                flows.refresh(gen(refine(session.latents, refiner)))
            epoch_total = 0.0
            order = epoch_order(session, rng)
            for i in order:
                loss = phase1_loss((session.anchor, i), session, refiner, flows, config)
                opt.zero_grad()
                loss.total.backward()
                opt.step()
                history.append({"epoch": epoch, "pair": f"{session.anchor}-{i}", **loss.row()})
                epoch_total += history[-1]["total"]
            epoch_total /= len(order)
            rises = rises + 1 if prev is not None and epoch_total > prev else 0
            if rises >= 3:
                log.warning("phase-1 loss rose for %d consecutive epochs (now %.6f)", rises, epoch_total)
            prev = epoch_total
    finally:
        for p, g in zip(gen.parameters(), grads):
            p.requires_grad_(g)
    with torch.no_grad():
        latents = refine(session.latents, refiner)
    if log_path is not None:
        write_loss_log(log_path, history, LOG_FIELDS)
    return Phase1Result(latents=latents, refiner=refiner, history=history)


def write_loss_log(path: str | Path, rows: list[dict], fields) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
