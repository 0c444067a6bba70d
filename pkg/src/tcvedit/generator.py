"""Toy layered generator with per-layer latent modulation (W+ analog).

A learned 4x4 constant is pushed through ``n_blocks`` upsample-conv blocks.
Every block holds two synthesis layers; each synthesis layer is modulated
(per-channel scale and shift) by its own latent row, so a latent stack has
``2 * n_blocks`` rows. Each layer also owns a learned spatial map injected
with per-channel strengths, mirroring the noise inputs of style-based
generators.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import containers

PARAMS_MAGIC = b"TCVG"
LATENT_MAGIC = b"TCVW"
MAX_LAYER_NORM = 100.0


class FrozenLayerError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    latent_dim: int = 64
    base_channels: int = 64
    channels: tuple[int, ...] = (48, 32, 24, 16)
    mod_gain: float = 0.5
    noise_init: float = 0.1

    def __post_init__(self):
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of two >= 8")
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"need {self.n_blocks} block widths for resolution {self.resolution}")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution // 4))

    @property
    def n_layers(self) -> int:
        return 2 * self.n_blocks

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


SMALL_CONFIG = GeneratorConfig(resolution=16, latent_dim=8, base_channels=8, channels=(8, 6))


class SynthesisLayer(nn.Module):
    def __init__(self, cin: int, cout: int, res: int, latent_dim: int, upsample: bool,
                 cfg: GeneratorConfig, g: torch.Generator):
        super().__init__()
        self.upsample = upsample
        # weights are stored at unit variance and scaled at run time (equalised learning rate)
        self.w_gain = math.sqrt(2.0 / (9 * cin))
        self.a_gain = cfg.mod_gain / math.sqrt(latent_dim)
        self.weight = nn.Parameter(torch.randn(cout, cin, 3, 3, generator=g))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Parameter(torch.randn(2 * cout, latent_dim, generator=g))
        self.affine_bias = nn.Parameter(torch.zeros(2 * cout))
        self.spatial = nn.Parameter(torch.randn(1, res, res, generator=g))
        self.spatial_strength = nn.Parameter(torch.full((cout,), cfg.noise_init))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), self.weight * self.w_gain, self.bias)
        x = x + self.spatial_strength[None, :, None, None] * self.spatial[None]
        style = F.linear(w, self.affine * self.a_gain, self.affine_bias)
        scale, shift = style.chunk(2, dim=-1)
        x = x * (1.0 + scale[..., None, None]) + shift[..., None, None]
        return F.leaky_relu(x, 0.2)


class Generator(nn.Module):
    """Parameters plus per-layer freeze flags.

    Layer ``i`` owns ``layers.i.*``; the constant input belongs to layer 0
    and the RGB head to the last layer.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.const = nn.Parameter(torch.randn(1, config.base_channels, 4, 4, generator=g))
        layers = []
        cin, res = config.base_channels, 4
        for cout in config.channels:
            res *= 2
            layers.append(SynthesisLayer(cin, cout, res, config.latent_dim, True, config, g))
            layers.append(SynthesisLayer(cout, cout, res, config.latent_dim, False, config, g))
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.rgb_gain = 1.0 / math.sqrt(cin)
        self.to_rgb = nn.Parameter(torch.randn(3, cin, generator=g))
        self.to_rgb_bias = nn.Parameter(torch.zeros(3))
        self.frozen: frozenset[int] = frozenset()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def latent_shape(self) -> tuple[int, int]:
        return (self.n_layers, self.config.latent_dim)

    def layer_of(self, name: str) -> int:
        if name == "const":
            return 0
        if name.startswith("to_rgb"):
            return self.n_layers - 1
        return int(name.split(".")[1])

    def freeze_last(self, k: int) -> "Generator":
        if not 0 <= k <= self.n_layers:
            raise ValueError(f"cannot freeze {k} of {self.n_layers} layers")
        self.frozen = frozenset(range(self.n_layers - k, self.n_layers))
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.layer_of(n) not in self.frozen]

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters() if self.layer_of(n) in self.frozen}

    def check_frozen(self, before: dict[str, torch.Tensor]) -> None:
        params = dict(self.named_parameters())
        for n, t in before.items():
            if not torch.equal(params[n].detach(), t):
                raise FrozenLayerError(f"frozen parameter {n} (layer {self.layer_of(n)}) was modified")

    def set_parameter(self, name: str, value: torch.Tensor) -> None:
        """Overwrite one parameter; frozen layers refuse the write."""
        if self.layer_of(name) in self.frozen:
            raise FrozenLayerError(f"layer {self.layer_of(name)} is frozen; refusing to modify {name}")
        with torch.no_grad():
            dict(self.named_parameters())[name].copy_(value)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        batched = w.ndim == 3
        if not batched:
            w = w[None]
        if tuple(w.shape[1:]) != self.latent_shape():
            raise ValueError(f"latent shape {tuple(w.shape[1:])} does not match generator {self.latent_shape()}")
        if not torch.isfinite(w).all():
            raise ValueError("non-finite latent codes")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for i, layer in enumerate(self.layers):
            x = layer(x, w[:, i])
        rgb = torch.einsum("oc,nchw->nohw", self.to_rgb * self.rgb_gain, x) + self.to_rgb_bias[None, :, None, None]
        out = torch.sigmoid(rgb)
        return out if batched else out[0]

    def clone(self) -> "Generator":
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters()}

    def digest(self) -> str:
        return containers.digest(PARAMS_MAGIC, self.snapshot(), self._meta())

    def _meta(self) -> dict:
        return {"config": self.config.to_dict(), "seed": self.seed, "frozen": sorted(self.frozen)}


def generate(w: torch.Tensor, gen: Generator) -> torch.Tensor:
    """Frame(s) in [0, 1] for a latent stack ``(L, D)`` or batch ``(N, L, D)``."""
    return gen(w)


def same_parameters(a: Generator, b: Generator) -> bool:
    sa, sb = a.snapshot(), b.snapshot()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def check_latents(w: torch.Tensor) -> None:
    if not torch.isfinite(w).all():
        raise ValueError("non-finite latent codes")
    norms = torch.linalg.vector_norm(w, dim=-1)
    if float(norms.max()) > MAX_LAYER_NORM:
        raise ValueError(f"latent layer norm {float(norms.max()):.1f} exceeds {MAX_LAYER_NORM}")


def save_generator(path: str | Path, gen: Generator) -> None:
    containers.write(path, PARAMS_MAGIC, gen.snapshot(), gen._meta())


def load_generator(path: str | Path) -> Generator:
    tensors, meta = containers.read(path, PARAMS_MAGIC)
    gen = Generator(GeneratorConfig.from_dict(meta["config"]), meta["seed"])
    gen.load_state_dict(tensors)
    gen.frozen = frozenset(meta["frozen"])
    return gen


def save_latents(path: str | Path, latents: torch.Tensor) -> None:
    containers.write(path, LATENT_MAGIC, {"latents": latents}, {"shape": list(latents.shape)})


def load_latents(path: str | Path) -> torch.Tensor:
    tensors, _ = containers.read(path, LATENT_MAGIC)
    return tensors["latents"]
