"""Tiny sessions on the 16x16 generator for the optimisation tests."""
import torch

from tcvedit.flow import FlowProviderConfig, flow_filename, write_flow
from tcvedit.generator import SMALL_CONFIG, Generator
from tcvedit.temporal import EditSession


def translation_flows(directory, T, v=(1.0, 0.0), size=16):
    """Constant flows F_{a->b} = (b - a) * v for every ordered pair."""
    for a in range(T):
        for b in range(T):
            if a != b:
                f = torch.zeros(2, size, size)
                f[0], f[1] = (b - a) * v[0], (b - a) * v[1]
                write_flow(directory / flow_filename(a, b), f)
    return FlowProviderConfig(kind="file", directory=str(directory))


def small_session(directory, T=4, mode="in_domain", v=(1.0, 0.0), static=False, dtype=torch.float32, seed=0,
                  noise=0.3):
    gen = Generator(SMALL_CONFIG, seed=1).to(dtype)
    g = torch.Generator().manual_seed(seed)
    base = torch.randn(1, *gen.latent_shape(), generator=g, dtype=torch.float64).to(dtype) * 0.5
    latents = base.expand(T, -1, -1).clone()
    if not static:
        latents = latents + noise * torch.randn(latents.shape, generator=g, dtype=torch.float64).to(dtype)
    with torch.no_grad():
        inputs = gen(base.expand(T, -1, -1))
    provider = translation_flows(directory, T, (0.0, 0.0) if static else v)
    return EditSession(inputs=inputs, latents=latents, generator=gen, mode=mode, flow_provider=provider, seed=seed)


def tiny_config(out, **changes) -> dict:
    """A 16x16, four-frame session that runs end to end in about a second."""
    cfg = {
        "out": str(out),
        "scene": {"frames": 4, "height": 16, "width": 16, "velocity": [1.0, 0.0],
                  "sprite": {"center": [7.0, 8.0], "radius": 3.0}},
        "generator": {"resolution": 16, "latent_dim": 8, "base_channels": 8, "channels": [8, 6]},
        "inversion": {"warm_steps": 2, "latent_steps": 10, "finetune_steps": 10, "psnr_threshold": 0.0},
        "phase1": {"epochs": 1},
        "phase2": {"epochs": 1},
    }
    cfg.update(changes)
    return cfg
