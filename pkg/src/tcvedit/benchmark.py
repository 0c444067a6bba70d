"""Synthetic ablation benchmark: direct edit vs latent-only, generator-only and two-phase refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .edits import EditSpec, apply_in_domain_edit, apply_out_of_domain_edit
from .flow import FlowProviderConfig
from .generator import Generator, GeneratorConfig, load_generator, load_latents
from .inversion import InversionConfig, InversionResult, invert_frames
from .metrics import evaluation_geometry, similarity_to_direct, warping_error
from .refiner import Phase1Config, run_phase1
from .rng import substream
from .synthdata import SceneSpec, SyntheticVideo, render_sequence, write_video
from .temporal import EditSession
from .tuner import Phase2Config, run_phase2

log = logging.getLogger(__name__)

VARIANTS = ("direct", "w_only", "g_only", "two_phase")


@dataclass
class Scene:
    video: SyntheticVideo
    directory: Path
    inversion: InversionResult
    eval_flows: list[torch.Tensor]
    eval_masks: list[torch.Tensor]

    @property
    def provider(self) -> FlowProviderConfig:
        return FlowProviderConfig(kind="file", directory=str(self.directory / "flows"))

    def warping_error(self, frames: torch.Tensor) -> float:
        return warping_error(frames, self.eval_flows, self.eval_masks)


def prepare_scene(directory: str | Path, spec: SceneSpec = SceneSpec(), generator_seed: int = 0,
                  generator_config: GeneratorConfig = GeneratorConfig(),
                  inversion: InversionConfig = InversionConfig()) -> Scene:
    """Render, persist and invert a synthetic scene; evaluation uses its ground-truth flows."""
    video = render_sequence(spec)
    directory = Path(directory)
    write_video(directory, video)
    gen = Generator(generator_config, seed=generator_seed)
    return _scene(video, directory, invert_frames(video.frames, gen, inversion))


def scene_from_session(session) -> Scene:
    """Reuse the synth and invert artifacts of a :class:`~tcvedit.session.Session` run."""
    session.ensure("invert")
    d = session.stage_dir("invert")
    info = session.inversion_info()
    inv = InversionResult(latents=load_latents(d / "latents.tcvw"), generator=load_generator(d / "generator.tcvg"),
                          psnr=info["psnr"], failed=info["failed"])
    return _scene(render_sequence(session.config.scene_spec()), session.stage_dir("synth"), inv)


def _scene(video: SyntheticVideo, directory: Path, inv: InversionResult) -> Scene:
    T = len(video.frames)
    flows, masks = evaluation_geometry(video.consecutive_flows(), [video.flows[(t + 1, t)] for t in range(T - 1)])
    return Scene(video=video, directory=directory, inversion=inv, eval_flows=flows, eval_masks=masks)


@dataclass
class AblationResult:
    seed: int
    warping: dict[str, float] = field(default_factory=dict)
    similarity: dict[str, float] = field(default_factory=dict)
    frames: dict[str, torch.Tensor] = field(default_factory=dict)

    def orderings(self) -> dict[str, bool]:
        e, s = self.warping, self.similarity
        return {
            "direct > w_only": e["direct"] > e["w_only"],
            "w_only > two_phase": e["w_only"] > e["two_phase"],
            "g_only <= two_phase": e["g_only"] <= e["two_phase"],
            "lpips two_phase < g_only": s["two_phase"] < s["g_only"],
        }


def in_domain_session(scene: Scene, seed: int, sigma: float = 0.1) -> EditSession:
    inv = scene.inversion
    spec = EditSpec(kind="in_domain", per_frame_noise_sigma=sigma)
    direct = apply_in_domain_edit(inv.latents, spec, substream(seed, "edit.noise"))
    return EditSession(inputs=scene.video.frames, latents=direct, generator=inv.generator, mode="in_domain",
                       flow_provider=scene.provider, seed=seed)


def out_of_domain_session(scene: Scene, seed: int, edit: EditSpec) -> EditSession:
    inv = scene.inversion
    gen = apply_out_of_domain_edit(inv.generator, inv.latents, scene.video.frames, edit,
                                   substream(seed, "edit.order"))
    return EditSession(inputs=scene.video.frames, latents=inv.latents, generator=gen, mode="out_of_domain",
                       flow_provider=scene.provider, seed=seed)


def run_ablation(scene: Scene, session: EditSession, phase1: Phase1Config | None = None,
                 phase2: Phase2Config | None = None, variants=VARIANTS) -> AblationResult:
    phase1 = phase1 or Phase1Config.for_mode(session.mode)
    phase2 = phase2 or Phase2Config.for_mode(session.mode)
    with torch.no_grad():
        direct = session.generator(session.latents)
    out = {"direct": direct}
    if "w_only" in variants or "two_phase" in variants:
        p1 = run_phase1(session, phase1)
        with torch.no_grad():
            out["w_only"] = session.generator(p1.latents)
        if "two_phase" in variants:
            out["two_phase"] = run_phase2(session, phase2, latents=p1.latents).frames
    if "g_only" in variants:
        out["g_only"] = run_phase2(session, phase2).frames
    res = AblationResult(seed=session.seed, frames=out)
    for name, frames in out.items():
        res.warping[name] = scene.warping_error(frames)
        res.similarity[name] = similarity_to_direct(frames, direct, session.extractor)
    return res
