"""Anchor-pair sampling, flow bookkeeping and the bidirectional photometric loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .flow import FlowPair, FlowProviderConfig, estimate_pair, load_pair, pair_visibility
from .generator import Generator
from .imaging import warp
from .perceptual import PerceptualExtractor, fuse_masks, get_extractor, perceptual_difference_mask, perceptual_distance

MODES = ("in_domain", "out_of_domain")


@dataclass
class EditSession:
    """Everything the two optimisation phases need.

    ``inputs`` are the aligned input frames, ``latents`` the direct-edit
    codes and ``generator`` the direct-edit generator parameters.
    """

    inputs: torch.Tensor  # (T, 3, H, W)
    latents: torch.Tensor  # (T, L, D)
    generator: Generator
    mode: str = "in_domain"
    flow_provider: FlowProviderConfig = field(default_factory=FlowProviderConfig)
    anchor: int | None = None
    seed: int = 0
    extractor: PerceptualExtractor | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.inputs) != len(self.latents) or len(self.inputs) < 2:
            raise ValueError("need matching inputs and latents for at least two frames")
        if self.anchor is None:
            self.anchor = len(self.inputs) // 2
        if not 0 <= self.anchor < len(self.inputs):
            raise ValueError(f"anchor {self.anchor} out of range")
        if self.extractor is None:
            self.extractor = get_extractor()

    @property
    def num_frames(self) -> int:
        return len(self.inputs)

    def others(self) -> list[int]:
        return [t for t in range(self.num_frames) if t != self.anchor]


def epoch_order(session: EditSession, rng: torch.Generator) -> list[int]:
    others = session.others()
    return [others[j] for j in torch.randperm(len(others), generator=rng).tolist()]


class PairFlows:
    """Flow pairs between the anchor and sampled frames.

    File flows are read once. Builtin flows are estimated from the frames
    handed to :meth:`refresh` (normally the current outputs at the start of
    an epoch), or from the live pair when gradients go through the
    estimator.
    """

    def __init__(self, provider: FlowProviderConfig, policy: str = "recompute"):
        if policy not in ("recompute", "fixed"):
            raise ValueError("flow policy must be 'recompute' or 'fixed'")
        self.provider = provider
        self.policy = policy
        self._frames = None
        self._cache: dict[tuple[int, int], FlowPair] = {}

    @property
    def live(self) -> bool:
        return self.provider.kind == "builtin" and self.provider.flow_grad == "through_sampling"

    def refresh(self, frames: torch.Tensor) -> None:
        if self.provider.kind == "file":
            return
        if self.policy == "fixed" and self._frames is not None:
            return
        self._frames = frames.detach()
        self._cache.clear()

    def get(self, anchor: int, source: int, pair_frames: tuple[torch.Tensor, torch.Tensor] | None = None) -> FlowPair:
        if self.live and pair_frames is not None:
            frames = {anchor: pair_frames[0], source: pair_frames[1]}
            return estimate_pair(frames, anchor, source, self.provider)
        key = (anchor, source)
        if key not in self._cache:
            if self.provider.kind == "file":
                self._cache[key] = load_pair(self.provider, anchor, source)
            else:
                if self._frames is None:
                    raise RuntimeError("refresh() must be called before builtin flows are requested")
                self._cache[key] = estimate_pair(self._frames, anchor, source, self.provider)
        return self._cache[key]


@dataclass
class PairTerms:
    photo: torch.Tensor
    eps: torch.Tensor
    mask_anchor: torch.Tensor  # weights on the anchor grid (M_{i->anc})
    mask_source: torch.Tensor  # weights on the source grid (M_{anc->i})


def pair_terms(anchor_frame: torch.Tensor, source_frame: torch.Tensor, flows: FlowPair, mode: str,
               anchor_input: torch.Tensor | None = None, source_input: torch.Tensor | None = None,
               extractor: PerceptualExtractor | None = None) -> PairTerms:
    """Bidirectional masked photometric loss and consistency-error norm for one pair."""
    f_ai, f_ia = flows.forward, flows.backward
    eps_a, vis_a = pair_visibility(f_ai, f_ia)
    eps_i, vis_i = pair_visibility(f_ia, f_ai)
    if mode == "in_domain":
        if anchor_input is None or source_input is None:
            raise ValueError("in-domain masks need the aligned input frames")
        m_a = fuse_masks(vis_a, perceptual_difference_mask(anchor_frame, anchor_input, extractor))
        m_i = fuse_masks(vis_i, perceptual_difference_mask(source_frame, source_input, extractor))
    else:
        m_a, m_i = vis_a, vis_i
    warped_i, inside_a = warp(source_frame, f_ai)
    warped_a, inside_i = warp(anchor_frame, f_ia)
    # samples clamped at the border carry no information about consistency
    m_a = (m_a * inside_a).detach()
    m_i = (m_i * inside_i).detach()
    photo = (perceptual_distance(anchor_frame, warped_i, m_a, extractor)
             + perceptual_distance(source_frame, warped_a, m_i, extractor))
    eps = eps_a.mean() + eps_i.mean()
    return PairTerms(photo=photo, eps=eps, mask_anchor=m_a, mask_source=m_i)
