"""Warping error, perceptual similarity to the direct edit, x-t slices and the evaluation report."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .flow import round_trip
from .imaging import to_uint8, warp
from .perceptual import perceptual_distance

log = logging.getLogger(__name__)


def occlusion_mask(f_fwd: torch.Tensor, f_bwd: torch.Tensor) -> torch.Tensor:
    """Binary non-occlusion mask on the grid of ``f_fwd``."""
    residual, sampled, _ = round_trip(f_fwd, f_bwd)
    lhs = (residual ** 2).sum(dim=-3)
    rhs = 0.01 * ((f_fwd ** 2).sum(dim=-3) + (sampled ** 2).sum(dim=-3)) + 0.5
    return (lhs < rhs).to(f_fwd.dtype)


def pair_warping_error(frame_t: torch.Tensor, frame_next: torch.Tensor, flow: torch.Tensor,
                       mask: torch.Tensor) -> float | None:
    """Masked channel-averaged squared difference; ``None`` when the mask is empty."""
    warped, inside = warp(frame_next, flow)
    m = mask.to(torch.float64) * inside.to(torch.float64)
    total = float(m.sum())
    if total == 0.0:
        return None
    sq = ((frame_t.to(torch.float64) - warped.to(torch.float64)) ** 2).mean(dim=-3)
    return float((m * sq).sum()) / total


@dataclass
class WarpingErrors:
    per_pair: list[float | None]
    skipped: list[int]

    @property
    def mean(self) -> float:
        vals = [v for v in self.per_pair if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


def warping_errors(frames: torch.Tensor, flows: list[torch.Tensor], masks: list[torch.Tensor]) -> WarpingErrors:
    """``flows[t]`` is ``F_{t->t+1}``; ``masks[t]`` the non-occlusion mask on frame ``t``."""
    if len(flows) != len(frames) - 1 or len(masks) != len(flows):
        raise ValueError("need T-1 consecutive flows and masks")
    per_pair, skipped = [], []
    for t in range(len(flows)):
        e = pair_warping_error(frames[t].detach(), frames[t + 1].detach(), flows[t], masks[t])
        if e is None:
            skipped.append(t)
            log.warning("pair %d-%d has an empty non-occlusion mask; skipped", t, t + 1)
        per_pair.append(e)
    return WarpingErrors(per_pair, skipped)


def warping_error(frames: torch.Tensor, flows: list[torch.Tensor], masks: list[torch.Tensor]) -> float:
    return warping_errors(frames, flows, masks).mean


def evaluation_geometry(fwd: list[torch.Tensor], bwd: list[torch.Tensor]) -> tuple[list, list]:
    """Consecutive flows ``F_{t->t+1}`` plus masks from their ``F_{t+1->t}`` partners."""
    return list(fwd), [occlusion_mask(f, b) for f, b in zip(fwd, bwd)]


def similarity_to_direct(out_frames: torch.Tensor, direct_frames: torch.Tensor, extractor=None) -> float:
    if len(out_frames) != len(direct_frames):
        raise ValueError("videos differ in length")
    if out_frames.shape != direct_frames.shape:
        raise ValueError("videos differ in frame size")
    with torch.no_grad():
        d = perceptual_distance(out_frames.detach(), direct_frames.detach(), extractor=extractor)
    return float(d.to(torch.float64).mean())


def xt_slice(frames: torch.Tensor, y: int) -> torch.Tensor:
    """Row ``y`` of every frame stacked over time: ``(3, T, W)``."""
    H = frames.shape[-2]
    if not 0 <= y < H:
        raise ValueError(f"row {y} outside [0, {H})")
    return frames[:, :, y, :].permute(1, 0, 2).contiguous()


def save_xt_slice(path: str | Path, frames: torch.Tensor, y: int) -> None:
    img = to_uint8(xt_slice(frames, y).permute(1, 2, 0))
    Image.fromarray(img, mode="RGB").save(path)


@dataclass
class EvalReport:
    warping_errors: list[float | None]
    mean_warping_error: float
    similarity_to_direct: float
    inversion_psnr: list[float] = field(default_factory=list)
    skipped_pairs: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "extra": self.extra,
            "inversion_psnr": self.inversion_psnr,
            "mean_warping_error": self.mean_warping_error,
            "seed": self.seed,
            "similarity_to_direct": self.similarity_to_direct,
            "skipped_pairs": self.skipped_pairs,
            "warping_errors": self.warping_errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        with open(directory / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "warping_error"])
            for t, e in enumerate(self.warping_errors):
                w.writerow([f"{t}-{t + 1}", "" if e is None else repr(e)])
            w.writerow(["mean", repr(self.mean_warping_error)])
            w.writerow(["similarity_to_direct", repr(self.similarity_to_direct)])
