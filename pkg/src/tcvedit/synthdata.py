"""Synthetic videos with exact ground-truth flow and occlusion labels.

Frames are rendered from band-limited sinusoid textures under per-frame
affine motion, so backward warping with the analytic flow is near exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .flow import flow_filename, write_flow
from .imaging import save_frame, save_frames

KINDS = ("translate", "rotate", "scale", "two_layer")
MAX_STEP = 4.0


@dataclass(frozen=True)
class SpriteSpec:
    center: tuple[float, float] = (24.0, 30.0)
    radius: float = 9.0
    color: tuple[float, float, float] = (0.85, 0.25, 0.2)
    marking: bool = False
    velocity: tuple[float, float] = (0.0, 0.0)  # two_layer only


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "translate"
    frames: int = 8
    height: int = 64
    width: int = 64
    texture_seed: int = 0
    n_waves: int = 6
    sprite: SpriteSpec = field(default_factory=SpriteSpec)
    velocity: tuple[float, float] = (2.0, 0.0)
    rotation_deg: float = 0.0  # per frame
    scale_rate: float = 1.0  # per frame

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if not 1 <= self.n_waves <= 8:
            raise ValueError("textures use between 1 and 8 sinusoids")
        if self.frames < 2:
            raise ValueError("need at least two frames")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        sprite = SpriteSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("sprite", {}).items()})
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(sprite=sprite, **d)


@dataclass
class SyntheticVideo:
    spec: SceneSpec
    frames: torch.Tensor  # (T, 3, H, W)
    flows: dict[tuple[int, int], torch.Tensor]  # (a, b) -> F_{a->b}, (2, H, W)
    occlusions: dict[tuple[int, int], torch.Tensor]  # (a, b) -> bool (H, W), True = occluded in b

    def consecutive_flows(self) -> list[torch.Tensor]:
        return [self.flows[(t, t + 1)] for t in range(len(self.frames) - 1)]


class _Texture:
    def __init__(self, seed: int, n_waves: int):
        rng = np.random.default_rng(seed)
        wavelength = rng.uniform(10.0, 28.0, n_waves)
        theta = rng.uniform(0, np.pi, n_waves)
        k = 2 * np.pi / wavelength
        self.kx = k * np.cos(theta)
        self.ky = k * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, (3, n_waves))
        amp = rng.uniform(0.3, 1.0, (3, n_waves))
        self.amp = 0.38 * amp / amp.sum(axis=1, keepdims=True)
        self.base = rng.uniform(0.4, 0.6, 3)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = x[None, ..., None] * self.kx + y[None, ..., None] * self.ky  # (1, H, W, n)
        waves = np.sin(arg + self.phase[:, None, None, :])
        return self.base[:, None, None] + (self.amp[:, None, None, :] * waves).sum(-1)


def _affine(spec: SceneSpec, t: float) -> np.ndarray:
    """3x3 matrix mapping canvas coordinates to frame-t coordinates."""
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    if spec.kind == "two_layer":
        ang, s = 0.0, 1.0
    else:
        ang = math.radians(spec.rotation_deg) * t
        s = spec.scale_rate ** t
    c, sn = math.cos(ang) * s, math.sin(ang) * s
    vx, vy = spec.velocity
    return np.array([
        [c, -sn, cx - c * cx + sn * cy + vx * t],
        [sn, c, cy - sn * cx - c * cy + vy * t],
        [0.0, 0.0, 1.0],
    ])


def _apply(m: np.ndarray, x: np.ndarray, y: np.ndarray):
    return m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]


def _sprite_alpha(sprite: SpriteSpec, x, y, center):
    r = np.hypot(x - center[0], y - center[1])
    return np.clip(sprite.radius - r + 0.5, 0.0, 1.0), r


def _sprite_color(sprite: SpriteSpec, r: np.ndarray) -> np.ndarray:
    shade = 1.0 - 0.25 * np.clip(r / max(sprite.radius, 1e-6), 0, 1) ** 2
    col = np.asarray(sprite.color)[:, None, None] * shade[None]
    if sprite.marking:
        inner = np.clip(0.45 * sprite.radius - r + 0.5, 0.0, 1.0)
        col = col * (1 - inner) + 0.08 * inner
    return col


def _sprite_center(spec: SceneSpec, t: float) -> tuple[float, float]:
    cx, cy = spec.sprite.center
    vx, vy = spec.sprite.velocity
    return cx + vx * t, cy + vy * t


def _pixel_grid(spec: SceneSpec):
    ys, xs = np.meshgrid(np.arange(spec.height, dtype=float), np.arange(spec.width, dtype=float), indexing="ij")
    return xs, ys


def _render_frame(spec: SceneSpec, texture: _Texture, t: int):
    xs, ys = _pixel_grid(spec)
    inv = np.linalg.inv(_affine(spec, t))
    cxs, cys = _apply(inv, xs, ys)
    bg = texture(cxs, cys)
    if spec.kind == "two_layer":
        alpha, r = _sprite_alpha(spec.sprite, xs, ys, _sprite_center(spec, t))
    else:
        # sprite is rigidly attached to the canvas
        alpha, r = _sprite_alpha(spec.sprite, cxs, cys, spec.sprite.center)
    img = bg * (1 - alpha) + _sprite_color(spec.sprite, r) * alpha
    return np.clip(img, 0.0, 1.0), alpha


def _flow(spec: SceneSpec, a: int, b: int, alpha_a: np.ndarray) -> np.ndarray:
    xs, ys = _pixel_grid(spec)
    m = _affine(spec, b) @ np.linalg.inv(_affine(spec, a))
    tx, ty = _apply(m, xs, ys)
    fx, fy = tx - xs, ty - ys
    if spec.kind == "two_layer":
        on_sprite = alpha_a > 0.5
        svx, svy = spec.sprite.velocity
        fx = np.where(on_sprite, svx * (b - a), fx)
        fy = np.where(on_sprite, svy * (b - a), fy)
    return np.stack([fx, fy])


def _validate(spec: SceneSpec, flows, alphas) -> None:
    for t in range(spec.frames - 1):
        for key in ((t, t + 1), (t + 1, t)):
            step = float(np.hypot(*flows[key]).max())
            if step > MAX_STEP + 1e-9:
                raise ValueError(f"motion of {step:.2f} px/frame between frames {key} exceeds {MAX_STEP} px")
    for t, alpha in enumerate(alphas):
        if alpha.max() <= 0:
            raise ValueError(f"sprite leaves the frame entirely at frame {t}")


def render_sequence(spec: SceneSpec) -> SyntheticVideo:
    texture = _Texture(spec.texture_seed, spec.n_waves)
    imgs, alphas = zip(*(_render_frame(spec, texture, t) for t in range(spec.frames)))
    flows_np, occ = {}, {}
    xs, ys = _pixel_grid(spec)
    for a in range(spec.frames):
        for b in range(spec.frames):
            if a == b:
                continue
            f = _flow(spec, a, b, alphas[a])
            flows_np[(a, b)] = f
            if spec.kind == "two_layer":
                # background pixels whose target is covered by the sprite in frame b
                cb = _sprite_center(spec, b)
                alpha_b, _ = _sprite_alpha(spec.sprite, xs + f[0], ys + f[1], cb)
                occ[(a, b)] = torch.from_numpy((alphas[a] <= 0.5) & (alpha_b > 0.5))
            else:
                occ[(a, b)] = torch.zeros(spec.height, spec.width, dtype=torch.bool)
    _validate(spec, flows_np, alphas)
    frames = torch.from_numpy(np.stack(imgs)).float()
    flows = {k: torch.from_numpy(v).float() for k, v in flows_np.items()}
    return SyntheticVideo(spec=spec, frames=frames, flows=flows, occlusions=occ)


ATTRIBUTES = ("sprite_color", "sprite_marking")
ALT_COLOR = (0.2, 0.35, 0.9)


def make_attribute_variants(spec: SceneSpec, attribute: str, alternate=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Render ``spec`` and a copy whose sprite differs in one attribute.

    ``alternate`` is the other attribute value (an RGB triple for
    ``sprite_color``, a bool for ``sprite_marking``).
    """
    if attribute == "sprite_color":
        value = ALT_COLOR if alternate is None else tuple(alternate)
        other = replace(spec, sprite=replace(spec.sprite, color=value))
    elif attribute == "sprite_marking":
        value = (not spec.sprite.marking) if alternate is None else bool(alternate)
        other = replace(spec, sprite=replace(spec.sprite, marking=value))
    else:
        raise ValueError(f"attribute must be one of {ATTRIBUTES}, got {attribute!r}")
    return render_sequence(spec).frames, render_sequence(other).frames


def write_video(directory: str | Path, video: SyntheticVideo) -> Path:
    """Frame PNGs, TCVF flows, occlusion PNGs and the scene JSON."""
    directory = Path(directory)
    save_frames(directory / "frames", video.frames)
    (directory / "flows").mkdir(parents=True, exist_ok=True)
    (directory / "occlusion").mkdir(parents=True, exist_ok=True)
    for (a, b), f in video.flows.items():
        write_flow(directory / "flows" / flow_filename(a, b), f)
    for (a, b), m in video.occlusions.items():
        save_frame(directory / "occlusion" / f"occ_{a:05d}_{b:05d}.png", m.float())
    (directory / "scene.json").write_text(json.dumps(video.spec.to_dict(), indent=2, sort_keys=True))
    return directory
