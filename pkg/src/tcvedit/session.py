"""Session orchestration: synth -> align -> invert -> edit -> phase1 -> phase2 -> unalign -> eval.

Every stage writes its artifacts under ``<out>/<stage>/`` and finishes by
writing ``stage.json``. Stages read their inputs back from disk, so a
resumed run computes exactly what a fresh run would.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import containers
from .align import AlignTransform, align, unalign
from .edits import EditSpec, apply_in_domain_edit, apply_out_of_domain_edit, data_driven_direction, direction_library
from .flow import FlowProviderConfig, estimate_flow, load_flow
from .generator import Generator, GeneratorConfig, load_generator, load_latents, save_generator, save_latents
from .imaging import load_frames, save_frames
from .inversion import InversionConfig, invert_frames
from .metrics import EvalReport, evaluation_geometry, similarity_to_direct, warping_errors
from .refiner import Phase1Config, run_phase1, save_refiner
from .rng import stream_seed, substream
from .synthdata import SceneSpec, make_attribute_variants, render_sequence, write_video
from .temporal import EditSession
from .tuner import Phase2Config, run_phase2

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("synth", "align", "invert", "edit", "phase1", "phase2", "unalign", "eval")
FRAMES_MAGIC = b"TCVI"
MODE_NAMES = {"in_domain", "out_of_domain"}
# config keys each stage reads; a stage's fingerprint covers its own keys and all upstream ones
STAGE_KEYS = {
    "synth": ("frames", "flows", "scene"),
    "align": ("align_transform", "generator"),
    "invert": ("generator_seed", "inversion"),
    "edit": ("edit", "seed"),
    "phase1": ("phase1", "anchor", "flow_provider"),
    "phase2": ("phase2",),
    "unalign": (),
    "eval": (),
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _build(cls, data: dict | None, what: str, **fixed):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**{**data, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass
class SessionConfig:
    """Everything a run depends on; a run is reproducible from this plus ``seed``.

    ``frames``/``flows`` point at an existing frame directory and optional
    TCVF flow directory; when ``frames`` is unset the ``scene`` is rendered.
    ``edit.direction`` is ``"none"``, ``"library:<k>"`` or ``"data:<attribute>"``.
    ``phase1``/``phase2`` hold overrides of the per-mode defaults.
    """

    seed: int = 0
    out: str = "run"
    frames: str | None = None
    flows: str | None = None
    scene: dict | None = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    generator_seed: int = 0
    inversion: dict = field(default_factory=dict)
    edit: dict = field(default_factory=lambda: {"kind": "in_domain", "per_frame_noise_sigma": 0.1})
    phase1: dict = field(default_factory=dict)
    phase2: dict = field(default_factory=dict)
    anchor: int | None = None
    align_transform: str | None = None
    flow_provider: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.frames is None and self.scene is None:
            raise ConfigError("need either a frame directory or a synthetic scene")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        # validate eagerly so bad configs fail before any stage runs
        self.scene_spec()
        self.generator_config()
        self.inversion_config()
        self.edit_fields()
        self.phase1_config()
        self.phase2_config()
        self.provider_config()

    # -- typed views -------------------------------------------------------
    @property
    def mode(self) -> str:
        return self.edit.get("kind", "in_domain")

    def scene_spec(self) -> SceneSpec | None:
        if self.scene is None:
            return None
        try:
            return SceneSpec.from_dict(self.scene)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene: {exc}") from exc

    def generator_config(self) -> GeneratorConfig:
        return _build(GeneratorConfig, self.generator, "generator")

    def inversion_config(self) -> InversionConfig:
        return _build(InversionConfig, self.inversion, "inversion")

    def edit_fields(self) -> tuple[EditSpec, str]:
        data = dict(self.edit)
        direction = data.pop("direction", "none")
        if direction != "none" and not (direction.startswith("library:") or direction.startswith("data:")):
            raise ConfigError(f"unknown edit direction {direction!r}")
        spec = _build(EditSpec, data, "edit")
        if spec.kind not in MODE_NAMES:
            raise ConfigError(f"unknown edit kind {spec.kind!r}")
        return spec, direction

    def phase1_config(self) -> Phase1Config:
        p = dict(self.phase1)
        try:
            return Phase1Config.for_mode(self.mode, **p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid phase1: {exc}") from exc

    def phase2_config(self) -> Phase2Config:
        p = dict(self.phase2)
        if p.pop("mode", self.mode) != self.mode:
            raise ConfigError("phase2 mode must match the edit kind")
        try:
            return Phase2Config.for_mode(self.mode, **p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid phase2: {exc}") from exc

    def provider_config(self, directory: str | None = None) -> FlowProviderConfig:
        data = dict(self.flow_provider)
        if directory is not None and self.align_transform is None:
            return FlowProviderConfig(kind="file", directory=str(directory))
        return _build(FlowProviderConfig, data, "flow_provider", kind="builtin", directory=None)

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SessionConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "SessionConfig":
        return dataclasses.replace(self, **changes)


def save_frame_stack(directory: Path, frames: torch.Tensor) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    containers.write(directory / "frames.tcvi", FRAMES_MAGIC, {"frames": frames}, {"shape": list(frames.shape)})
    save_frames(directory / "frames", frames)


def load_frame_stack(directory: Path) -> torch.Tensor:
    tensors, _ = containers.read(directory / "frames.tcvi", FRAMES_MAGIC)
    return tensors["frames"]


class Session:
    def __init__(self, config: SessionConfig):
        self.config = config
        self.out = Path(config.out)
        self.timings: dict[str, float] = {}

    # -- bookkeeping ---------------------------------------------------------
    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def fingerprint(self, stage: str) -> str:
        data = self.config.to_dict()
        keys = [k for s in STAGES[:STAGES.index(stage) + 1] for k in STAGE_KEYS[s]]
        blob = json.dumps({k: data[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def done(self, stage: str) -> bool:
        marker = self.stage_dir(stage) / "stage.json"
        if not marker.exists():
            return False
        return json.loads(marker.read_text()).get("config") == self.fingerprint(stage)

    def invalidate(self, stage: str) -> None:
        """Remove ``stage`` and everything downstream of it."""
        for s in STAGES[STAGES.index(stage):]:
            shutil.rmtree(self.stage_dir(s), ignore_errors=True)

    def ensure(self, stage: str) -> None:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        stale = False
        for s in STAGES[:STAGES.index(stage) + 1]:
            if stale or not self.done(s):
                self._run(s)
                stale = True

    def _run(self, stage: str) -> None:
        d = self.stage_dir(stage)
        shutil.rmtree(d, ignore_errors=True)
        d.mkdir(parents=True)
        start = time.perf_counter()
        try:
            info = getattr(self, f"_stage_{stage}")(d) or {}
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        elapsed = time.perf_counter() - start
        self.timings[stage] = elapsed
        log.info("stage %s finished in %.2f s", stage, elapsed)
        marker = {"stage": stage, "wall_time_s": elapsed, "config": self.fingerprint(stage), **info}
        (d / "stage.json").write_text(json.dumps(marker, sort_keys=True, indent=2))

    def run(self) -> EvalReport:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(self.config.to_json())
        self.ensure("eval")
        return self.report()

    def report(self) -> EvalReport:
        return EvalReport.from_dict(json.loads((self.stage_dir("eval") / "report.json").read_text()))

    # -- shared inputs -------------------------------------------------------
    def frames_dir(self) -> Path:
        if self.config.frames is not None:
            return Path(self.config.frames)
        return self.stage_dir("synth") / "frames"

    def flows_dir(self) -> Path | None:
        if self.config.frames is not None:
            return Path(self.config.flows) if self.config.flows else None
        return self.stage_dir("synth") / "flows"

    def transform(self, frames: int) -> AlignTransform | None:
        if self.config.align_transform is None:
            return None
        return AlignTransform.load(self.config.align_transform)

    def provider(self) -> FlowProviderConfig:
        d = self.flows_dir()
        return self.config.provider_config(str(d) if d is not None else None)

    def inputs(self) -> torch.Tensor:
        return load_frame_stack(self.stage_dir("align"))

    def edit_session(self) -> EditSession:
        d = self.stage_dir("edit")
        return EditSession(inputs=self.inputs(), latents=load_latents(d / "latents.tcvw"),
                           generator=load_generator(d / "generator.tcvg"), mode=self.config.mode,
                           flow_provider=self.provider(), anchor=self.config.anchor, seed=self.config.seed)

    # -- stages --------------------------------------------------------------
    def _stage_synth(self, d: Path):
        if self.config.frames is not None:
            return {"skipped": True}
        spec = self.config.scene_spec()
        write_video(d, render_sequence(spec))
        return {"frames": spec.frames}

    def _stage_align(self, d: Path):
        original = load_frames(self.frames_dir())
        res = self.config.generator_config().resolution
        tf = self.transform(len(original))
        if tf is None:
            if tuple(original.shape[-2:]) != (res, res):
                raise ValueError(f"frames are {tuple(original.shape[-2:])}, generator expects {res}x{res}; "
                                 "supply an align_transform")
            aligned = original
        else:
            if tf.size != (res, res):
                raise ValueError(f"alignment size {tf.size} differs from generator resolution {res}")
            aligned = torch.stack([align(original[t], tf, t) for t in range(len(original))])
        save_frame_stack(d, aligned)
        return {"frames": len(aligned)}

    def _stage_invert(self, d: Path):
        cfg = self.config
        gen = Generator(cfg.generator_config(), seed=cfg.generator_seed)
        res = invert_frames(self.inputs(), gen, cfg.inversion_config())
        save_generator(d / "generator.tcvg", res.generator)
        save_latents(d / "latents.tcvw", res.latents)
        with open(d / "psnr.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr_db"])
            for t, p in enumerate(res.psnr):
                w.writerow([t, repr(float(p))])
        return {"psnr": [float(p) for p in res.psnr], "failed": res.failed}

    def inversion_info(self) -> dict:
        return json.loads((self.stage_dir("invert") / "stage.json").read_text())

    def _direction(self, name: str, gen: Generator, latents: torch.Tensor) -> torch.Tensor | None:
        if name == "none":
            return None
        if name.startswith("library:"):
            k = int(name.split(":", 1)[1])
            lib = direction_library(tuple(latents.shape[-2:]), stream_seed(self.config.seed, "edit.direction"), k + 1)
            return lib[k]
        attribute = name.split(":", 1)[1]
        spec = self.config.scene_spec()
        if spec is None:
            raise ValueError("data-driven directions need a synthetic scene")
        a, b = make_attribute_variants(spec, attribute)
        return data_driven_direction(a, b, gen, latents)

    def _stage_edit(self, d: Path):
        src = self.stage_dir("invert")
        gen = load_generator(src / "generator.tcvg")
        latents = load_latents(src / "latents.tcvw")
        spec, direction = self.config.edit_fields()
        if spec.kind == "in_domain":
            if spec.strength != 0.0:
                spec = dataclasses.replace(spec, direction=self._direction(direction, gen, latents))
            latents = apply_in_domain_edit(latents, spec, substream(self.config.seed, "edit.noise"))
        else:
            gen = apply_out_of_domain_edit(gen, latents, self.inputs(), spec,
                                           substream(self.config.seed, "edit.order"))
        save_generator(d / "generator.tcvg", gen)
        save_latents(d / "latents.tcvw", latents)
        with torch.no_grad():
            save_frame_stack(d, gen(latents))

    def _stage_phase1(self, d: Path):
        session = self.edit_session()
        res = run_phase1(session, self.config.phase1_config(), log_path=d / "loss.csv")
        save_latents(d / "latents.tcvw", res.latents)
        save_refiner(d / "refiner.tcvr", res.refiner)
        with torch.no_grad():
            save_frame_stack(d, session.generator(res.latents))
        return {"anchor": session.anchor}

    def _stage_phase2(self, d: Path):
        session = self.edit_session()
        latents = load_latents(self.stage_dir("phase1") / "latents.tcvw")
        res = run_phase2(session, self.config.phase2_config(), latents=latents, log_path=d / "loss.csv")
        save_generator(d / "generator.tcvg", res.generator)
        save_frame_stack(d, res.frames)

    def _stage_unalign(self, d: Path):
        edited = load_frame_stack(self.stage_dir("phase2"))
        tf = self.transform(len(edited))
        if tf is None:
            out = edited
        else:
            original = load_frames(self.frames_dir())
            out = torch.stack([unalign(edited[t], original[t], tf, t) for t in range(len(edited))])
        save_frame_stack(d, out)

    def _eval_geometry(self, inputs: torch.Tensor):
        T = len(inputs)
        flows_dir = self.flows_dir()
        if flows_dir is not None and self.config.align_transform is None:
            provider = FlowProviderConfig(kind="file", directory=str(flows_dir))
            fwd = [load_flow(provider, t, t + 1) for t in range(T - 1)]
            bwd = [load_flow(provider, t + 1, t) for t in range(T - 1)]
        else:
            # flows of the input video, so edits cannot bend the evaluation geometry
            provider = self.config.provider_config()
            fwd = [estimate_flow(inputs[t], inputs[t + 1], provider, (t, t + 1)) for t in range(T - 1)]
            bwd = [estimate_flow(inputs[t + 1], inputs[t], provider, (t + 1, t)) for t in range(T - 1)]
        return evaluation_geometry(fwd, bwd)

    def _stage_eval(self, d: Path):
        inputs = self.inputs()
        final = load_frame_stack(self.stage_dir("phase2"))
        direct = load_frame_stack(self.stage_dir("edit"))
        phase1 = load_frame_stack(self.stage_dir("phase1"))
        flows, masks = self._eval_geometry(inputs)
        errs = warping_errors(final, flows, masks)
        inv = self.inversion_info()
        report = EvalReport(
            warping_errors=errs.per_pair,
            mean_warping_error=errs.mean,
            similarity_to_direct=similarity_to_direct(final, direct),
            inversion_psnr=inv["psnr"],
            skipped_pairs=errs.skipped,
            config=self.config.to_dict(),
            seed=self.config.seed,
            extra={
                "direct_warping_error": warping_errors(direct, flows, masks).mean,
                "phase1_warping_error": warping_errors(phase1, flows, masks).mean,
                "input_warping_error": warping_errors(inputs, flows, masks).mean,
                "inversion_failed_frames": inv["failed"],
            },
        )
        report.write(d)


def run_session(config: SessionConfig) -> EvalReport:
    return Session(config).run()
