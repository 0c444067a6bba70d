"""Command-line entry point: ``tcvedit <command> [--config FILE] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .metrics import save_xt_slice
from .session import ConfigError, Session, SessionConfig, StageError, load_frame_stack

log = logging.getLogger("tcvedit")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INVERSION = 0, 2, 3, 4

# command -> last stage it needs
TARGETS = {"synth": "synth", "invert": "invert", "edit": "edit", "optimize": "phase2", "unalign": "unalign",
           "eval": "eval", "run": "eval"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="session config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="session directory")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    parser = argparse.ArgumentParser(prog="tcvedit", description="Temporally consistent latent-space video editing")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "invert", "edit", "unalign", "eval", "run"):
        sub.add_parser(name, parents=[common])
    opt = sub.add_parser("optimize", parents=[common], help="phase 1 then phase 2")
    only = opt.add_mutually_exclusive_group()
    only.add_argument("--phase1-only", action="store_true")
    only.add_argument("--phase2-only", action="store_true")
    opt.add_argument("--mode", choices=("in", "out"))
    sl = sub.add_parser("slice", parents=[common], help="write an x-t slice PNG")
    sl.add_argument("--y", type=int, required=True, help="image row")
    sl.add_argument("--stage", default="unalign", choices=("align", "edit", "phase1", "phase2", "unalign"))
    sl.add_argument("--output", help="PNG path (default: <out>/slice_<stage>_y<y>.png)")
    return parser


def load_config(args) -> SessionConfig:
    data = {}
    if args.config:
        cfg = SessionConfig.load(args.config)
        data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if getattr(args, "mode", None):
        data["edit"] = {**data.get("edit", {"per_frame_noise_sigma": 0.1}),
                        "kind": "in_domain" if args.mode == "in" else "out_of_domain"}
    if getattr(args, "phase1_only", False):
        data["phase2"] = {**data.get("phase2", {}), "epochs": 0}
    if getattr(args, "phase2_only", False):
        data["phase1"] = {**data.get("phase1", {}), "epochs": 0}
    return SessionConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = load_config(args)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    session = Session(config)
    session.out.mkdir(parents=True, exist_ok=True)
    (session.out / "config.json").write_text(config.to_json())
    try:
        if args.command == "slice":
            session.ensure(args.stage)
            frames = load_frame_stack(session.stage_dir(args.stage))
            path = Path(args.output or session.out / f"slice_{args.stage}_y{args.y}.png")
            save_xt_slice(path, frames, args.y)
            log.info("wrote %s", path)
        else:
            session.ensure(TARGETS[args.command])
            if args.command in ("eval", "run"):
                print(json.dumps({"mean_warping_error": session.report().mean_warping_error}))
    except (StageError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    if args.command != "synth" and session.done("invert"):
        failed = session.inversion_info()["failed"]
        if failed:
            log.error("inversion PSNR below threshold on frames %s (see %s)", failed,
                      session.stage_dir("invert") / "psnr.csv")
            return EXIT_INVERSION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
