"""Direct / W-only / G-only / two-phase ablation on the synthetic translate scene.

    python3 scripts/ablation.py --out runs/ablation --seeds 0 1 2
    python3 scripts/ablation.py --out runs/sepia --mode out_of_domain
"""
import argparse
import json
import logging
from pathlib import Path

from tcvedit.benchmark import in_domain_session, out_of_domain_session, run_ablation, scene_from_session
from tcvedit.edits import EditSpec
from tcvedit.session import Session, SessionConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--mode", default="in_domain", choices=("in_domain", "out_of_domain"))
    ap.add_argument("--sigma", type=float, default=0.1, help="latent noise of the in-domain edit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    # the session only supplies the rendered scene and its inversion
    scene = scene_from_session(Session(SessionConfig(out=str(Path(args.out) / "scene"))))
    rows = []
    for seed in args.seeds:
        if args.mode == "in_domain":
            res = run_ablation(scene, in_domain_session(scene, seed, args.sigma))
        else:
            s = out_of_domain_session(scene, seed, EditSpec(kind="out_of_domain"))
            res = run_ablation(scene, s, variants=("direct", "two_phase"))
        row = {"seed": seed, "warping_error": res.warping, "similarity_to_direct": res.similarity}
        if args.mode == "in_domain":
            row["orderings"] = res.orderings()
        rows.append(row)
        print(json.dumps(row))
    (Path(args.out) / f"ablation_{args.mode}.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
