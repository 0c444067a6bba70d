"""Phase-2 sweep over the regularisation weight and step size on the in-domain benchmark.

    python3 scripts/sweep_lambda_r.py --lambda-r 0 10 200 --lr 1e-4 3e-3
"""
import argparse
import itertools
import json
import logging
from pathlib import Path

from tcvedit.benchmark import in_domain_session, run_ablation, scene_from_session
from tcvedit.session import Session, SessionConfig
from tcvedit.tuner import Phase2Config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambda-r", type=float, nargs="+", default=[0.0, 10.0, 200.0])
    ap.add_argument("--lr", type=float, nargs="+", default=[1e-4, 3e-3])
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    scene = scene_from_session(Session(SessionConfig(out=str(Path(args.out) / "scene"))))
    rows = []
    for lam, lr in itertools.product(args.lambda_r, args.lr):
        cfg = Phase2Config(lambda_r=lam, lr=lr, epochs=args.epochs)
        res = run_ablation(scene, in_domain_session(scene, args.seed), phase2=cfg)
        row = {"lambda_r": lam, "lr": lr, "warping_error": res.warping, "similarity_to_direct": res.similarity,
               "orderings": res.orderings()}
        rows.append(row)
        print(json.dumps(row))
    (Path(args.out) / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
