"""Set transformer vs. independent BCE baseline on seeded synthetic dishes.

    python3 scripts/learnability.py --seeds 0 1 2
"""

import argparse
import json
import logging

from invcook.experiments import TF_SET_TARGET_F1, run_learnability


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--kinds", nargs="+", default=["tf-set", "ff-bce"])
    p.add_argument("--target", type=float, default=TF_SET_TARGET_F1,
                   help="validation F1 that ends set-transformer training early")
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    for seed in args.seeds:
        runs = run_learnability(seed, args.kinds, target_f1={"tf-set": args.target})
        for r in runs.values():
            print(json.dumps({"seed": seed, "kind": r.kind, "f1": round(r.f1, 4), "iou": round(r.iou, 4),
                              "epochs": r.epochs, "seconds": round(r.seconds, 1)}), flush=True)


if __name__ == "__main__":
    main()
