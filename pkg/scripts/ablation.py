"""Instruction-decoder sanity: memorization, then full vs. ingredients-only vs. image-only.

    python3 scripts/ablation.py --seeds 0 1 2
"""

import argparse
import json
import logging

from invcook.experiments import run_ablation, run_memorization


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--skip-memorization", action="store_true")
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if not args.skip_memorization:
        memo = run_memorization(seed=args.seeds[0])
        print(json.dumps({"memorization_steps": memo.steps, "perplexity": round(memo.perplexity, 4)}),
              flush=True)
    for seed in args.seeds:
        runs = run_ablation(seed)
        print(json.dumps({"seed": seed, **{v: round(r.perplexity, 4) for v, r in runs.items()},
                          "epochs": {v: r.epochs for v, r in runs.items()}}), flush=True)


if __name__ == "__main__":
    main()
