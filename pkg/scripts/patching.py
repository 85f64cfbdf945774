"""Activation-patching traces over a fresh backdoor corpus, with per-layer aggregates.

    python scripts/patching.py --arch cnn --runs 30 --out traces.csv
"""
import argparse

import numpy as np

from hwtrigger import analysis, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="mlp")
    ap.add_argument("--runs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="traces.csv")
    args = ap.parse_args()
    setup = experiments.train(experiments.make_config(args.arch, args.seed))
    traces = []
    for r in experiments.campaign(setup, args.runs):
        if r.success:
            for i, x in zip(r.target_indices, r.targets):
                traces.append(analysis.trace(r.model, x, r.h1, r.h2[0], f"run_{r.detail['run']:04d}", i))
    analysis.write_traces_csv(traces, args.out, {"arch": args.arch, "seed": args.seed})
    if not traces:
        print("no backdoors produced")
        return
    kinds = [layer.kind for layer in setup.model.layers]
    agg = analysis.aggregate_profile(traces, normalized=True)
    print(f"{len(traces)} traces; normalized aggregate per layer:")
    for kind, v in zip(kinds, agg):
        print(f"  {kind:16s} {v:8.3f} " + "#" * int(round(40 * v / max(np.max(agg), 1e-12))))


if __name__ == "__main__":
    main()
