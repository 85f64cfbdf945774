"""Build a backdoor corpus, then sweep every defense over it.

    python scripts/defenses.py --runs 50 --out defenses.csv
"""
import argparse
import csv

import numpy as np

from hwtrigger import defense, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", default="mlp,cnn")
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--out", default="defenses.csv")
    args = ap.parse_args()
    rows = []
    for arch in args.archs.split(","):
        setup = experiments.train(experiments.make_config(arch, args.seed))
        corpus = [r for r in experiments.campaign(setup, args.runs) if r.success]
        print(f"{arch}: corpus of {len(corpus)} backdoors, undefended {defense.undefended(corpus):.2f}")
        reports = [
            defense.defend_input_perturbation(corpus, [0] + [10 ** e for e in range(6)], args.trials, args.seed),
            defense.defend_batch_size(corpus, [1, 2, 4, 8]),
            defense.defend_downcast(corpus),
            defense.defend_finetune(corpus, setup.dataset, [0, 1, 2, 3], seed=args.seed),
        ]
        for rep in reports:
            print(f"  {rep.kind:20s} " + "  ".join(f"{v}:{r:.2f}" for v, r in zip(rep.sweep, rep.rates)))
            rows += [(arch, rep.kind, v, len(corpus), r) for v, r in zip(rep.sweep, rep.rates)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "defense", "sweep_value", "corpus_size", "remaining_success"])
        w.writerows(rows)


if __name__ == "__main__":
    np.seterr(over="ignore")
    main()
