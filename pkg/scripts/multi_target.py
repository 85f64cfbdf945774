"""Attack success against the number of simultaneous targets.

    python scripts/multi_target.py --arch mlp --runs 30 --max-targets 5
"""
import argparse
import csv

from hwtrigger import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="mlp")
    ap.add_argument("--runs", type=int, default=30)
    ap.add_argument("--max-targets", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="multi_target.csv")
    args = ap.parse_args()
    setup = experiments.train(experiments.make_config(args.arch, args.seed))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "num_targets", "runs", "success_rate", "mean_target_success"])
        for k in range(1, args.max_targets + 1):
            res = experiments.campaign(setup, args.runs, num_targets=k)
            rate = experiments.success_rate(res)
            per_target = sum(sum(r.target_success) / k for r in res) / len(res)
            w.writerow([args.arch, k, args.runs, rate, per_target])
            print(f"|X|={k}: success {rate:.2f}, per-target {per_target:.2f}")


if __name__ == "__main__":
    main()
