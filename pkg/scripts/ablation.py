"""Success rate of the four attack variants and the bit-identical control, per architecture.

    python scripts/ablation.py --runs 50 --out ablation.csv
"""
import argparse
import csv
import time

from hwtrigger import experiments

VARIANTS = ("base", "perm", "flip", "full")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", default="mlp,cnn")
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    rows = []
    for arch in args.archs.split(","):
        setup = experiments.train(experiments.make_config(arch, args.seed))
        print(f"{arch}: baseline accuracy {setup.test_accuracy:.3f}")
        settings = [(v, {"variant": v}) for v in VARIANTS] + [("full/identical-pair", {"h2": ("blk8fma-virt",)})]
        for name, kw in settings:
            t = time.perf_counter()
            res = experiments.campaign(setup, args.runs, **kw)
            rate = experiments.success_rate(res)
            worst = min((r.retained for r in res if r.success), default=float("nan"))
            dt = time.perf_counter() - t
            rows.append((arch, name, args.runs, rate, worst, round(dt, 1)))
            print(f"  {name:20s} success {rate:.2f}  min retained {worst:.3f}  {dt:.0f}s")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "setting", "runs", "success_rate", "min_retained", "seconds"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
