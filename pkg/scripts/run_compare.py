"""Five-seed vanilla vs cosine-head comparison at the library defaults.

    python scripts/run_compare.py --out-dir runs/compare --seeds 5

Prints the medians that the imbalance and remedy checks read.
"""

import argparse
import statistics
import time

from mmcosine.experiment import ExperimentConfig, compare, median_by_arm, write_summary


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="runs/compare")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--fusion", default="concat")
    a = ap.parse_args()

    cfg = ExperimentConfig(fusion=a.fusion)
    start = time.perf_counter()
    runs = compare(cfg, ("vanilla", "mmcosine"), range(a.seeds), out_dir=a.out_dir,
                   workers=a.workers)
    write_summary(f"{a.out_dir}/summary.csv", runs)
    print(f"{len(runs)} runs in {time.perf_counter() - start:.1f}s, s = {cfg.scale()}")
    fields = {
        "joint acc": lambda r: r.test_accuracy,
        "probe audio": lambda r: r.probe_a,
        "probe visual": lambda r: r.probe_v,
        "probe gap": lambda r: r.probe_gap,
        "norm ratio a/v": lambda r: r.final_norm_ratio,
        "angle audio": lambda r: r.angle_median_a,
        "angle visual": lambda r: r.angle_median_v,
    }
    print(f"{'median':>16} {'vanilla':>9} {'mmcosine':>9}")
    for name, key in fields.items():
        med = median_by_arm(runs, key)
        print(f"{name:>16} {med['vanilla']:9.4f} {med['mmcosine']:9.4f}")
    ratios = [r.result.final_norm_ratio for r in runs if r.arm == "vanilla"]
    print(f"vanilla norm ratio spread: {min(ratios):.3f}..{max(ratios):.3f} "
          f"(median {statistics.median(ratios):.3f})")


if __name__ == "__main__":
    main()
