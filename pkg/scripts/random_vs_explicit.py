"""Compare exhaustive proposal sweeps with random sub-sampling.

For each sample count M the search is rerun on the same synthetic images and
the mean final IOU, eta-stop rate and wall time are printed as a table.

    python3 scripts/random_vs_explicit.py --count 20 --samples 4 16 64
"""

import argparse
import time

import numpy as np

from eiss.classifier import OracleClassifier
from eiss.engine import STOP_ETA, EissConfig, run_eiss
from eiss.imaging import SyntheticSpec, generate_synthetic


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--frame", type=int, default=128)
    p.add_argument("--samples", type=int, nargs="+", default=[4, 16, 64])
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def run(images, clf, cfg):
    start = time.perf_counter()
    results = [run_eiss(img, clf, cfg, ground_truth=box) for img, box, _ in images]
    elapsed = time.perf_counter() - start
    ious = [r.final_iou for r in results]
    eta = np.mean([r.stop_reason == STOP_ETA for r in results])
    return float(np.mean(ious)), float(eta), elapsed


def main():
    args = parse_args()
    spec = SyntheticSpec(frame=(args.frame, args.frame))
    images = [generate_synthetic(spec, args.seed + i) for i in range(args.count)]
    clf = OracleClassifier()
    print(f"{'M':>9} {'mean_iou':>9} {'eta_stop':>9} {'seconds':>9}")
    for m in [None] + list(args.samples):
        cfg = EissConfig(sample_count=m, seed=args.seed)
        mean_iou, eta, elapsed = run(images, clf, cfg)
        label = "explicit" if m is None else str(m)
        print(f"{label:>9} {mean_iou:9.3f} {eta:9.0%} {elapsed:9.1f}")


if __name__ == "__main__":
    main()
