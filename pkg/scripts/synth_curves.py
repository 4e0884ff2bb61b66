"""Run the search on a synthetic benchmark and plot the mean score curves.

Runs every image for the full iteration budget (eta = 0) so the curves are
comparable, writes the report next to the plot and prints the crossing
iteration.

    python3 scripts/synth_curves.py --count 50 --out runs/curves
"""

import argparse
from pathlib import Path

from eiss.classifier import OracleClassifier
from eiss.cli import synthetic_samples
from eiss.engine import EissConfig
from eiss.evaluation import OVERALL, evaluate, export, normalize_curves
from eiss.imaging import SyntheticSpec


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--frame", type=int, default=128)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("runs/curves"))
    return p.parse_args()


def plot(report, path: Path) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    curves = normalize_curves(report)[OVERALL]
    fig, (ax_raw, ax_norm) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("blackened", "cropped"):
        xs = range(1, len(curves[name]["raw"]) + 1)
        ax_raw.plot(xs, curves[name]["raw"], label=name)
        ax_norm.plot(xs, curves[name]["normalized"], label=name)
    ax_raw.set(title="mean score", xlabel="iteration")
    ax_norm.set(title="normalized", xlabel="iteration")
    ax_raw.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return True


def main():
    args = parse_args()
    spec = SyntheticSpec(frame=(args.frame, args.frame))
    cfg = EissConfig(alpha=args.alpha, eta=0, max_iterations=args.iters, seed=args.seed)
    samples = synthetic_samples(spec, args.count, args.seed)
    report = evaluate(samples, OracleClassifier(), cfg, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    export(report, "csv", args.out / "report.csv")
    export(report, "plot", args.out / "plots")
    overall = report.overall
    print(f"images={overall.sample_count} mean_final_iou={overall.mean_final_iou:.3f} "
          f"crossing_iteration={overall.crossing_iteration}")
    if plot(report, args.out / "curves.png"):
        print(f"wrote {args.out / 'curves.png'}")
    else:
        print("matplotlib not available; skipped the figure")


if __name__ == "__main__":
    main()
