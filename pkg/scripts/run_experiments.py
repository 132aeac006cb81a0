"""Run the cross-validated comparison for every bundled config and write reports.

    python scripts/run_experiments.py                 # all configs -> results/<name>/
    python scripts/run_experiments.py configs/vote_feefreeze.toml --out /tmp/r
"""
import argparse
import logging
import sys
from pathlib import Path

from cdtl.bench import ExperimentConfig, emit_report, run_experiment

ROOT = Path(__file__).resolve().parents[1]
HEADLINE = ("accuracy", "ets", "ms_train", "ms_grow")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="*", type=Path)
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    ap.add_argument("--transport", choices=("loopback", "tcp"))
    ap.add_argument("--max-folds", type=int)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    paths = args.configs or sorted((ROOT / "configs").glob("*.toml"))
    failed = False
    for path in paths:
        cfg = ExperimentConfig.load(path)
        if args.transport:
            cfg.transport = args.transport
        if args.max_folds:
            cfg.max_folds = args.max_folds
        report = run_experiment(cfg, progress=logging.info)
        emit_report(report, args.out / cfg.name)
        print(f"\n{cfg.name}  ({report.seconds:.1f}s, {len(report.violations)} audit violations)")
        print(f"  {'algorithm':<9} {'metric':<9} {'mean':>8} {'q1':>8} {'median':>8} {'q3':>8}")
        for row in report.summary():
            if row["metric"] in HEADLINE:
                print(f"  {row['algorithm']:<9} {row['metric']:<9} {row['mean']:8.4f} {row['q1']:8.4f} "
                      f"{row['median']:8.4f} {row['q3']:8.4f}")
        failed |= bool(report.violations)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
