"""Clean vs. all four attacks on the 20-sequence suite, written as a results
directory (summary.csv, curves/, diagnostics.csv, report.json).  Takes about
15 minutes on one core; pass --count to shrink it.

    python demos/efficacy_table.py --out results/efficacy [--count 20] [--jobs 1]
"""

import argparse

from advtrack import attacks as A
from advtrack import experiment as X

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="results/efficacy")
ap.add_argument("--count", type=int, default=20)
ap.add_argument("--jobs", type=int, default=1)
args = ap.parse_args()

cfg = X.ExperimentConfig(tracker="siamcorr", jobs=args.jobs, attack_config=A.AttackConfig(zeta=125000.0),
                         dataset=X.DatasetSpec(count=args.count, length=100))
reports = X.run_comparison(cfg, ["csa", "iou", "spark", "rtaa"])
X.emit_report(reports, args.out)
print(open(f"{args.out}/summary.csv").read(), end="")
