"""Perturbation-level sweep for the white-box attacks on one sequence.

Prints, per epsilon, the mean SSIM and L1 of the perturbed search regions
and how many of them fall below SSIM 0.5.

    python demos/epsilon_sweep.py [--attack spark|rtaa] [--length 100]
"""

import argparse

import numpy as np

from advtrack import attacks as A
from advtrack import evaluation as E
from advtrack.data import synth_suite
from advtrack.metrics import count_super_perturbed
from advtrack.trackers import SiamCorrTracker

ap = argparse.ArgumentParser()
ap.add_argument("--attack", default="spark", choices=["spark", "rtaa"])
ap.add_argument("--length", type=int, default=100)
args = ap.parse_args()

seq = synth_suite(1, args.length, seed=0)[0]
tracker = SiamCorrTracker()
print("epsilon   AUC    SSIM       L1  super")
for eps in A.EPSILON_LEVELS:
    sess = A.AttackSession(args.attack, tracker, A.AttackConfig(epsilon=eps), seq.name)
    res = E.run_ope(sess, seq)
    d = res.diagnostics
    print(f"{eps:7.2f} {E.ope_bundle([res]).auc:5.3f} {np.mean([x.ssim for x in d]):7.4f} "
          f"{np.mean([x.l1 for x in d]):8.0f} {count_super_perturbed(d):5d}")
