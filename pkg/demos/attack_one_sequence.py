"""Attack one synthetic sequence with each applicable method and compare
against the clean run.

    python demos/attack_one_sequence.py [--tracker siamcorr|tinyformer] [--length 60]
"""

import argparse

import numpy as np

from advtrack import attacks as A
from advtrack import evaluation as E
from advtrack.data import MotionSpec, synth_sequence
from advtrack.metrics import count_super_perturbed
from advtrack.trackers import ATTACK_IDS, SiamCorrTracker, applicable
from advtrack.trackers.tinyformer import TinyFormerTracker

ap = argparse.ArgumentParser()
ap.add_argument("--tracker", default="siamcorr", choices=["siamcorr", "tinyformer"])
ap.add_argument("--length", type=int, default=60)
args = ap.parse_args()

seq = synth_sequence(MotionSpec("circular", (18.0, 16.0), radius=22.0, angular_speed=0.06,
                                shape="ellipse", distractors=1), args.length, seed=4, name="orbit")
tracker = SiamCorrTracker() if args.tracker == "siamcorr" else TinyFormerTracker()

clean = E.run_ope(E.CleanRunner(tracker), seq)
base = E.ope_bundle([clean])
print(f"{'attack':6s} {'AUC':>6s} {'AO':>6s} {'SSIM':>6s} {'L1':>9s} super")
print(f"{'clean':6s} {base.auc:6.3f} {base.ao:6.3f}")

for attack in ATTACK_IDS:
    if not applicable(attack, tracker.capabilities):
        print(f"{attack:6s} n/a for {args.tracker}")
        continue
    sess = A.AttackSession(attack, tracker, A.AttackConfig(zeta=125000.0), seq.name)
    res = E.run_ope(sess, seq)
    b = E.ope_bundle([res])
    ssim = np.mean([d.ssim for d in res.diagnostics])
    l1 = np.mean([d.l1 for d in res.diagnostics])
    print(f"{attack:6s} {b.auc:6.3f} {b.ao:6.3f} {ssim:6.3f} {l1:9.0f} {count_super_perturbed(res.diagnostics)}")
