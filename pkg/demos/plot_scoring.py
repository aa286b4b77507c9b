"""
Scoring detections and subtypes
===============================

Centroid matching at 7.5 um, pooled micro-F1, and the balanced-accuracy
threshold sweep used for the atypia classifier.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mitoseg.evaluation import balanced_accuracy, match_detections, micro_f1, threshold_sweep

rng = np.random.default_rng(0)
spacing = 0.25  # um per pixel, so the radius is 30 px

###############################################################################
# Matching
# --------
# Jitter the ground truth, drop a few points and add some false alarms.

results = []
for case in range(5):
    gts = rng.uniform(0, 512, size=(8, 2))
    preds = gts[rng.random(8) > 0.2] + rng.normal(0, 12, size=(1, 2))
    preds = np.vstack([preds, rng.uniform(0, 512, size=(2, 2))])
    r = match_detections(preds, gts, spacing_um=spacing)
    print(f"case {case}: tp={r.tp} fp={r.fp} fn={r.fn}")
    results.append(r)

rep = micro_f1(results)
print(f"pooled precision {rep.precision:.3f} recall {rep.recall:.3f} F1 {rep.f1:.3f}")

###############################################################################
# Threshold sweep
# ---------------
# Scores of atypical figures are shifted up; the sweep picks the best cut.

labels = np.r_[np.zeros(60, int), np.ones(25, int)]
scores = np.clip(np.r_[rng.normal(0.35, 0.15, 60), rng.normal(0.65, 0.15, 25)], 0, 1)
t, ba, curve = threshold_sweep(scores, labels)
print(f"swept threshold {t:.3f} gives BA {ba:.3f}; "
      f"0.5 gives {balanced_accuracy(scores, labels, 0.5).balanced_accuracy:.3f}")

ts, bas = zip(*curve)
plt.plot(ts, bas)
plt.axvline(t, ls="--", c="k")
plt.xlabel("threshold")
plt.ylabel("balanced accuracy")
plt.savefig("ba_sweep.png", dpi=100)
print("wrote ba_sweep.png")
