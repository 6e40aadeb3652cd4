"""
Reading a FROC curve
====================

Detection results are scored by sweeping a threshold over candidate scores
and recording, at each step, the fraction of nodules found and the number
of false positives per scan. The summary figure is the average sensitivity
at seven FP/scan levels from 1/8 to 8.
"""

import math

from noduleproj.dataset import NoduleAnnotation
from noduleproj.detect import Candidate
from noduleproj.froc import FP_LEVELS, evaluate, froc_by_size

# one scan, two nodules; a candidate hits when it lies strictly inside the radius
nodules = [NoduleAnnotation("scan", 0.0, 0.0, 0.0, 10.0),
           NoduleAnnotation("scan", 40.0, 0.0, 0.0, 6.0)]
candidates = [Candidate("scan", 1.0, 1.0, 0.0, 0.9),    # inside the first nodule
              Candidate("scan", 90.0, 0.0, 0.0, 0.8),   # nowhere near either
              Candidate("scan", 41.0, 0.0, 0.0, 0.7),   # inside the second nodule
              Candidate("scan", 2.0, 0.0, 0.0, 0.6)]    # first nodule again

result = evaluate(candidates, nodules)
for t, fp, s in zip(result.thresholds, result.fp_per_scan, result.sensitivity):
    print(f"threshold {t:>5}: {fp:.0f} FP/scan, sensitivity {s:.2f}")

# the repeat hit on the first nodule adds neither a detection nor a false positive
print("per level:", {lv: result.level_sensitivity[lv] for lv in FP_LEVELS})
print(f"mean sensitivity {result.mean_sensitivity:.3f}")

###############################################################################
# Stratifying by size: false positives are shared, hits count per bin.
for (lo, hi), r in zip([(0, 8), (8, math.inf)], froc_by_size(candidates, nodules, [0, 8, math.inf])):
    print(f"diameter ({lo}, {hi}] mm: mean sensitivity {r.mean_sensitivity:.3f}")
