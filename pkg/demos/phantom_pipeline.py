"""
Train and evaluate on synthetic phantoms
========================================

The full loop at toy scale: generate phantoms, train the attention variant
of the segmentation network on cropped slabs from all three orientations,
then run tri-planar inference on held-out phantoms and score the candidates.

The budget here is deliberately small (a couple of minutes on one core), so
expect modest numbers. The acceptance run uses 30 training phantoms and
300 steps.
"""

import logging

from noduleproj.experiment import ExperimentConfig, run_end_to_end

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

cfg = ExperimentConfig(train_count=8, test_count=3, epochs=2, steps_per_epoch=40)
model, candidates, result = run_end_to_end(cfg, seed=0)

print(f"{len(candidates)} candidates on {result.n_scans} held-out phantoms "
      f"holding {result.n_nodules} nodules")
for level, s in result.level_sensitivity.items():
    print(f"  {level:g} FP/scan: {s:.3f}")
print(f"mean sensitivity {result.mean_sensitivity:.3f}")
