"""Lung nodule detection on CT with a trainable maximum-projection front end.

A numpy/scipy reference implementation: a small reverse-mode autodiff core,
the projection block and 2D segmentation networks built on it, CT volume
handling, synthetic phantoms, training, tri-planar inference and FROC
evaluation.
"""

__version__ = "0.1.0"
