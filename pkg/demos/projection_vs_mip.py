"""
Trainable projection versus classical MIP
=========================================

A maximum intensity projection collapses a slab of CT slices into one image
by taking the per-pixel maximum. The feature projection block keeps that
max-over-depth reduction but applies it to learned 3D feature maps, and does
so for several window widths around the central slice.

This script builds a synthetic phantom, cuts a 21-slice slab through a
nodule and compares the two front ends.
"""

import numpy as np

from noduleproj.dataset import PhantomConfig, generate_phantom, prepare_phantoms
from noduleproj.mbfp import MbfpBlock, MbfpConfig
from noduleproj.segnet import make_static_mip_input, static_mip_windows
from noduleproj.tensorcore import Tensor, no_grad
from noduleproj.volume import extract_slab

vols, masks, ann = prepare_phantoms([generate_phantom(PhantomConfig(seed=4))])
volume, mask = vols[0], masks[0]

# pick the axial slice holding the most nodule voxels
p = int(mask.reshape(mask.shape[0], -1).sum(axis=1).argmax())
slab = extract_slab(volume.data, p, 10).data
print("slab (depth, height, width):", slab.shape)

###############################################################################
# Classical MIP: the central slice plus maxima over 5, 10 and 15 mm.
print("static windows at 0.8 mm:", static_mip_windows((5.0, 10.0, 15.0), 0.8))
mip = make_static_mip_input(slab)
print("static MIP input:", mip.shape)
for k, img in enumerate(mip):
    print(f"  channel {k}: mean {img.mean():.3f}, nodule mean {img[mask[p] > 0].mean():.3f}")

###############################################################################
# Feature projection: a 3x3x3 conv, a 1x1x1 bottleneck, then windowed maxima.
# With 8 bottleneck channels and three windows the output has 24 channels.
block = MbfpBlock(MbfpConfig(bottleneck=8, widths=(3, 6, 10)), np.random.default_rng(0))
with no_grad():
    features = block(Tensor(slab[None, None])).data
print("projected features:", features.shape)

# each window group is a max over a wider stack, so per channel the values
# can only grow with the window
groups = features[0].reshape(3, 8, *features.shape[-2:])
print("window growth holds:", bool(np.all(groups[1] >= groups[0]) and np.all(groups[2] >= groups[1])))
