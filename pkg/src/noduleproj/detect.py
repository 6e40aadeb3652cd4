"""Whole-volume inference, tri-planar fusion and candidate extraction."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .segnet import SegNet, forward_slab
from .volume import CtVolume, extract_slab, reslice, voxel_to_world

CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "probability"]
DEFAULT_THRESHOLD = 0.1
ALL_ORIENTATIONS = ("axial", "coronal", "sagittal")


@dataclass
class Candidate:
    series_id: str
    x: float
    y: float
    z: float
    probability: float
    voxels: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"candidate score {self.probability} outside [0, 1]")

    @property
    def center(self):
        return (self.x, self.y, self.z)


def infer_volume(model: SegNet, volume: CtVolume, orientation="axial", batch_size: int = 8) -> CtVolume:
    """Per-slice probabilities for a normalized volume, in ``orientation``.

    Slice ``p`` is predicted from the slab centred on it; slabs reaching past
    the volume are padded with air.
    """
    vol = reslice(volume, orientation)
    half = model.spec.depth // 2
    depth = vol.shape[0]
    out = np.empty(vol.shape, dtype=np.float32)
    for start in range(0, depth, batch_size):
        idx = range(start, min(depth, start + batch_size))
        slabs = np.stack([extract_slab(vol.data, p, half).data for p in idx])[:, None]
        out[start:start + len(idx)] = forward_slab(model, model.prepare(slabs))[:, 0]
    return vol.with_data(out)


def fuse_projections(*predictions: CtVolume) -> CtVolume:
    """Voxelwise mean of predictions after mapping each back to axial.

    Values are sorted per voxel before summing so the result does not depend
    on argument order.
    """
    if not predictions:
        raise ValueError("nothing to fuse")
    axial = [reslice(p, "axial") for p in predictions]
    shape = axial[0].shape
    if any(a.shape != shape for a in axial):
        raise ValueError("prediction shapes disagree after mapping back to axial")
    stack = np.sort(np.stack([a.data for a in axial]), axis=0)
    fused = (stack.sum(axis=0, dtype=np.float64) / len(axial)).astype(np.float32)
    return axial[0].with_data(fused)


def extract_candidates(prob: CtVolume, threshold: float = DEFAULT_THRESHOLD,
                       series_id: str = "") -> list:
    """26-connected components above ``threshold``; one candidate each at the
    probability-weighted centroid, scored by the component maximum.

    A centroid whose nearest voxel lies outside its (non-convex) component is
    moved to the closest component voxel, so every candidate sits on tissue
    above threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    data = prob.data
    labels, n = ndimage.label(data >= threshold, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    weights = data.astype(np.float64)
    centroids = np.asarray(ndimage.center_of_mass(weights, labels, index)).reshape(n, 3)
    scores = ndimage.maximum(data, labels, index)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    for i in range(n):
        near = tuple(np.rint(centroids[i]).astype(int))
        if labels[near] != i + 1:
            vox = np.argwhere(labels == i + 1)
            centroids[i] = vox[np.argmin(((vox - centroids[i]) ** 2).sum(axis=1))]
    world = voxel_to_world(prob, centroids)
    cands = [Candidate(series_id, float(w[0]), float(w[1]), float(w[2]),
                       float(min(1.0, max(0.0, s))), int(c))
             for w, s, c in zip(world, scores, counts)]
    order = sorted(range(n), key=lambda i: -cands[i].probability)
    return [cands[i] for i in order]


def detect(model: SegNet, volume: CtVolume, orientations=ALL_ORIENTATIONS,
           threshold: float = DEFAULT_THRESHOLD, series_id: str = "", jobs: int = 1,
           return_probability: bool = False):
    """Full pipeline on a normalized axial volume: infer, fuse, extract."""
    model.eval()
    if jobs > 1 and len(orientations) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            preds = list(ex.map(lambda o: infer_volume(model, volume, o), orientations))
    else:
        preds = [infer_volume(model, volume, o) for o in orientations]
    fused = fuse_projections(*preds)
    cands = extract_candidates(fused, threshold, series_id)
    return (cands, fused) if return_probability else cands


def write_candidates(path, candidates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for c in candidates:
            w.writerow([c.series_id, repr(c.x), repr(c.y), repr(c.z), repr(c.probability)])


def read_candidates(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CANDIDATE_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: candidate CSV lacks columns {sorted(missing)}")
        return [Candidate(r["seriesuid"], float(r["coordX"]), float(r["coordY"]),
                          float(r["coordZ"]), float(r["probability"])) for r in reader]
