"""Training data: nodule masks, synthetic phantoms, slab sampling and augmentation."""
from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import (ORIENTATIONS, CtVolume, extract_slab, from_axial_array, hu_normalize,
                     read_metaimage, to_axial_array, voxel_to_world, world_to_voxel,
                     write_metaimage)

ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]


@dataclass
class NoduleAnnotation:
    series_id: str
    x: float
    y: float
    z: float
    diameter: float

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError(f"nodule diameter must be positive, got {self.diameter}")

    @property
    def center(self):
        return (self.x, self.y, self.z)


def write_annotations(path, annotations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for a in annotations:
            w.writerow([a.series_id, repr(float(a.x)), repr(float(a.y)), repr(float(a.z)),
                        repr(float(a.diameter))])


def read_annotations(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANNOTATION_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: annotation CSV lacks columns {sorted(missing)}")
        return [NoduleAnnotation(r["seriesuid"], float(r["coordX"]), float(r["coordY"]),
                                 float(r["coordZ"]), float(r["diameter_mm"])) for r in reader]


# ------------------------------------------------------------------ masks

def rasterize_mask(volume: CtVolume, annotations) -> np.ndarray:
    """Binary mask: a voxel is set when its centre lies within diameter / 2
    (world mm) of any nodule centre. Returned in the volume's orientation."""
    shape = volume.axial_shape
    mask = np.zeros(shape, dtype=np.uint8)
    axial = CtVolume(mask, volume.axial_spacing, volume.origin)
    sp = np.asarray(axial.spacing)
    for a in annotations:
        c = world_to_voxel(axial, a.center)
        r = a.diameter / 2.0
        lo = np.floor(c - r / sp).astype(int)
        hi = np.ceil(c + r / sp).astype(int) + 1
        if np.any(c < -0.5) or np.any(c > np.asarray(shape) - 0.5):
            warnings.warn(f"annotation at {a.center} lies outside the volume; skipped")
            continue
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, shape)
        zz, yy, xx = np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij")
        world = voxel_to_world(axial, np.stack([zz, yy, xx], axis=-1))
        d2 = ((world - np.asarray(a.center)) ** 2).sum(axis=-1)
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= (d2 <= r * r).astype(np.uint8)
    return np.ascontiguousarray(from_axial_array(mask, volume.orientation))


# --------------------------------------------------------------- phantoms

@dataclass
class PhantomConfig:
    shape: tuple = (40, 48, 48)
    spacing: tuple = (0.8, 0.8, 0.8)
    origin: tuple = (0.0, 0.0, 0.0)
    nodule_count: tuple = (1, 3)
    nodule_diameter_mm: tuple = (4.0, 10.0)
    vessel_count: tuple = (3, 6)
    vessel_radius_mm: tuple = (0.6, 1.6)
    air_hu: float = -900.0
    tissue_hu: float = 40.0
    noise_sigma: float = 30.0
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        min_vox = min(self.spacing)
        if self.nodule_diameter_mm[0] < 2 * max(self.spacing):
            raise ValueError(f"nodule diameters must span at least 2 voxels ({2 * max(self.spacing)} mm)")
        if min_vox <= 0:
            raise ValueError("spacing must be positive")


def generate_phantom(cfg: PhantomConfig, series_id: str | None = None):
    """Air-filled box with tissue-density tubes (vessel confounders) and
    spherical nodules, plus Gaussian noise. Returns (CtVolume in HU, annotations)."""
    rng = np.random.default_rng(cfg.seed)
    series_id = series_id or f"phantom-{cfg.seed:06d}"
    shape = cfg.shape
    sp = np.asarray(cfg.spacing)
    origin_zyx = np.asarray(cfg.origin)[::-1]
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    world_zyx = grid * sp + origin_zyx
    data = np.full(shape, cfg.air_hu, dtype=np.float64)

    extent = (np.asarray(shape) - 1) * sp
    for _ in range(int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))):
        point = origin_zyx + rng.uniform(0, 1, 3) * extent
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(*cfg.vessel_radius_mm)
        rel = world_zyx - point
        along = rel @ direction
        dist2 = (rel ** 2).sum(-1) - along ** 2
        data[dist2 <= radius ** 2] = cfg.tissue_hu

    count = int(rng.integers(cfg.nodule_count[0], cfg.nodule_count[1] + 1))
    placed = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > cfg.max_retries:
            raise RuntimeError(f"could not place {count} non-overlapping nodules")
        diam = rng.uniform(*cfg.nodule_diameter_mm)
        r = diam / 2
        margin = r + sp
        if np.any(2 * margin >= extent):
            continue
        c = origin_zyx + margin + rng.uniform(0, 1, 3) * (extent - 2 * margin)
        if any(np.linalg.norm(c - pc) < r + pr + 1.0 for pc, pr in placed):
            continue
        placed.append((c, r))
    annotations = []
    for c, r in placed:
        d2 = ((world_zyx - c) ** 2).sum(-1)
        data[d2 <= r * r] = cfg.tissue_hu
        annotations.append(NoduleAnnotation(series_id, float(c[2]), float(c[1]), float(c[0]), float(2 * r)))

    data += rng.normal(0.0, cfg.noise_sigma, shape)
    data = np.round(data).astype(np.float32)
    return CtVolume(data, cfg.spacing, cfg.origin), annotations


def phantom_series(cfg: PhantomConfig, count: int, first_seed: int | None = None, jobs: int = 1):
    """``count`` phantoms with consecutive seeds starting at ``first_seed``.

    Each phantom owns its generator, so ``jobs > 1`` gives identical output.
    """
    base = cfg.seed if first_seed is None else first_seed
    cfgs = [PhantomConfig(**{**asdict(cfg), "seed": base + i}) for i in range(count)]
    if jobs > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(generate_phantom, cfgs))
    return [generate_phantom(c) for c in cfgs]


def export_phantoms(out_dir, phantoms) -> list:
    """Write phantoms as MetaImage files plus one ``annotations.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    paths, all_ann = [], []
    for vol, ann in phantoms:
        sid = ann[0].series_id if ann else f"phantom-{len(paths):06d}"
        paths.append(write_metaimage(vol, os.path.join(out_dir, f"{sid}.mhd")))
        all_ann.extend(ann)
    write_annotations(os.path.join(out_dir, "annotations.csv"), all_ann)
    return paths


def load_phantom_dir(path):
    """Read a directory written by :func:`export_phantoms`: [(series, CtVolume)], annotations."""
    ann = read_annotations(os.path.join(path, "annotations.csv"))
    vols = []
    for name in sorted(os.listdir(path)):
        if name.endswith(".mhd"):
            vols.append((name[:-4], read_metaimage(os.path.join(path, name))))
    return vols, ann


# ---------------------------------------------------------------- augmentation

def augment(slab: np.ndarray, mask: np.ndarray, seed=None, *, flip_prob=0.5, rot90_prob=0.5,
            max_angle=10.0, zoom_range=(0.9, 1.1)):
    """Apply one random in-plane transform identically to ``slab`` and ``mask``.

    Both arrays share their last two (in-plane) axes. Flips and quarter turns
    are exact. When no quarter turn is drawn a small-angle rotation is; zoom
    is drawn independently and recropped about the centre. Rotation and zoom
    use bilinear interpolation for the slab and nearest neighbour for the mask.
    """
    slab = np.asarray(slab)
    mask = np.asarray(mask)
    if slab.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"in-plane shapes differ: {slab.shape} vs {mask.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for ax in (-2, -1):
        if rng.random() < flip_prob:
            slab = np.flip(slab, axis=ax)
            mask = np.flip(mask, axis=ax)
    angle = 0.0
    if rng.random() < rot90_prob:
        square = slab.shape[-2] == slab.shape[-1]
        k = int(rng.integers(1, 4)) if square else 2
        slab = np.rot90(slab, k, axes=(-2, -1))
        mask = np.rot90(mask, k, axes=(-2, -1))
    elif max_angle:
        angle = rng.uniform(-max_angle, max_angle)
    zoom = rng.uniform(*zoom_range) if zoom_range[0] != zoom_range[1] else zoom_range[0]
    if angle != 0.0 or zoom != 1.0:
        slab = _affine_inplane(slab, angle, zoom, order=1)
        mask = _affine_inplane(mask, angle, zoom, order=0)
    return np.ascontiguousarray(slab), np.ascontiguousarray(mask)


def _affine_inplane(arr, angle_deg, zoom, order):
    t = math.radians(angle_deg)
    # output -> input mapping: rotate by -angle and shrink by zoom about the centre
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) / zoom
    n = arr.ndim
    mat = np.eye(n)
    mat[-2:, -2:] = rot
    center = (np.asarray(arr.shape, dtype=float) - 1) / 2
    offset = center - mat @ center
    out = ndimage.affine_transform(arr.astype(np.float32), mat, offset=offset, order=order,
                                   mode="nearest")
    return out.astype(arr.dtype)


# -------------------------------------------------------------------- sampling

class SlabSampler:
    """Draws (slab, central-slice mask) training pairs from normalized volumes.

    Orientation is uniform over ``orientations``; with probability
    ``pos_fraction`` the central slice intersects a nodule, otherwise it is a
    nodule-free slice.

    Views are padded in-plane with air (0) at the far edges so that every
    draw has the same in-plane size: ``crop`` when given, else the largest
    view. This lets orientations of non-cubic volumes share a batch.
    """

    def __init__(self, volumes, masks, orientations=("axial", "coronal", "sagittal"),
                 pos_fraction=0.5, slab_width=10, crop=None, max_retries=100):
        if len(volumes) != len(masks) or not volumes:
            raise ValueError("need matching, non-empty volume and mask lists")
        self.orientations = tuple(orientations)
        self.pos_fraction = pos_fraction
        self.slab_width = slab_width
        self.crop = crop
        self.max_retries = max_retries
        self.views = {}
        self.positive = {}
        self.negative = {}
        for i, (v, m) in enumerate(zip(volumes, masks)):
            vdata = v.data if isinstance(v, CtVolume) else np.asarray(v)
            if vdata.shape != m.shape:
                raise ValueError("volume and mask shapes differ")
            for o in self.orientations:
                vo = from_axial_array(vdata, o)
                mo = from_axial_array(m, o)
                per_slice = mo.reshape(mo.shape[0], -1).any(axis=1)
                self.views[i, o] = (vo, mo)
                self.positive[i, o] = np.flatnonzero(per_slice)
                self.negative[i, o] = np.flatnonzero(~per_slice)
        self.n_volumes = len(volumes)
        sizes = np.array([vo.shape[1:] for vo, _ in self.views.values()])
        self.plane = tuple(int(n) for n in (crop if crop is not None else sizes.max(axis=0)))
        for key, (vo, mo) in self.views.items():
            pad = [(0, 0)] + [(0, max(0, t - n)) for t, n in zip(self.plane, vo.shape[1:])]
            if any(p[1] for p in pad):
                self.views[key] = (np.pad(vo, pad), np.pad(mo, pad))

    def sample(self, rng):
        """Return (slab (d, h, w), target (h, w), info dict)."""
        o = self.orientations[int(rng.integers(len(self.orientations)))]
        want_pos = rng.random() < self.pos_fraction
        pool = self.positive if want_pos else self.negative
        for _ in range(self.max_retries):
            i = int(rng.integers(self.n_volumes))
            if len(pool[i, o]):
                break
        else:
            kind = "positive" if want_pos else "negative"
            raise RuntimeError(f"no {kind} slice found after {self.max_retries} retries")
        p = int(pool[i, o][int(rng.integers(len(pool[i, o])))])
        vo, mo = self.views[i, o]
        slab = extract_slab(vo, p, self.slab_width).data
        target = mo[p]
        if self.crop is not None:
            ch, cw = self.crop
            h, w = target.shape
            if want_pos:
                ys, xs = np.nonzero(target)
                k = int(rng.integers(len(ys)))
                y0 = int(rng.integers(max(0, ys[k] - ch + 1), min(ys[k], h - ch) + 1))
                x0 = int(rng.integers(max(0, xs[k] - cw + 1), min(xs[k], w - cw) + 1))
            else:
                y0 = int(rng.integers(0, h - ch + 1))
                x0 = int(rng.integers(0, w - cw + 1))
            slab = slab[:, y0:y0 + ch, x0:x0 + cw]
            target = target[y0:y0 + ch, x0:x0 + cw]
        return np.ascontiguousarray(slab), np.ascontiguousarray(target), {
            "volume": i, "orientation": o, "slice": p, "positive": bool(want_pos)}

    def batch(self, rng, size, augment_prob=1.0, **augment_kw):
        slabs, targets = [], []
        for _ in range(size):
            s, t, _ = self.sample(rng)
            if rng.random() < augment_prob:
                s, t = augment(s, t, rng, **augment_kw)
            slabs.append(s)
            targets.append(t)
        x = np.stack(slabs)[:, None].astype(np.float32)
        y = np.stack(targets)[:, None].astype(np.float32)
        return x, y

    def __call__(self, rng, size):
        return self.batch(rng, size)


def sample_training_item(volumes, masks, orientations=("axial", "coronal", "sagittal"),
                         pos_fraction=0.5, seed=None, **kw):
    """One-off draw; build a :class:`SlabSampler` directly for repeated draws."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SlabSampler(volumes, masks, orientations, pos_fraction, **kw).sample(rng)


def prepare_phantoms(phantoms):
    """HU phantoms -> (normalized axial volumes, masks, annotations)."""
    vols, masks, anns = [], [], []
    for vol, ann in phantoms:
        vols.append(hu_normalize(vol))
        masks.append(rasterize_mask(vol, ann))
        anns.append(ann)
    return vols, masks, anns


__all__ = [
    "NoduleAnnotation", "PhantomConfig", "SlabSampler", "augment", "export_phantoms",
    "generate_phantom", "load_phantom_dir", "phantom_series", "prepare_phantoms",
    "rasterize_mask", "read_annotations", "sample_training_item", "write_annotations",
    "to_axial_array", "ORIENTATIONS",
]
