"""CT volume geometry: MetaImage I/O, resampling, HU scaling, reslicing, slabs.

Axis conventions
----------------
Volumes store data as (z, y, x) in the axial frame. World coordinates are
(x, y, z) in millimetres, as in the LUNA16 annotation files. A reslice is a
signed axis permutation: stored axis ``i`` of an oriented volume holds axial
axis ``axes[i]``, reversed when ``flips[i]`` is set.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

AIR_HU = -1000.0
HU_MIN, HU_MAX = -1000.0, 400.0
TARGET_SPACING = 0.8


class MetaImageError(ValueError):
    pass


@dataclass(frozen=True)
class Orientation:
    name: str
    axes: tuple
    flips: tuple = (False, False, False)

    def __post_init__(self):
        if sorted(self.axes) != [0, 1, 2] or len(self.flips) != 3:
            raise ValueError(f"not a signed permutation: {self.axes} {self.flips}")


ORIENTATIONS = {
    "axial": Orientation("axial", (0, 1, 2)),
    "coronal": Orientation("coronal", (1, 0, 2)),
    "sagittal": Orientation("sagittal", (2, 0, 1)),
}


def _orientation(o) -> Orientation:
    return ORIENTATIONS[o] if isinstance(o, str) else o


@dataclass
class CtVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    orientation: Orientation = field(default_factory=lambda: ORIENTATIONS["axial"])

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.orientation = _orientation(self.orientation)
        if self.data.ndim != 3:
            raise ValueError("CtVolume data must be 3D")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def axial_spacing(self) -> tuple:
        sp = [0.0] * 3
        for i, a in enumerate(self.orientation.axes):
            sp[a] = self.spacing[i]
        return tuple(sp)

    @property
    def axial_shape(self) -> tuple:
        sh = [0] * 3
        for i, a in enumerate(self.orientation.axes):
            sh[a] = self.data.shape[i]
        return tuple(sh)

    def with_data(self, data) -> "CtVolume":
        return CtVolume(data, self.spacing, self.origin, self.orientation)


@dataclass
class Slab:
    data: np.ndarray
    center: int
    width: int
    orientation: str = "axial"
    pad_before: int = 0
    pad_after: int = 0


# ------------------------------------------------------------------ MetaImage

_ETYPES = {"MET_SHORT": np.dtype("<i2"), "MET_FLOAT": np.dtype("<f4")}


def _parse_header(text: str) -> dict:
    hdr = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        hdr[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            break
    return hdr


def read_metaimage(path) -> CtVolume:
    """Read an uncompressed 3D MetaImage (.mhd + raw file, or .mha with LOCAL data)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = raw.find(b"ElementDataFile")
    if marker < 0:
        raise MetaImageError(f"{path}: missing ElementDataFile")
    eol = raw.find(b"\n", marker)
    eol = len(raw) if eol < 0 else eol + 1
    hdr = _parse_header(raw[:eol].decode("latin-1"))
    if int(hdr.get("NDims", 0)) != 3:
        raise MetaImageError(f"{path}: only NDims = 3 is supported")
    if hdr.get("CompressedData", "False").lower() == "true":
        raise MetaImageError(f"{path}: compressed MetaImage payloads are not supported; "
                             "convert to uncompressed first")
    msb = hdr.get("ElementByteOrderMSB", hdr.get("BinaryDataByteOrderMSB", "False"))
    if msb.lower() == "true":
        raise MetaImageError(f"{path}: big-endian payloads are not supported")
    etype = hdr.get("ElementType")
    if etype not in _ETYPES:
        raise MetaImageError(f"{path}: unsupported ElementType {etype}")
    tm = hdr.get("TransformMatrix")
    if tm is not None and not np.allclose([float(v) for v in tm.split()], np.eye(3).ravel()):
        raise MetaImageError(f"{path}: non-identity TransformMatrix is not supported")
    nx, ny, nz = (int(v) for v in hdr["DimSize"].split())
    sx, sy, sz = (float(v) for v in hdr.get("ElementSpacing", "1 1 1").split())
    offset = hdr.get("Offset", hdr.get("Origin", hdr.get("Position", "0 0 0")))
    ox, oy, oz = (float(v) for v in offset.split())
    dt = _ETYPES[etype]
    count = nx * ny * nz
    src = hdr["ElementDataFile"]
    if src == "LOCAL":
        payload = raw[eol:]
    else:
        data_path = os.path.join(os.path.dirname(os.fspath(path)), src)
        with open(data_path, "rb") as fh:
            payload = fh.read()
    if len(payload) != count * dt.itemsize:
        raise MetaImageError(f"{path}: expected {count * dt.itemsize} payload bytes, "
                             f"found {len(payload)}")
    data = np.frombuffer(payload, dtype=dt).reshape(nz, ny, nx).astype(np.float32)
    return CtVolume(data, (sz, sy, sx), (ox, oy, oz))


def write_metaimage(volume: CtVolume, path, element_type: str | None = None) -> str:
    """Write an axial volume as ``path`` (.mhd) plus a sibling .raw file."""
    if volume.orientation.name != "axial" or volume.orientation.axes != (0, 1, 2):
        volume = reslice(volume, "axial")
    data = volume.data
    if element_type is None:
        integral = np.array_equal(data, np.round(data)) and data.min() >= -32768 and data.max() <= 32767
        element_type = "MET_SHORT" if integral else "MET_FLOAT"
    dt = _ETYPES[element_type]
    base = os.path.splitext(os.fspath(path))[0]
    raw_name = os.path.basename(base) + ".raw"
    nz, ny, nx = data.shape
    sz, sy, sx = volume.spacing
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(float(v)) for v in volume.origin),
        "ElementSpacing = " + " ".join(repr(float(v)) for v in (sx, sy, sz)),
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(os.path.dirname(os.fspath(path)), raw_name), "wb") as fh:
        fh.write(np.ascontiguousarray(data, dtype=dt).tobytes())
    return os.fspath(path)


# ----------------------------------------------------------------- resampling

def _interp_axis(arr: np.ndarray, axis: int, coords: np.ndarray, order: int) -> np.ndarray:
    n = arr.shape[axis]
    coords = np.clip(coords, 0, n - 1)
    if order == 0:
        idx = np.floor(coords + 0.5).astype(np.intp)
        return np.take(arr, np.minimum(idx, n - 1), axis=axis)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = (coords - lo).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    shape = [1] * arr.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + (b - a) * frac


def resample(volume: CtVolume, target_spacing=TARGET_SPACING, order: int = 1) -> CtVolume:
    """Resample to isotropic ``target_spacing`` mm.

    ``order=1`` is separable trilinear interpolation, ``order=0`` nearest
    neighbour (for masks). New extents are ``round(n * spacing / target)``;
    the origin (world position of voxel 0) is kept.
    """
    if any(n < 2 for n in volume.shape):
        raise ValueError(f"cannot resample degenerate volume of shape {volume.shape}")
    data = volume.data
    new_spacing = []
    for axis, (n, sp) in enumerate(zip(volume.shape, volume.spacing)):
        m = max(1, int(round(n * sp / target_spacing)))
        if m == n and abs(sp - target_spacing) < 1e-12:
            new_spacing.append(sp)
            continue
        coords = np.arange(m) * (target_spacing / sp)
        data = _interp_axis(data, axis, coords, order)
        new_spacing.append(float(target_spacing))
    if data.dtype != volume.data.dtype and volume.data.dtype.kind == "f":
        data = data.astype(volume.data.dtype)
    return CtVolume(np.ascontiguousarray(data), tuple(new_spacing), volume.origin, volume.orientation)


def hu_normalize(volume):
    """Linear map of [-1000, 400] HU onto [0, 1], clipping outside."""
    data = volume.data if isinstance(volume, CtVolume) else np.asarray(volume)
    out = np.clip((data.astype(np.float64) - HU_MIN) / (HU_MAX - HU_MIN), 0.0, 1.0).astype(np.float32)
    return volume.with_data(out) if isinstance(volume, CtVolume) else out


# ------------------------------------------------------------------ reslicing

def to_axial_array(data: np.ndarray, orientation) -> np.ndarray:
    o = _orientation(orientation)
    for i, f in enumerate(o.flips):
        if f:
            data = np.flip(data, axis=i)
    inv = np.argsort(o.axes)
    return np.transpose(data, inv)


def from_axial_array(axial: np.ndarray, orientation) -> np.ndarray:
    o = _orientation(orientation)
    data = np.transpose(axial, o.axes)
    for i, f in enumerate(o.flips):
        if f:
            data = np.flip(data, axis=i)
    return data


def reslice(volume: CtVolume, target="axial", check_isotropic: bool = True) -> CtVolume:
    """Re-express ``volume`` in another orientation by pure axis permutation."""
    target = _orientation(target)
    if check_isotropic and len(set(np.round(volume.spacing, 9))) != 1:
        raise ValueError(f"reslice needs isotropic spacing, got {volume.spacing}")
    axial = to_axial_array(volume.data, volume.orientation)
    data = np.ascontiguousarray(from_axial_array(axial, target))
    asp = volume.axial_spacing
    spacing = tuple(asp[a] for a in target.axes)
    return CtVolume(data, spacing, volume.origin, target)


# ---------------------------------------------------------------------- slabs

def extract_slab(volume, p: int, w: int, pad_value: float = 0.0) -> Slab:
    """Slices ``[p - w, p + w]`` along the first stored axis, padded with air."""
    data = volume.data if isinstance(volume, CtVolume) else np.asarray(volume)
    depth = data.shape[0]
    if not 0 <= p < depth:
        raise IndexError(f"slab centre {p} outside depth {depth}")
    lo, hi = p - w, p + w + 1
    before, after = max(0, -lo), max(0, hi - depth)
    core = data[max(lo, 0):min(hi, depth)]
    if before or after:
        core = np.pad(core, [(before, after), (0, 0), (0, 0)], constant_values=pad_value)
    name = volume.orientation.name if isinstance(volume, CtVolume) else "axial"
    return Slab(np.ascontiguousarray(core), p, w, name, before, after)


# -------------------------------------------------------------------- mapping

def world_to_voxel(volume: CtVolume, point) -> np.ndarray:
    """World (x, y, z) mm -> continuous index into ``volume.data``."""
    pt = np.asarray(point, dtype=np.float64)
    xyz_origin = np.asarray(volume.origin)
    zyx = (pt[..., ::-1] - xyz_origin[::-1]) / np.asarray(volume.axial_spacing)
    o = volume.orientation
    ashape = volume.axial_shape
    out = np.empty_like(zyx)
    for i, a in enumerate(o.axes):
        v = zyx[..., a]
        out[..., i] = (ashape[a] - 1) - v if o.flips[i] else v
    return out


def voxel_to_world(volume: CtVolume, index) -> np.ndarray:
    """Continuous index into ``volume.data`` -> world (x, y, z) mm."""
    idx = np.asarray(index, dtype=np.float64)
    o = volume.orientation
    ashape = volume.axial_shape
    zyx = np.empty_like(idx)
    for i, a in enumerate(o.axes):
        v = idx[..., i]
        zyx[..., a] = (ashape[a] - 1) - v if o.flips[i] else v
    world_zyx = zyx * np.asarray(volume.axial_spacing) + np.asarray(volume.origin)[::-1]
    return world_zyx[..., ::-1]


def world_voxel_map(volume: CtVolume, point, direction: str = "world->voxel") -> np.ndarray:
    if direction == "world->voxel":
        return world_to_voxel(volume, point)
    if direction == "voxel->world":
        return voxel_to_world(volume, point)
    raise ValueError(f"unknown direction {direction!r}")
