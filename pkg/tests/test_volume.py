import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noduleproj.volume import (ORIENTATIONS, CtVolume, MetaImageError, Orientation, extract_slab,
                               hu_normalize, read_metaimage, resample, reslice, voxel_to_world,
                               world_to_voxel, world_voxel_map, write_metaimage)


def _vol(shape=(5, 6, 7), spacing=(0.8, 0.8, 0.8), origin=(1.5, -2.0, 10.0), seed=0):
    data = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    return CtVolume(data, spacing, origin)


# ----------------------------------------------------------------- MetaImage

def test_metaimage_round_trip_float_and_short(tmp_path):
    v = _vol((4, 4, 4), spacing=(2.5, 0.7, 0.6))
    write_metaimage(v, tmp_path / "f.mhd")
    back = read_metaimage(tmp_path / "f.mhd")
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing and back.origin == v.origin
    ints = v.with_data(np.round(v.data * 500).astype(np.float32))
    write_metaimage(ints, tmp_path / "s.mhd")
    assert "MET_SHORT" in (tmp_path / "s.mhd").read_text()
    np.testing.assert_array_equal(read_metaimage(tmp_path / "s.mhd").data, ints.data)


def _header(**kw):
    base = {"ObjectType": "Image", "NDims": "3", "BinaryData": "True",
            "BinaryDataByteOrderMSB": "False", "CompressedData": "False",
            "Offset": "0 0 0", "ElementSpacing": "0.7 0.7 2.5", "DimSize": "512 512 130",
            "ElementType": "MET_SHORT", "ElementDataFile": "v.raw"}
    base.update(kw)
    body = {k: v for k, v in base.items() if k != "ElementDataFile"}
    return "".join(f"{k} = {v}\n" for k, v in body.items()) + f"ElementDataFile = {base['ElementDataFile']}\n"


def test_header_axis_transcription(tmp_path):
    (tmp_path / "v.mhd").write_text(_header())
    (tmp_path / "v.raw").write_bytes(np.zeros(512 * 512 * 130, "<i2").tobytes())
    v = read_metaimage(tmp_path / "v.mhd")
    assert v.shape == (130, 512, 512)
    assert v.spacing == (2.5, 0.7, 0.7)


def test_truncated_payload_is_size_error(tmp_path):
    (tmp_path / "v.mhd").write_text(_header(DimSize="4 4 4"))
    (tmp_path / "v.raw").write_bytes(np.zeros(63, "<i2").tobytes())
    with pytest.raises(MetaImageError, match="payload"):
        read_metaimage(tmp_path / "v.mhd")


@pytest.mark.parametrize("kw,match", [
    ({"CompressedData": "True"}, "compressed"),
    ({"ElementType": "MET_UCHAR"}, "ElementType"),
    ({"BinaryDataByteOrderMSB": "True"}, "big-endian"),
    ({"TransformMatrix": "0 1 0 1 0 0 0 0 1"}, "TransformMatrix"),
    ({"NDims": "2"}, "NDims"),
])
def test_unsupported_headers(tmp_path, kw, match):
    (tmp_path / "v.mhd").write_text(_header(DimSize="2 2 2", **kw))
    (tmp_path / "v.raw").write_bytes(np.zeros(8, "<i2").tobytes())
    with pytest.raises(MetaImageError, match=match):
        read_metaimage(tmp_path / "v.mhd")


def test_local_payload(tmp_path):
    data = np.arange(8, dtype="<f4")
    hdr = _header(DimSize="2 2 2", ElementType="MET_FLOAT", ElementDataFile="LOCAL")
    (tmp_path / "v.mha").write_bytes(hdr.encode() + data.tobytes())
    np.testing.assert_array_equal(read_metaimage(tmp_path / "v.mha").data.ravel(), data)


# ---------------------------------------------------------------- resampling

def test_resample_identity_at_target():
    v = _vol((6, 7, 8))
    np.testing.assert_array_equal(resample(v).data, v.data)


def test_resample_constant():
    v = CtVolume(np.full((5, 9, 7), 42.0), (2.5, 0.7, 0.6))
    r = resample(v)
    assert r.shape == (16, 8, 5)  # round(n * s / 0.8)
    np.testing.assert_allclose(r.data, 42.0, atol=1e-12)
    assert r.origin == v.origin and r.spacing == (0.8, 0.8, 0.8)


def test_resample_linear_ramp():
    x = np.arange(10) * 1.6  # world x in mm
    data = np.broadcast_to(x, (4, 5, 10)).astype(np.float64)
    r = resample(CtVolume(data.copy(), (0.8, 0.8, 1.6)))
    assert r.shape[2] == 20
    expect = np.arange(20) * 0.8
    np.testing.assert_allclose(r.data[:, :, :19], np.broadcast_to(expect[:19], (4, 5, 19)), atol=1e-6)


def test_resample_no_overshoot():
    v = CtVolume(np.random.default_rng(1).standard_normal((7, 9, 11)), (1.3, 0.55, 0.9))
    r = resample(v)
    assert r.data.min() >= v.data.min() - 1e-12 and r.data.max() <= v.data.max() + 1e-12


def test_resample_nearest_keeps_binary():
    m = (np.random.default_rng(2).random((6, 6, 6)) > 0.5).astype(np.float32)
    r = resample(CtVolume(m, (1.0, 1.3, 0.7)), order=0)
    assert set(np.unique(r.data)) <= {0.0, 1.0}


def test_resample_rejects_single_slice():
    with pytest.raises(ValueError):
        resample(CtVolume(np.zeros((1, 4, 4)), (2.0, 0.7, 0.7)))


def test_feature_moves_less_than_one_voxel():
    data = np.zeros((20, 20, 20))
    data[7, 11, 4] = 1000.0
    v = CtVolume(data, (1.25, 0.7, 0.9), (3.0, 4.0, 5.0))
    r = resample(v)
    peak = np.unravel_index(np.argmax(r.data), r.shape)
    before = voxel_to_world(v, (7, 11, 4))
    after = voxel_to_world(r, peak)
    assert np.all(np.abs(after - before) < 0.8)


# ----------------------------------------------------------------------- HU

def test_hu_map_fixture():
    hu = np.array([-1000.0, 400.0, -300.0, -1200.0, 900.0])
    np.testing.assert_array_equal(hu_normalize(hu), np.array([0.0, 1.0, 0.5, 0.0, 1.0], np.float32))


def test_hu_map_endpoints_fixed_on_volume():
    v = CtVolume(np.array([-1000.0, 400.0]).reshape(1, 1, 2), (1, 1, 1))
    out = hu_normalize(v)
    assert isinstance(out, CtVolume)
    np.testing.assert_array_equal(out.data.ravel(), [0.0, 1.0])


# ------------------------------------------------------------------ reslicing

@pytest.mark.parametrize("name", sorted(ORIENTATIONS))
def test_reslice_round_trip_bit_exact(name):
    v = _vol((5, 6, 7))
    back = reslice(reslice(v, name), "axial")
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing and back.origin == v.origin


def test_reslice_chain_through_all_orientations():
    v = _vol((5, 6, 7))
    w = reslice(reslice(reslice(v, "coronal"), "sagittal"), "axial")
    assert w.data.tobytes() == v.data.tobytes()


def test_reslice_permutation_definition():
    v = _vol((5, 6, 7))
    cor = reslice(v, "coronal")
    sag = reslice(v, "sagittal")
    assert cor.shape == (6, 5, 7) and sag.shape == (7, 5, 6)
    assert cor.data[2, 1, 3] == v.data[1, 2, 3]
    assert sag.data[3, 1, 2] == v.data[1, 2, 3]


def test_reslice_rejects_anisotropic():
    with pytest.raises(ValueError):
        reslice(_vol(spacing=(2.5, 0.7, 0.7)), "coronal")


def test_flipped_orientation_round_trip():
    flip = Orientation("custom", (1, 2, 0), (True, False, True))
    v = _vol((4, 5, 6))
    w = reslice(v, flip)
    assert reslice(w, "axial").data.tobytes() == v.data.tobytes()
    p = np.array([2.3, -1.1, 11.7])
    np.testing.assert_allclose(voxel_to_world(w, world_to_voxel(w, p)), p, atol=1e-9)


# -------------------------------------------------------------------- slabs

def test_slab_whole_volume():
    v = _vol((21, 3, 3))
    s = extract_slab(v, 10, 10)
    np.testing.assert_array_equal(s.data, v.data)
    assert s.pad_before == s.pad_after == 0


def test_slab_border_padding_and_center():
    v = CtVolume(np.ones((6, 2, 2), np.float32), (1, 1, 1))
    s = extract_slab(v, 0, 2)
    assert s.data.shape == (5, 2, 2) and s.pad_before == 2
    np.testing.assert_array_equal(s.data[:2], 0.0)
    np.testing.assert_array_equal(s.data[2], v.data[0])
    vv = _vol((9, 3, 3))
    for p in range(9):
        np.testing.assert_array_equal(extract_slab(vv, p, 3).data[3], vv.data[p])


# ------------------------------------------------------------------ mapping

def test_world_to_voxel_division():
    v = CtVolume(np.zeros((20, 20, 20)), (0.8, 0.8, 0.8), (0, 0, 0))
    np.testing.assert_allclose(world_voxel_map(v, (8.0, 8.0, 8.0)), (10, 10, 10), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(ORIENTATIONS)))
def test_world_voxel_round_trip(seed, name):
    rng = np.random.default_rng(seed)
    v = reslice(CtVolume(np.zeros((5, 6, 7)), (0.8,) * 3, tuple(rng.uniform(-300, 300, 3))), name)
    pts = rng.uniform(-400, 400, (20, 3))
    back = world_voxel_map(v, world_voxel_map(v, pts, "world->voxel"), "voxel->world")
    assert np.max(np.abs(back - pts)) < 1e-9


@pytest.mark.parametrize("name", sorted(ORIENTATIONS))
def test_mapped_voxel_indexes_same_scalar_after_reslice(name):
    v = _vol((5, 6, 7))
    o = reslice(v, name)
    rng = np.random.default_rng(3)
    for _ in range(20):
        idx = tuple(int(rng.integers(n)) for n in v.shape)
        world = voxel_to_world(v, idx)
        j = np.rint(world_to_voxel(o, world)).astype(int)
        assert o.data[tuple(j)] == v.data[idx]


def test_unknown_direction():
    with pytest.raises(ValueError):
        world_voxel_map(_vol(), (0, 0, 0), "sideways")
