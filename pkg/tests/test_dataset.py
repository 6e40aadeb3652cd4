import math

import numpy as np
import pytest

from noduleproj.dataset import (NoduleAnnotation, PhantomConfig, SlabSampler, augment,
                                export_phantoms, generate_phantom, load_phantom_dir,
                                phantom_series, prepare_phantoms, rasterize_mask,
                                read_annotations, sample_training_item, write_annotations)
from noduleproj.detect import Candidate
from noduleproj.froc import evaluate
from noduleproj.volume import CtVolume, reslice, world_to_voxel


def _blank(shape=(30, 30, 30), spacing=0.8):
    return CtVolume(np.zeros(shape, np.float32), (spacing,) * 3, (0.0, 0.0, 0.0))


# ------------------------------------------------------------------- masks

def test_sphere_voxel_count():
    vol = _blank()
    mask = rasterize_mask(vol, [NoduleAnnotation("s", 12.0, 12.0, 12.0, 8.0)])
    expected = 4 / 3 * math.pi * 5 ** 3
    assert abs(int(mask.sum()) - expected) <= 0.15 * expected


def test_sphere_voxel_count_bruteforce():
    vol = _blank((20, 20, 20))
    ann = NoduleAnnotation("s", 7.3, 8.1, 6.9, 5.5)
    count = 0
    for z in range(20):
        for y in range(20):
            for x in range(20):
                d = math.dist((x * 0.8, y * 0.8, z * 0.8), (7.3, 8.1, 6.9))
                count += d <= 2.75
    assert int(rasterize_mask(vol, [ann]).sum()) == count


def test_empty_and_union():
    vol = _blank()
    assert rasterize_mask(vol, []).sum() == 0
    a = NoduleAnnotation("s", 10.0, 10.0, 10.0, 6.0)
    b = NoduleAnnotation("s", 12.0, 10.0, 10.0, 6.0)
    ma, mb = rasterize_mask(vol, [a]), rasterize_mask(vol, [b])
    both = rasterize_mask(vol, [a, b])
    np.testing.assert_array_equal(both, ma | mb)
    assert both.max() == 1


def test_outside_annotation_warns_and_is_skipped():
    with pytest.warns(UserWarning):
        m = rasterize_mask(_blank(), [NoduleAnnotation("s", 500.0, 0.0, 0.0, 6.0)])
    assert m.sum() == 0


def test_center_voxel_inside_own_mask_and_oriented_masks():
    vol, ann = generate_phantom(PhantomConfig(seed=3))
    mask = rasterize_mask(vol, ann)
    for a in ann:
        idx = tuple(np.rint(world_to_voxel(vol, a.center)).astype(int))
        assert mask[idx] == 1
    cor = rasterize_mask(reslice(vol, "coronal"), ann)
    np.testing.assert_array_equal(cor, np.transpose(mask, (1, 0, 2)))


def test_annotation_csv_round_trip(tmp_path):
    ann = [NoduleAnnotation("a", 1.5, -2.25, 3.0, 6.1), NoduleAnnotation("b", 0.1, 0.2, 0.3, 4.0)]
    write_annotations(tmp_path / "a.csv", ann)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "seriesuid,coordX,coordY,coordZ,diameter_mm"
    assert read_annotations(tmp_path / "a.csv") == ann


def test_annotation_rejects_nonpositive_diameter():
    with pytest.raises(ValueError):
        NoduleAnnotation("s", 0, 0, 0, 0.0)


# ---------------------------------------------------------------- phantoms

def test_phantom_determinism():
    a, aa = generate_phantom(PhantomConfig(seed=11))
    b, bb = generate_phantom(PhantomConfig(seed=11))
    assert a.data.tobytes() == b.data.tobytes() and aa == bb
    c, _ = generate_phantom(PhantomConfig(seed=12))
    assert a.data.tobytes() != c.data.tobytes()


def test_phantom_series_parallel_matches_serial():
    cfg = PhantomConfig(shape=(24, 24, 24), nodule_diameter_mm=(3.0, 5.0))
    s = phantom_series(cfg, 3, 40, jobs=1)
    p = phantom_series(cfg, 3, 40, jobs=3)
    for (va, aa), (vb, ab) in zip(s, p):
        assert va.data.tobytes() == vb.data.tobytes() and aa == ab


@pytest.mark.parametrize("seed", range(5))
def test_nodule_intensity_matches_tissue(seed):
    cfg = PhantomConfig(seed=seed)
    vol, ann = generate_phantom(cfg)
    mask = rasterize_mask(vol, ann).astype(bool)
    n = int(mask.sum())
    assert abs(vol.data[mask].mean() - cfg.tissue_hu) <= 3 * cfg.noise_sigma / math.sqrt(n)


def test_requested_nodule_count():
    vol, ann = generate_phantom(PhantomConfig(nodule_count=(3, 3), seed=2))
    assert len(ann) == 3
    assert all(4.0 <= a.diameter <= 10.0 for a in ann)


def test_overfull_phantom_fails():
    cfg = PhantomConfig(shape=(12, 12, 12), nodule_count=(20, 20), nodule_diameter_mm=(6.0, 6.0),
                        max_retries=200)
    with pytest.raises(RuntimeError):
        generate_phantom(cfg)


def test_phantom_config_rejects_tiny_nodules():
    with pytest.raises(ValueError):
        PhantomConfig(nodule_diameter_mm=(1.0, 3.0))


def test_ground_truth_passes_own_froc():
    phantoms = phantom_series(PhantomConfig(), 4, 100)
    anns = [a for _, ann in phantoms for a in ann]
    cands = [Candidate(a.series_id, a.x, a.y, a.z, 1.0) for a in anns]
    res = evaluate(cands, anns)
    assert res.mean_sensitivity == 1.0


def test_export_and_reload(tmp_path):
    phantoms = phantom_series(PhantomConfig(shape=(16, 20, 20), nodule_diameter_mm=(3.0, 5.0)), 2, 5)
    export_phantoms(tmp_path, phantoms)
    vols, ann = load_phantom_dir(tmp_path)
    assert [s for s, _ in vols] == ["phantom-000005", "phantom-000006"]
    for (sid, v), (orig, _) in zip(vols, phantoms):
        np.testing.assert_array_equal(v.data, orig.data)
    assert ann == [a for _, aa in phantoms for a in aa]


# ------------------------------------------------------------ augmentation

def _pair(seed=0, n=24):
    rng = np.random.default_rng(seed)
    slab = rng.random((5, n, n)).astype(np.float32)
    mask = np.zeros((n, n), np.float32)
    mask[6:14, 9:15] = 1
    return slab, mask


def test_augment_deterministic():
    slab, mask = _pair()
    a = augment(slab, mask, 7)
    b = augment(slab, mask, 7)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_double_flip_identity():
    slab, mask = _pair()
    kw = dict(flip_prob=1.0, rot90_prob=0.0, max_angle=0.0, zoom_range=(1.0, 1.0))
    s1, m1 = augment(slab, mask, 0, **kw)
    s2, m2 = augment(s1, m1, 1, **kw)
    np.testing.assert_array_equal(s2, slab)
    np.testing.assert_array_equal(m2, mask)


@pytest.mark.parametrize("seed", range(30))
def test_mask_stays_binary_and_paired(seed):
    slab, mask = _pair(seed)
    s, m = augment(slab, mask, seed)
    assert s.shape == slab.shape and m.shape == mask.shape
    assert set(np.unique(m)) <= {0.0, 1.0}


@pytest.mark.parametrize("seed", range(10))
def test_exact_transforms_preserve_positive_count(seed):
    slab, mask = _pair(seed)
    _, m = augment(slab, mask, seed, max_angle=0.0, zoom_range=(1.0, 1.0))
    assert m.sum() == mask.sum()


def test_augment_moves_slab_and_mask_together():
    n = 24
    slab = np.zeros((3, n, n), np.float32)
    slab[:, 6:14, 9:15] = 1
    mask = slab[1].copy()
    for seed in range(20):
        s, m = augment(slab, mask, seed)
        agree = np.mean((s[1] > 0.5) == (m > 0.5))
        assert agree > 0.97


def test_augment_shape_mismatch():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 8, 8)), np.zeros((7, 8)), 0)


# ---------------------------------------------------------------- sampling

@pytest.fixture(scope="module")
def sampler_data():
    vols, masks, _ = prepare_phantoms(phantom_series(PhantomConfig(), 3, 200))
    return vols, masks


def test_all_positive_draws(sampler_data):
    s = SlabSampler(*sampler_data, pos_fraction=1.0)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        slab, target, info = s.sample(rng)
        assert target.any()
    assert slab.shape == (21, 48, 48)


def test_positive_share_binomial(sampler_data):
    s = SlabSampler(*sampler_data, pos_fraction=0.5)
    rng = np.random.default_rng(1)
    pos = sum(s.sample(rng)[1].any() for _ in range(10_000))
    assert 0.45 <= pos / 10_000 <= 0.55


def test_orientation_histogram(sampler_data):
    s = SlabSampler(*sampler_data)
    rng = np.random.default_rng(2)
    counts = {"axial": 0, "coronal": 0, "sagittal": 0}
    for _ in range(30_000):
        counts[s.sample(rng)[2]["orientation"]] += 1
    for c in counts.values():
        assert abs(c / 30_000 - 1 / 3) <= 0.02


def test_target_is_central_slice_mask(sampler_data):
    vols, masks = sampler_data
    slab, target, info = sample_training_item(vols, masks, seed=5)
    from noduleproj.volume import from_axial_array
    vo = from_axial_array(vols[info["volume"]].data, info["orientation"])
    mo = from_axial_array(masks[info["volume"]], info["orientation"])
    h, w = vo.shape[1:]
    np.testing.assert_array_equal(slab[10, :h, :w], vo[info["slice"]])
    np.testing.assert_array_equal(target[:h, :w], mo[info["slice"]])
    assert not slab[:, h:].any() and not slab[:, :, w:].any() and not target[h:].any()


def test_mixed_orientations_share_plane_size(sampler_data):
    s = SlabSampler(*sampler_data)
    x, y = s.batch(np.random.default_rng(0), 12)
    assert x.shape[-2:] == y.shape[-2:] == s.plane


def test_crop_larger_than_view_is_padded(sampler_data):
    vols, masks = sampler_data
    big = max(vols[0].shape) + 4
    slab, target, _ = SlabSampler(vols, masks, crop=(big, big)).sample(np.random.default_rng(1))
    assert slab.shape[1:] == target.shape == (big, big)


def test_crop_keeps_positive_pixels(sampler_data):
    s = SlabSampler(*sampler_data, pos_fraction=1.0, crop=(32, 32))
    rng = np.random.default_rng(3)
    for _ in range(500):
        slab, target, _ = s.sample(rng)
        assert slab.shape == (21, 32, 32) and target.any()


def test_batch_layout(sampler_data):
    x, y = SlabSampler(*sampler_data, crop=(32, 32)).batch(np.random.default_rng(0), 4)
    assert x.shape == (4, 1, 21, 32, 32) and y.shape == (4, 1, 32, 32)
    assert x.dtype == np.float32


def test_positive_pool_exhaustion():
    vol = _blank((8, 8, 8))
    s = SlabSampler([vol], [np.zeros((8, 8, 8), np.uint8)], pos_fraction=1.0, max_retries=5)
    with pytest.raises(RuntimeError):
        s.sample(np.random.default_rng(0))
