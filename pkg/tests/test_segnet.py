import numpy as np
import pytest
from oracles import static_mip_loops

from noduleproj.segnet import (VARIANTS, Encoder3d, NetworkSpec, build_network, forward_slab,
                               make_static_mip_input, spec_replace, static_mip_windows,
                               variant_spec)
from noduleproj.tensorcore import Tensor, backward
from noduleproj.train import seg_loss

MAIN_VARIANTS = ("MaxMIP", "AttentionMIP", "MaxMIP Enc.", "AttentionMIP Enc.")


def _input_for(model, n=1, size=32, seed=0):
    slab = np.random.default_rng(seed).random((n, 1, 21, size, size), dtype=np.float32)
    return model.prepare(slab)


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_small_variants_train_step_gives_finite_gradients(name):
    model = build_network(variant_spec(name, small=True), seed=0)
    x = Tensor(_input_for(model, n=2))
    pred = model(x)
    assert pred.shape == (2, 1, 32, 32)
    assert np.all((pred.data > 0) & (pred.data < 1))
    target = np.zeros(pred.shape, np.float32)
    target[..., 12:18, 12:18] = 1
    params = model.parameters()
    backward(seg_loss(pred, target), params)
    for (pname, p) in model.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), pname


def test_full_width_mbfp_forward_on_64():
    model = build_network(variant_spec("MaxMIP"), seed=0).eval()
    y = forward_slab(model, _input_for(model, size=64))
    assert y.shape == (1, 1, 64, 64) and np.all((y > 0) & (y < 1))


def test_projection_channels_per_stage():
    spec = variant_spec("AttentionMIP Enc.")
    enc = Encoder3d(spec, np.random.default_rng(0), np.float32)
    outs = enc(Tensor(np.zeros((1, 1, 21, 16, 16), np.float32)))
    for i, p in enumerate(outs, start=1):
        assert p.shape == (1, 4 * i * 3, 16 // 2 ** (i - 1), 16 // 2 ** (i - 1))
    assert [s.a.conv.weight.shape[0] for s in enc.stages] == [32, 64, 96, 128]


def test_concat_sites_only_change_declared_levels():
    plain = build_network(variant_spec("MaxMIP", small=True))
    enc = build_network(variant_spec("MaxMIP Enc.", small=True))
    diff = [lvl for lvl, (a, b) in enumerate(zip(plain.level_inputs, enc.level_inputs), start=1) if a != b]
    assert diff == [1, 3, 4, 5]
    p_base = enc.spec.encoder3d.p_base
    for i, lvl in enumerate(diff, start=1):
        assert enc.level_inputs[lvl - 1] - plain.level_inputs[lvl - 1] == p_base * i * 3


@pytest.mark.parametrize("attention", [False, True])
def test_enc3d_adds_parameters(attention):
    a = build_network(NetworkSpec(attention=attention))
    b = build_network(NetworkSpec(attention=attention, parallel_3d_encoder=True))
    assert b.num_parameters() > a.num_parameters()


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(front_end="naive_21ch", parallel_3d_encoder=True).validate()
    with pytest.raises(ValueError):
        NetworkSpec(front_end="fft").validate()
    with pytest.raises(ValueError):
        NetworkSpec(levels=3, parallel_3d_encoder=True).validate()


def test_spec_json_round_trip():
    spec = variant_spec("AttentionMIP Enc.", small=True)
    again = NetworkSpec.from_json(spec.to_json())
    assert again == spec


def test_forward_slab_batch_independence_and_determinism():
    model = build_network(variant_spec("AttentionMIP", small=True), seed=1).eval()
    x = _input_for(model, n=3, size=24, seed=4)
    full = forward_slab(model, x)
    single = forward_slab(model, x[1:2])
    np.testing.assert_allclose(full[1:2], single, atol=1e-6)
    dup = forward_slab(model, np.concatenate([x[:1], x[:1]]))
    np.testing.assert_array_equal(dup[0], dup[1])
    np.testing.assert_array_equal(forward_slab(model, x), full)


def test_forward_slab_pads_odd_sizes_and_handles_zero_input():
    model = build_network(variant_spec("MaxMIP", small=True)).eval()
    x = model.prepare(np.zeros((1, 1, 21, 27, 30), np.float32))
    y = forward_slab(model, x)
    assert y.shape == (1, 1, 27, 30) and np.all(np.isfinite(y))
    flipped = forward_slab(model, x[..., ::-1].copy())
    assert flipped.shape == y.shape


def test_forward_rejects_wrong_front_end_input():
    model = build_network(variant_spec("Naive", small=True))
    with pytest.raises(ValueError):
        model(Tensor(np.zeros((1, 1, 21, 16, 16), np.float32)))


def test_static_mip_windows_arithmetic():
    # ceil(5/0.8)=7, ceil(10/0.8)=13, ceil(15/0.8)=19, all odd already
    assert static_mip_windows((5, 10, 15), 0.8) == [7, 13, 19]
    assert static_mip_windows((4.0,), 1.0) == [5]  # even count rounds up to odd


def test_static_mip_constant_slab():
    out = make_static_mip_input(np.full((21, 5, 5), 0.3))
    assert out.shape == (4, 5, 5)
    np.testing.assert_array_equal(out, 0.3)


@pytest.mark.parametrize("seed", range(100))
def test_static_mip_matches_oracle(seed):
    slab = np.random.default_rng(seed).random((21, 4, 5))
    np.testing.assert_array_equal(make_static_mip_input(slab), static_mip_loops(slab))


def test_static_mip_window_too_large():
    with pytest.raises(ValueError):
        make_static_mip_input(np.zeros((11, 4, 4)))


def test_spec_replace_revalidates():
    spec = variant_spec("MaxMIP", small=True)
    assert spec_replace(spec, levels=4).levels == 4
    with pytest.raises(ValueError):
        spec_replace(spec, front_end="naive_21ch", parallel_3d_encoder=True)


def test_output_prior_sets_head_bias():
    model = build_network(variant_spec("MaxMIP", small=True, output_prior=0.05), seed=0)
    assert float(model.head.bias.data[0]) == pytest.approx(np.log(0.05 / 0.95), rel=1e-6)
    assert variant_spec("MIP", small=True).output_prior == 0.01
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            variant_spec("MaxMIP", output_prior=bad)
