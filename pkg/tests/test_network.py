import logging

import numpy as np
import pytest

from strippool.blocks import param_count
from strippool.network import (
    PRESETS,
    BackboneSpec,
    HeadSpec,
    NetworkSpec,
    SpmPlacement,
    build_from_spec,
    build_spnet,
    preset_spec,
)
from strippool.tensor import ConfigError


def image(n=1, size=64, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size)).astype(np.float32)


def random_stats(net, seed=0):
    rng = np.random.default_rng(seed)
    for _, s in net.named_stats():
        s.mean = rng.uniform(-0.5, 0.5, s.mean.shape).astype(np.float32)
        s.var = rng.uniform(0.5, 1.5, s.var.shape).astype(np.float32)


def test_toy_forward_shapes():
    spec = preset_spec("2mpm+spm", "toy", num_classes=8)
    net = build_from_spec(spec, seed=0)
    main, aux = net.forward(image(), train=True)
    assert main.shape == (1, 8, 64, 64)
    assert aux.shape == (1, 8, 64, 64)
    main, aux = net.forward(image(), train=False, with_aux=False)
    assert main.shape == (1, 8, 64, 64) and aux is None


def test_base_fcn_has_no_mpm_or_gates():
    net = build_from_spec(preset_spec("base-fcn"), seed=0)
    assert net.mpms == [] and net.gates() == []


@pytest.mark.parametrize("preset", PRESETS)
def test_eval_forward_is_pure(preset):
    net = build_from_spec(preset_spec(preset), seed=1)
    x = image(2, 32)
    a, _ = net.forward(x, train=False)
    b, _ = net.forward(x, train=False)
    np.testing.assert_array_equal(a.value, b.value)


def test_zero_input_gives_constant_interior_logits():
    net = build_from_spec(preset_spec("base-fcn"), seed=2)
    random_stats(net, 2)
    main, _ = net.forward(np.zeros((1, 3, 256, 256), np.float32), train=False, with_aux=False)
    centre = main.value[0, :, 96:160, 96:160]
    assert np.all(centre == centre[:, :1, :1])


def test_zero_input_constant_interior_with_strip_gates():
    # strip pooling reaches the borders, so the constant region needs a larger canvas
    net = build_from_spec(preset_spec("2mpm+spm"), seed=3)
    random_stats(net, 3)
    main, _ = net.forward(np.zeros((1, 3, 512, 512), np.float32), train=False, with_aux=False)
    centre = main.value[0, :, 248:264, 248:264]
    np.testing.assert_allclose(centre, np.broadcast_to(centre[:, :1, :1], centre.shape), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("train", [False, True])
def test_open_gates_equal_network_without_gates(train):
    with_gates = build_from_spec(preset_spec("2mpm+spm"), seed=4)
    without = build_from_spec(preset_spec("2mpm"), seed=4)
    with_gates.set_gates_open(True)
    x = image(2, 32, seed=4)
    a, aa = with_gates.forward(x, train=train)
    b, bb = without.forward(x, train=train)
    np.testing.assert_array_equal(a.value, b.value)
    np.testing.assert_array_equal(aa.value, bb.value)


@pytest.mark.parametrize("hw", [(60, 64), (64, 4), (0, 8)])
def test_misaligned_extents_rejected(hw):
    net = build_from_spec(preset_spec("base-fcn"), seed=0)
    with pytest.raises(ConfigError, match="divisible by 8"):
        net.forward(np.zeros((1, 3) + hw, np.float32), train=False)


def test_wrong_channel_count_rejected():
    net = build_from_spec(preset_spec("base-fcn"), seed=0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 4, 16, 16), np.float32), train=False)


def test_any_placement_builds_and_keeps_shapes():
    for last in (False, True):
        for all_last in (False, True):
            if not (last or all_last):
                continue
            spec = NetworkSpec(BackboneSpec(blocks=[2, 1, 1, 2]), SpmPlacement(True, last, all_last), HeadSpec())
            net = build_from_spec(spec, seed=0)
            assert net.forward(image(1, 16), train=False)[0].shape == (1, 6, 16, 16)


def test_invalid_specs_name_the_field():
    with pytest.raises(ConfigError, match="last_block_per_stage"):
        build_spnet(BackboneSpec(), SpmPlacement(True, False, False), HeadSpec())
    with pytest.raises(ConfigError, match="neck_width"):
        build_spnet(BackboneSpec(), SpmPlacement(), HeadSpec(neck_width=30))
    with pytest.raises(ConfigError, match="dilations"):
        build_spnet(BackboneSpec(dilations=[1, 1, 1, 1]), SpmPlacement(), HeadSpec())


def test_spec_json_round_trip_and_unknown_fields():
    spec = preset_spec("2mpm+spm")
    again = NetworkSpec.from_json(spec.to_json())
    assert again == spec
    assert NetworkSpec.from_json(again.to_json()).to_json() == spec.to_json()
    bad = spec.to_dict()
    bad["head"]["dropout"] = 0.1
    with pytest.raises(ConfigError, match="dropout"):
        NetworkSpec.from_dict(bad)


def test_param_counts_monotone_and_seed_free():
    def count(name, scale="toy"):
        return param_count(build_from_spec(preset_spec(name, scale), materialize=False))

    assert count("base-fcn") < count("1mpm") < count("2mpm") < count("2mpm+spm")
    assert count("srd-only") < count("2mpm") and count("lrd-only") < count("2mpm")
    a = param_count(build_from_spec(preset_spec("2mpm"), seed=0))
    b = param_count(build_from_spec(preset_spec("2mpm"), seed=9))
    assert a == b == count("2mpm")
    one = NetworkSpec(BackboneSpec(blocks=[2, 2, 2, 2]), SpmPlacement(True, True, False), HeadSpec())
    both = NetworkSpec(BackboneSpec(blocks=[2, 2, 2, 2]), SpmPlacement(True, True, True), HeadSpec())
    assert param_count(build_from_spec(one, materialize=False)) < param_count(build_from_spec(both, materialize=False))


def test_full_width_head_mixed_pooling_is_8_8m():
    net = build_from_spec(preset_spec("2mpm", "full"), materialize=False)
    head = sum(param_count(m) for m in net.mpms)
    assert net.spec.head.neck_width == 1024
    assert abs(head - 8.8e6) <= 0.05 * 8.8e6


def test_same_seed_same_weights():
    a = build_from_spec(preset_spec("2mpm+spm"), seed=5).state_dict()
    b = build_from_spec(preset_spec("2mpm+spm"), seed=5).state_dict()
    c = build_from_spec(preset_spec("2mpm+spm"), seed=6).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))


def test_state_dict_round_trip_and_mismatch():
    src = build_from_spec(preset_spec("1mpm"), seed=1)
    src.forward(image(2, 32), train=True)  # move running stats off their defaults
    dst = build_from_spec(preset_spec("1mpm"), seed=2)
    dst.load_state_dict(src.state_dict())
    x = image(1, 32, seed=3)
    np.testing.assert_array_equal(src.forward(x, False)[0].value, dst.forward(x, False)[0].value)
    other = build_from_spec(preset_spec("1mpm", num_classes=4), seed=0)
    with pytest.raises(ConfigError, match="head.predict.weight"):
        other.load_state_dict(src.state_dict())


def test_bin_clamp_and_aux_stage_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="strippool"):
        net = build_from_spec(preset_spec("1mpm"), seed=0)
        net.forward(image(1, 64), train=False)
    text = caplog.text
    assert "auxiliary head attached after stage 3" in text
    assert "clamped to 8x8" in text
