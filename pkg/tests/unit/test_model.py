import numpy as np
import pytest

from fade_sim.exceptions import CheckpointError, ConfigError, ShapeError
from fade_sim.model import (
    PRESET_CUTS,
    FadeModel,
    Partition,
    build,
    cnn_small,
    decode_checkpoint,
    encode_checkpoint,
    mlp_tiny,
    module_forward_loss,
    parse_layers,
    profile,
    profile_table,
)

SHAPE = (1, 6, 6)
TWO = Partition("2-module", PRESET_CUTS["cnn-small"]["2-module"])
THREE = Partition("3-module", PRESET_CUTS["cnn-small"]["3-module"])
JOINT = Partition("joint", ())


def _model(partitions=(TWO,), seed=0, k=3):
    return FadeModel.build(cnn_small(SHAPE, k), {p.name: p for p in partitions}, seed)


def test_parameter_names_and_heads():
    model = _model((JOINT, TWO))
    shapes = model.param_shapes()
    assert "backbone.0.weight" in shapes
    assert shapes["backbone.10.weight"] == (64, 3)
    # 2-module head: pool (16, 6, 6) -> (16, 3, 3) -> 144 -> 3
    assert shapes["head.2-module.1.weight"] == (144, 3)
    assert not any(name.startswith("head.joint") for name in shapes)
    assert not any(name.startswith("head.2-module.2") for name in shapes)
    assert [r.label for r in model.module_refs()] == ["joint/1", "2-module/1", "2-module/2"]


def test_init_is_shared_across_partitions_and_seeded():
    a = _model((TWO,), seed=5)
    b = _model((JOINT, THREE), seed=5)
    c = _model((TWO,), seed=6)
    for name in a.backbone.param_names():
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["backbone.0.weight"], c.params["backbone.0.weight"])
    assert all(v.dtype == np.float32 for v in a.params.values())


def test_build_returns_disjoint_modules_covering_backbone():
    modules = build(cnn_small(SHAPE, 3), THREE, seed=1)
    assert [m.ref.label for m in modules] == ["3-module/1", "3-module/2", "3-module/3"]
    names = [set(m.backbone) for m in modules]
    assert not names[0] & names[1] and not names[1] & names[2]
    union = set().union(*names)
    assert union == set(cnn_small(SHAPE, 3).stack().param_names())
    assert modules[-1].head is None
    assert modules[0].head is not None


def test_features_chain_to_joint_logits():
    model = _model((TWO,))
    rng = np.random.default_rng(0)
    x = rng.random((4,) + SHAPE, dtype=np.float32)
    first, second = model.module_refs()
    z1 = model.features(second, x)
    m1 = model.module_params(first)
    _, z_out = module_forward_loss(m1, x, np.zeros(4, dtype=np.int64))
    np.testing.assert_allclose(z1, z_out, rtol=1e-6)
    m2 = model.module_params(second)
    _, logits = m2.net.logits(m2.as_dict(), z1)
    np.testing.assert_allclose(logits, model.backbone.forward(model.params, x), rtol=1e-5, atol=1e-6)
    assert model.features(first, x) is x


def test_last_module_loss_is_joint_loss():
    model = _model((JOINT,))
    rng = np.random.default_rng(3)
    x = rng.random((5,) + SHAPE, dtype=np.float32)
    y = rng.integers(0, 3, size=5)
    loss, _ = module_forward_loss(model.module_params(model.module_refs()[0]), x, y)
    joint_losses, _ = model.joint_net().loss(model.params, x, y)
    assert loss == pytest.approx(float(joint_losses.mean()))


@pytest.mark.parametrize("index", [1, 2])
def test_module_loss_gradients(index):
    model = _model((TWO,), seed=2)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    ref = model.ref("2-module", index)
    net = model.module_net(ref)
    stacks = [net.body] + ([net.head] if net.head is not None else [])

    def signature():
        return [part for stack in stacks for part in stack.branch_signature()]

    rng = np.random.default_rng(index)
    h = 1e-3
    checked = 0
    for _ in range(10):
        x = rng.random((3,) + SHAPE)
        y = rng.integers(0, 3, size=3)
        z = model.upstream_stack(ref).forward(params, x) if index == 2 else x
        _, _, grads = net.loss_and_grads(params, z, y)
        clean = signature()
        smooth = True
        errors = []
        for name in net.param_names():
            v = rng.normal(size=params[name].shape)
            plus = net.loss(dict(params, **{name: params[name] + h * v}), z, y)[0].mean()
            smooth = smooth and all(np.array_equal(a, b) for a, b in zip(clean, signature()))
            minus = net.loss(dict(params, **{name: params[name] - h * v}), z, y)[0].mean()
            smooth = smooth and all(np.array_equal(a, b) for a, b in zip(clean, signature()))
            fd = (plus - minus) / (2 * h)
            analytic = float((grads.by_parameter[name] * v).sum())
            errors.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6))
        if not smooth:
            continue
        checked += 1
        assert max(errors) < 1e-3
    assert checked >= 5


def test_module_params_are_copies_and_vectors_invert():
    model = _model((TWO,))
    ref = model.module_refs()[0]
    m = model.module_params(ref)
    m.backbone["backbone.0.weight"][:] = 0
    assert model.params["backbone.0.weight"].any()
    vec = m.to_vector()
    assert vec.dtype == np.float32 and vec.size == m.num_params()
    restored = m.from_vector(vec)
    for name in m.names():
        np.testing.assert_array_equal(restored.as_dict()[name], m.as_dict()[name])
    with pytest.raises(ShapeError):
        m.from_vector(vec[:-1])


def test_invalid_partitions():
    spec = cnn_small(SHAPE, 3)
    for cuts in [(0,), (11,), (4, 4), (6, 2)]:
        with pytest.raises(ConfigError):
            FadeModel.build(spec, {"bad": Partition("bad", cuts)}, 0)
    with pytest.raises(ConfigError):
        FadeModel.build(spec, {}, 0)
    model = _model((TWO,))
    with pytest.raises(ConfigError):
        model.ref("2-module", 3)


def test_flat_features_get_linear_head():
    model = FadeModel.build(mlp_tiny(SHAPE, 4), {"2-module": Partition("2-module", (3,))}, 0)
    assert model.param_shapes()["head.2-module.1.weight"] == (32, 4)


def test_parse_layers_custom_backbone():
    spec = parse_layers("conv:4, relu, maxpool, flatten, linear:10, relu, linear", SHAPE, 3)
    assert [layer["kind"] for layer in spec.layers][-1] == "linear"
    assert spec.layers[0]["padding"] == 0
    assert spec.stack().output_shape == (3,)
    for bad in ["", "conv", "linear", "softmax", "conv:x"]:
        with pytest.raises(ConfigError):
            parse_layers(bad, SHAPE, 3)


def test_profile_counts():
    spec = cnn_small(SHAPE, 3)
    rows = profile(spec, TWO)
    joint = sum(int(np.prod(s)) for s in spec.stack().param_shapes().values())
    assert sum(r.backbone_params for r in rows) == joint
    assert sum(r.backbone_macs for r in rows) == spec.stack().macs()
    assert rows[0].head_params == 144 * 3 + 3
    assert rows[1].head_params == 0
    table = profile_table(spec, {"joint": JOINT, "2-module": TWO})
    assert table.loc[table["module"] == "joint/1", "param_share"].item() == pytest.approx(1.0)
    assert list(table["module"]) == ["joint/1", "2-module/1", "2-module/2"]


class TestCheckpoint:
    def test_round_trip_is_bitwise(self):
        model = _model((JOINT, TWO), seed=4)
        restored = decode_checkpoint(encode_checkpoint(model), _model((JOINT, TWO), seed=9))
        for name, value in model.params.items():
            assert restored.params[name].tobytes() == value.tobytes()

    def test_bad_magic_names_file(self):
        data = b"XXXX" + encode_checkpoint(_model())[4:]
        with pytest.raises(CheckpointError) as e:
            decode_checkpoint(data, _model(), path="runs/x.fade")
        assert "runs/x.fade" in str(e.value)

    def test_partition_mismatch(self):
        data = encode_checkpoint(_model((TWO,)))
        with pytest.raises(CheckpointError):
            decode_checkpoint(data, _model((THREE,)))
        with pytest.raises(CheckpointError):
            decode_checkpoint(data, _model((TWO,), k=4))

    def test_truncated_and_trailing(self):
        data = encode_checkpoint(_model())
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-4], _model())
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:10], _model())
        with pytest.raises(CheckpointError):
            decode_checkpoint(data + b"\x00", _model())

    def test_unknown_version(self):
        data = bytearray(encode_checkpoint(_model()))
        data[4] = 99
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(data), _model())
