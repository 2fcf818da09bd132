import numpy as np
import pytest

from obn.basis import BasisConv, BasisBlockGroup
from obn.errors import ConfigError, NameParseError, RankError
from obn.models import build, count, spec_from_name
from obn.nn import Conv2d, Linear

DUAL = "‡"


def enumerate_params(net):
    return sum(p.data.size for p in net.parameters())


def measured_macs(net, input_size):
    """MACs of every conv/linear, measured from the shapes seen in one forward pass."""
    total = [0]
    patched = []
    for mod in net.modules():
        if isinstance(mod, (Conv2d, BasisConv, Linear)):
            fwd = mod.forward

            def wrapped(x, tape=None, _fwd=fwd, _mod=mod):
                y = _fwd(x, tape)
                if isinstance(_mod, Linear):
                    total[0] += _mod.weight.data.size
                else:
                    w = _mod.weight.data if isinstance(_mod, Conv2d) else _mod.basis.elements(_mod.block)
                    total[0] += w.size * y.shape[2] * y.shape[3]
                return y

            object.__setattr__(mod, "forward", wrapped)
            patched.append(mod)
    c = net.spec.in_channels
    net.eval()
    net.forward(np.zeros((1, c, input_size, input_size), dtype=net.dtype))
    for mod in patched:
        object.__delattr__(mod, "forward")
    return total[0]


@pytest.mark.parametrize("name,params,tol", [
    ("ResNet32", 0.46e6, 0.01),
    ("ResNet56", 0.85e6, 0.01),
    ("ResNet32-S16U1" + DUAL, 0.24e6, 0.05),
    ("ResNet56-S16U1", 0.27e6, 0.05),
    ("ResNet56-S16U1" + DUAL, 0.31e6, 0.05),
])
def test_cifar10_param_counts(name, params, tol):
    assert abs(count(spec_from_name(name)).params - params) <= tol * params


def test_resnet34_s32u1_cifar100():
    rep = count(spec_from_name("ResNet34-S32U1", classes=100))
    assert abs(rep.params - 7.73e6) <= 0.05 * 7.73e6
    assert abs(rep.flops - 0.78e9) <= 0.05 * 0.78e9


def test_resnet32_flops():
    assert abs(count(spec_from_name("ResNet32")).flops - 0.07e9) <= 0.03 * 0.07e9


@pytest.mark.parametrize("name,opts", [
    ("ResNet20", {}),
    ("ResNet20-S8U1", {}),
    ("ResNet32-S16U1" + DUAL, {}),
    ("ResNet56-S16U1", {}),
    ("ResNet20-S8U0", {"share_bn": True}),
    ("ResNet14-S4U2", {"basis_bn": False, "bn_order": "pre_act"}),
    ("ResNet18-S16U1", {"classes": 100}),
])
def test_counter_matches_built_network(name, opts):
    spec = spec_from_name(name, **opts)
    net = build(spec, seed=0)
    rep = count(spec)
    assert rep.params == enumerate_params(net)
    assert rep.flops == measured_macs(net, spec.input_size)


def test_counter_matches_imagenet_geometry():
    spec = spec_from_name("ResNet18-S32U1", geometry="imagenet", input_size=64, classes=20)
    net = build(spec, seed=0)
    assert count(spec).params == enumerate_params(net)
    assert count(spec).flops == measured_macs(net, 64)


def test_pointwise_conv_macs():
    spec = spec_from_name("ResNet8")
    rep = count(spec)
    # stage0 entry conv1: 3x3, 16 -> 16 on 32x32
    assert dict((n, f) for n, _, f in rep.layers)["stage0.entry.conv1"] == 9 * 16 * 16 * 32 * 32


def test_factorized_conv_saves_flops_only_for_small_rank():
    full = count(spec_from_name("ResNet20")).flops
    assert count(spec_from_name("ResNet20-S4U0")).flops < full
    assert count(spec_from_name("ResNet20-S64U0")).flops > full


@pytest.mark.parametrize("name", ["ResNet32", "ResNet56-S16U1" + DUAL, "ResNet20-S8U1", "ResNet34-S32U1",
                                  "ResNet110-S16U4"])
def test_name_round_trip(name):
    assert spec_from_name(name).name == name


def test_parse_fields():
    spec = spec_from_name("ResNet56-S16U1" + DUAL)
    assert (spec.depth, spec.s, spec.u, spec.dual) == (56, 16, 1, True)
    base = spec_from_name("ResNet32")
    assert base.s == 0 and base.groups == 0
    assert [st.channels for st in base.stages] == [16, 32, 64]
    assert [st.blocks for st in base.stages] == [5, 5, 5]


@pytest.mark.parametrize("name,pos", [
    ("ResNet32-S0U1", 10),
    ("Resnet32", 0),
    ("ResNet", 6),
    ("ResNet33", 6),
    ("ResNet32-S16", 12),
    ("ResNet32-S16U1x", 14),
    ("ResNet32" + DUAL, 8),
])
def test_parse_errors_report_position(name, pos):
    with pytest.raises(NameParseError) as e:
        spec_from_name(name)
    assert e.value.position == pos
    assert f"position {pos}" in str(e.value)


def test_overcomplete_basis_rejected():
    with pytest.raises(RankError):
        spec_from_name("ResNet20-S140U5")


def test_build_structure():
    net = build("ResNet32-S16U1" + DUAL)
    groups = net.basis_groups()
    assert len(groups) == 3
    for i, g in groups:
        assert isinstance(g, BasisBlockGroup) and g.dual and len(g.blocks) == 4
        mult = [1, 2, 4][i]
        assert g.basis_a.s == 16 * mult and g.basis_a.u == 1 * mult
    assert len(net.bases()) == 6
    u0 = build("ResNet20-S8U0")
    assert all(b.u == 0 and not b.unshared for _, b in u0.bases())


def test_build_is_seeded():
    a, b = build("ResNet14-S4U1", seed=3), build("ResNet14-S4U1", seed=3)
    c = build("ResNet14-S4U1", seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_forward_backward_shapes_and_tape():
    net = build("ResNet14-S4U1" + DUAL, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((3, 3, 32, 32))
    loss, logits = net.loss_and_backward(x, np.array([0, 1, 2]))
    assert logits.shape == (3, 10) and np.isfinite(loss)
    assert all(np.all(np.isfinite(p.grad)) for p in net.parameters())


def test_with_ranks_keeps_options():
    spec = spec_from_name("ResNet20-S8U1", classes=100, bn_order="pre_act")
    other = spec.with_ranks(16, 2)
    assert other.name == "ResNet20-S16U2" and other.classes == 100 and other.bn_order == "pre_act"


def test_invalid_options():
    with pytest.raises(ConfigError):
        spec_from_name("ResNet20", geometry="imagenet")
    with pytest.raises(ConfigError):
        spec_from_name("ResNet20-S8U1", bn_order="sideways")
