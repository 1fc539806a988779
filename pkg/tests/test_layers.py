import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gctnet import layers as L
from gctnet.network import (NetworkSpec, SpecError, build_network, load_checkpoint, miniresnet,
                            read_checkpoint, resnet50, resolve_spec, save_checkpoint, smallcnn)
from gctnet.tensor import ShapeError
from oracles import se_scalar


def rel(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


# SE

def test_se_zero_weights_halve_input():
    x = np.random.default_rng(0).standard_normal((2, 8, 3, 3))
    p = L.SeParams(np.zeros((2, 8)), np.zeros((8, 2)), 4)
    out, _ = L.se_forward(x, p)
    assert np.array_equal(out, x / 2)


def test_se_pool_recovers_constant():
    x = np.broadcast_to(np.arange(1.0, 9.0)[None, :, None, None], (1, 8, 5, 5)).copy()
    p = L.SeParams(np.zeros((2, 8)), np.zeros((8, 2)), 4)
    _, cache = L.se_forward(x, p)
    assert np.array_equal(cache[1][0], np.arange(1.0, 9.0))


def test_se_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 16, 4, 4))
    p = L.SeParams(rng.standard_normal((4, 16)), rng.standard_normal((16, 4)), 4)
    out, _ = L.se_forward(x, p)
    assert rel(out, se_scalar(x, p.w1, p.w2)) < 1e-12


def test_se_params_validation():
    with pytest.raises(ShapeError):
        L.SeParams(np.zeros((2, 6)), np.zeros((6, 2)), 4)
    with pytest.raises(ShapeError):
        L.SeParams(np.zeros((3, 8)), np.zeros((8, 2)), 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.sampled_from([4, 8, 16, 32]))
def test_se_gate_in_open_unit_interval(seed, c):
    rng = np.random.default_rng(seed)
    block = L.SEBlock(c, 4, rng=rng, dtype=np.float64)
    block.forward(rng.standard_normal((2, c, 3, 3)))
    a = block._cache[4]
    assert np.all((a > 0) & (a < 1))


def test_se_reduction_clamp():
    assert L.se_reduction(256, 16) == 16
    assert L.se_reduction(16, 16) == 4
    assert L.se_reduction(64, 16) == 16
    assert L.se_reduction(12, 16) == 3
    assert L.se_reduction(2, 16) == 1
    for c in range(4, 80):
        r = L.se_reduction(c)
        assert c % r == 0 and c // r >= 4


# plain layers

def test_relu():
    out = L.ReLU().forward(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
    assert out.ravel().tolist() == [0.0, 0.0, 2.0]
    assert not np.signbit(out).any()


@pytest.mark.parametrize("k", [2, 3, 10])
def test_softmax_equal_logits_is_log_k(k):
    head = L.SoftmaxXent()
    loss = head.forward(np.full((4, k), 0.37), np.arange(4) % k)
    assert abs(loss - math.log(k)) < 1e-12
    g = head.backward()
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)


def test_softmax_large_logits_stable():
    head = L.SoftmaxXent()
    loss = head.forward(np.array([[1000.0, 0.0], [0.0, 1000.0]]), np.array([0, 0]))
    assert np.isfinite(loss) and abs(loss - 500.0) < 1e-9


def test_bn_eval_with_unit_stats_is_affine():
    bn = L.BatchNorm2d(3, dtype=np.float64)
    bn.params["weight"][:] = [2.0, 1.0, -1.0]
    bn.params["bias"][:] = [0.5, 0.0, 1.0]
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
    out = bn.forward(x, train=False)
    expect = x / math.sqrt(1 + 1e-5) * bn.params["weight"][None, :, None, None] \
        + bn.params["bias"][None, :, None, None]
    assert rel(out, expect) < 1e-15


def test_bn_train_normalizes_and_updates_running_stats():
    bn = L.BatchNorm2d(2, dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((4, 2, 3, 3)) * 3 + 5
    out = bn.forward(x, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-5)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(bn.buffers["running_var"],
                               0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-12)


def test_maxpool_and_gap():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert L.MaxPool2d(2).forward(x).ravel().tolist() == [5.0, 7.0, 13.0, 15.0]
    assert L.GlobalAvgPool().forward(x).tolist() == [[7.5]]
    g = L.MaxPool2d(2)
    g.forward(x)
    back = g.backward(np.ones((1, 1, 2, 2)))
    assert back.sum() == 4 and back[0, 0, 1, 1] == 1 and back[0, 0, 0, 0] == 0


def test_linear_flattens_and_checks_width():
    lin = L.Linear(4, 2, rng=np.random.default_rng(0), dtype=np.float64)
    x = np.ones((3, 4, 1, 1))
    assert lin.forward(x).shape == (3, 2)
    with pytest.raises(ShapeError):
        lin.cost((1, 5))


def test_forward_backward_shapes_every_layer_kind():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 6, 6))
    for layer in [L.Conv2d(4, 3, 3, 2, rng=rng, dtype=np.float64),
                  L.BatchNorm2d(4, dtype=np.float64), L.ReLU(), L.MaxPool2d(2),
                  L.GctLayer(4, dtype=np.float64), L.SEBlock(4, 1, rng=rng, dtype=np.float64),
                  L.Residual([L.Conv2d(4, 4, 3, rng=rng, dtype=np.float64)])]:
        y = layer.forward(x, train=True)
        gx = layer.backward(np.ones_like(y))
        assert gx.shape == x.shape, layer
        for k, p in layer.params.items():
            assert layer.grads[k].shape == p.shape


# networks

def test_two_convs_before_conv_gives_two_gct_nodes():
    spec = NetworkSpec([{"kind": "conv", "out": 4}, {"kind": "relu"},
                        {"kind": "conv", "out": 4}, {"kind": "gap"},
                        {"kind": "linear", "out": 2}], placement="before_conv")
    net = build_network(spec)
    assert len(net.gct_layers()) == 2
    names = [layer.name for layer in net.walk()]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("placement,expected", [("before_conv", 3), ("before_bn", 3),
                                                ("after_bn", 3), ("none", 0)])
def test_placement_counts_on_smallcnn(placement, expected):
    assert len(build_network(smallcnn(placement=placement)).gct_layers()) == expected


def test_block_last_two_placement():
    net = build_network(miniresnet(placement="block_last_two"))
    # stem conv gets none; each block body has exactly two convs
    assert len(net.gct_layers()) == 6
    assert all("/body/" in g.name for g in net.gct_layers())


@pytest.mark.parametrize("factory", [smallcnn, miniresnet])
def test_fresh_gct_network_matches_baseline_bit_exactly(factory):
    x = np.random.default_rng(5).standard_normal((4, 3, 16, 16)).astype(np.float32)
    base = build_network(factory(), seed=7)
    gct = build_network(factory(placement="before_conv"), seed=7)
    for train in (False, True):
        assert np.array_equal(base.forward(x, train), gct.forward(x, train))


def test_residual_block_matches_hand_composition():
    rng = np.random.default_rng(6)
    spec = NetworkSpec([{"kind": "residual",
                         "body": [{"kind": "conv", "out": 4}, {"kind": "bn"}, {"kind": "relu"},
                                  {"kind": "conv", "out": 4}, {"kind": "bn"}],
                         "shortcut": []}], input_channels=4)
    net = build_network(spec, seed=1, dtype=np.float64)
    c1, b1, _, c2, b2 = net.layers[0].body.layers
    for bn in (b1, b2):
        bn.buffers["running_mean"][:] = rng.normal(0, 1, 4)
        bn.buffers["running_var"][:] = rng.uniform(0.5, 2, 4)
        bn.params["weight"][:] = rng.normal(1, 0.2, 4)
        bn.params["bias"][:] = rng.normal(0, 0.2, 4)
    x = rng.standard_normal((2, 4, 5, 5))

    def conv(v, w):
        p = np.pad(v, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((v.shape[0], w.shape[0]) + v.shape[2:])
        for i in range(3):
            for j in range(3):
                out += np.einsum("nchw,oc->nohw", p[:, :, i:i + 5, j:j + 5], w[:, :, i, j])
        return out

    def bn(v, layer):
        m, s = layer.buffers["running_mean"], layer.buffers["running_var"]
        return ((v - m[:, None, None]) / np.sqrt(s[:, None, None] + 1e-5)
                * layer.params["weight"][:, None, None] + layer.params["bias"][:, None, None])

    h = np.maximum(bn(conv(x, c1.params["weight"]), b1), 0)
    expect = np.maximum(bn(conv(h, c2.params["weight"]), b2) + x, 0)
    assert rel(net.forward(x, train=False), expect) < 1e-12


def test_invalid_specs():
    with pytest.raises(SpecError):
        NetworkSpec([{"kind": "dropout"}])
    with pytest.raises(SpecError):
        NetworkSpec([{"kind": "conv"}])
    with pytest.raises(SpecError):
        NetworkSpec([{"kind": "conv", "out": 2}], placement="everywhere")
    with pytest.raises(SpecError):
        NetworkSpec([{"kind": "conv", "out": 2}], gct={"embed_norm": "l7"})
    with pytest.raises(SpecError):
        build_network(NetworkSpec([{"kind": "residual", "body": [{"kind": "conv", "out": 8}]}],
                                  input_channels=4))
    with pytest.raises(SpecError):
        NetworkSpec.from_dict({"layers": [], "widths": 3})
    with pytest.raises(SpecError):
        resolve_spec("no-such-network")


def test_float32_network_stays_float32():
    net = build_network(miniresnet(placement="before_conv", se_blocks=True), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    for layer in net.gct_layers():
        layer.params["gamma"][:] = 0.5
    logits = net.forward(x, train=True)
    assert logits.dtype == np.float32
    net.loss.forward(logits, np.array([0, 1]))
    assert net.backward(net.loss.backward()).dtype == np.float32
    for name, layer, key in net.named_parameters():
        assert layer.grads[key].dtype == np.float32, name


def test_checkpoint_round_trip(tmp_path):
    net = build_network(miniresnet(placement="before_conv", gct={"adaptation": "sigmoid"}), seed=3)
    rng = np.random.default_rng(0)
    for layer in net.gct_layers():
        layer.params["gamma"][:] = rng.normal(0, 1, layer.channels)
    net.forward(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), train=True)  # move BN stats
    path = tmp_path / "ck.bin"
    save_checkpoint(path, net, extra={"note": "x"})
    header, state = read_checkpoint(path)
    assert header["extra"] == {"note": "x"} and header["dtype"] == "<f4"
    assert set(header["gct"]) == {g.name for g in net.gct_layers()}
    assert header["gct"][net.gct_layers()[0].name]["adaptation"] == "sigmoid"
    back = load_checkpoint(path)
    for (k, a), (k2, b) in zip(net.state_dict().items(), back.state_dict().items()):
        assert k == k2 and np.array_equal(a, b)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(net.forward(x), back.forward(x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(SpecError):
        read_checkpoint(p)


def test_resnet50_builds_shape_only():
    net = build_network(resnet50(placement="before_conv"), materialize=False)
    assert sum(1 for layer in net.walk() if layer.kind == "conv") == 53
    assert len(net.gct_layers()) == 53
