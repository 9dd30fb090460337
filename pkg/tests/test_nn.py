import math

import numpy as np
import pytest

from stackop import autodiff as ad
from stackop.errors import DimensionError
from stackop.nn import (
    MLP,
    Activation,
    activation,
    dense_parameter_count,
    forward,
    mlp_from_state,
    mlp_state,
    parameter_count,
    read_named_tensors,
    write_named_tensors,
)


def test_activation_values():
    assert activation("standard", 0.0, 0.5) == pytest.approx(math.tanh(0.5))
    assert activation("relu", 0.0, -1.0) == 0.0
    # super-expressive: alpha t + (1 - alpha) base(t)
    assert activation("superexpressive", 0.0, 2.5) == pytest.approx(0.5)
    assert activation("superexpressive", 0.0, -1.0) == pytest.approx(-0.5)
    assert activation("superexpressive", 1.0, 7.3) == pytest.approx(7.3)


def test_zero_net_returns_offset():
    net = MLP.build([3, 4, 2], zero=True)
    net.c.data[:] = [1.5, -2.0]
    np.testing.assert_array_equal(forward(net, np.ones(3)).data, [1.5, -2.0])
    assert parameter_count(net) == 2


def test_superexpressive_identity_layer():
    net = MLP.build([3, 3], Activation.SUPER_EXPRESSIVE, rng=0)
    net.A[0].data[:] = np.eye(3)
    x = np.array([0.3, 5.1, -2.0])
    np.testing.assert_allclose(forward(net, x).data, x)


def _straight_line(net, x):
    h = x
    for A, b in zip(net.A, net.b):
        h = np.tanh(h + b.data) @ A.data.T
    return h + net.c.data


def test_matches_hand_rolled_arithmetic():
    net = MLP.build([4, 6, 3], rng=1)
    for b in net.b:
        b.data[:] = np.random.default_rng(2).normal(size=b.shape)
    x = np.random.default_rng(3).normal(size=(5, 4))
    np.testing.assert_allclose(forward(net, x).data, _straight_line(net, x), atol=1e-12)


def test_forward_is_deterministic():
    net = MLP.build([4, 8, 2], Activation.SUPER_EXPRESSIVE, rng=4)
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(forward(net, x).data, forward(net, x).data)


def test_input_dimension_checked():
    with pytest.raises(DimensionError):
        forward(MLP.build([3, 2], rng=0), np.ones(4))
    with pytest.raises(DimensionError):
        MLP.build([3])


def test_dense_count_by_hand():
    # J = 2, W = 4, scalar in and out: A (4x1, 1x4) + b (1, 4) + c (1)
    assert dense_parameter_count([1, 4, 1]) == 4 + 4 + 1 + 4 + 1
    net = MLP.build([1, 4, 1], rng=0)
    for b in net.b:
        b.data[:] = 0.1
    net.c.data[:] = 0.1
    assert parameter_count(net) == 14
    # alpha doubles the per-neuron shifts
    assert dense_parameter_count([1, 4, 1], "superexpressive") == 19


@pytest.mark.parametrize("widths", [[2, 3, 1], [8, 32, 32, 16], [5, 7, 7, 7, 2]])
def test_count_within_depth_width_budget(widths):
    net = MLP.build(widths, rng=0)
    J, W = len(widths) - 1, max(widths)
    assert parameter_count(net) <= J * W * W


@pytest.mark.parametrize("family", list(Activation))
def test_mlp_gradient_matches_finite_differences(family):
    net = MLP.build([3, 5, 2], family, rng=5)
    x = np.random.default_rng(6).normal(size=(4, 3))
    y = np.random.default_rng(7).normal(size=(4, 2))
    if family is Activation.SUPER_EXPRESSIVE:
        for a in net.alpha:
            a.data[:] = 0.4
    params = net.parameters()
    _, grads = ad.grad(lambda: ad.tsum(ad.square(forward(net, x) - ad.Tensor(y))), params)
    for p, g in zip(params, grads):
        orig = p.data.copy()

        def f(v):
            p.data[...] = v
            out = float(np.sum((forward(net, x).data - y) ** 2))
            p.data[...] = orig
            return out

        fd = ad.numeric_grad(f, orig)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_named_tensor_roundtrip(tmp_path):
    net = MLP.build([3, 4, 2], Activation.SUPER_EXPRESSIVE, rng=8)
    path = tmp_path / "net.txt"
    write_named_tensors(path, mlp_state(net, "f."), header="note")
    st = read_named_tensors(path)
    back = mlp_from_state(st, "f.", "superexpressive")
    x = np.random.default_rng(1).normal(size=(2, 3))
    assert np.array_equal(forward(back, x).data, forward(net, x).data)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "# note"
    assert lines[2].split(" ")[:2] == ["f.A0", "4,3"]
