"""Backpropagation vs central finite differences, plus SGD contracts."""

import numpy as np
import pytest

from uwstereo.nn import (GradientError, GraphBuilder, SGD, mse, mse_grad,
                         sgd_step)
from uwstereo.nn.gradcheck import check_gradients

TOL = 1e-4


def mse_to(target):
    return (lambda y: mse(y, target)), (lambda y: mse_grad(y, target))


def build(fn, seed=0):
    g = GraphBuilder(rng=np.random.default_rng(seed))
    x = g.input("image")
    return g.build(fn(g, x))


class TestLayerGradients:
    def test_conv(self, rng):
        net = build(lambda g, x: g.conv(x, 2, 3, kernel=3))
        x = rng.standard_normal((2, 2, 6, 6))
        target = rng.standard_normal((2, 3, 6, 6))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_conv_strided(self, rng):
        net = build(lambda g, x: g.conv(x, 1, 2, kernel=3, stride=2, pad=1))
        x = rng.standard_normal((1, 1, 7, 7))
        target = rng.standard_normal((1, 2, 4, 4))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_maxpool(self, rng):
        net = build(lambda g, x: g.maxpool(g.conv(x, 1, 2)))
        x = rng.standard_normal((1, 1, 6, 6))
        target = rng.standard_normal((1, 2, 3, 3))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_upsample(self, rng):
        net = build(lambda g, x: g.upsample(g.conv(x, 1, 2)))
        x = rng.standard_normal((1, 1, 4, 4))
        target = rng.standard_normal((1, 2, 8, 8))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_relu(self, rng):
        net = build(lambda g, x: g.relu(g.conv(x, 1, 3)))
        x = rng.standard_normal((1, 1, 5, 5))
        target = rng.standard_normal((1, 3, 5, 5))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_concat(self, rng):
        def graph(g, x):
            a = g.conv(x, 1, 2)
            b = g.conv(x, 1, 3)
            return g.conv(g.concat([a, b]), 5, 1)
        net = build(graph)
        x = rng.standard_normal((1, 1, 5, 5))
        target = rng.standard_normal((1, 1, 5, 5))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_linear(self, rng):
        net = build(lambda g, x: g.linear(x, 6, 4))
        x = rng.standard_normal((3, 6))
        target = rng.standard_normal((3, 4))
        assert check_gradients(net, x, *mse_to(target)) < TOL

    def test_deep_mixed_graph(self, rng):
        def graph(g, x):
            a = g.relu(g.conv(x, 1, 4))
            p = g.maxpool(a)
            u = g.upsample(g.conv(p, 4, 4))
            return g.conv(g.concat([a, u]), 8, 1)
        net = build(graph, seed=2)
        x = rng.standard_normal((1, 1, 6, 6))
        target = rng.standard_normal((1, 1, 6, 6))
        # the coarser step would straddle pool-argmax ties in this graph
        assert check_gradients(net, x, *mse_to(target), step=1e-4) < TOL


class TestBackwardContracts:
    def test_zero_loss_grad_gives_zero_param_grads(self, rng):
        net = build(lambda g, x: g.conv(g.relu(g.conv(x, 1, 3)), 3, 2))
        x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
        out, tape = net.forward(x, record=True)
        grads = net.backward(tape, np.zeros_like(out))
        for dw, db in grads.params.values():
            assert not dw.any() and not db.any()

    def test_relu_blocks_gradient_at_negative_preactivation(self):
        g = GraphBuilder(rng=np.random.default_rng(0))
        x = g.input()
        net = g.build(g.relu(x))
        inp = np.array([[[[-3.0, 2.0]]]], np.float32)
        out, tape = net.forward(inp, record=True)
        grads = net.backward(tape, np.ones_like(out))
        np.testing.assert_array_equal(grads.inputs["image"],
                                      [[[[0.0, 1.0]]]])

    def test_backward_without_tape_rejected(self, rng):
        net = build(lambda g, x: g.conv(x, 1, 1))
        with pytest.raises(GradientError, match="recorded"):
            net.backward(None, np.zeros((1, 1, 4, 4)))

    def test_tape_single_use(self, rng):
        net = build(lambda g, x: g.conv(x, 1, 1))
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        out, tape = net.forward(x, record=True)
        net.backward(tape, np.zeros_like(out))
        with pytest.raises(GradientError):
            net.backward(tape, np.zeros_like(out))

    def test_gradient_shapes_match_parameters(self, rng):
        net = build(lambda g, x: g.conv(g.relu(g.conv(x, 1, 4)), 4, 2))
        x = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
        out, tape = net.forward(x, record=True)
        grads = net.backward(tape, np.ones_like(out))
        for node in net.param_nodes():
            dw, db = grads.params[node.name]
            assert dw.shape == node.layer.weight.shape
            assert db.shape == node.layer.bias.shape


class TestSGD:
    def quadratic_net(self):
        # single linear weight, no useful bias: loss (w*1 - 3)^2
        g = GraphBuilder(rng=np.random.default_rng(0))
        x = g.input()
        net = g.build(g.linear(x, 1, 1))
        net.node("linear0").layer.weight[:] = 0.0
        net.node("linear0").layer.bias[:] = 0.0
        return net

    def test_zero_lr_leaves_parameters(self, rng):
        net = build(lambda g, x: g.conv(x, 1, 2))
        ref = net.copy()
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        out, tape = net.forward(x, record=True)
        grads = net.backward(tape, np.ones_like(out))
        sgd_step(net, grads, lr=0.0)
        assert net.params_equal(ref)

    def test_quadratic_converges_to_minimum(self):
        net = self.quadratic_net()
        x = np.ones((1, 1), np.float32)
        opt = SGD(lr=0.1)
        for _ in range(200):
            out, tape = net.forward(x, record=True)
            grads = net.backward(tape, 2.0 * (out - 3.0))
            # bias would also absorb the target; freeze it to keep 1 dof
            grads.params["linear0"] = (grads.params["linear0"][0],
                                       np.zeros_like(grads.params["linear0"][1]))
            opt.step(net, grads)
        assert abs(float(net.node("linear0").layer.weight[0, 0]) - 3.0) < 1e-3

    def test_momentum_zero_equals_vanilla(self, rng):
        net_a = build(lambda g, x: g.conv(x, 1, 2), seed=9)
        net_b = net_a.copy()
        opt_a = SGD(lr=0.05, momentum=0.0)
        opt_b = SGD(lr=0.05)
        x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        target = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        for _ in range(5):
            for net, opt in ((net_a, opt_a), (net_b, opt_b)):
                out, tape = net.forward(x, record=True)
                opt.step(net, net.backward(tape, mse_grad(out, target)))
        assert net_a.params_equal(net_b)

    def test_nonfinite_gradient_rejected(self, rng):
        net = build(lambda g, x: g.conv(x, 1, 1))
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        out, tape = net.forward(x, record=True)
        grads = net.backward(tape, np.full_like(out, np.nan))
        before = net.copy()
        with pytest.raises(GradientError, match="non-finite"):
            SGD(lr=0.1).step(net, grads)
        assert net.params_equal(before)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            SGD(lr=-1.0)
        with pytest.raises(ValueError):
            SGD(lr=0.1, momentum=1.0)
