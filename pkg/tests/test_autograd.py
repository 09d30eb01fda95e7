import numpy as np
import pytest

from bnf import autograd as ag
from bnf.dsl import ModelConfig, parse_architecture
from bnf.model import Network


def test_linear_gradient():
    w = ag.param(np.array([[2.0]]))
    y = ag.linear(ag.Tensor(np.array([[3.0]])), w)
    ag.backward(y, [w])
    assert w.grad.tolist() == [[3.0]]


def test_disconnected_parameter_warns():
    w = ag.param(np.array([[2.0]]))
    unused = ag.param(np.ones(3))
    with pytest.warns(UserWarning, match="disconnected"):
        ag.backward(ag.linear(ag.Tensor(np.ones((1, 1))), w), [w, unused])
    assert np.array_equal(unused.grad, np.zeros(3))


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def weighted_sum(t, r):
    return float((t.data * r).sum())


@pytest.mark.parametrize("kernel", [(1, 1), (1, 3), (3, 3), (2, 4)])
def test_conv2d_gradients(rng, kernel):
    x = ag.param(rng.standard_normal((2, 4, 5, 3)))
    w = ag.param(rng.standard_normal(kernel + (3, 2)))
    r = rng.standard_normal((2, 4, 5, 2))
    out = ag.conv2d(x, w)
    ag.backward(_dot(out, r), [x, w])
    for p in (x, w):
        num = numeric_grad(lambda: weighted_sum(ag.conv2d(x, w), r), p.data)
        assert np.allclose(p.grad, num, atol=1e-6)


def _dot(t, r):
    """Scalar loss sum(t * r) as a graph node."""
    out = ag.Tensor(np.array((t.data * r).sum()), (t,))
    out._backward = lambda g: t._accum(g * r)
    return out


def test_batch_norm_gradients(rng):
    x = ag.param(rng.standard_normal((6, 2, 3, 4)))
    gamma = ag.param(rng.uniform(0.5, 1.5, 4))
    beta = ag.param(rng.standard_normal(4))
    r = rng.standard_normal(x.data.shape)
    from bnf.layers import BNState

    def run():
        return ag.batch_norm(x, gamma, beta, BNState.identity(4), training=True)

    ag.backward(_dot(run(), r), [x, gamma, beta])
    for p in (x, gamma, beta):
        assert np.allclose(p.grad, numeric_grad(lambda: weighted_sum(run(), r), p.data), atol=1e-6)


def test_max_pool_gradient_routes_to_max():
    x = ag.param(np.array([1.0, 5.0, 2.0, 0.0, 7.0]).reshape(1, 1, 5, 1))
    ag.backward(_dot(ag.max_pool(x, (1, 2)), np.array([10.0, 20.0]).reshape(1, 1, 2, 1)), [x])
    assert x.grad.ravel().tolist() == [0.0, 10.0, 20.0, 0.0, 0.0]


def test_activation_gate_and_quantize():
    x = ag.param(np.array([-0.5, 0.2, 0.6, 1.5]))
    y = ag.activation(x, quantize=True)
    assert y.data.tolist() == [0.0, 0.0, 1.0, 1.0]
    ag.backward(_dot(y, np.ones(4)), [x])
    assert x.grad.tolist() == [0.0, 1.0, 1.0, 0.0]


def test_binarize_identity_gradient(rng):
    w = ag.param(rng.standard_normal(5))
    r = rng.standard_normal(5)
    b = ag.binarize(w)
    assert np.allclose(np.abs(b.data), np.abs(w.data).mean())
    ag.backward(_dot(b, r), [w])
    assert np.array_equal(w.grad, r)


def test_softmax_cross_entropy_gradient(rng):
    z = ag.param(rng.standard_normal((4, 3)))
    y = np.array([0, 2, 1, 2])
    ag.backward(ag.softmax_cross_entropy(z, y), [z])
    num = numeric_grad(lambda: float(ag.softmax_cross_entropy(z, y).data), z.data)
    assert np.allclose(z.grad, num, atol=1e-7)


def test_quantized_path_gradients_finite():
    cfg = ModelConfig(parse_architecture("8-C3+MP2+FC16+Softmax"), "bil", 4, 8, (1, 8, 2), "time_only", 3)
    net = Network(cfg, seed=0)
    x = np.random.default_rng(0).integers(0, 256, (6, 1, 8, 2))
    loss = ag.softmax_cross_entropy(net.forward(x, training=True, rng=np.random.default_rng(1)),
                                    np.array([0, 1, 2, 0, 1, 2]))
    params = net.parameters()
    ag.backward(loss, params)
    for p in params:
        assert p.grad.shape == p.data.shape and np.isfinite(p.grad).all()
