"""
可微分层：形状与有限差分梯度检查（64 位）
"""
import numpy as np
import pytest

from development.dev_config import dev_config
from errors import EmptyInputError, ShapeError
from network.gradcheck import check_module, grad_check, relative_error
from network.layers import (
    Conv2d, ConvTranspose2d, Dense, GRUCell, LayerNorm, conv_output_size, masked_mse_loss, mse_loss,
)

TOL = dev_config.GRADCHECK_LAYER_TOL


def _projection(rng, shape):
    """固定的随机投影，把输出变成标量损失"""
    return rng.normal(size=shape)


@pytest.mark.parametrize("size, expected", [(120, 60), (160, 80), (15, 8), (5, 3), (69, 35), (1, 1)])
def test_conv_output_size(size, expected):
    assert conv_output_size(size) == expected


def test_conv2d_gradients(rng):
    conv = Conv2d(2, 3, stride=2, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 2, 7, 9))
    y, _ = conv.forward(x)
    assert y.shape == (2, 3, 4, 5)
    weights = _projection(rng, y.shape)
    grads = {}

    def loss():
        return float(np.sum(conv.forward(x)[0] * weights))

    def backward():
        _, cache = conv.forward(x)
        grads["x"] = conv.backward(weights, cache)

    result = check_module(conv, loss, backward, extra=None)
    assert result.passed(TOL), result.worst
    assert grad_check(loss, {"x": (x, grads["x"])}).passed(TOL)


def test_conv_transpose_gradients_and_shape(rng):
    deconv = ConvTranspose2d(3, 2, stride=2, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 3, 4, 5))
    y, _ = deconv.forward(x, (7, 9))
    assert y.shape == (2, 2, 7, 9)
    with pytest.raises(ShapeError):
        deconv.forward(x, (12, 9))
    weights = _projection(rng, y.shape)
    grads = {}

    def loss():
        return float(np.sum(deconv.forward(x, (7, 9))[0] * weights))

    def backward():
        _, cache = deconv.forward(x, (7, 9))
        grads["x"] = deconv.backward(weights, cache)

    assert check_module(deconv, loss, backward).passed(TOL)
    assert grad_check(loss, {"x": (x, grads["x"])}).passed(TOL)


def test_conv_transpose_is_adjoint_of_conv(rng):
    conv = Conv2d(2, 3, rng=rng, dtype=np.float64)
    deconv = ConvTranspose2d(3, 2, dtype=np.float64)
    deconv.weight.value = conv.weight.value.copy()
    x = rng.normal(size=(1, 2, 7, 9))
    y = rng.normal(size=(1, 3, 4, 5))
    conv_x = conv.forward(x)[0] - conv.bias.value[None, :, None, None]
    deconv_y = deconv.forward(y, (7, 9))[0]
    assert np.sum(conv_x * y) == pytest.approx(np.sum(x * deconv_y))


def test_dense_and_layernorm_gradients(rng):
    dense = Dense(5, 4, rng=rng, dtype=np.float64)
    norm = LayerNorm(4, dtype=np.float64)
    norm.gamma.value[:] = rng.uniform(0.5, 1.5, size=4)
    x = rng.normal(size=(3, 5))
    weights = _projection(rng, (3, 4))
    grads = {}

    def forward():
        y, dense_cache = dense.forward(x)
        z, norm_cache = norm.forward(y)
        return z, dense_cache, norm_cache

    def loss():
        return float(np.sum(forward()[0] * weights))

    def backward():
        _, dense_cache, norm_cache = forward()
        grads["x"] = dense.backward(norm.backward(weights, norm_cache), dense_cache)

    for module in (dense, norm):
        assert check_module(module, loss, backward).passed(TOL)
    assert grad_check(loss, {"x": (x, grads["x"])}).passed(TOL)


def test_layernorm_output_is_normalized(rng):
    out, _ = LayerNorm(6, dtype=np.float64).forward(rng.normal(3.0, 2.0, size=(4, 6)))
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.std(axis=1), 1.0, atol=1e-3)


def test_gru_cell_gradients(rng):
    gru = GRUCell(4, 3, rng=rng, dtype=np.float64)
    gru.b.value[:] = rng.normal(scale=0.1, size=9)
    x = rng.normal(size=(2, 4))
    h = rng.normal(size=(2, 3))
    weights = _projection(rng, (2, 3))
    grads = {}

    def loss():
        return float(np.sum(gru.forward(x, h)[0] * weights))

    def backward():
        _, cache = gru.forward(x, h)
        grads["x"], grads["h"] = gru.backward(weights, cache)

    assert check_module(gru, loss, backward).passed(TOL)
    assert grad_check(loss, {"x": (x, grads["x"]), "h": (h, grads["h"])}).passed(TOL)


def test_gru_with_zero_update_gate_bias_stays_bounded(rng):
    gru = GRUCell(4, 3, rng=rng, dtype=np.float64)
    h = np.zeros((1, 3))
    for _ in range(50):
        h, _ = gru.forward(rng.normal(size=(1, 4)), h)
    assert np.all(np.abs(h) <= 1.0)


def test_mse_losses():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.zeros((2, 2))
    loss, grad = mse_loss(pred, target)
    assert loss == pytest.approx(7.5)
    assert np.allclose(grad, pred / 2.0)
    mask = np.array([[True, False], [False, False]])
    loss, grad = masked_mse_loss(pred, target, mask)
    assert loss == pytest.approx(1.0)
    assert np.allclose(grad, [[2.0, 0.0], [0.0, 0.0]])
    with pytest.raises(EmptyInputError):
        masked_mse_loss(pred, target, np.zeros((2, 2), dtype=bool))
    with pytest.raises(ShapeError):
        mse_loss(pred, np.zeros(4))


def test_grad_check_requires_float64():
    array = np.zeros(3, dtype=np.float32)
    with pytest.raises(TypeError):
        grad_check(lambda: 0.0, {"a": (array, np.ones(3))})
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
