"""
EDS 网络：形状、模态消融、反馈通道与整模型梯度检查
"""
import numpy as np
import pytest

from development.dev_config import DevTools, dev_config
from errors import ConfigError, ShapeError
from network.eds_model import (
    ConvAutoencoder, EdsModel, ae_forward, load_pretrained_encoder, modality_ablate,
)
from network.gradcheck import check_module
from network.layers import mse_loss


def _inputs(rng, n=1, steps=3):
    depth = rng.uniform(0.0, 1.0, size=(n, steps, 120, 160))
    lidar = rng.uniform(0.0, 1.0, size=(n, steps, 40, 276))
    states = rng.normal(size=(n, steps, 15))
    targets = rng.normal(-0.75, 0.05, size=(n, steps, 165))
    return depth, lidar, states, targets


def test_encoder_shape_ledger():
    model = EdsModel()
    assert model.encoders["depth"].spatial_shapes[-1] == (8, 10)
    assert model.encoders["lidar"].spatial_shapes[-1] == (3, 18)
    assert model.encoders["depth"].flat_size == 128 * 8 * 10
    assert model.encoders["lidar"].flat_size == 128 * 3 * 18
    assert model.fusion_width == 256 + 256 + 15 + 165


def test_eds_step_returns_one_heightmap(rng):
    model = EdsModel(DevTools.small_model_config())
    out, hidden = model.eds_step(rng.uniform(size=(120, 160)), rng.uniform(size=(40, 276)),
                                 np.zeros(15), None)
    assert out.shape == (165,)
    assert hidden[0].shape == (1, dev_config.TEST_HIDDEN)
    again, _ = model.eds_step(rng.uniform(size=(120, 160)), rng.uniform(size=(40, 276)),
                              np.zeros(15), out, hidden)
    assert np.all(np.isfinite(again))


def test_construction_is_deterministic():
    a = EdsModel(DevTools.small_model_config(seed=3))
    b = EdsModel(DevTools.small_model_config(seed=3))
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.value, pb.value), name


def test_modality_ablation_keeps_fusion_width(rng):
    config = DevTools.small_model_config()
    depth_only = modality_ablate(config, "depth_only")
    names = dict(depth_only.named_parameters())
    assert "lidar_constant" in names and "lidar_encoder.fc.weight" not in names
    assert depth_only.fusion_dense.in_features == EdsModel(config).fusion_dense.in_features
    depth, _, states, _ = _inputs(rng)
    preds, _ = depth_only.run_sequence(depth, None, states, keep_cache=False)
    assert preds.shape == (1, 3, 165)
    with pytest.raises(ShapeError):
        depth_only.run_sequence(None, None, states)
    with pytest.raises(ConfigError):
        modality_ablate(config, "radar_only")


def test_feedback_modes_share_first_step(rng):
    model = EdsModel(DevTools.small_model_config())
    depth, lidar, states, targets = _inputs(rng)
    closed, _ = model.run_sequence(depth, lidar, states, targets, feedback="closed_loop", keep_cache=False)
    forced, _ = model.run_sequence(depth, lidar, states, targets, feedback="ground_truth", keep_cache=False)
    assert np.allclose(closed[:, 0], forced[:, 0])
    assert not np.allclose(closed[:, 1:], forced[:, 1:])
    with pytest.raises(ShapeError):
        model.run_sequence(depth, lidar, states, None, feedback="ground_truth")
    with pytest.raises(ConfigError):
        model.run_sequence(depth, lidar, states, targets, feedback="scheduled")


def test_gradient_reaches_encoders_unless_frozen(rng):
    model = EdsModel(DevTools.small_model_config())
    depth, lidar, states, targets = _inputs(rng)
    preds, cache = model.run_sequence(depth, lidar, states, targets)
    _, dpred = mse_loss(preds, targets.astype(preds.dtype))
    model.zero_grad()
    model.backward_sequence(dpred, cache)
    assert np.abs(model.encoders["depth"].convs[0].weight.grad).sum() > 0
    assert np.abs(model.encoders["lidar"].convs[0].weight.grad).sum() > 0

    model.train_encoders = False
    preds, cache = model.run_sequence(depth, lidar, states, targets)
    model.zero_grad()
    model.backward_sequence(mse_loss(preds, targets.astype(preds.dtype))[1], cache)
    assert all(np.all(p.grad == 0) for p in model.encoder_parameters())
    assert np.abs(model.head2.weight.grad).sum() > 0


@pytest.mark.parametrize("feedback", ["closed_loop", "ground_truth"])
def test_full_model_gradient_check(rng, feedback):
    model = EdsModel(DevTools.small_model_config())
    model.astype(np.float64)
    depth, lidar, states, targets = _inputs(rng, n=2, steps=3)

    def loss():
        preds, _ = model.run_sequence(depth, lidar, states, targets, feedback=feedback, keep_cache=False)
        return mse_loss(preds, targets)[0]

    def backward():
        preds, cache = model.run_sequence(depth, lidar, states, targets, feedback=feedback)
        model.backward_sequence(mse_loss(preds, targets)[1], cache)

    result = check_module(model, loss, backward, samples=4)
    assert result.passed(dev_config.GRADCHECK_MODEL_TOL), f"{result.worst}: {result.max_error:.2e}"


def test_autoencoder_reconstructs_input_shape(rng):
    autoencoder = ConvAutoencoder("lidar", DevTools.small_model_config())
    image = rng.uniform(size=(40, 276)).astype(np.float32)
    assert ae_forward(autoencoder, image).shape == (40, 276)
    assert ae_forward(autoencoder, np.stack([image, image])).shape == (2, 40, 276)
    with pytest.raises(ConfigError):
        ConvAutoencoder("radar")


def test_autoencoder_gradient_check(rng):
    autoencoder = ConvAutoencoder("depth", DevTools.small_model_config())
    autoencoder.astype(np.float64)
    x = rng.uniform(size=(2, 120, 160))
    mask = rng.random((2, 1, 120, 160)) < 0.8

    def loss():
        recon, _ = autoencoder.forward(x)
        return float(np.sum(np.where(mask, recon - x[:, None], 0.0) ** 2) / mask.sum())

    def backward():
        recon, cache = autoencoder.forward(x)
        diff = np.where(mask, recon - x[:, None], 0.0)
        autoencoder.backward(2.0 * diff / mask.sum(), cache)

    result = check_module(autoencoder, loss, backward, samples=4)
    assert result.passed(dev_config.GRADCHECK_MODEL_TOL), result.worst


def test_pretrained_encoder_weights_are_copied():
    config = DevTools.small_model_config()
    autoencoder = ConvAutoencoder("depth", config, seed=99)
    model = EdsModel(config)
    load_pretrained_encoder(model, autoencoder)
    assert np.array_equal(model.encoders["depth"].fc.weight.value, autoencoder.encoder.fc.weight.value)
    lidar_only = modality_ablate(config, "lidar_only")
    before = lidar_only.state_dict()
    load_pretrained_encoder(lidar_only, autoencoder)
    assert all(np.array_equal(before[k], v) for k, v in lidar_only.state_dict().items())
