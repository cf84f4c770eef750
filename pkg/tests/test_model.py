import numpy as np
import pytest
import torch

from compseg.model import (CheckpointError, IndivisibleSpatialSize, ModelConfig, NonFiniteLogits, UNet,
                           build_model, checkpoint_bytes, forward, load_checkpoint, predict_labels,
                           save_checkpoint, softmax_map)


def small(depth=2, **kw):
    return build_model(ModelConfig(depth=depth, base_width=4, **kw))


def test_forward_shape_28_depth2():
    batch = np.random.default_rng(0).random((2, 28, 28, 1)).astype(np.float32)
    assert tuple(forward(small(), batch).shape) == (2, 28, 28, 3)


def test_forward_channels_and_classes():
    batch = np.zeros((1, 16, 16, 3), np.float32)
    out = forward(small(in_channels=3, num_classes=5), batch)
    assert tuple(out.shape) == (1, 16, 16, 5)


def test_depth3_on_28_is_indivisible():
    with pytest.raises(IndivisibleSpatialSize):
        forward(small(depth=3), np.zeros((1, 28, 28, 1), np.float32))


def test_deterministic_init_and_forward():
    batch = np.random.default_rng(1).random((3, 28, 28, 1)).astype(np.float32)
    a, b = small(seed=7), small(seed=7)
    assert torch.equal(forward(a, batch), forward(b, batch))
    c = small(seed=8)
    assert not torch.equal(forward(a, batch), forward(c, batch))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=0)
    with pytest.raises(ValueError):
        ModelConfig(base_width=2)


def test_softmax_zero_logits_uniform():
    p = softmax_map(torch.zeros(1, 4, 4, 3, dtype=torch.float64))
    assert torch.allclose(p, torch.full_like(p, 1 / 3), atol=1e-15)


def test_softmax_saturation():
    p = softmax_map(torch.tensor([[[[20.0, 0.0, 0.0]]]], dtype=torch.float64))
    np.testing.assert_allclose(p.numpy().ravel(), [1, 0, 0], atol=1e-8)


def test_softmax_shift_invariance():
    z = torch.tensor(np.random.default_rng(2).normal(size=(2, 3, 3, 4)))
    np.testing.assert_allclose(softmax_map(z).numpy(), softmax_map(z + 13.7).numpy(), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteLogits):
        softmax_map(torch.tensor([[[[float("nan"), 0.0]]]]))


def test_predict_labels_is_argmax():
    model = small()
    batch = np.random.default_rng(3).random((5, 8, 8, 1)).astype(np.float32)
    expected = forward(model, batch).argmax(-1).numpy()
    np.testing.assert_array_equal(predict_labels(model, batch, batch_size=2), expected)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    model = build_model(ModelConfig(in_channels=3, depth=1, base_width=4, seed=3), dtype)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"note": "x", "patch_size": 16})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x", "patch_size": 16}
    assert loaded.config == model.config
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype and torch.equal(a, b)
    assert checkpoint_bytes(model, {"note": "x", "patch_size": 16}) == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    good = checkpoint_bytes(small())
    path.write_bytes(good[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_parameter_count_grows_with_width():
    assert UNet(ModelConfig(base_width=8)).parameter_count() > UNet(ModelConfig(base_width=4)).parameter_count()
