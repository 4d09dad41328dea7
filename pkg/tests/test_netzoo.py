import numpy as np
import pytest

from gradleak.autodiff import Tensor
from gradleak.datasets import Sample, make_synthetic
from gradleak.errors import EmptyDatasetError, IncomposableSpecError, ShapeError, UnknownSchemeError
from gradleak.netzoo import (
    LayerSpec,
    ModelSpec,
    batch_loss,
    build_model,
    forward,
    forward_loss,
    init_params,
    param_gradients,
    train_steps,
)


def _tally(spec: ModelSpec) -> int:
    """Independent per-layer parameter count."""
    total, channels, shape = 0, spec.input_shape[0], spec.input_shape
    features = int(np.prod(shape))
    for layer in spec.layers:
        if layer.kind == "conv":
            total += layer.out * channels * layer.kernel ** 2 + (layer.out if layer.bias else 0)
            total += 2 * layer.out if layer.batch_norm else 0
            channels = layer.out
        elif layer.kind == "linear":
            total += layer.out * features + (layer.out if layer.bias else 0)
            features = layer.out
        elif layer.kind == "flatten":
            features = channels * shape[1] * shape[2] if len(shape) == 3 else features
    return total


def test_mlp_two_to_three_has_nine_parameters():
    spec = ModelSpec.mlp((2,), num_classes=3)
    assert spec.parameter_count() == 9
    assert build_model(spec, seed=0).num_parameters == 9


def test_default_convnet_has_eight_conv_layers():
    spec = ModelSpec.convnet()
    assert spec.width == 64
    assert spec.conv_count() == 8
    convs = [layer for layer in spec.layers if layer.kind == "conv"]
    assert all(layer.batch_norm and layer.activation == "relu" for layer in convs)
    assert spec.layers[-1].kind == "linear" and spec.layers[-1].bias


def test_convnet_depth_adds_blocks():
    assert ModelSpec.convnet(width=2, depth=3, skips=True).conv_count() == 11


def test_lenet_zhu_parameter_count_matches_tally():
    spec = ModelSpec.lenet_zhu((3, 32, 32))
    assert spec.parameter_count() == _tally(spec) == 912 + 3612 + 122890


def test_incomposable_specs_are_rejected():
    spec = ModelSpec(kind="mlp", input_shape=(1, 4, 4), num_classes=3,
                     layers=[LayerSpec(kind="linear", out=3)])
    with pytest.raises(IncomposableSpecError):
        build_model(spec)
    with pytest.raises(IncomposableSpecError):
        build_model(ModelSpec.translation_invariant(width=2, input_shape=(1, 6, 6), stride=2))


def test_init_is_deterministic_per_seed():
    spec = ModelSpec.convnet(width=2, input_shape=(3, 8, 8))
    a = build_model(spec, seed=4).flatten()
    b = build_model(spec, seed=4).flatten()
    c = build_model(spec, seed=5).flatten()
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_unknown_init_scheme():
    model = build_model(ModelSpec.mlp((2,), num_classes=3))
    with pytest.raises(UnknownSchemeError):
        init_params(model, "xavier", 0)


def test_kaiming_uniform_variance():
    spec = ModelSpec.mlp((1000,), num_classes=2)
    weight = build_model(spec, seed=0).params["fc0.weight"]
    assert weight.size == 2000
    expected = 2.0 / 1000
    assert abs(weight.var() - expected) < 0.2 * expected


def test_batch_norm_scale_and_biases_start_at_identity():
    model = build_model(ModelSpec.convnet(width=1, input_shape=(1, 8, 8), num_classes=3))
    np.testing.assert_array_equal(model.params["conv0.bn_scale"], 1.0)
    np.testing.assert_array_equal(model.params["conv0.bn_shift"], 0.0)
    np.testing.assert_array_equal(model.params["fc0.bias"], 0.0)


def test_flatten_unflatten_round_trip():
    model = build_model(ModelSpec.lenet_zhu((1, 6, 6), num_classes=4, channels=2), seed=1)
    restored = model.unflatten(model.flatten())
    for name in model.params:
        assert restored.params[name].tobytes() == model.params[name].tobytes()
    with pytest.raises(ShapeError):
        model.unflatten(np.zeros(3))


def test_spec_json_round_trip():
    spec = ModelSpec.convnet(width=2, depth=1, skips=True, padding_mode="circular")
    assert ModelSpec.model_validate_json(spec.model_dump_json()) == spec


def test_equal_logits_give_log_k():
    model = build_model(ModelSpec.mlp((1, 2, 2), hidden=[4], num_classes=10))
    model.params["fc1.weight"][:] = 0.0
    model.params["fc1.bias"][:] = 0.0
    batch = [Sample(np.full((1, 2, 2), 0.5), 3)]
    assert forward_loss(model, batch).item() == pytest.approx(np.log(10.0), abs=1e-12)


def test_saturated_logits_give_vanishing_loss():
    model = build_model(ModelSpec.mlp((1, 1, 1), num_classes=2))
    model.params["fc0.weight"][:] = 0.0
    model.params["fc0.bias"][:] = [50.0, 0.0]
    loss = forward_loss(model, [Sample(np.zeros((1, 1, 1)), 0)])
    assert loss.item() < 1e-20


def test_loss_matches_direct_softmax_recompute():
    rng = np.random.default_rng(0)
    spec = ModelSpec.convnet(width=1, input_shape=(1, 8, 8), num_classes=5)
    model = build_model(spec, seed=2)
    images = rng.uniform(size=(3, 1, 8, 8))
    labels = np.array([0, 4, 2])
    logits = forward(model, Tensor(images)).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expected = -log_probs[np.arange(3), labels].mean()
    assert batch_loss(model, Tensor(images), labels).item() == pytest.approx(expected, abs=1e-12)


def test_loss_rejects_bad_batches():
    model = build_model(ModelSpec.mlp((1, 2, 2), num_classes=3))
    with pytest.raises(EmptyDatasetError):
        forward_loss(model, [])
    with pytest.raises(ShapeError):
        forward_loss(model, [Sample(np.zeros((1, 2, 2)), 7)])
    with pytest.raises(ShapeError):
        forward_loss(model, [Sample(np.zeros((1, 3, 3)), 0)])


def test_forward_captures_linear_inputs():
    spec = ModelSpec.mlp((1, 2, 2), hidden=[5], num_classes=3)
    model = build_model(spec, seed=0)
    x = np.arange(4.0).reshape(1, 1, 2, 2) / 4
    capture = {}
    forward(model, Tensor(x), capture=capture)
    np.testing.assert_array_equal(capture["fc0"], x.reshape(1, 4))
    assert capture["fc1"].shape == (1, 5)


def test_train_zero_steps_leaves_params_unchanged():
    model = build_model(ModelSpec.mlp((1, 4, 4), hidden=[8], num_classes=10))
    data = make_synthetic(0, 8, shape=(1, 4, 4))
    trained = train_steps(model, data, steps=0, lr=0.1, batch_size=4)
    assert trained.flatten().tobytes() == model.flatten().tobytes()


def test_single_full_batch_step_is_gradient_descent():
    model = build_model(ModelSpec.mlp((1, 4, 4), hidden=[8], num_classes=10), seed=1)
    data = make_synthetic(1, 6, shape=(1, 4, 4))
    grads = param_gradients(model, data.images, data.labels)
    trained = train_steps(model, data, steps=1, lr=0.05, batch_size=len(data), seed=3)
    for name, value in model.params.items():
        np.testing.assert_allclose(trained.params[name], value - 0.05 * grads[name], atol=1e-12)


def test_training_reduces_loss():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[16], num_classes=10)
    model = build_model(spec, seed=0)
    data = make_synthetic(2, 32, shape=(1, 4, 4))
    before = batch_loss(model, Tensor(data.images), data.labels).item()
    trained = train_steps(model, data, steps=200, lr=0.1, batch_size=8, seed=0)
    after = batch_loss(trained, Tensor(data.images), data.labels).item()
    assert after < before


def test_training_on_empty_data_fails():
    model = build_model(ModelSpec.mlp((1, 2, 2), num_classes=3))
    with pytest.raises(EmptyDatasetError):
        train_steps(model, make_synthetic(0, 0, shape=(1, 2, 2), num_classes=3), 1, 0.1, 1)


def _shifted_gradients(spec: ModelSpec, shift=(2, 3)):
    model = build_model(spec, seed=6)
    rng = np.random.default_rng(9)
    image = rng.uniform(size=(1,) + spec.input_shape)
    shifted = np.roll(image, shift, axis=(2, 3))
    a = param_gradients(model, image, [1])
    b = param_gradients(model, shifted, [1])
    return np.concatenate([v.ravel() for v in a.values()]), np.concatenate([v.ravel() for v in b.values()])


def test_circular_translation_invariant_net_ties_shifted_inputs():
    spec = ModelSpec.translation_invariant(width=3, input_shape=(2, 8, 8), num_classes=4)
    a, b = _shifted_gradients(spec)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_zero_padding_breaks_the_tie():
    spec = ModelSpec.translation_invariant(width=3, input_shape=(2, 8, 8), num_classes=4,
                                           padding_mode="zero")
    a, b = _shifted_gradients(spec)
    assert abs(np.linalg.norm(a) - np.linalg.norm(b)) > 1e-6


def test_normalize_layer_is_a_fixed_affine_map():
    spec = ModelSpec.lenet_zhu((3, 8, 8), num_classes=3, channels=2, normalize=True)
    model = build_model(spec)
    x = Tensor(np.full((1, 3, 8, 8), 0.5))
    assert forward(model, x).shape == (1, 3)
    assert not any(name.startswith("normalize") for name in model.params)
