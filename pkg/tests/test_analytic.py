import numpy as np
import pytest

from gradleak.analytic import (
    FcGradient,
    fc_gradients,
    head_gradient,
    reconstruct_biased_fc,
    reconstruct_fc_chain,
    reconstruct_head_input,
    recover_label,
)
from gradleak.autodiff import Tensor
from gradleak.errors import (
    AllBiasGradientsZero,
    AmbiguousLabel,
    DeadLayer,
    InconsistentRows,
    NonFiniteError,
    NotFullyConnectedError,
    ShapeError,
)
from gradleak.netzoo import ModelSpec, build_model, forward, param_gradients, smoke_specs


def test_biased_fc_closed_form():
    g = FcGradient(dL_dA=[[2.0, 4.0], [-1.0, -2.0]], dL_db=[2.0, -1.0])
    np.testing.assert_allclose(reconstruct_biased_fc(g), [1.0, 2.0])


def test_zero_bias_gradient_is_degenerate():
    g = FcGradient(dL_dA=[[1.0, 2.0], [3.0, 4.0]], dL_db=[0.0, 0.0])
    with pytest.raises(AllBiasGradientsZero):
        reconstruct_biased_fc(g)


def test_fc_gradient_validation():
    with pytest.raises(ShapeError):
        FcGradient(dL_dA=[1.0, 2.0])
    with pytest.raises(ShapeError):
        FcGradient(dL_dA=[[1.0, 2.0]], dL_db=[1.0, 2.0])
    with pytest.raises(NonFiniteError):
        FcGradient(dL_dA=[[np.nan, 2.0]], dL_db=[1.0])


def test_first_layer_input_of_biased_mlp():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[12, 8], num_classes=5)
    model = build_model(spec, seed=0)
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(1, 1, 4, 4))
    grads = param_gradients(model, x, [2])
    recovered = reconstruct_biased_fc(fc_gradients(model, grads)[0])
    assert np.max(np.abs(recovered - x.ravel())) < 1e-8


def test_averaged_gradient_has_inconsistent_rows():
    model = build_model(ModelSpec.mlp((1, 2, 2), num_classes=3), seed=0)
    rng = np.random.default_rng(2)
    grads = param_gradients(model, rng.uniform(size=(2, 1, 2, 2)), [0, 1])
    with pytest.raises(InconsistentRows):
        reconstruct_biased_fc(fc_gradients(model, grads)[0])


def test_chain_with_unbiased_hidden_layers():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[32, 32], num_classes=10, biases=[False, False, True])
    model = build_model(spec, seed=3)
    x = np.random.default_rng(4).uniform(size=(1, 1, 4, 4))
    recovered = reconstruct_fc_chain(model, param_gradients(model, x, [7]))
    assert recovered.shape == (1, 4, 4)
    assert np.max(np.abs(recovered - x[0])) < 1e-8


def test_depth_one_chain_equals_biased_layer():
    model = build_model(ModelSpec.mlp((1, 2, 2), num_classes=3), seed=5)
    x = np.random.default_rng(5).uniform(size=(1, 1, 2, 2))
    grads = param_gradients(model, x, [1])
    chain = reconstruct_fc_chain(model, grads)
    single = reconstruct_biased_fc(fc_gradients(model, grads)[0])
    np.testing.assert_array_equal(chain.ravel(), single)


def test_random_chains_are_recovered_exactly():
    rng = np.random.default_rng(0)
    for trial in range(50):
        depth = int(rng.integers(1, 6))
        hidden = [int(w) for w in rng.integers(16, 129, size=depth - 1)]
        biases = [bool(b) for b in rng.integers(0, 2, size=depth - 1)] + [True]
        spec = ModelSpec.mlp((1, 4, 4), hidden=hidden, num_classes=10, biases=biases)
        model = build_model(spec, seed=trial)
        x = rng.uniform(size=(1, 1, 4, 4))
        recovered = reconstruct_fc_chain(model, param_gradients(model, x, [int(rng.integers(0, 10))]))
        assert np.max(np.abs(recovered - x[0])) < 1e-8, (trial, hidden, biases)


def test_dead_middle_layer():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[8, 8], num_classes=3, biases=[False, False, True])
    model = build_model(spec, seed=0)
    model.params["fc1.weight"] = -np.abs(model.params["fc1.weight"])
    x = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
    with pytest.raises(DeadLayer) as info:
        reconstruct_fc_chain(model, param_gradients(model, x, [0]))
    assert info.value.layer == 1


def test_conv_model_is_not_a_chain():
    spec = smoke_specs()["lenet_zhu"]
    model = build_model(spec, seed=0)
    x = np.random.default_rng(0).uniform(size=(1,) + spec.input_shape)
    with pytest.raises(NotFullyConnectedError):
        reconstruct_fc_chain(model, param_gradients(model, x, [0]))


@pytest.mark.parametrize("name", sorted(smoke_specs()))
def test_head_input_recovered_for_every_zoo_model(name):
    spec = smoke_specs()[name]
    model = build_model(spec, seed=1)
    x = np.random.default_rng(11).uniform(size=(1,) + spec.input_shape)
    capture = {}
    forward(model, Tensor(x), capture=capture)
    features = reconstruct_head_input(model, param_gradients(model, x, [2]))
    np.testing.assert_allclose(features, capture[spec.head_name][0], atol=1e-8)


def test_label_from_bias_gradient():
    assert recover_label(FcGradient(np.zeros((3, 2)), [0.2, -0.5, 0.3])) == 1


def test_two_negative_entries_are_ambiguous():
    with pytest.raises(AmbiguousLabel):
        recover_label(FcGradient(np.zeros((3, 2)), [-0.1, -0.2, 0.3]))


def test_label_recovery_is_scale_invariant():
    g = FcGradient(np.ones((4, 2)), [0.1, 0.3, -0.6, 0.2])
    scaled = FcGradient(g.dL_dA * 7.5, g.dL_db * 7.5)
    assert recover_label(g) == recover_label(scaled) == 2


def _brute_force_label(model, x, observed):
    """Candidate label whose produced gradient is closest to the observed one."""
    def distance(label):
        grads = param_gradients(model, x, [label])
        return sum(np.sum((grads[k] - observed[k]) ** 2) for k in grads)
    return int(np.argmin([distance(c) for c in range(model.spec.num_classes)]))


@pytest.mark.parametrize("name", sorted(smoke_specs()))
def test_label_matches_brute_force_oracle(name):
    spec = smoke_specs()[name]
    rng = np.random.default_rng(sorted(smoke_specs()).index(name))
    for trial in range(25):
        model = build_model(spec, seed=trial)
        x = rng.uniform(size=(1,) + spec.input_shape)
        label = int(rng.integers(0, spec.num_classes))
        grads = param_gradients(model, x, [label])
        found = recover_label(head_gradient(model, grads))
        assert found == _brute_force_label(model, x, grads) == label


def test_label_without_head_bias_uses_all_ones_vector():
    spec = ModelSpec.mlp((1, 2, 2), num_classes=4, biases=[False])
    model = build_model(spec, seed=2)
    x = np.random.default_rng(3).uniform(size=(1, 1, 2, 2))
    grads = param_gradients(model, x, [3])
    g = head_gradient(model, grads)
    assert g.dL_db is None
    assert recover_label(g) == 3
