import numpy as np
import pytest

from gradleak.attack import (
    gradient_objective,
    make_objective,
    match_by_label,
    psnr,
    run_attack,
    signed_adam_minimize,
    step_size,
    total_variation,
)
from gradleak.autodiff import Tensor, fd_check
from gradleak.config import AttackConfig, FedConfig
from gradleak.datasets import Sample
from gradleak.errors import MetadataMismatchError, ShapeError, ZeroGradientError
from gradleak.fedsim import GradObservation, compute_update
from gradleak.netzoo import ModelSpec, build_model, param_gradients


@pytest.fixture
def mlp_setup():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[6], num_classes=3)
    model = build_model(spec, seed=0)
    truth = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
    obs = GradObservation("raw_gradient", param_gradients(model, truth, [1]), [1])
    return model, truth, obs


def test_total_variation_of_constant_image():
    assert total_variation(Tensor(np.full((2, 3, 3), 0.4))).item() == 0.0


def test_total_variation_single_step():
    assert total_variation(Tensor(np.array([[[0.0, 1.0]]]))).item() == pytest.approx(1.0)


def test_total_variation_matches_loops():
    x = np.random.default_rng(1).uniform(size=(1, 4, 4))
    expected = 0.0
    for i in range(4):
        for j in range(4):
            if i + 1 < 4:
                expected += abs(x[0, i + 1, j] - x[0, i, j])
            if j + 1 < 4:
                expected += abs(x[0, i, j + 1] - x[0, i, j])
    assert total_variation(Tensor(x)).item() == pytest.approx(expected, abs=1e-12)
    batch = np.stack([x, 2 * x])
    assert total_variation(Tensor(batch)).item() == pytest.approx(3 * expected, abs=1e-12)


def test_total_variation_rejects_flat_input():
    with pytest.raises(ShapeError):
        total_variation(Tensor(np.zeros(4)))


@pytest.mark.parametrize("objective", ["cosine", "euclidean"])
def test_objective_vanishes_at_the_truth(mlp_setup, objective):
    model, truth, obs = mlp_setup
    cfg = AttackConfig(objective=objective, tv_weight=0.0)
    assert abs(gradient_objective(Tensor(truth), obs, model, cfg).item()) < 1e-12


def test_cosine_objective_ignores_target_scale(mlp_setup):
    model, _, obs = mlp_setup
    cfg = AttackConfig(objective="cosine")
    x = Tensor(np.random.default_rng(2).uniform(size=(1, 1, 4, 4)))
    a = gradient_objective(x, obs, model, cfg).item()
    b = gradient_objective(x, obs.scaled(10.0), model, cfg).item()
    assert abs(a - b) <= 1e-12


def test_zero_target_gradient_is_an_error(mlp_setup):
    model, truth, obs = mlp_setup
    zero = GradObservation("raw_gradient", {k: np.zeros_like(v) for k, v in obs.payload.items()}, [1])
    with pytest.raises(ZeroGradientError):
        gradient_objective(Tensor(truth), zero, model, AttackConfig(objective="cosine"))


def test_candidate_count_must_match_labels(mlp_setup):
    model, _, obs = mlp_setup
    with pytest.raises(MetadataMismatchError):
        gradient_objective(Tensor(np.zeros((2, 1, 4, 4))), obs, model, AttackConfig())


def test_fedavg_objective_is_at_its_floor_for_the_true_data():
    spec = ModelSpec.mlp((1, 4, 4), hidden=[6], num_classes=3)
    model = build_model(spec, seed=1)
    rng = np.random.default_rng(3)
    images = rng.uniform(size=(2, 1, 4, 4))
    fc = FedConfig(n=2, epochs=2, batch_size=1, lr=1e-2, seed=4)
    obs = compute_update(model, [Sample(images[0], 0), Sample(images[1], 2)], fc)
    assert obs.kind == "param_delta"
    value = gradient_objective(Tensor(images), obs, model, AttackConfig(tv_weight=0.0)).item()
    assert abs(value) < 1e-10


@pytest.mark.parametrize("objective", ["cosine", "euclidean"])
@pytest.mark.parametrize("spec", [
    ModelSpec.mlp((1, 4, 4), hidden=[6], num_classes=3),
    ModelSpec.lenet_zhu((1, 4, 4), num_classes=3, channels=2),
], ids=["mlp", "two-conv"])
def test_objective_input_gradient_matches_fd(spec, objective):
    model = build_model(spec, seed=2)
    rng = np.random.default_rng(5)
    truth = rng.uniform(size=(1, 1, 4, 4))
    obs = GradObservation("raw_gradient", param_gradients(model, truth, [0]), [0])
    cfg = AttackConfig(objective=objective, tv_weight=0.01)
    report = fd_check(lambda x: gradient_objective(x, obs, model, cfg), rng.uniform(size=(1, 1, 4, 4)))
    assert report.passed(1e-4), report


def test_step_size_schedule_milestones():
    cfg = AttackConfig()
    assert step_size(cfg, 0, 8000) == 0.1
    assert step_size(cfg, 2999, 8000) == 0.1
    assert step_size(cfg, 3000, 8000) == pytest.approx(0.01)
    assert step_size(cfg, 4999, 8000) == pytest.approx(0.01)
    assert step_size(cfg, 5000, 8000) == pytest.approx(1e-3)
    assert step_size(cfg, 7000, 8000) == pytest.approx(1e-4)


def _quadratic(scale):
    target = np.linspace(0.1, 0.9, 6).reshape(1, 1, 2, 3)

    def fun(x):
        diff = x - target
        return scale * float(np.sum(diff ** 2)), 2.0 * scale * diff

    return fun


def test_signed_updates_ignore_objective_scale():
    cfg = AttackConfig(max_iter=40, step_size=0.05)
    x0 = np.zeros((1, 1, 2, 3))
    runs = []
    for scale in (1.0, 250.0):
        seen = []
        signed_adam_minimize(_quadratic(scale), x0, cfg, 0.0, 1.0,
                             callback=lambda it, x, f, seen=seen: seen.append(x.copy()))
        runs.append(seen)
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_signed_adam_stays_in_box_and_approaches_minimum():
    cfg = AttackConfig(max_iter=300, step_size=0.05)
    seen = []
    x, trace, final = signed_adam_minimize(_quadratic(1.0), np.full((1, 1, 2, 3), 5.0), cfg, 0.0, 1.0,
                                           callback=lambda it, x, f: seen.append(x.copy()))
    assert len(trace) == 300
    assert all(np.all(v >= 0.0) and np.all(v <= 1.0) for v in seen)
    assert final < trace[0]


def test_zero_iterations_return_the_clamped_initialization(mlp_setup):
    model, truth, obs = mlp_setup
    cfg = AttackConfig(max_iter=0, seed=3)
    report = run_attack(obs, model, cfg, truth=truth)
    expected = np.clip(np.random.default_rng([3, 0]).standard_normal((1, 1, 4, 4)), 0.0, 1.0)
    np.testing.assert_array_equal(report.images, expected)
    assert report.trace == []
    assert report.psnr_mean < 15.0


def test_best_restart_has_lowest_objective(mlp_setup):
    model, truth, obs = mlp_setup
    report = run_attack(obs, model, AttackConfig(max_iter=10, restarts=3), truth=truth)
    assert len(report.restart_objectives) == 3
    assert report.final_objective == min(report.restart_objectives)
    assert report.best_restart == int(np.argmin(report.restart_objectives))
    assert np.all(report.images >= 0.0) and np.all(report.images <= 1.0)


def test_attack_is_deterministic(mlp_setup):
    model, _, obs = mlp_setup
    cfg = AttackConfig(max_iter=15, seed=7)
    a = run_attack(obs, model, cfg)
    b = run_attack(obs, model, cfg)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.psnr is None


def test_objective_closure_returns_input_gradient(mlp_setup):
    model, truth, obs = mlp_setup
    fun = make_objective(obs, model, AttackConfig())
    value, grad = fun(truth)
    assert grad.shape == truth.shape
    assert value == pytest.approx(gradient_objective(Tensor(truth), obs, model, AttackConfig()).item())


def test_lbfgs_attack_runs(mlp_setup):
    model, truth, obs = mlp_setup
    cfg = AttackConfig(objective="euclidean", optimizer="lbfgs", max_iter=5, tv_weight=0.0)
    report = run_attack(obs, model, cfg, truth=truth)
    assert report.images.shape == truth.shape
    assert np.all(report.images >= 0.0) and np.all(report.images <= 1.0)
    assert report.final_objective <= report.trace[0]


def test_psnr_conventions():
    a = np.random.default_rng(0).uniform(size=(3, 4, 4))
    assert psnr(a, a) == 100.0
    assert psnr(np.zeros((2, 2)), np.full((2, 2), 0.1)) == pytest.approx(20.0)
    assert psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)
    with pytest.raises(ShapeError):
        psnr(np.zeros(4), np.zeros(5))


def test_match_by_label_reorders_slots():
    truth = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    recon = truth[::-1].copy()
    matched = match_by_label(recon, [5, 2], truth, [2, 5])
    np.testing.assert_array_equal(matched, truth)


def test_match_by_label_falls_back_to_best_slot():
    truth = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    recon = np.stack([np.full((1, 2, 2), 0.9), np.full((1, 2, 2), 0.1)])
    matched = match_by_label(recon, [3, 3], truth, [0, 1])
    np.testing.assert_array_equal(matched, recon[::-1])


def test_attack_usually_improves_on_its_start(mlp_setup):
    model, _, obs = mlp_setup
    improved = 0
    for seed in range(10):
        report = run_attack(obs, model, AttackConfig(max_iter=50, seed=seed))
        improved += report.final_objective <= report.trace[0]
    assert improved >= 9


def test_objective_decreases_over_the_run(mlp_setup):
    model, truth, obs = mlp_setup
    report = run_attack(obs, model, AttackConfig(max_iter=200, tv_weight=0.0), truth=truth)
    assert report.final_objective <= 0.5 * report.trace[0]
