"""
Optimization-based input reconstruction from shared gradients or updates.

The candidate x lives in pixel space [lo, hi]. Each iteration builds a fresh
trace: the candidate's parameter gradient (or simulated local update) is
computed on the graph, compared to the observation, and the comparison is
differentiated w.r.t. x (double backward).

Usage:
    cfg = AttackConfig(max_iter=2000, tv_weight=0.01)
    report = run_attack(obs, model, cfg, truth=images)
    print(report.psnr_mean)
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from gradleak.autodiff import functional as F
from gradleak.autodiff import primitives as P
from gradleak.autodiff.tensor import Graph, Tensor, gradient
from gradleak.config import PSNR_CAP, ZERO_GRADIENT_NORM, AttackConfig
from gradleak.errors import ConfigError, MetadataMismatchError, ShapeError, ZeroGradientError
from gradleak.fedsim import GradObservation, simulate_update_sum
from gradleak.lbfgs import minimize_lbfgs
from gradleak.netzoo import Model, batch_loss, param_variables

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class ReconstructionReport:
    images: np.ndarray
    labels: np.ndarray
    restart_objectives: List[float]
    best_restart: int
    trace: List[float]
    runtime_s: float
    config: Dict = field(default_factory=dict)
    psnr: Optional[List[float]] = None
    line_search_failures: int = 0

    @property
    def final_objective(self) -> float:
        return self.restart_objectives[self.best_restart]

    @property
    def psnr_mean(self) -> Optional[float]:
        return float(np.mean(self.psnr)) if self.psnr else None

    @property
    def psnr_max(self) -> Optional[float]:
        return float(np.max(self.psnr)) if self.psnr else None


def total_variation(x: Tensor) -> Tensor:
    """Anisotropic TV: sum of |forward differences| along H and W, summed over channels and images."""
    x = P.as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"total_variation expects (C, H, W) or (N, C, H, W), got {x.shape}")
    lead = (np.s_[:],) * (x.ndim - 2)
    tv = Tensor(np.zeros(1))
    if x.shape[-2] > 1:
        dh = P.subtract(x[lead + (np.s_[1:], np.s_[:])], x[lead + (np.s_[:-1], np.s_[:])])
        tv = P.add(tv, P.sum(P.abs(dh)))
    if x.shape[-1] > 1:
        dw = P.subtract(x[lead + (np.s_[:], np.s_[1:])], x[lead + (np.s_[:], np.s_[:-1])])
        tv = P.add(tv, P.sum(P.abs(dw)))
    return tv


def _flat_target(obs: GradObservation) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in obs.target().values()])


def candidate_gradient(x: Tensor, obs: GradObservation, model: Model,
                       params: Mapping[str, Tensor]) -> Tensor:
    """g(x) flattened: the mean gradient, or the simulated update sum for FedAvg observations."""
    if obs.kind == "raw_gradient":
        loss = batch_loss(model, x, obs.labels, params)
        grads = gradient(loss, list(params.values()))
    else:
        total = simulate_update_sum(model, params, x, obs.labels, obs.fed)
        grads = list(total.values())
    return F.flatten_concat(grads)


def gradient_objective(x: Tensor, obs: GradObservation, model: Model, cfg: AttackConfig,
                       params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Matching loss of candidate x (N, C, H, W) against the observation.

    cosine:    1 - <g(x), g*> / (|g(x)| |g*|) + tv_weight * TV(x)
    euclidean: |g(x) - g*|^2 + tv_weight * TV(x)

    Raises:
        ZeroGradientError: a gradient norm is below the cosine threshold.
        MetadataMismatchError: observation and model/candidate disagree.
    """
    obs.check_compatible(model)
    x = P.as_tensor(x)
    if x.ndim == len(model.spec.input_shape):
        x = P.reshape(x, (1,) + x.shape)
    if x.shape[0] != obs.labels.size:
        raise MetadataMismatchError(f"{x.shape[0]} candidate images for {obs.labels.size} labels")
    graph = x.graph if x.graph is not None else Graph()
    if params is None:
        params = param_variables(model, graph)

    g = candidate_gradient(x, obs, model, params)
    target = _flat_target(obs)
    if cfg.objective == "cosine":
        target_norm = float(np.linalg.norm(target))
        if target_norm < ZERO_GRADIENT_NORM:
            raise ZeroGradientError(f"observed gradient norm {target_norm:.3e} is zero")
        norm = F.l2_norm(g)
        if norm.item() < ZERO_GRADIENT_NORM:
            raise ZeroGradientError(f"candidate gradient norm {norm.item():.3e} is zero")
        cosine = P.scale(P.divide(F.dot(g, Tensor(target)), norm), 1.0 / target_norm)
        value = P.subtract(Tensor(np.ones(1)), cosine)
    else:
        diff = P.subtract(g, Tensor(target))
        value = F.dot(diff, diff)
    if cfg.tv_weight > 0:
        value = P.add(value, P.scale(total_variation(x), cfg.tv_weight))
    return value


def make_objective(obs: GradObservation, model: Model, cfg: AttackConfig) -> Objective:
    """x (numpy) -> (objective, d objective / dx) with one trace reset per call."""
    graph = Graph()

    def fun(x: np.ndarray) -> Tuple[float, np.ndarray]:
        graph.reset()
        variable = graph.variable(x, name="x")
        value = gradient_objective(variable, obs, model, cfg)
        (dx,) = gradient(value, [variable])
        return value.item(), dx.data.copy()

    return fun


def step_size(cfg: AttackConfig, iteration: int, max_iter: int) -> float:
    """Learning rate at 0-based `iteration`: decayed once per milestone floor(max_iter * f) reached."""
    milestones = [int(max_iter * f) for f in cfg.decay_fractions]
    return cfg.step_size * cfg.decay_factor ** sum(iteration >= m for m in milestones)


def signed_adam_minimize(fun: Objective, x0: np.ndarray, cfg: AttackConfig, lo=None, hi=None,
                         callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
                         signed: bool = True) -> Tuple[np.ndarray, List[float], float]:
    """
    Adam fed with sign(grad), projected onto [lo, hi] after every step.

    Returns:
        (final iterate, objective trace, objective at the final iterate)
    """
    beta1, beta2 = cfg.betas
    x = np.clip(np.array(x0, dtype=np.float64), lo, hi) if lo is not None else np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace: List[float] = []
    iterations = range(cfg.max_iter)
    if cfg.progress:
        iterations = tqdm(iterations, desc="attack", leave=False)

    for it in iterations:
        value, grad = fun(x)
        trace.append(value)
        direction = np.sign(grad) if signed else grad
        m = beta1 * m + (1.0 - beta1) * direction
        v = beta2 * v + (1.0 - beta2) * direction * direction
        m_hat = m / (1.0 - beta1 ** (it + 1))
        v_hat = v / (1.0 - beta2 ** (it + 1))
        x = x - step_size(cfg, it, cfg.max_iter) * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if lo is not None:
            x = np.clip(x, lo, hi)
        if callback is not None:
            callback(it, x, value)
        if (it + 1) % cfg.log_every == 0 or it == 0:
            logger.info("It: %d. Rec. loss: %.4f.", it + 1, value)

    final, _ = fun(x)
    return x, trace, final


def _box(cfg: AttackConfig, channels: int) -> Tuple[np.ndarray, np.ndarray]:
    if len(cfg.box_lo) not in (1, channels):
        raise ConfigError(f"box has {len(cfg.box_lo)} entries for {channels} channels")
    view = (1, len(cfg.box_lo), 1, 1)
    return np.asarray(cfg.box_lo).reshape(view), np.asarray(cfg.box_hi).reshape(view)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on a [0, 1] range; identical images give PSNR_CAP."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def match_by_label(recon: np.ndarray, recon_labels: Sequence[int], truth: np.ndarray,
                   truth_labels: Sequence[int]) -> np.ndarray:
    """
    Reorder reconstructed slots to line up with the ground-truth images.

    Each truth image takes the unused slot of its label with the highest PSNR;
    if none of its label is left, the best unused slot of any label.
    """
    recon_labels = list(recon_labels)
    used: List[int] = []
    order = []
    for image, label in zip(truth, truth_labels):
        free = [j for j in range(len(recon)) if j not in used]
        same = [j for j in free if recon_labels[j] == label] or free
        best = max(same, key=lambda j: psnr(recon[j], image))
        used.append(best)
        order.append(best)
    return recon[order]


def score_reconstruction(recon: np.ndarray, recon_labels: Sequence[int], truth: np.ndarray,
                         truth_labels: Optional[Sequence[int]] = None) -> List[float]:
    """Per-image PSNR after label matching (truth labels default to the slot labels)."""
    truth = np.asarray(truth).reshape(recon.shape)
    truth_labels = recon_labels if truth_labels is None else truth_labels
    matched = match_by_label(recon, recon_labels, truth, truth_labels)
    return [psnr(r, t) for r, t in zip(matched, truth)]


def _initial_guess(cfg: AttackConfig, restart: int, shape: Tuple[int, ...], lo, hi) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, restart])
    return np.clip(rng.standard_normal(shape), lo, hi)


def _attack_restarts(obs: GradObservation, model: Model, cfg: AttackConfig,
                     truth: Optional[np.ndarray], solve) -> ReconstructionReport:
    obs.check_compatible(model)
    start = time.perf_counter()
    shape = (obs.labels.size,) + tuple(model.spec.input_shape)
    if len(shape) != 4:
        raise ConfigError("attacks need image-shaped (C, H, W) model inputs")
    lo, hi = _box(cfg, shape[1])
    fun = make_objective(obs, model, cfg)

    candidates, finals, traces, failures = [], [], [], 0
    for restart in range(cfg.restarts):
        x0 = _initial_guess(cfg, restart, shape, lo, hi)
        x, trace, final, failed = solve(fun, x0, lo, hi)
        candidates.append(x)
        finals.append(float(final))
        traces.append(trace)
        failures += int(failed)
        logger.info("Restart %d/%d: final objective %.6f", restart + 1, cfg.restarts, final)

    best = int(np.argmin(finals))
    logger.info("Best restart: %d (objective %.6f)", best, finals[best])
    report = ReconstructionReport(
        images=candidates[best], labels=obs.labels.copy(), restart_objectives=finals,
        best_restart=best, trace=traces[best], runtime_s=time.perf_counter() - start,
        config=cfg.model_dump(), line_search_failures=failures,
    )
    if truth is not None:
        report.psnr = score_reconstruction(report.images, obs.labels, truth)
    return report


def run_attack(obs: GradObservation, model: Model, cfg: AttackConfig,
               truth: Optional[np.ndarray] = None) -> ReconstructionReport:
    """
    Reconstruct the user's images from `obs`.

    Each restart starts from a clamped N(0, 1) draw; the restart with the lowest
    final objective wins. cfg.optimizer == "lbfgs" delegates to lbfgs_minimize.
    """
    if cfg.optimizer == "lbfgs":
        return lbfgs_minimize(obs, model, cfg, truth)

    def solve(fun, x0, lo, hi):
        x, trace, final = signed_adam_minimize(fun, x0, cfg, lo, hi, signed=cfg.optimizer == "signed_adam")
        return x, trace, final, False

    return _attack_restarts(obs, model, cfg, truth, solve)


def lbfgs_minimize(obs: GradObservation, model: Model, cfg: AttackConfig,
                   truth: Optional[np.ndarray] = None) -> ReconstructionReport:
    """Baseline: projected L-BFGS on the matching objective (euclidean by default pairing)."""
    if cfg.objective != "euclidean":
        logger.warning("L-BFGS is paired with the %s objective; the baseline uses euclidean", cfg.objective)

    def solve(fun, x0, lo, hi):
        result = minimize_lbfgs(fun, x0, lo, hi, memory=cfg.lbfgs_memory, max_iter=cfg.max_iter,
                                c1=cfg.armijo_c)
        return result.x, result.trace, result.fun, result.line_search_failed

    return _attack_restarts(obs, model, cfg, truth, solve)
