"""
Federated protocol simulation: what an honest-but-curious server observes.

A user either shares its mean gradient (federated SGD) or runs E epochs of
local SGD over n images in mini-batches of B and shares the parameter delta
(federated averaging). The same differentiable simulation produces the
user's real update and, inside the attack, the candidate's update.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np

from gradleak.autodiff import primitives as P
from gradleak.autodiff.tensor import Graph, Tensor, gradient
from gradleak.config import FedConfig
from gradleak.datasets import Sample
from gradleak.errors import ConfigError, EmptyDatasetError, MetadataMismatchError, ShapeError
from gradleak.netzoo import Model, batch_loss, param_variables

logger = logging.getLogger(__name__)

ObservationKind = Literal["raw_gradient", "param_delta"]


@dataclass
class GradObservation:
    """
    One user's shared update.

    raw_gradient: payload is the mean gradient of the local batch.
    param_delta: payload is theta_after - theta_before; `fed` holds (n, E, B, tau).
    """
    kind: ObservationKind
    payload: Dict[str, np.ndarray]
    labels: np.ndarray
    fed: Optional[FedConfig] = None
    meta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("raw_gradient", "param_delta"):
            raise MetadataMismatchError(f"unknown observation kind '{self.kind}'")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.kind == "param_delta":
            if self.fed is None:
                raise MetadataMismatchError("param_delta observations need their FedConfig")
            if self.labels.size != self.fed.n:
                raise MetadataMismatchError(f"{self.labels.size} labels for n={self.fed.n}")

    def check_compatible(self, model: Model) -> None:
        """Raise MetadataMismatchError unless payload names/shapes match the model."""
        if list(self.payload) != list(model.params):
            raise MetadataMismatchError("observation parameters do not match the model's")
        for name, value in model.params.items():
            if self.payload[name].shape != value.shape:
                raise MetadataMismatchError(
                    f"{name}: observed shape {self.payload[name].shape}, model has {value.shape}"
                )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.payload.values()])

    def scaled(self, factor: float) -> "GradObservation":
        return GradObservation(self.kind, {k: v * factor for k, v in self.payload.items()},
                               self.labels.copy(), self.fed, dict(self.meta))

    def target(self) -> Dict[str, np.ndarray]:
        """The gradient-shaped quantity the attack matches: g, or -delta/tau for FedAvg."""
        if self.kind == "raw_gradient":
            return self.payload
        return {k: -v / self.fed.lr for k, v in self.payload.items()}

    def target_norm(self) -> float:
        """Euclidean norm of target() over all parameters (the gradient magnitude the server sees)."""
        return float(np.sqrt(sum(np.sum(v * v) for v in self.target().values())))


def batch_schedule(fc: FedConfig) -> List[np.ndarray]:
    """Index sets of every local step: sequential batches over a seeded shuffle, redrawn each epoch."""
    rng = np.random.default_rng(fc.seed)
    steps = []
    for _ in range(fc.epochs):
        order = rng.permutation(fc.n)
        for s in range(fc.steps_per_epoch):
            steps.append(order[s * fc.batch_size:(s + 1) * fc.batch_size])
    return steps


def simulate_update_sum(model: Model, params: Mapping[str, Tensor], images: Tensor,
                        labels: Sequence[int], fc: FedConfig) -> Dict[str, Tensor]:
    """
    Sum of the local gradients over all E*n/B SGD steps, starting from `params`.

    `params` must be graph tensors; the result stays on their graph, so it may be
    differentiated again (w.r.t. `images` when they are graph variables too).
    """
    images = P.as_tensor(images)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.shape[0] != fc.n or labels.size != fc.n:
        raise ShapeError(f"expected {fc.n} images and labels, got {images.shape[0]} and {labels.size}")
    theta = dict(params)
    total: Optional[Dict[str, Tensor]] = None
    schedule = batch_schedule(fc)
    for step, idx in enumerate(schedule):
        batch = P.slice(images, (idx,))
        loss = batch_loss(model, batch, labels[idx], theta)
        grads = dict(zip(theta, gradient(loss, list(theta.values()))))
        total = grads if total is None else {k: P.add(total[k], grads[k]) for k in total}
        if step + 1 < len(schedule):
            theta = {k: P.subtract(theta[k], P.scale(grads[k], fc.lr)) for k in theta}
    return total


def compute_update(model: Model, local_data: Sequence[Sample], fc: FedConfig) -> GradObservation:
    """
    The update a user with `local_data` sends under protocol `fc`.

    Returns a raw mean gradient when fc.single_step and fc.raw_gradient,
    otherwise the parameter delta after E*n/B local SGD steps.
    """
    if not local_data:
        raise EmptyDatasetError("a user needs local data")
    if len(local_data) != fc.n:
        raise ConfigError(f"FedConfig expects n={fc.n} images, got {len(local_data)}")
    images = np.stack([s.image for s in local_data])
    labels = np.array([s.label for s in local_data], dtype=np.int64)

    graph = Graph()
    theta = param_variables(model, graph)
    if fc.single_step and fc.raw_gradient:
        loss = batch_loss(model, Tensor(images), labels, theta)
        grads = gradient(loss, list(theta.values()))
        payload = {k: g.data.copy() for k, g in zip(theta, grads)}
        return GradObservation("raw_gradient", payload, labels, fc)

    total = simulate_update_sum(model, theta, Tensor(images), labels, fc)
    payload = {k: -fc.lr * total[k].data for k in theta}
    logger.debug("Simulated %d local steps (n=%d, E=%d, B=%d, lr=%g)",
                 fc.total_steps, fc.n, fc.epochs, fc.batch_size, fc.lr)
    return GradObservation("param_delta", payload, labels, fc)


def fed_round(server_params: Mapping[str, np.ndarray], user_updates: Sequence[GradObservation],
              lr_server: float = 1.0) -> Dict[str, np.ndarray]:
    """
    One server step.

    raw_gradient updates: theta - lr_server * sum of user gradients.
    param_delta updates: theta + lr_server * mean of user deltas.
    """
    if not user_updates:
        return {k: np.array(v, dtype=np.float64) for k, v in server_params.items()}
    kinds = {u.kind for u in user_updates}
    if len(kinds) > 1:
        raise MetadataMismatchError("cannot aggregate raw gradients and parameter deltas in one round")
    for u in user_updates:
        if list(u.payload) != list(server_params):
            raise MetadataMismatchError("user update does not match the server parameters")

    new_params = {}
    for name, value in server_params.items():
        stacked = np.stack([u.payload[name] for u in user_updates])
        if stacked.shape[1:] != np.shape(value):
            raise MetadataMismatchError(f"{name}: update shape {stacked.shape[1:]} vs {np.shape(value)}")
        if kinds == {"raw_gradient"}:
            new_params[name] = value - lr_server * stacked.sum(axis=0)
        else:
            new_params[name] = value + lr_server * stacked.mean(axis=0)
    return new_params


def flip_class_rows(model: Model, i: int, j: int) -> Model:
    """Swap rows i and j of the classification layer's weight and bias."""
    k = model.spec.num_classes
    if not (0 <= i < k and 0 <= j < k):
        raise ConfigError(f"class indices ({i}, {j}) out of range 0..{k - 1}")
    params = {name: value.copy() for name, value in model.params.items()}
    head = model.spec.head_name
    for name in (f"{head}.weight", f"{head}.bias"):
        if name in params:
            params[name][[i, j]] = params[name][[j, i]]
    return Model(model.spec, params)
