"""
Closed-form inversion of fully-connected layers and label recovery.

For y = A x + b and a single input, dL/dA = dL/db . x^T, so any row i with a
nonzero bias gradient yields x = (dL/dA)[i, :] / (dL/db)[i]. Without a bias the
same identity holds with dL/dy in place of dL/db, and dL/dy can be carried
backwards through a cascade of fully-connected layers once the input of a
deeper layer is known.
"""

import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np

from gradleak.config import ANALYTIC_TOL
from gradleak.errors import (
    AllBiasGradientsZero,
    AmbiguousLabel,
    ConfigError,
    DeadLayer,
    InconsistentRows,
    NonFiniteError,
    NotFullyConnectedError,
    ShapeError,
)
from gradleak.netzoo import Model

logger = logging.getLogger(__name__)

# Relative disagreement between rows tolerated by the consistency check
ROW_CONSISTENCY_TOL = 1e-6


@dataclass
class FcGradient:
    """Gradient of a fully-connected layer: dL/dA (m x n) and optionally dL/db (m)."""
    dL_dA: np.ndarray
    dL_db: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dL_dA = np.asarray(self.dL_dA, dtype=np.float64)
        if self.dL_dA.ndim != 2:
            raise ShapeError(f"dL_dA must be a matrix, got shape {self.dL_dA.shape}")
        if self.dL_db is not None:
            self.dL_db = np.asarray(self.dL_db, dtype=np.float64).reshape(-1)
            if self.dL_db.size != self.dL_dA.shape[0]:
                raise ShapeError(f"dL_db has {self.dL_db.size} entries for {self.dL_dA.shape[0]} rows")
        for arr in (self.dL_dA, self.dL_db):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NonFiniteError("fully-connected gradient contains non-finite entries")


def _row_ratio(dL_dA: np.ndarray, dL_dy: np.ndarray) -> np.ndarray:
    """x from dL/dA = dL/dy x^T using the row with the largest |dL/dy| (lowest index on ties)."""
    i = int(np.argmax(np.abs(dL_dy)))
    return dL_dA[i] / dL_dy[i]


def _check_rows(dL_dA: np.ndarray, dL_dy: np.ndarray, x: np.ndarray, tol: float) -> None:
    rows = np.flatnonzero(np.abs(dL_dy) > tol)
    ratios = dL_dA[rows] / dL_dy[rows, None]
    spread = np.max(np.abs(ratios - x[None, :])) if rows.size else 0.0
    if spread > ROW_CONSISTENCY_TOL * (1.0 + np.max(np.abs(x))):
        raise InconsistentRows(
            f"weight-gradient rows disagree by {spread:.3e}; the gradient was likely averaged over several inputs"
        )


def reconstruct_biased_fc(g: FcGradient, tol: float = ANALYTIC_TOL, check: bool = True) -> np.ndarray:
    """
    Recover the input of a biased fully-connected layer from its gradient.

    Args:
        g: layer gradient with dL_db present.
        tol: entries of |dL_db| at or below this count as zero.
        check: verify that every row with a nonzero bias gradient agrees.

    Returns:
        The input vector x (length n).

    Raises:
        AllBiasGradientsZero: no |dL_db| entry exceeds tol.
        InconsistentRows: rows imply different inputs.
    """
    if g.dL_db is None:
        raise ConfigError("reconstruct_biased_fc needs a bias gradient")
    if not np.any(np.abs(g.dL_db) > tol):
        raise AllBiasGradientsZero(f"every bias-gradient entry is below {tol:g}")
    x = _row_ratio(g.dL_dA, g.dL_db)
    if check:
        _check_rows(g.dL_dA, g.dL_db, x, tol)
    return x


def _fc_layers(model: Model):
    """(layer index, layer, prefix) of each linear layer, checking the chain has no conv part."""
    spec = model.spec
    chain = []
    for i, (layer, name) in enumerate(zip(spec.layers, spec.layer_names())):
        if layer.kind in ("normalize", "flatten"):
            if chain and layer.kind == "normalize":
                raise NotFullyConnectedError("normalization inside the fully-connected chain")
            continue
        if layer.kind != "linear":
            raise NotFullyConnectedError(f"layer {i} is '{layer.kind}'; the model is not a fully-connected chain")
        if layer.batch_norm or layer.skip:
            raise NotFullyConnectedError(f"layer {i} uses batch norm or a skip connection")
        chain.append((i, layer, name))
    return chain


def fc_gradients(model: Model, grads: Mapping[str, np.ndarray]) -> List[FcGradient]:
    """Per-linear-layer FcGradients from a parameter-gradient dict."""
    out = []
    for layer, name in zip(model.spec.layers, model.spec.layer_names()):
        if layer.kind == "linear":
            out.append(FcGradient(grads[f"{name}.weight"], grads.get(f"{name}.bias")))
    return out


def _activation_derivative(activation: str, out: np.ndarray) -> np.ndarray:
    """phi'(y) expressed through the activation output x = phi(y)."""
    if activation == "relu":
        return (out > 0).astype(np.float64)
    if activation == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def reconstruct_fc_chain(model: Model, grads: Union[Sequence[FcGradient], Mapping[str, np.ndarray]],
                         tol: float = ANALYTIC_TOL) -> np.ndarray:
    """
    Recover the network input of a fully-connected cascade from its gradients.

    Starts at the deepest biased layer and walks back to the input, propagating
    dL/dy through each earlier layer and undoing its activation with the
    already-recovered activations.

    Args:
        model: fully-connected model (optionally preceded by normalize/flatten).
        grads: one FcGradient per linear layer, or a parameter-gradient dict.

    Returns:
        The input, shaped like `model.spec.input_shape`.

    Raises:
        NotFullyConnectedError: conv, pooling or batch-norm layers present.
        DeadLayer: all output-derivative entries of some layer are below tol.
    """
    chain = _fc_layers(model)
    if isinstance(grads, Mapping):
        grads = fc_gradients(model, grads)
    grads = list(grads)
    if len(grads) != len(chain):
        raise ShapeError(f"expected {len(chain)} layer gradients, got {len(grads)}")
    biased = [k for k, g in enumerate(grads) if g.dL_db is not None]
    if not biased:
        raise ConfigError("the chain has no biased layer to start from")

    start = biased[-1]
    x = reconstruct_biased_fc(grads[start], tol)
    dL_dy = grads[start].dL_db
    logger.debug("Recovered input of linear layer %d from its bias gradient", start)

    for k in range(start - 1, -1, -1):
        layer = chain[k][1]
        weight = model.params[f"{chain[k + 1][2]}.weight"]
        # x is the activation output of layer k
        dL_dy = (weight.T @ dL_dy) * _activation_derivative(layer.activation, x)
        if not np.any(np.abs(dL_dy) > tol):
            raise DeadLayer(f"linear layer {k} has no nonzero output derivative", layer=k)
        x = _row_ratio(grads[k].dL_dA, dL_dy)

    for layer in model.spec.layers:
        if layer.kind == "normalize":
            channels = len(layer.mean)
            x = (x.reshape(channels, -1) * np.asarray(layer.std)[:, None]
                 + np.asarray(layer.mean)[:, None])
    return np.asarray(x).reshape(model.spec.input_shape)


def head_gradient(model: Model, grads: Mapping[str, np.ndarray]) -> FcGradient:
    """The classification layer's gradient out of a parameter-gradient dict."""
    name = model.spec.head_name
    return FcGradient(grads[f"{name}.weight"], grads.get(f"{name}.bias"))


def reconstruct_head_input(model: Model, grads: Mapping[str, np.ndarray],
                           tol: float = ANALYTIC_TOL) -> np.ndarray:
    """Input features of the classification layer, whatever precedes it."""
    return reconstruct_biased_fc(head_gradient(model, grads), tol)


def recover_label(classifier_grad: FcGradient) -> int:
    """
    True class of a single-sample softmax cross-entropy gradient.

    With a bias, dL/db = p - onehot(y) has exactly one negative entry. Without
    one, every row of dL/dA is a multiple of the same input, so the row whose
    inner product with the all-ones vector has the minority sign is the label.

    Raises:
        AmbiguousLabel: zero or several candidates.
    """
    if classifier_grad.dL_db is not None:
        negative = np.flatnonzero(classifier_grad.dL_db < 0)
        if negative.size != 1:
            raise AmbiguousLabel(f"{negative.size} negative bias-gradient entries; expected exactly one")
        return int(negative[0])

    scores = classifier_grad.dL_dA @ np.ones(classifier_grad.dL_dA.shape[1])
    negative = np.flatnonzero(scores < 0)
    positive = np.flatnonzero(scores > 0)
    if negative.size == 1:
        return int(negative[0])
    if positive.size == 1 and negative.size == scores.size - 1:
        return int(positive[0])
    raise AmbiguousLabel(
        f"all-ones weight-gradient test has {negative.size} negative and {positive.size} positive rows"
    )
