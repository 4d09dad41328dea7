"""
Network zoo: declarative specs, initialization, forward pass and plain SGD.

A ModelSpec is a flat list of LayerSpecs. Parameters live outside the graph as
numpy arrays in a Model; forward() takes them either as constants or as graph
tensors, so the same code differentiates w.r.t. parameters, inputs or both.

Usage:
    spec = ModelSpec.convnet(width=16, input_shape=(3, 16, 16))
    model = build_model(spec, seed=0)
    grads = param_gradients(model, images, labels)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from gradleak.autodiff import functional as F
from gradleak.autodiff import primitives as P
from gradleak.autodiff.tensor import Graph, Tensor, gradient
from gradleak.datasets import Dataset, Sample
from gradleak.errors import (
    ConfigError,
    EmptyDatasetError,
    IncomposableSpecError,
    ShapeError,
    UnknownSchemeError,
)

logger = logging.getLogger(__name__)

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

INIT_SCHEMES = ("kaiming_uniform", "kaiming_normal")

Shape = Tuple[int, ...]


class LayerSpec(BaseModel):
    """One layer. Conv and linear layers may carry batch norm, an activation and a skip."""

    kind: Literal["normalize", "conv", "linear", "flatten", "maxpool", "avgpool", "global_avgpool"]
    out: int = Field(default=0, ge=0, description="output channels / features")
    kernel: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    padding_mode: Literal["zero", "circular"] = "zero"
    activation: Literal["none", "relu", "sigmoid"] = "none"
    batch_norm: bool = False
    bias: bool = True
    skip: bool = False
    # fixed per-channel affine (normalize layer only)
    mean: List[float] = Field(default_factory=list)
    std: List[float] = Field(default_factory=list)


class ModelSpec(BaseModel):
    """Architecture description; JSON round-trippable."""

    kind: Literal["mlp", "lenet_zhu", "convnet", "translation_invariant"]
    layers: List[LayerSpec]
    input_shape: Tuple[int, ...]
    num_classes: int = Field(default=10, ge=2)
    width: int = Field(default=64, ge=1, description="channel scale D")
    depth: int = Field(default=0, ge=0, description="extra repeated conv blocks")

    # --- builders ---

    @classmethod
    def mlp(cls, input_shape: Sequence[int], hidden: Sequence[int] = (), num_classes: int = 10,
            biases: Optional[Sequence[bool]] = None, activation: str = "relu") -> "ModelSpec":
        """Flatten followed by fully-connected layers; `biases` has one flag per linear layer."""
        sizes = list(hidden) + [num_classes]
        biases = list(biases) if biases is not None else [True] * len(sizes)
        if len(biases) != len(sizes):
            raise ConfigError(f"expected {len(sizes)} bias flags, got {len(biases)}")
        layers = [LayerSpec(kind="flatten")]
        for i, (size, bias) in enumerate(zip(sizes, biases)):
            last = i == len(sizes) - 1
            layers.append(LayerSpec(kind="linear", out=size, bias=bias,
                                    activation="none" if last else activation))
        return cls(kind="mlp", layers=layers, input_shape=tuple(input_shape),
                   num_classes=num_classes, width=max(sizes))

    @classmethod
    def lenet_zhu(cls, input_shape: Sequence[int] = (3, 32, 32), num_classes: int = 10,
                  channels: int = 12, normalize: bool = False) -> "ModelSpec":
        """Shallow smooth net: two 5x5 sigmoid convs (stride 1, padding 2) and a wide linear head."""
        layers = _normalize_layer(input_shape) if normalize else []
        layers += [
            LayerSpec(kind="conv", out=channels, kernel=5, padding=2, activation="sigmoid"),
            LayerSpec(kind="conv", out=channels, kernel=5, padding=2, activation="sigmoid"),
            LayerSpec(kind="flatten"),
            LayerSpec(kind="linear", out=num_classes),
        ]
        return cls(kind="lenet_zhu", layers=layers, input_shape=tuple(input_shape),
                   num_classes=num_classes, width=channels)

    @classmethod
    def convnet(cls, width: int = 64, input_shape: Sequence[int] = (3, 16, 16),
                num_classes: int = 10, depth: int = 0, skips: bool = False,
                padding_mode: str = "zero", normalize: bool = False) -> "ModelSpec":
        """
        ConvNet-D: 8 conv-BN-ReLU layers with D, 2D, 2D, 4D, 4D, 4D channels, a 2x2 max pool,
        two more 4D layers, another pool and a linear head.

        `depth` inserts extra 4D blocks before the last pool; with `skips` they are residual.
        """
        d = width
        layers = _normalize_layer(input_shape) if normalize else []

        def block(out: int, skip: bool = False) -> LayerSpec:
            return LayerSpec(kind="conv", out=out, kernel=3, padding=1, padding_mode=padding_mode,
                             batch_norm=True, activation="relu", skip=skip)

        layers += [block(c) for c in (d, 2 * d, 2 * d, 4 * d, 4 * d, 4 * d)]
        layers.append(LayerSpec(kind="maxpool", kernel=2, stride=2))
        layers += [block(4 * d), block(4 * d)]
        layers += [block(4 * d, skip=skips) for _ in range(depth)]
        layers.append(LayerSpec(kind="maxpool", kernel=2, stride=2))
        layers += [LayerSpec(kind="flatten"), LayerSpec(kind="linear", out=num_classes)]
        return cls(kind="convnet", layers=layers, input_shape=tuple(input_shape),
                   num_classes=num_classes, width=width, depth=depth)

    @classmethod
    def translation_invariant(cls, width: int = 8, input_shape: Sequence[int] = (3, 16, 16),
                              num_classes: int = 10, convs: int = 2,
                              padding_mode: str = "circular", stride: int = 1) -> "ModelSpec":
        """Stride-1 convs with circular padding and global average pooling before the head."""
        layers = [LayerSpec(kind="conv", out=width, kernel=3, padding=1, stride=stride,
                            padding_mode=padding_mode, activation="relu")
                  for _ in range(convs)]
        layers += [LayerSpec(kind="global_avgpool"), LayerSpec(kind="linear", out=num_classes)]
        return cls(kind="translation_invariant", layers=layers, input_shape=tuple(input_shape),
                   num_classes=num_classes, width=width)

    # --- shape bookkeeping ---

    def layer_names(self) -> List[Optional[str]]:
        """Parameter prefix per layer (`convI` / `fcJ`), None for parameter-free layers."""
        names: List[Optional[str]] = []
        convs = linears = 0
        for layer in self.layers:
            if layer.kind == "conv":
                names.append(f"conv{convs}")
                convs += 1
            elif layer.kind == "linear":
                names.append(f"fc{linears}")
                linears += 1
            else:
                names.append(None)
        return names

    def layer_shapes(self) -> List[Shape]:
        """
        Per-sample shapes: entry 0 is the input, entry i+1 the output of layer i.

        Raises:
            IncomposableSpecError: a layer cannot consume its predecessor's output,
                or the network does not end in a linear layer with `num_classes` outputs.
        """
        shapes: List[Shape] = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            shape = shapes[-1]
            where = f"layer {i} ({layer.kind})"
            if layer.kind == "normalize":
                if len(layer.mean) != shape[0] or len(layer.std) != shape[0]:
                    raise IncomposableSpecError(f"{where}: needs {shape[0]} mean/std entries")
                if any(s <= 0 for s in layer.std):
                    raise IncomposableSpecError(f"{where}: std must be positive")
                out = shape
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise IncomposableSpecError(f"{where}: expects (C, H, W) input, got {shape}")
                if layer.out < 1:
                    raise IncomposableSpecError(f"{where}: needs at least one output channel")
                if layer.padding_mode == "circular" and layer.stride > 1:
                    raise IncomposableSpecError(f"{where}: circular padding requires stride 1")
                if layer.padding_mode == "circular" and layer.padding > min(shape[1:]):
                    raise IncomposableSpecError(f"{where}: circular padding exceeds input {shape}")
                h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
                out = (layer.out, h, w)
            elif layer.kind in ("maxpool", "avgpool"):
                if len(shape) != 3:
                    raise IncomposableSpecError(f"{where}: expects (C, H, W) input, got {shape}")
                h = (shape[1] - layer.kernel) // layer.stride + 1
                w = (shape[2] - layer.kernel) // layer.stride + 1
                out = (shape[0], h, w)
            elif layer.kind == "global_avgpool":
                if len(shape) != 3:
                    raise IncomposableSpecError(f"{where}: expects (C, H, W) input, got {shape}")
                out = (shape[0],)
            elif layer.kind == "flatten":
                out = (int(np.prod(shape)),)
            else:
                if len(shape) != 1:
                    raise IncomposableSpecError(f"{where}: expects a flat input, got {shape}")
                if layer.out < 1:
                    raise IncomposableSpecError(f"{where}: needs at least one output feature")
                out = (layer.out,)
            if any(s < 1 for s in out):
                raise IncomposableSpecError(f"{where}: input {shape} is too small")
            if layer.skip and out != shape:
                raise IncomposableSpecError(f"{where}: skip needs equal in/out shapes, {shape} vs {out}")
            if layer.batch_norm and layer.kind not in ("conv", "linear"):
                raise IncomposableSpecError(f"{where}: batch norm only follows conv/linear layers")
            shapes.append(out)

        if not self.layers or self.layers[-1].kind != "linear":
            raise IncomposableSpecError("the network must end in a fully-connected layer")
        if shapes[-1] != (self.num_classes,):
            raise IncomposableSpecError(f"head has {shapes[-1][0]} outputs, expected {self.num_classes}")
        return shapes

    def parameter_shapes(self) -> Dict[str, Shape]:
        """Ordered name -> shape map; the parameter count is a pure function of this."""
        shapes = self.layer_shapes()
        params: Dict[str, Shape] = {}
        for layer, name, shape in zip(self.layers, self.layer_names(), shapes):
            if name is None:
                continue
            if layer.kind == "conv":
                params[f"{name}.weight"] = (layer.out, shape[0], layer.kernel, layer.kernel)
            else:
                params[f"{name}.weight"] = (layer.out, shape[0])
            if layer.bias:
                params[f"{name}.bias"] = (layer.out,)
            if layer.batch_norm:
                params[f"{name}.bn_scale"] = (layer.out,)
                params[f"{name}.bn_shift"] = (layer.out,)
        return params

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))

    @property
    def head_name(self) -> str:
        """Parameter prefix of the classification layer."""
        return [n for n in self.layer_names() if n is not None][-1]

    def conv_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "conv")


def _normalize_layer(input_shape: Sequence[int]) -> List[LayerSpec]:
    channels = input_shape[0]
    if channels == 3:
        mean, std = list(CIFAR10_MEAN), list(CIFAR10_STD)
    else:
        mean, std = [0.5] * channels, [0.25] * channels
    return [LayerSpec(kind="normalize", mean=mean, std=std)]


@dataclass
class Model:
    """A spec plus its parameters (numpy arrays in `spec.parameter_shapes()` order)."""
    spec: ModelSpec
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.params.values()])

    def unflatten(self, vector: np.ndarray) -> "Model":
        """Inverse of flatten(); returns a new model."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.num_parameters:
            raise ShapeError(f"expected {self.num_parameters} values, got {vector.size}")
        params, offset = {}, 0
        for name, value in self.params.items():
            params[name] = vector[offset:offset + value.size].reshape(value.shape).copy()
            offset += value.size
        return Model(self.spec, params)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        if list(params) != list(self.params):
            raise ShapeError("parameter names do not match the model")
        return Model(self.spec, {k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


def init_params(model: Model, scheme: str = "kaiming_uniform", seed: int = 0) -> Model:
    """
    Fan-in Kaiming initialization for conv/linear weights, zero biases,
    unit batch-norm scale and zero shift.

    Raises:
        UnknownSchemeError: scheme is not one of INIT_SCHEMES.
    """
    if scheme not in INIT_SCHEMES:
        raise UnknownSchemeError(f"unknown init scheme '{scheme}' (known: {', '.join(INIT_SCHEMES)})")
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in model.spec.parameter_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            if scheme == "kaiming_uniform":
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".bn_scale"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return Model(model.spec, params)


def build_model(spec: ModelSpec, seed: int = 0, scheme: str = "kaiming_uniform") -> Model:
    """Validate the ModelSpec's shapes and initialize a model deterministically."""
    shapes = spec.parameter_shapes()
    model = init_params(Model(spec, {name: np.zeros(s) for name, s in shapes.items()}), scheme, seed)
    logger.debug("Built %s model with %d parameters", spec.kind, model.num_parameters)
    return model


ParamSource = Optional[Mapping[str, Union[Tensor, np.ndarray]]]


def forward(model: Model, x: Tensor, params: ParamSource = None,
            capture: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
    """
    Logits (N, K) for a batch x of shape (N, *input_shape).

    Args:
        params: tensors (e.g. graph variables) overriding the model's arrays.
        capture: if given, receives the input of every linear layer keyed by its prefix.
    """
    spec = model.spec
    x = P.as_tensor(x)
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"input batch {x.shape} does not match model input {spec.input_shape}")
    source = model.params if params is None else params
    theta = {k: P.as_tensor(v) for k, v in source.items()}

    for layer, name in zip(spec.layers, spec.layer_names()):
        block_input = x
        if layer.kind == "normalize":
            view = (1, len(layer.mean), 1, 1)
            inv = 1.0 / np.asarray(layer.std)
            x = P.add(P.multiply(x, Tensor(inv.reshape(view))),
                      Tensor((-np.asarray(layer.mean) * inv).reshape(view)))
            continue
        if layer.kind == "flatten":
            x = P.flatten(x, 1)
            continue
        if layer.kind == "maxpool":
            x = F.max_pool2d(x, layer.kernel, layer.stride)
            continue
        if layer.kind == "avgpool":
            x = F.avg_pool2d(x, layer.kernel, layer.stride)
            continue
        if layer.kind == "global_avgpool":
            x = F.global_avg_pool(x)
            continue

        bias = theta.get(f"{name}.bias")
        if layer.kind == "conv":
            x = F.conv2d(x, theta[f"{name}.weight"], bias, layer.stride, layer.padding, layer.padding_mode)
        else:
            if capture is not None:
                capture[name] = x.data.copy()
            x = F.linear(x, theta[f"{name}.weight"], bias)
        if layer.batch_norm:
            x = F.batch_norm(x, theta[f"{name}.bn_scale"], theta[f"{name}.bn_shift"])
        if layer.activation == "relu":
            x = P.relu(x)
        elif layer.activation == "sigmoid":
            x = P.sigmoid(x)
        if layer.skip:
            x = P.add(x, block_input)
    return x


def batch_loss(model: Model, images: Tensor, labels: Sequence[int], params: ParamSource = None) -> Tensor:
    """Mean softmax cross-entropy of a batch given as an (N, ...) tensor and N labels."""
    images = P.as_tensor(images)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.shape[0] == 0:
        raise EmptyDatasetError("cannot evaluate the loss of an empty batch")
    if labels.size != images.shape[0]:
        raise ShapeError(f"{images.shape[0]} images but {labels.size} labels")
    return F.cross_entropy(forward(model, images, params), labels)


def forward_loss(model: Model, batch: Sequence[Sample], params: ParamSource = None) -> Tensor:
    """Mean cross-entropy over a list of samples."""
    if not batch:
        raise EmptyDatasetError("cannot evaluate the loss of an empty batch")
    images = np.stack([s.image for s in batch])
    return batch_loss(model, Tensor(images), [s.label for s in batch], params)


def param_variables(model: Model, graph: Graph) -> Dict[str, Tensor]:
    """Register every parameter as a named leaf of `graph`."""
    return {name: graph.variable(value, name=name) for name, value in model.params.items()}


def loss_and_gradients(model: Model, images: np.ndarray,
                       labels: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
    graph = Graph()
    theta = param_variables(model, graph)
    loss = batch_loss(model, Tensor(images), labels, theta)
    grads = gradient(loss, list(theta.values()))
    return loss.item(), {name: g.data.copy() for name, g in zip(theta, grads)}


def param_gradients(model: Model, images: np.ndarray, labels: Sequence[int]) -> Dict[str, np.ndarray]:
    """Mean-loss gradient w.r.t. every parameter, as numpy arrays."""
    return loss_and_gradients(model, images, labels)[1]


def train_steps(model: Model, data: Dataset, steps: int, lr: float, batch_size: int,
                seed: int = 0) -> Model:
    """
    Plain SGD on `data`; returns a new model.

    Batches are taken sequentially from a seeded permutation that is redrawn
    every time the data is exhausted.
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if steps < 0 or lr <= 0 or batch_size < 1:
        raise ConfigError("train_steps needs steps >= 0, lr > 0 and batch_size >= 1")
    batch_size = min(batch_size, len(data))
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    current = Model(model.spec, params)
    order, cursor = rng.permutation(len(data)), 0
    first_loss = last_loss = None

    for step in range(steps):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(data)), 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        loss, grads = loss_and_gradients(current, data.images[idx], data.labels[idx])
        for name in params:
            params[name] = params[name] - lr * grads[name]
        current = Model(model.spec, params)
        first_loss = loss if first_loss is None else first_loss
        last_loss = loss

    if steps:
        logger.info("Trained %d SGD steps: batch loss %.4f -> %.4f", steps, first_loss, last_loss)
    return current


def params_from_vector(model: Model, vector: Tensor) -> Dict[str, Tensor]:
    """Differentiable inverse of Model.flatten() for a vector living on a graph."""
    if vector.size != model.num_parameters:
        raise ShapeError(f"expected {model.num_parameters} values, got {vector.size}")
    params, offset = {}, 0
    for name, value in model.params.items():
        piece = P.slice(vector, (np.s_[offset:offset + value.size],))
        params[name] = P.reshape(piece, value.shape)
        offset += value.size
    return params


def smoke_specs(num_classes: int = 3) -> Dict[str, ModelSpec]:
    """One tiny instance of every zoo architecture, for finite-difference suites."""
    return {
        "mlp": ModelSpec.mlp((1, 4, 4), hidden=[8], num_classes=num_classes),
        "lenet_zhu": ModelSpec.lenet_zhu((1, 6, 6), num_classes=num_classes, channels=2),
        "convnet": ModelSpec.convnet(width=1, input_shape=(1, 8, 8), num_classes=num_classes),
        "translation_invariant": ModelSpec.translation_invariant(width=2, input_shape=(1, 6, 6),
                                                                 num_classes=num_classes),
    }
