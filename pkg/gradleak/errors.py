"""
Exception hierarchy for gradleak.

Configuration problems and numerical failures are kept on separate branches
so the CLI can map them to distinct exit codes.
"""


class GradLeakError(Exception):
    """Base class for every error raised by this package."""


# --- Configuration / input errors ---

class ConfigError(GradLeakError, ValueError):
    """Invalid configuration, arguments or input data."""


class UnboundInputError(ConfigError):
    """A graph input was not bound (or an unknown name was bound)."""


class ShapeError(ConfigError):
    """Tensor shapes are inconsistent with a primitive or model."""


class IncomposableSpecError(ConfigError):
    """Layer shapes of a ModelSpec do not compose, or the combination is unsupported."""


class UnknownSchemeError(ConfigError):
    """Unknown parameter initialization scheme."""


class MetadataMismatchError(ConfigError):
    """Observation metadata disagrees with the model or federated config."""


class DatasetFormatError(ConfigError):
    """A dataset file is malformed (truncated record, label out of range, ...)."""


class NotFullyConnectedError(ConfigError):
    """Analytic chain reconstruction was asked for a model containing conv layers."""


class EmptyDatasetError(ConfigError):
    """An operation that needs samples received none."""


# --- Numerical failures ---

class NumericalError(GradLeakError, ArithmeticError):
    """A computation produced an unusable numerical result."""


class NonFiniteError(NumericalError):
    """NaN or Inf appeared in a primitive output."""


class ZeroGradientError(NumericalError):
    """Cosine objective undefined because a gradient has (near) zero norm."""


class AllBiasGradientsZero(NumericalError):
    """No bias-gradient entry exceeds the nondegeneracy tolerance."""


class InconsistentRows(NumericalError):
    """Rows of a weight gradient disagree; the gradient was likely averaged over inputs."""


class DeadLayer(NumericalError):
    """Every output-derivative entry of a layer is (numerically) zero."""

    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


class AmbiguousLabel(NumericalError):
    """Label recovery found zero or several candidate classes."""


class LineSearchError(NumericalError):
    """Backtracking line search could not satisfy the Armijo condition."""


# --- Graph misuse ---

class GraphError(GradLeakError, RuntimeError):
    """Misuse of the computation graph (foreign tensors, non-scalar targets, ...)."""
