"""
gradleak: reconstructing training inputs from federated gradients and updates.

Modules:
    autodiff    reverse-mode differentiation with re-differentiable backward passes
    netzoo      model specs, initialization, forward pass and SGD
    analytic    closed-form fully-connected inversion and label recovery
    fedsim      federated SGD / FedAvg update simulation and label flipping
    attack      gradient-matching reconstruction (signed Adam, L-BFGS) and PSNR
    experiment  config-driven experiment runs with CSV/JSON/image output
"""

from gradleak.config import AttackConfig, FedConfig
from gradleak.errors import ConfigError, GradLeakError, GraphError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ConfigError", "FedConfig", "GradLeakError", "GraphError", "NumericalError",
    "__version__",
]
