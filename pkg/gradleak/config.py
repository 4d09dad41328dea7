"""
Configuration for gradleak.

Environment settings are read once from `.env` / the process environment.
Attack and federated-protocol knobs are pydantic models so that they can be
validated, echoed to JSON next to results and reloaded for a rerun.
"""

import os
from typing import List, Literal, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

# Load environment variables from .env file
load_dotenv()

# Default dataset root (CIFAR-10 binary batches live here)
DATA_ROOT = os.getenv("GRADLEAK_DATA", "./data")
# Default output directory for experiment artifacts
OUTPUT_ROOT = os.getenv("GRADLEAK_OUT", "./runs")
LOG_LEVEL = os.getenv("GRADLEAK_LOG_LEVEL", "INFO")

# Nondegeneracy tolerance for analytic inversion (float64 roundoff guard)
ANALYTIC_TOL = 1e-12
# Below this norm the cosine objective is undefined
ZERO_GRADIENT_NORM = 1e-20
# PSNR reported for a perfect reconstruction
PSNR_CAP = 100.0


class AttackConfig(BaseModel):
    """Knobs of the optimization-based reconstruction."""

    objective: Literal["cosine", "euclidean"] = "cosine"
    tv_weight: float = Field(default=0.01, ge=0.0)
    optimizer: Literal["signed_adam", "adam", "lbfgs"] = "signed_adam"
    max_iter: int = Field(default=2000, ge=0)
    step_size: float = Field(default=0.1, gt=0.0)
    restarts: int = Field(default=1, ge=1)
    seed: int = 0
    # Per-channel box; a single value applies to every channel
    box_lo: List[float] = Field(default_factory=lambda: [0.0])
    box_hi: List[float] = Field(default_factory=lambda: [1.0])
    decay_fractions: List[float] = Field(default_factory=lambda: [3 / 8, 5 / 8, 7 / 8])
    decay_factor: float = Field(default=0.1, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    lbfgs_memory: int = Field(default=10, ge=1)
    armijo_c: float = Field(default=1e-4, gt=0.0, lt=1.0)
    log_every: int = Field(default=500, ge=1)
    progress: bool = False

    @field_validator("decay_fractions")
    @classmethod
    def _check_fractions(cls, value: List[float]) -> List[float]:
        if any(f <= 0.0 or f >= 1.0 for f in value):
            raise ValueError("decay fractions must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("decay fractions must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _check_box(self) -> "AttackConfig":
        if len(self.box_lo) != len(self.box_hi):
            raise ValueError("box_lo and box_hi must have the same length")
        if any(lo >= hi for lo, hi in zip(self.box_lo, self.box_hi)):
            raise ValueError("box_lo must be below box_hi for every channel")
        return self


class FedConfig(BaseModel):
    """Local training protocol of one federated user."""

    n: int = Field(default=1, ge=1, description="local images")
    epochs: int = Field(default=1, ge=1, description="local epochs E")
    batch_size: int = Field(default=1, ge=1, description="local mini-batch size B")
    lr: float = Field(default=1e-4, gt=0.0, description="local learning rate tau")
    seed: int = 0
    # Send the raw mean gradient when E=1 and B=n (federated SGD)
    raw_gradient: bool = True

    @model_validator(mode="after")
    def _check_batches(self) -> "FedConfig":
        if self.n % self.batch_size != 0:
            raise ValueError(f"batch_size {self.batch_size} does not divide n={self.n}")
        return self

    @property
    def steps_per_epoch(self) -> int:
        return self.n // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def single_step(self) -> bool:
        return self.epochs == 1 and self.batch_size == self.n
