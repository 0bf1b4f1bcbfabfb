"""Adapter-based unsupervised domain adaptation with a NumPy mini-transformer."""

from .errors import (
    AdapterUDAError,
    ChecksumError,
    ConfigError,
    ContractError,
    DataError,
    EmptyLossError,
    FingerprintMismatch,
    FreezingViolation,
    NonFiniteError,
    SchemaError,
    ShapeError,
)
from .kernels import BACKEND
from .model import Group, ModelConfig, ParameterStore, count_params, encode, init_model
from .training import MethodVariant, RunPlan, run_method

__version__ = "0.1.0"

__all__ = [
    "AdapterUDAError",
    "BACKEND",
    "ChecksumError",
    "ConfigError",
    "ContractError",
    "DataError",
    "EmptyLossError",
    "FingerprintMismatch",
    "FreezingViolation",
    "Group",
    "MethodVariant",
    "ModelConfig",
    "NonFiniteError",
    "ParameterStore",
    "RunPlan",
    "SchemaError",
    "ShapeError",
    "count_params",
    "encode",
    "init_model",
    "run_method",
]
