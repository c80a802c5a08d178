"""Equivariant normalizing flows on finite groups."""

from equiflow._core import (
    ConfigError,
    Model,
    ModelError,
    build_model,
    load_model,
    moser_transport,
    run_cli,
    train,
)

__all__ = [
    "ConfigError",
    "Model",
    "ModelError",
    "build_model",
    "load_model",
    "moser_transport",
    "run_cli",
    "train",
]
