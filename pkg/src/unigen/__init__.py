"""Desk-scale unified conditional image generation."""
from .config import RunConfig, load_config, parse_config
from .kernels import BACKEND as KERNEL_BACKEND
from .weavenet import ControlNetBaseline, UniGen, build_model, closed_form_params, count_params

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config",
    "KERNEL_BACKEND",
    "UniGen",
    "ControlNetBaseline",
    "build_model",
    "count_params",
    "closed_form_params",
]
