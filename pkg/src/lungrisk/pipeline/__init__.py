"""Command-line orchestration: configuration, phantom data, and the train/predict/evaluate commands."""

from .config import PipelineConfig, format_config, load_config, parse_config_text
from .phantom import PhantomSpec, generate_phantom_dataset

__all__ = [
    "PhantomSpec",
    "PipelineConfig",
    "format_config",
    "generate_phantom_dataset",
    "load_config",
    "parse_config_text",
]
