"""Pyramidal residual networks of residual networks in plain numpy.

Architecture compilation (``archspec``, ``graph``), static analysis
(``analyzer``), a small NCHW engine with manual backprop (``nnkernel``),
stochastic depth (``stochdepth``) and an SGD trainer (``trainer``).
"""

from .analyzer import AnalysisReport, analyze, count_flops, count_params, expected_compute
from .archspec import (
    ArchConfig, BlockVariant, ChannelSchedule, ConfigError, classic_widths,
    derive_block_counts, load_config, pyramidal_widths,
)
from .graph import LayerGraph, ShapeError, build_graph, export_json, import_json, infer_shapes, validate_graph
from .stochdepth import SurvivalSchedule, expected_active, linear_decay, sample_mask

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport", "ArchConfig", "BlockVariant", "ChannelSchedule", "ConfigError",
    "LayerGraph", "ShapeError", "SurvivalSchedule", "analyze", "build_graph", "classic_widths",
    "count_flops", "count_params", "derive_block_counts", "expected_active", "expected_compute",
    "export_json", "import_json", "infer_shapes", "linear_decay", "load_config",
    "pyramidal_widths", "sample_mask", "validate_graph",
]
