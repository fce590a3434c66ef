from .config import ExperimentConfig, default_config, load_config, parse_config
from .pipeline import run_experiment
from .report import canonical_dumps, emit_gap_plot, emit_tables

__all__ = [
    "ExperimentConfig",
    "canonical_dumps",
    "default_config",
    "emit_gap_plot",
    "emit_tables",
    "load_config",
    "parse_config",
    "run_experiment",
]
