"""Grouped secure aggregation with poisoning detection, threshold escrow and unlearning."""

from .config import ScenarioConfig, load_config
from .metrics import RunMetrics, emit_metrics, run_matrix, run_scenario

__all__ = ["ScenarioConfig", "load_config", "RunMetrics", "emit_metrics", "run_matrix", "run_scenario"]
__version__ = "0.1.0"
