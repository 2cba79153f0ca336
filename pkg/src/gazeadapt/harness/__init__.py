"""Command line, ablation grid, desk benchmark, tables and figures."""

from .ablation import (ExperimentGrid, emit_ablation_table, parse_ablation_csv, run_ablation,
                       trend_holds)
from .figures import emit_overlay_figure, emit_training_curves

__all__ = ["ExperimentGrid", "emit_ablation_table", "emit_overlay_figure", "emit_training_curves",
           "parse_ablation_csv", "run_ablation", "trend_holds"]
