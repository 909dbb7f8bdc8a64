"""Regression-tree estimation of population totals from complex survey samples."""

from .design import DesignFamily, DesignSpec, SampleDraw, compute_inclusion_probs, design_diagnostics, draw_sample
from .errors import SurveyError
from .estimate import (
    EstimateResult,
    calibration_weights,
    greg_total,
    ht_total,
    linear_estimator,
    linear_weights,
    stepwise_select,
    tree_estimator,
)
from .frame import Frame, SynthConfig, VariableSpec, load_frame, reference_config, synth_population
from .mc import SimConfig, SimReport, consistency_check, empirical_mse, run_simulation
from .tree import GrowControls, Partition, export_tree, grow_tree, import_tree, synth_config_from_tree

__version__ = "0.1.0"

__all__ = [
    "DesignFamily", "DesignSpec", "SampleDraw", "compute_inclusion_probs", "design_diagnostics", "draw_sample",
    "SurveyError",
    "EstimateResult", "calibration_weights", "greg_total", "ht_total", "linear_estimator", "linear_weights",
    "stepwise_select", "tree_estimator",
    "Frame", "SynthConfig", "VariableSpec", "load_frame", "reference_config", "synth_population",
    "SimConfig", "SimReport", "consistency_check", "empirical_mse", "run_simulation",
    "GrowControls", "Partition", "export_tree", "grow_tree", "import_tree", "synth_config_from_tree",
]
