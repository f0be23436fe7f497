"""Fixed-effects panel regressions with crossover-jackknife bias correction,
cluster-robust inference, event-study and group-time treatment-effect
estimators, and a SIRD simulator that generates panels with known effects.
"""
__version__ = "0.1.0"

from .debias import fit, fit_debiased, fit_debiased_cbc, partition_units
from .did import (
    EventStudySpec,
    aggregate_dynamic,
    csdid_att,
    csdid_att_arrays,
    event_study_fit,
    simultaneous_bands,
)
from .errors import DynPanelError
from .fe import FitResult, RegressionSpec, Term, build_design, demean, fit_fe, ols
from .inference import cluster_vcov, twoway_cluster_mean_se
from .panel import PanelDataset, Schema, load_csv
from .pipeline import SensitivityGrid, build_case_spec, build_death_spec, run_grid
from .sird import SirdParams, SynthPanelConfig, generate_synth_panel, integrate

__all__ = [
    "PanelDataset", "Schema", "load_csv",
    "Term", "RegressionSpec", "FitResult", "build_design", "demean", "ols", "fit_fe",
    "fit", "fit_debiased", "fit_debiased_cbc", "partition_units",
    "cluster_vcov", "twoway_cluster_mean_se",
    "SirdParams", "SynthPanelConfig", "integrate", "generate_synth_panel",
    "EventStudySpec", "event_study_fit", "csdid_att", "csdid_att_arrays",
    "aggregate_dynamic", "simultaneous_bands",
    "SensitivityGrid", "build_case_spec", "build_death_spec", "run_grid",
    "DynPanelError",
]
