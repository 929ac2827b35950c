"""Random survival forests for competing risks with longitudinal predictors."""
from .data import (Covariate, LongitudinalDataset, MarkerTable, Schema, load_dataset,
                   load_schema, save_dataset, save_schema)
from .evaluation import (brier_score, cross_validate, dynamic_auc, external_ibs, ibs,
                         oob_error, tune_mtry)
from .exceptions import (DataValidationError, DynForestError, LmmFitError, ModelFormatError,
                         NonEstimableError, NumericalError, SchemaMismatchError)
from .forest import DynamicForest, fit_forest, fit_forest_rc, load_model, save_model
from .importance import gvimp, importance_report, minimal_depth, vimp
from .mixed import LinearMixedModel, LmmSpec, MixedModelFit, blup, fit_lmm
from .simulate import SimConfig, make_replications, simulate_dataset
from .survival import (CifCurve, SurvCurve, aalen_johansen, censoring_survival,
                       censoring_weights, gray_stat, kaplan_meier, logrank_stat)

__version__ = "0.1.0"

__all__ = [
    "Covariate", "LongitudinalDataset", "MarkerTable", "Schema", "load_dataset", "load_schema",
    "save_dataset", "save_schema", "brier_score", "cross_validate", "dynamic_auc",
    "external_ibs", "ibs", "oob_error", "tune_mtry", "DataValidationError", "DynForestError",
    "LmmFitError", "ModelFormatError", "NonEstimableError", "NumericalError",
    "SchemaMismatchError", "DynamicForest", "fit_forest", "fit_forest_rc", "load_model",
    "save_model", "gvimp", "importance_report", "minimal_depth", "vimp", "LinearMixedModel",
    "LmmSpec", "MixedModelFit", "blup", "fit_lmm", "SimConfig", "make_replications",
    "simulate_dataset", "CifCurve", "SurvCurve", "aalen_johansen", "censoring_survival",
    "censoring_weights", "gray_stat", "kaplan_meier", "logrank_stat",
]
