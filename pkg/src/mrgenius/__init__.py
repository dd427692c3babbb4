"""MR GENIUS: instrumental-variable estimation robust to invalid instruments.

Identification comes from heteroscedasticity of the exposure across
instrument levels rather than from exclusion restrictions.
"""

from .additive import (CausalEstimate, GmmConfig, genius_covariates, genius_efficient, genius_gmm,
                       genius_single, genius_single_lewbel)
from .baselines import BaselineEstimate, mr_egger, oracle_tsls, tsls
from .data import (ColumnSchema, ExposureKind, ObservationTable, RelevanceDiagnostic, load_csv,
                   relevance_diagnostic, write_csv)
from .errors import (ConvergenceError, DataValidationError, IdentificationError, MRGeniusError,
                     WeakIdentificationWarning)
from .inference import SandwichParts, sandwich_gmm, sandwich_single, wald_ci
from .link import (ExternalMoments, LinkEstimate, case_control_adjust, genius_mult_exposure,
                   genius_mult_outcome, genius_odds_ratio)
from .simulation import MonteCarloReport, ScenarioSpec, generate, run_monte_carlo
from .survival import CumulativeEffectPath, bootstrap_paths, genius_additive_hazards, path_interpolate

__version__ = "0.1.0"

__all__ = [
    "BaselineEstimate", "CausalEstimate", "ColumnSchema", "ConvergenceError", "CumulativeEffectPath",
    "DataValidationError", "ExposureKind", "ExternalMoments", "GmmConfig", "IdentificationError",
    "LinkEstimate", "MRGeniusError", "MonteCarloReport", "ObservationTable", "RelevanceDiagnostic",
    "SandwichParts", "ScenarioSpec", "WeakIdentificationWarning", "bootstrap_paths", "case_control_adjust",
    "generate", "genius_additive_hazards", "genius_covariates", "genius_efficient", "genius_gmm",
    "genius_mult_exposure", "genius_mult_outcome", "genius_odds_ratio", "genius_single",
    "genius_single_lewbel", "load_csv", "mr_egger", "oracle_tsls", "path_interpolate", "relevance_diagnostic",
    "run_monte_carlo", "sandwich_gmm", "sandwich_single", "tsls", "wald_ci", "write_csv",
]
