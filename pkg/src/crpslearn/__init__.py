"""Online combination of probabilistic (quantile) forecasts by CRPS learning.

The main entry points are :class:`Learner` for a single configuration,
:class:`SamplingOnlineTuner` for online hyperparameter selection and the
``crpslearn`` command line tool.
"""

from .core import (Bundle, ExpertPanel, MarginalGrid, ObservationSeries, ProbGrid, ValidationError,
                   WeightField, crps_from_quantiles, quantile_loss, quantile_loss_subgradient,
                   sort_quantiles, validate_panel)
from .learner import SCHEMES, Learner, LearnerBatch, LearnerConfig, LearnerState
from .splines import BasisSpec, KnotSpec, SmoothSpec
from .tuner import CandidateSet, SamplingOnlineTuner, build_grid

__all__ = [
    "Bundle", "ExpertPanel", "MarginalGrid", "ObservationSeries", "ProbGrid", "ValidationError",
    "WeightField", "crps_from_quantiles", "quantile_loss", "quantile_loss_subgradient",
    "sort_quantiles", "validate_panel", "SCHEMES", "Learner", "LearnerBatch", "LearnerConfig",
    "LearnerState", "BasisSpec", "KnotSpec", "SmoothSpec", "CandidateSet", "SamplingOnlineTuner",
    "build_grid",
]
__version__ = "0.1.0"
