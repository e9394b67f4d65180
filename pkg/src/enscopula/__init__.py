"""Ensemble forecast postprocessing, empirical-copula coupling and verification."""

from . import coupling, distributions, postprocess, synthetic, verification, workbench
from .coupling import EccEnsemble, HistoricalRecord, QuantizedEnsemble, RawEnsemble
from .distributions import (
    BernoulliGammaMixtureDist,
    EmpiricalDist,
    GammaDist,
    NormalDist,
    NormalMixtureDist,
    PointMassLogisticDist,
    TruncatedNormalDist,
    crps_closed_normal,
)
from .errors import EnscopulaError, EnscopulaWarning, InputError
from .postprocess import MarginIndex, TrainingCase, TrainingWindow
from .synthetic import ScenarioConfig, generate_scenario
from .verification import ScoreReport
from .workbench import PipelineConfig, ingest, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "coupling",
    "distributions",
    "postprocess",
    "synthetic",
    "verification",
    "workbench",
    "RawEnsemble",
    "QuantizedEnsemble",
    "EccEnsemble",
    "HistoricalRecord",
    "NormalDist",
    "TruncatedNormalDist",
    "GammaDist",
    "NormalMixtureDist",
    "BernoulliGammaMixtureDist",
    "PointMassLogisticDist",
    "EmpiricalDist",
    "crps_closed_normal",
    "MarginIndex",
    "TrainingCase",
    "TrainingWindow",
    "ScenarioConfig",
    "generate_scenario",
    "ScoreReport",
    "PipelineConfig",
    "ingest",
    "run_pipeline",
    "EnscopulaError",
    "EnscopulaWarning",
    "InputError",
    "__version__",
]
