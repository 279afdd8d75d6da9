from .base import (CorrelatedSample, LevelBatch, LinearGaussianModel, Model,
                   SampleError, coupling_report)
from .fhn import FhnModel, FhnParams
from .pollutant import PollutantModel, PollutantParams

__all__ = [
    "CorrelatedSample", "LevelBatch", "LinearGaussianModel", "Model",
    "SampleError", "coupling_report", "FhnModel", "FhnParams",
    "PollutantModel", "PollutantParams",
]
