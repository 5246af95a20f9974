"""Cost-aware adaptive multifidelity reliability analysis.

A multifidelity Gaussian process over the joint input/fidelity space is
enriched by a cost-normalized lookahead acquisition, then used to build a
Gaussian-mixture biasing density for an importance-sampling estimate of a
failure probability.
"""

from camera.mfgp import Domain, Dataset, GpModel, KernelParams, LimitState
from camera.acquisition import AcquisitionConfig, CostModel, ValueConfig
from camera.density import GaussianMixture, NominalDensity
from camera.fpe import FailureEstimate
from camera.runner import RunConfig, RunRecord, run, repeat

__all__ = [
    "AcquisitionConfig",
    "CostModel",
    "Dataset",
    "Domain",
    "FailureEstimate",
    "GaussianMixture",
    "GpModel",
    "KernelParams",
    "LimitState",
    "NominalDensity",
    "RunConfig",
    "RunRecord",
    "ValueConfig",
    "repeat",
    "run",
]

__version__ = "0.1.0"
