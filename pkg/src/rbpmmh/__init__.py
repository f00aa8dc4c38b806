"""Rao-Blackwellised PMMH for dispersive material characterization."""
from importlib.metadata import PackageNotFoundError, version

from .material import DebyeTerm, LorentzTerm, MaterialParams, material_eval, material_eval_many
from .ssm import Dataset, DeviationModel, Metamodel, SpatialCovariance, load_dataset, save_dataset
from .kalman import kf_filter, kf_loglik
from .rbsmc import smc_run
from .enkf import smc_run_enkf
from .pmmh import PmmhConfig, Prior, pmmh_run
from .scenario import ScenarioSpec, generate, paper_spec

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "DebyeTerm", "LorentzTerm", "MaterialParams", "material_eval", "material_eval_many",
    "Dataset", "DeviationModel", "Metamodel", "SpatialCovariance", "load_dataset", "save_dataset",
    "kf_filter", "kf_loglik", "smc_run", "smc_run_enkf", "PmmhConfig", "Prior", "pmmh_run",
    "ScenarioSpec", "generate", "paper_spec",
]
