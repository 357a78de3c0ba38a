"""Bayesian tensor-train decomposition with uncertainty propagation."""

from .als_engine import BayesTDModel, StoppingRule, bayes_als, conventional_als, recursive_update
from .estimators import TTSVD, BayesianTensorTrain, check_tensor
from .gaussian import GaussianComponent
from .ortho_bayes import bayes_als_ortho
from .tt_format import TensorTrain, TTMatrix, tt_contract, tt_round, tt_svd
from .unscented_tt import UTParams, ut_tt

__version__ = "0.1.0"

__all__ = [
    "BayesTDModel",
    "BayesianTensorTrain",
    "GaussianComponent",
    "StoppingRule",
    "TTMatrix",
    "TTSVD",
    "TensorTrain",
    "UTParams",
    "bayes_als",
    "bayes_als_ortho",
    "check_tensor",
    "conventional_als",
    "recursive_update",
    "tt_contract",
    "tt_round",
    "tt_svd",
    "ut_tt",
]
