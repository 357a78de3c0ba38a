"""scikit-learn style wrappers and input validation.

A tensor is a single observation here, so ``fit`` takes one tensor (or a
stack of repeated noisy observations of the same tensor) rather than a
sample-by-feature matrix.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_random_state

from .als_engine import BayesTDModel, StoppingRule, bayes_als, rel_error
from .exceptions import DimensionError
from .gaussian import GaussianComponent
from .ortho_bayes import bayes_als_ortho
from .tensor_core import vectorize
from .tt_format import tt_contract, tt_svd
from .unscented_tt import UTParams, ut_tt, ut_variances

__all__ = ["check_tensor", "TTSVD", "BayesianTensorTrain"]


def check_tensor(t, min_order=1, dims=None, name="tensor"):
    """Validate a dense tensor and return it as a float64 array.

    Parameters
    ----------
    t : array_like
    min_order : int
        Smallest accepted number of modes.
    dims : tuple of int, optional
        Required shape.
    name : str
        Used in error messages.

    Raises
    ------
    DimensionError
        Wrong order or shape, or a zero-length mode.
    ValueError
        Non-finite entries.
    """
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim < min_order:
        raise DimensionError(f"{name} must have at least {min_order} modes, got {arr.ndim}")
    if 0 in arr.shape:
        raise DimensionError(f"{name} has an empty mode: shape {arr.shape}")
    if dims is not None and arr.shape != tuple(dims):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(dims)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


class TTSVD(TransformerMixin, BaseEstimator):
    """Low-rank TT approximation by TT-SVD.

    Parameters
    ----------
    eps : float, default=0.1
        Relative accuracy; ignored when ``ranks`` is given.
    ranks : tuple of int, optional
        Fixed rank chain ``(1, R_2, ..., R_N, 1)`` or interior ranks.

    Attributes
    ----------
    tt_ : TensorTrain
    ranks_ : tuple of int
    relative_error_ : float
    """

    def __init__(self, eps=0.1, ranks=None):
        self.eps = eps
        self.ranks = ranks

    def fit(self, X, y=None):
        X = check_tensor(X, min_order=2, name="X")
        if self.ranks is None:
            self.tt_ = tt_svd(X, eps=self.eps)
        else:
            self.tt_ = tt_svd(X, ranks=self.ranks)
        self.ranks_ = self.tt_.ranks
        self.dims_ = X.shape
        self.relative_error_ = rel_error(tt_contract(self.tt_), X)
        return self

    def transform(self, X):
        """Dense TT-SVD approximation of ``X`` at the fitted ranks."""
        check_is_fitted(self, "tt_")
        X = check_tensor(X, dims=self.dims_, name="X")
        return tt_contract(tt_svd(X, ranks=self.ranks_))


class BayesianTensorTrain(BaseEstimator):
    """Bayesian TT decomposition of noisy tensor observations.

    Each core gets an isotropic Gaussian prior. ``fit`` runs the Bayesian
    ALS on every observation in turn, the posterior after one observation
    becoming the prior for the next; ``partial_fit`` continues from the
    current posterior.

    Parameters
    ----------
    ranks : tuple of int
        TT rank chain ``(1, R_2, ..., R_N, 1)``.
    noise_var : float, optional
        Measurement noise variance. When omitted it is estimated from the
        residual of a TT-SVD at ``ranks``.
    prior_var : float, default=1e6
        Prior variance of every core entry.
    prior_mean : list of ndarray, optional
        Prior core means; standard-normal draws by default.
    orthogonalize : bool, default=True
        Keep the mean in mixed-canonical form during the sweeps.
    max_sweeps : int, default=20
    tol : float, optional
        Stop when the relative change of the measurement error drops below.
    random_state : int, Generator or None

    Attributes
    ----------
    model_ : BayesTDModel
        Posterior over the cores.
    traces_ : list of ConvergenceTrace
    n_samples_seen_ : int
    noise_var_ : float
    """

    def __init__(self, ranks, noise_var=None, prior_var=1e6, prior_mean=None,
                 orthogonalize=True, max_sweeps=20, tol=None, random_state=None):
        self.ranks = ranks
        self.noise_var = noise_var
        self.prior_var = prior_var
        self.prior_mean = prior_mean
        self.orthogonalize = orthogonalize
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.random_state = random_state

    def _samples(self, X, dims=None):
        X = check_tensor(X, min_order=2, name="X")
        ranks = tuple(self.ranks)
        order = len(ranks) - 1
        if X.ndim == order:
            X = X[None]
        elif X.ndim != order + 1:
            raise DimensionError(
                f"ranks {ranks} describe an order-{order} tensor; X has {X.ndim} modes")
        if dims is not None and X.shape[1:] != dims:
            raise DimensionError(f"X has shape {X.shape[1:]}, fitted on {dims}")
        return X

    def _initial_model(self, dims, first):
        ranks = tuple(self.ranks)
        var = self.noise_var
        if var is None:
            approx = tt_contract(tt_svd(first, ranks=ranks))
            var = max(float(np.mean((first - approx) ** 2)), 1e-12 * float(np.mean(first ** 2)))
        if self.prior_mean is None:
            rng = check_random_state(self.random_state)
            means = [rng.standard_normal(ranks[k] * dims[k] * ranks[k + 1])
                     for k in range(len(dims))]
        else:
            means = [np.asarray(m, dtype=np.float64).ravel(order="F") for m in self.prior_mean]
        comps = [GaussianComponent.isotropic(m, self.prior_var) for m in means]
        return BayesTDModel("tt", dims, ranks, comps, var)

    def _run(self, X):
        stop = StoppingRule(max_sweeps=self.max_sweeps, meas_tol=self.tol)
        for y in X:
            if self.orthogonalize:
                self.model_, trace = bayes_als_ortho(self.model_, y, stop)
            else:
                self.model_, trace = bayes_als(self.model_, y, stop)
            self.traces_.append(trace)
        self.n_samples_seen_ += X.shape[0]
        return self

    def fit(self, X, y=None):
        """Fit from one tensor or a stack of observations along axis 0."""
        X = self._samples(X)
        dims = X.shape[1:]
        self.model_ = self._initial_model(dims, X[0])
        self.noise_var_ = self.model_.noise_var
        self.dims_ = dims
        self.traces_ = []
        self.n_samples_seen_ = 0
        return self._run(X)

    def partial_fit(self, X, y=None):
        """Update the posterior with further observations."""
        if not hasattr(self, "model_"):
            return self.fit(X)
        return self._run(self._samples(X, self.dims_))

    def predict(self, return_std=False, ut_params=None):
        """Posterior mean tensor; with ``return_std`` also per-entry UT standard deviations."""
        check_is_fitted(self, "model_")
        mean = self.model_.mean_tensor()
        if not return_std:
            return mean
        _, p_ut = ut_tt(self.model_, ut_params or UTParams())
        var = np.clip(ut_variances(p_ut), 0.0, None)
        return mean, np.sqrt(var).reshape(self.dims_, order="F")

    def score(self, X, y=None):
        """Negative relative error of the posterior mean against ``X``."""
        check_is_fitted(self, "model_")
        X = check_tensor(X, dims=self.dims_, name="X")
        return -rel_error(vectorize(self.predict()), vectorize(X))

