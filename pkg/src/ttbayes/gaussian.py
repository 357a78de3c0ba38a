"""Gaussian components and the factorization helpers they rely on."""

import logging

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, NumericalError

logger = logging.getLogger(__name__)

__all__ = ["GaussianComponent", "cho_factor_jitter", "is_diagonal"]


def is_diagonal(a):
    return not np.any(a - np.diag(np.diag(a)))


def cho_factor_jitter(a, what="matrix"):
    """Cholesky factor of a symmetric matrix, retrying once with jitter.

    The jitter is ``1e-10 * trace(a) / K`` on the diagonal.
    """
    try:
        return linalg.cho_factor(a, lower=False, check_finite=False)
    except linalg.LinAlgError:
        pass
    k = a.shape[0]
    jitter = 1e-10 * abs(np.trace(a)) / k
    logger.warning("Cholesky of %s failed; retrying with jitter %.3e", what, jitter)
    try:
        if jitter == 0 or not np.all(np.isfinite(a)):
            raise linalg.LinAlgError
        return linalg.cho_factor(a + jitter * np.eye(k), lower=False, check_finite=False)
    except linalg.LinAlgError:
        try:
            cond = float(np.linalg.cond(a))
        except np.linalg.LinAlgError:
            cond = float("inf")
        raise NumericalError(f"{what} is not positive definite", condition=cond) from None


class GaussianComponent:
    """Mean and covariance of one vectorized decomposition component.

    Either the covariance or the precision (inverse covariance) may be given;
    the other one is computed on first access and cached. Instances are
    treated as immutable.

    Parameters
    ----------
    mean : array_like of shape (K,)
    cov : array_like of shape (K, K), optional
    precision : array_like of shape (K, K), optional
    """

    __slots__ = ("mean", "_cov", "_prec", "_prec_factor")

    def __init__(self, mean, cov=None, *, precision=None, _factor=None):
        self.mean = np.array(mean, dtype=np.float64).ravel()
        k = self.mean.size
        if cov is None and precision is None:
            raise ValueError("GaussianComponent needs cov or precision")
        self._cov = None if cov is None else np.array(cov, dtype=np.float64)
        self._prec = None if precision is None else np.array(precision, dtype=np.float64)
        for mat in (self._cov, self._prec):
            if mat is not None and mat.shape != (k, k):
                raise DimensionError(f"covariance of shape {mat.shape} for mean of length {k}")
        self._prec_factor = _factor

    @classmethod
    def isotropic(cls, mean, variance):
        mean = np.asarray(mean, dtype=np.float64).ravel()
        return cls(mean, variance * np.eye(mean.size))

    @property
    def size(self):
        return self.mean.size

    @property
    def cov(self):
        if self._cov is None:
            if is_diagonal(self._prec):
                self._cov = np.diag(1.0 / np.diag(self._prec))
            else:
                factor = self.precision_factor()
                cov = linalg.cho_solve(factor, np.eye(self.size), check_finite=False)
                self._cov = 0.5 * (cov + cov.T)
        return self._cov

    @property
    def precision(self):
        if self._prec is None:
            if is_diagonal(self._cov):
                self._prec = np.diag(1.0 / np.diag(self._cov))
            else:
                factor = cho_factor_jitter(self._cov, "prior covariance")
                prec = linalg.cho_solve(factor, np.eye(self.size), check_finite=False)
                self._prec = 0.5 * (prec + prec.T)
        return self._prec

    def precision_factor(self):
        if self._prec_factor is None:
            self._prec_factor = cho_factor_jitter(self.precision, "precision matrix")
        return self._prec_factor

    def logdet_precision(self):
        if self._prec is not None and is_diagonal(self._prec):
            return float(np.sum(np.log(np.diag(self._prec))))
        if self._prec is None and is_diagonal(self._cov):
            return float(-np.sum(np.log(np.diag(self._cov))))
        c, _ = self.precision_factor()
        return float(2.0 * np.sum(np.log(np.abs(np.diag(c)))))

    def log_pdf(self, x):
        """Gaussian log-density at ``x``."""
        d = np.asarray(x, dtype=np.float64).ravel() - self.mean
        if self._prec is None and is_diagonal(self._cov):
            quad = float(np.sum(d * d / np.diag(self._cov)))
        else:
            quad = float(d @ self.precision @ d)
        return -0.5 * (quad - self.logdet_precision() + self.size * np.log(2 * np.pi))

    def has_cov(self):
        return self._cov is not None

    def trace(self):
        return float(np.trace(self.cov))

    def fro(self):
        return float(np.linalg.norm(self.cov))

    def transformed(self, apply, apply_inv_t=None):
        """Push through the invertible linear map ``x -> A x``.

        ``apply`` maps a ``(K, m)`` array to ``A`` times it; the covariance
        becomes ``A P A^T``. When only the precision is held and
        ``apply_inv_t`` (multiplication by ``A^-T``) is given, the precision
        is transformed instead and the covariance stays lazy.
        """
        mean = apply(self.mean[:, None])[:, 0]
        if self._cov is None and apply_inv_t is not None:
            prec = apply_inv_t(apply_inv_t(self._prec).T).T
            return GaussianComponent(mean, precision=0.5 * (prec + prec.T))
        cov = apply(apply(self.cov).T).T
        return GaussianComponent(mean, 0.5 * (cov + cov.T))

    def scaled(self, d):
        """Elementwise rescaling ``x -> diag(d) x``."""
        d = np.asarray(d, dtype=np.float64)
        mean = d * self.mean
        if self._cov is not None:
            return GaussianComponent(mean, self._cov * np.outer(d, d))
        return GaussianComponent(mean, precision=self._prec / np.outer(d, d))

    def with_mean(self, mean):
        out = GaussianComponent.__new__(GaussianComponent)
        out.mean = np.array(mean, dtype=np.float64).ravel()
        out._cov, out._prec, out._prec_factor = self._cov, self._prec, self._prec_factor
        return out

    def __repr__(self):
        return f"GaussianComponent(K={self.size})"
