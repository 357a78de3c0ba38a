"""Unscented transform of the TT contraction, kept in TT / TT-matrix format.

The stacked core vector ``x`` (length ``M``) is Gaussian with block-diagonal
covariance; the tensor ``f_T(x)`` is not. Its mean is returned as a
:class:`~ttbayes.tt_format.TensorTrain` and its covariance as a
:class:`~ttbayes.tt_format.TTMatrix`, so the ``J x J`` covariance never has to
be formed.

Sigma points enter through their offsets ``E_k = f_T(x_k) - f_T(m)``. Since
``f_T`` is linear in each core and an offset confined to one core block
changes only that core, ``E_k`` is itself a TT with the original ranks. This
avoids subtracting nearly equal tensors when ``alpha`` is small. With
``c = w * sum_k E_k`` the transform reads

    m_UT = f_T(m) + c,
    P_UT = sum_k w_k^P (E_k - c)(E_k - c)^T      (E_0 = 0),

which equals the textbook sums term by term.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy import linalg

from .als_engine import BayesTDModel, _check_kind
from .exceptions import DimensionError, NumericalError
from .gaussian import cho_factor_jitter
from .tensor_core import vectorize
from .tt_format import (
    TensorTrain,
    TTMatrix,
    tt_add,
    tt_contract,
    tt_round,
    ttm_diag,
    ttm_round,
)

logger = logging.getLogger(__name__)

__all__ = [
    "UTParams",
    "SigmaPointSet",
    "stack_gaussian",
    "sigma_points",
    "propagate",
    "ut_mean_tt",
    "ut_cov_ttm",
    "ut_tt",
    "dense_ut_oracle",
    "ut_variances",
]

ROUND_EVERY = 8
ORACLE_MAX_M = 200


@dataclass(frozen=True)
class UTParams:
    """Sigma-point spread and weighting.

    Parameters
    ----------
    alpha : float
        Spread of the sigma points around the mean.
    beta : float
        Prior knowledge of the distribution; 2 is optimal for Gaussians.
    kappa : float, optional
        Secondary scaling; ``None`` means ``3 - M``.
    """

    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = None

    def kappa_for(self, m):
        return 3.0 - m if self.kappa is None else float(self.kappa)

    def lam(self, m):
        """``lambda = alpha^2 (M + kappa) - M``."""
        return self.alpha ** 2 * (m + self.kappa_for(m)) - m

    def weights(self, m):
        """``(w0_m, w0_P, w)`` for dimension ``m``.

        Raises
        ------
        ValueError
            If ``M + lambda <= 0``.
        """
        lam = self.lam(m)
        if not m + lam > 0:
            raise ValueError(
                f"M + lambda = {m + lam:.3e} must be positive (alpha={self.alpha}, "
                f"kappa={self.kappa_for(m)}, M={m})"
            )
        w0m = lam / (m + lam)
        w0p = w0m + (1.0 - self.alpha ** 2 + self.beta)
        return w0m, w0p, 1.0 / (2.0 * (m + lam))


@dataclass(frozen=True)
class SigmaPointSet:
    """The ``2M + 1`` sigma points of ``N(m, P)``.

    Columns of ``a_plus`` are ``m + sqrt(M + lambda) S_i`` and those of
    ``a_minus`` are ``m - sqrt(M + lambda) S_i``, with ``S S^T = P``.
    """

    mean: np.ndarray
    sqrt_cov: np.ndarray
    scale: float
    w0_m: float
    w0_p: float
    w_m: float
    w_p: float
    params: UTParams

    @property
    def dim(self):
        return self.mean.size

    @property
    def offsets(self):
        return self.scale * self.sqrt_cov

    @property
    def a_plus(self):
        return self.mean[:, None] + self.offsets

    @property
    def a_minus(self):
        return self.mean[:, None] - self.offsets

    def points(self):
        """All points as columns: ``x_0, x_1..x_M, x_{M+1}..x_{2M}``."""
        return np.hstack([self.mean[:, None], self.a_plus, self.a_minus])

    def mean_weights(self):
        return np.r_[self.w0_m, np.full(2 * self.dim, self.w_m)]

    def cov_weights(self):
        return np.r_[self.w0_p, np.full(2 * self.dim, self.w_p)]


def stack_gaussian(model):
    """Stacked mean and block-diagonal covariance of the TT cores."""
    _check_kind(model, "tt")
    mean = np.concatenate([c.mean for c in model.components])
    cov = linalg.block_diag(*[c.cov for c in model.components])
    return mean, cov


def _psd_sqrt(p, chol):
    """Lower Cholesky-type factor; all-zero rows/columns get zero factors."""
    m = p.shape[0]
    s = np.zeros((m, m))
    live = np.flatnonzero(np.any(p != 0, axis=0) | np.any(p != 0, axis=1))
    if live.size:
        s[np.ix_(live, live)] = chol(p[np.ix_(live, live)])
    return s


def _cholesky_lower(p):
    c, _ = cho_factor_jitter(p, "sigma-point covariance")
    return np.triu(c).T


def sigma_points(m, p, params=None):
    """Sigma points of ``N(m, P)`` with ``sqrt(P)`` the lower Cholesky factor.

    Parameters
    ----------
    m : array_like of shape (M,)
    p : array_like of shape (M, M)
        Symmetric positive semi-definite. Identically zero rows and columns
        are allowed (deterministic entries).
    params : UTParams, optional

    Returns
    -------
    SigmaPointSet
    """
    params = params or UTParams()
    m = np.asarray(m, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (m.size, m.size):
        raise DimensionError(f"covariance of shape {p.shape} for mean of length {m.size}")
    w0m, w0p, w = params.weights(m.size)
    sqrt_cov = _psd_sqrt(0.5 * (p + p.T), _cholesky_lower)
    scale = math.sqrt(m.size + params.lam(m.size))
    return SigmaPointSet(m, sqrt_cov, scale, w0m, w0p, w, w, params)


def _core_shapes(dims, ranks):
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims) + 1:
        raise DimensionError(f"rank chain {ranks} does not fit dims {dims}")
    return [(ranks[k], dims[k], ranks[k + 1]) for k in range(len(dims))]


def _offsets_of(shapes):
    sizes = [math.prod(s) for s in shapes]
    return np.concatenate([[0], np.cumsum(sizes)])


def propagate(point, dims, ranks):
    """``f_T``: slice a stacked vector into cores and return the TT."""
    point = np.asarray(point, dtype=np.float64).ravel()
    shapes = _core_shapes(dims, ranks)
    bounds = _offsets_of(shapes)
    if point.size != bounds[-1]:
        raise DimensionError(f"vector of length {point.size} does not hold cores {shapes}")
    return TensorTrain([point[bounds[k]:bounds[k + 1]].reshape(s, order="F")
                        for k, s in enumerate(shapes)])


def _offset_tt(mean_tt, delta, bounds, shapes):
    """``f_T(m + delta) - f_T(m)`` as a TT."""
    live = np.flatnonzero(delta)
    if live.size == 0:
        return None
    blocks = np.unique(np.searchsorted(bounds, live, side="right") - 1)
    if blocks.size == 1:
        n = int(blocks[0])
        cores = list(mean_tt.cores)
        cores[n] = delta[bounds[n]:bounds[n + 1]].reshape(shapes[n], order="F")
        return TensorTrain(cores)
    # offset spans several cores: fall back to the explicit difference
    full = np.concatenate([vectorize(c) for c in mean_tt.cores]) + delta
    dims = mean_tt.dims
    ranks = mean_tt.ranks
    return tt_add(propagate(full, dims, ranks), -mean_tt)


def _with_leading(tt, index, size):
    lead = np.zeros((1, size, 1))
    lead[0, index, 0] = 1.0
    return TensorTrain((lead,) + tt.cores)


def _offset_train(sps, dims, ranks, round_tol):
    """``(N+1)``-way TT whose slice ``k`` (leading mode, size ``2M+1``) is ``E_k``.

    ``E_0 = 0``. Returns ``None`` when every offset is zero.
    """
    shapes = _core_shapes(dims, ranks)
    bounds = _offsets_of(shapes)
    mean_tt = propagate(sps.mean, dims, ranks)
    size = 2 * sps.dim + 1
    offsets = sps.offsets
    acc = None
    pending = 0
    for sign, first in ((1.0, 1), (-1.0, 1 + sps.dim)):
        for i in range(sps.dim):
            e = _offset_tt(mean_tt, sign * offsets[:, i], bounds, shapes)
            if e is None:
                continue
            term = _with_leading(e, first + i, size)
            acc = term if acc is None else tt_add(acc, term)
            pending += 1
            if pending == ROUND_EVERY:
                acc = tt_round(acc, eps=round_tol)
                pending = 0
    if acc is None:
        return None
    return tt_round(acc, eps=round_tol)


def _contract_leading(train, vec):
    """Contract the leading mode of an ``(N+1)``-way TT with ``vec``."""
    lead = np.einsum("aib,i->ab", train.cores[0], vec)
    cores = list(train.cores[1:])
    cores[0] = np.einsum("ab,bic->aic", lead, cores[0])
    return TensorTrain(cores)


def _mean_shift(train, sps):
    weights = np.r_[0.0, np.full(2 * sps.dim, sps.w_m)]
    return _contract_leading(train, weights)


def ut_mean_tt(sps, dims, ranks, round_tol=1e-10, _train=None):
    """UT mean ``sum_i w_i^m f_T(x_i)`` as a rounded TT.

    Parameters
    ----------
    sps : SigmaPointSet
    dims, ranks : sequence of int
        Mode dimensions and rank chain of the TT the points parametrize.
    round_tol : float
        Relative tolerance of the TT roundings.
    """
    mean_tt = propagate(sps.mean, dims, ranks)
    train = _offset_train(sps, dims, ranks, round_tol) if _train is None else _train
    if train is None:
        return mean_tt
    return tt_round(tt_add(mean_tt, _mean_shift(train, sps)), eps=round_tol)


def _zero_ttm(dims):
    return TTMatrix([np.zeros((1, d, d, 1)) for d in dims])


def ut_cov_ttm(sps, m_ut, dims, ranks, round_tol=1e-8, _train=None):
    """UT covariance ``sum_i w_i^P (S_i - m_UT)(S_i - m_UT)^T`` as a TT-matrix.

    The centred sigma-point tensors are stacked along a leading mode; the
    diagonal weight matrix is absorbed into the first core of the outer
    product, which is then rounded.

    ``m_ut`` fixes the centring: the deviation of ``m_ut`` from ``f_T(m)`` is
    used as the shift ``c``.
    """
    dims = tuple(int(d) for d in dims)
    mean_tt = propagate(sps.mean, dims, ranks)
    train = _offset_train(sps, dims, ranks, round_tol) if _train is None else _train
    size = 2 * sps.dim + 1
    shift = tt_round(tt_add(m_ut, -mean_tt), eps=max(round_tol, 1e-15))
    ones = TensorTrain((np.ones((1, size, 1)),) + shift.cores)
    centred = -ones if train is None else tt_add(train, -ones)
    centred = tt_round(centred, eps=round_tol)
    lead = centred.cores[0][0]  # (2M+1, r)
    weights = sps.cov_weights()
    gram = lead.T @ (weights[:, None] * lead)
    rest = centred.cores[1:]
    first = rest[0]
    r0, i, r1 = first.shape
    core1 = np.einsum("ab,aic,bjd->ijcd", gram, first, first, optimize=True)
    cores = [core1.reshape(1, i, i, r1 * r1, order="F")]
    for core in rest[1:]:
        a0, k, a1 = core.shape
        c = np.einsum("aib,cjd->acijbd", core, core, optimize=True)
        cores.append(c.reshape(a0 * a0, k, k, a1 * a1, order="F"))
    if not np.any(gram):
        return _zero_ttm(dims)
    return ttm_round(TTMatrix(cores), eps=round_tol)


def ut_tt(model, params=None, round_tol=(1e-10, 1e-8)):
    """UT mean (TT) and covariance (TTm) of the tensor described by ``model``.

    Parameters
    ----------
    model : BayesTDModel
        TT model with core means and covariances.
    params : UTParams, optional
    round_tol : float or (float, float)
        Rounding tolerances for the mean and the covariance.

    Returns
    -------
    m_ut : TensorTrain
    p_ut : TTMatrix
    """
    if not isinstance(model, BayesTDModel):
        raise TypeError("ut_tt needs a BayesTDModel")
    _check_kind(model, "tt")
    tol_m, tol_p = (round_tol, round_tol) if np.isscalar(round_tol) else round_tol
    m, p = stack_gaussian(model)
    sps = sigma_points(m, p, params)
    train = _offset_train(sps, model.dims, model.ranks, min(tol_m, tol_p))
    m_ut = ut_mean_tt(sps, model.dims, model.ranks, tol_m, _train=train)
    p_ut = ut_cov_ttm(sps, m_ut, model.dims, model.ranks, tol_p, _train=train)
    return m_ut, p_ut


def dense_ut_oracle(m, p, dims, ranks, params=None):
    """Direct dense evaluation of the UT sums, for testing.

    Returns the mean vector and covariance matrix of ``vec(f_T(x))``.
    """
    params = params or UTParams()
    m = np.asarray(m, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64)
    size = m.size
    if size > ORACLE_MAX_M:
        raise ValueError(f"dense oracle limited to M <= {ORACLE_MAX_M}, got {size}")
    lam = params.alpha ** 2 * (size + params.kappa_for(size)) - size
    if not size + lam > 0:
        raise ValueError("M + lambda must be positive")
    try:
        root = _psd_sqrt(p, np.linalg.cholesky)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("oracle covariance is not positive definite") from exc
    spread = math.sqrt(size + lam) * root
    pts = [m] + [m + spread[:, i] for i in range(size)] + [m - spread[:, i] for i in range(size)]
    wm = np.full(2 * size + 1, 1.0 / (2 * (size + lam)))
    wm[0] = lam / (size + lam)
    wp = wm.copy()
    wp[0] = wm[0] + 1 - params.alpha ** 2 + params.beta
    images = np.stack([vectorize(tt_contract(propagate(x, dims, ranks))) for x in pts])
    mean = wm @ images
    dev = images - mean
    cov = (wp[:, None] * dev).T @ dev
    return mean, cov


def ut_variances(p_ut):
    """Per-element variances: the diagonal of the covariance TT-matrix, dense."""
    return vectorize(tt_contract(ttm_diag(p_ut)))
