"""Bayesian TT-ALS that keeps the mean TT in site-``n``-mixed-canonical form.

Moving the norm between neighbouring cores is a linear change of variables
on the two affected components, so each Gaussian is pushed through it
exactly: the mean is orthogonalized by a thin QR and the covariance is
transformed by the matching Kronecker-structured congruence. With every
off-site core orthogonal, the design matrix has orthonormal columns and the
posterior update needs no Gram matrix.
"""

from dataclasses import dataclass, field, replace
import logging

import numpy as np
from scipy import linalg

from .als_engine import (
    BayesTDModel,
    ConvergenceTrace,
    StoppingRule,
    _check_data,
    _sweep_row,
    _tt_projection,
    _check_kind,
    rel_error,
    tt_interfaces,
)
from .exceptions import BoundaryError, CanonicalFormError, NumericalError, StructureError
from .gaussian import GaussianComponent, cho_factor_jitter, is_diagonal
from .tensor_core import vectorize
from .tt_format import (
    TensorTrain,
    _absorb_first,
    _absorb_last,
    left_unfold,
    right_unfold,
    shift_norm_left,
    shift_norm_right,
    thin_qr,
    to_site_n_canonical,
    tt_contract,
)

logger = logging.getLogger(__name__)

__all__ = [
    "OrthoSweepState",
    "sweep_sites",
    "transform_left",
    "transform_right",
    "to_site_one",
    "ortho_posterior_update",
    "bayes_als_ortho",
    "conventional_als_ortho",
]

GRAM_TOL = 1e-6


@dataclass
class OrthoSweepState:
    """Inference state for the orthogonalized sweep.

    ``model.components`` hold the current estimates; ``priors`` hold the
    original priors expressed in the same (transformed) coordinates.
    """

    model: BayesTDModel
    site: int
    direction: str
    priors: list
    sweep: int = 0
    events: list = field(default_factory=list)

    def cores(self):
        return [self.model.factor(n) for n in range(1, self.model.order + 1)]

    def mean_tt(self):
        return TensorTrain(self.cores())


def sweep_sites(order):
    """Update order within one back-and-forth sweep: ``1..N, N-1..2``."""
    return list(range(1, order + 1)) + list(range(order - 1, 1, -1))


def _check_ranks(model):
    for n in range(1, model.order + 1):
        r0, i, r1 = model.component_shape(n)
        if r0 > i * r1 or r1 > r0 * i:
            raise StructureError(
                f"core {n} of shape {(r0, i, r1)} cannot be orthogonalized without "
                "changing its ranks"
            )


def _regularized(r):
    """``r`` with jitter on the diagonal when it is numerically singular."""
    d = np.abs(np.diag(r))
    scale = np.linalg.norm(r)
    if d.size and d.min() > np.finfo(float).eps * max(scale, np.finfo(float).tiny) * r.shape[0]:
        return r
    jitter = 1e-12 * scale
    logger.warning("singular triangular factor in orthogonalization; adding %.3e", jitter)
    r = r + jitter * np.eye(r.shape[0])
    if jitter == 0 or np.abs(np.diag(r)).min() == 0:
        raise NumericalError("triangular factor is singular", condition=float("inf"))
    return r


def _solve_rt(r):
    """``v -> R^-T v``."""
    return lambda v: linalg.solve_triangular(r, v, trans="T", lower=False, check_finite=False)


def _mult(r):
    return lambda v: r @ v


def _on_first(f, r0):
    """Lift ``f`` acting on the first core mode to the vectorized component."""

    def apply(x):
        k, m = x.shape
        return f(x.reshape(r0, -1, order="F")).reshape(k, m, order="F")

    return apply


def _on_last(f, r1):
    """Lift ``f`` acting on the last core mode to the vectorized component."""

    def apply(x):
        k, m = x.shape
        v = np.moveaxis(x.reshape(k // r1, r1, m, order="F"), 1, 0)
        v = f(v.reshape(r1, -1, order="F")).reshape(r1, k // r1, m, order="F")
        return np.moveaxis(v, 0, 1).reshape(k, m, order="F")

    return apply


def _move(state, n, to_left):
    model = state.model
    order = model.order
    if to_left and not 2 <= n <= order:
        raise BoundaryError(f"cannot move the norm left from core {n} of {order}")
    if not to_left and not 1 <= n <= order - 1:
        raise BoundaryError(f"cannot move the norm right from core {n} of {order}")
    core = model.factor(n)
    r0, i, r1 = core.shape
    comps = list(model.components)
    priors = list(state.priors)
    if to_left:
        q, r = thin_qr(right_unfold(core).T)
        r = _regularized(r)
        new_core = q.T.reshape(r0, i, r1, order="F")
        own = (_on_first(_solve_rt(r), r0), _on_first(_mult(r), r0))
        nb = n - 1
        nb_maps = (_on_last(_mult(r), r0), _on_last(_solve_rt(r), r0))
        nb_core = _absorb_last(model.factor(nb), r)
    else:
        q, r = thin_qr(left_unfold(core))
        r = _regularized(r)
        new_core = q.reshape(r0, i, r1, order="F")
        own = (_on_last(_solve_rt(r), r1), _on_last(_mult(r), r1))
        nb = n + 1
        nb_maps = (_on_first(_mult(r), r1), _on_first(_solve_rt(r), r1))
        nb_core = _absorb_first(model.factor(nb), r)
    comps[n - 1] = comps[n - 1].transformed(*own).with_mean(vectorize(new_core))
    comps[nb - 1] = comps[nb - 1].transformed(*nb_maps).with_mean(vectorize(nb_core))
    priors[n - 1] = priors[n - 1].transformed(*own)
    priors[nb - 1] = priors[nb - 1].transformed(*nb_maps)
    new_model = model.replace(components=comps)
    return replace(state, model=new_model, site=nb, priors=priors,
                   direction="right-to-left" if to_left else "left-to-right")


def transform_left(state, n):
    """Move the norm from core ``n`` to core ``n - 1``, transforming both Gaussians."""
    return _move(state, n, to_left=True)


def transform_right(state, n):
    """Move the norm from core ``n`` to core ``n + 1``, transforming both Gaussians."""
    return _move(state, n, to_left=False)


def to_site_one(model):
    """Initial state: the model and its priors transformed to site-1 form."""
    _check_kind(model, "tt")
    _check_ranks(model)
    state = OrthoSweepState(model=model.replace(), site=model.order,
                            direction="right-to-left", priors=list(model.components))
    for n in range(model.order, 1, -1):
        state = transform_left(state, n)
    state.site = 1
    return state


def _orthonormal_design(model, n, y):
    cores = [model.factor(k) for k in range(1, model.order + 1)]
    left, right = tt_interfaces(cores, n)
    err = max(np.linalg.norm(left.T @ left - np.eye(left.shape[1])),
              np.linalg.norm(right @ right.T - np.eye(right.shape[0])))
    if err > GRAM_TOL:
        raise CanonicalFormError(
            f"design matrix for core {n} is not orthonormal (residual {err:.2e})")
    return _tt_projection(left, right, y, model.dims, n)


def ortho_posterior_update(state, y):
    """Posterior of the norm-carrying core when ``U^T U = I``.

    ``P+ = [P0^-1 + I / s2]^-1`` and ``m+ = P+ [U^T y / s2 + P0^-1 m0]`` with
    the prior in the current coordinates. A diagonal prior is handled
    elementwise.
    """
    n = state.site
    model = state.model
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    proj = _orthonormal_design(model, n, y)
    prior = state.priors[n - 1]
    s2 = model.noise_var
    prec0 = prior.precision
    rhs0 = prec0 @ prior.mean
    if is_diagonal(prec0):
        d = np.diag(prec0) + 1.0 / s2
        post = GaussianComponent((proj / s2 + rhs0) / d, precision=np.diag(d))
    else:
        prec = prec0 + np.eye(prior.size) / s2
        factor = cho_factor_jitter(prec, "posterior precision")
        mean = linalg.cho_solve(factor, proj / s2 + rhs0, check_finite=False)
        post = GaussianComponent(mean, precision=prec, _factor=factor)
    comps = list(model.components)
    comps[n - 1] = post
    return replace(state, model=model.replace(components=comps))


def bayes_als_ortho(model, y, stop=None, truth=None, callback=None, record_covariance=True):
    """Bayesian TT-ALS with the orthogonalization step.

    The priors and the initial estimate are first moved to site-1 form.
    Each sweep visits ``1..N, N-1..2``; after every update the norm is moved
    toward the next site, and after the last update of a sweep back to core
    1. The components of ``model`` act as priors and are co-transformed with
    every move.

    Parameters
    ----------
    model : BayesTDModel
        TT model holding the priors.
    y : array_like
    stop : StoppingRule, optional
    truth : array_like, optional
    callback : callable, optional
        Called as ``callback(state, event)`` after every update and every
        norm move; ``event`` is ``"update"`` or ``"move"``.
    record_covariance : bool
        Record trace and Frobenius norm of the covariance of the core that
        is updated next, after each move.

    Returns
    -------
    posterior : BayesTDModel
        Final estimates in site-1 form.
    trace : ConvergenceTrace
    """
    stop = stop or StoppingRule()
    y, truth = _check_data(model, y, truth)
    state = to_site_one(model)
    order = model.order
    sites = sweep_sites(order)
    trace = ConvergenceTrace()
    sweep = 0
    while True:
        sweep += 1
        state.sweep = sweep
        for step, n in enumerate(sites):
            if state.site != n:
                raise CanonicalFormError(f"norm is at core {state.site}, expected {n}")
            state = ortho_posterior_update(state, y)
            if callback is not None:
                callback(state, "update")
            nxt = sites[step + 1] if step + 1 < len(sites) else 1
            if nxt == n:
                continue
            state = transform_right(state, n) if nxt > n else transform_left(state, n)
            if callback is not None:
                callback(state, "move")
            event = {"sweep": sweep, "step": step + 1, "updated": n, "site": nxt,
                     "direction": state.direction}
            if record_covariance:
                comp = state.model.components[nxt - 1]
                event["cov_trace"] = comp.trace()
                event["cov_fro"] = comp.fro()
            trace.events.append(event)
        comps = state.model.components
        trace.rows.append(_sweep_row(state.model, sweep, y, truth, state.priors,
                                     [c.mean for c in comps], comps, record_covariance))
        if stop.done(trace.rows):
            break
    out = state.model.replace()
    out.diagnostics["priors"] = state.priors
    return out, trace


def conventional_als_ortho(model, y, stop=None, truth=None):
    """Conventional TT-ALS with orthogonalization (``g_n = U^T y``).

    Starts from the component means of ``model``; covariances are ignored.
    """
    stop = stop or StoppingRule()
    y, truth = _check_data(model, y, truth)
    _check_kind(model, "tt")
    _check_ranks(model)
    tt = to_site_n_canonical(model.mean_tt(), 1)
    sites = sweep_sites(model.order)
    trace = ConvergenceTrace()
    sweep = 0
    while True:
        sweep += 1
        for step, n in enumerate(sites):
            cores = list(tt.cores)
            left, right = tt_interfaces(cores, n)
            g = _tt_projection(left, right, y, model.dims, n)
            cores[n - 1] = g.reshape(cores[n - 1].shape, order="F")
            tt = TensorTrain(cores)
            nxt = sites[step + 1] if step + 1 < len(sites) else 1
            if nxt > n:
                tt = shift_norm_right(tt, n)
            elif nxt < n:
                tt = shift_norm_left(tt, n)
        yhat = vectorize(tt_contract(tt))
        trace.rows.append({
            "sweep": sweep,
            "eps_meas": rel_error(yhat, y),
            "eps_truth": rel_error(yhat, truth) if truth is not None else float("nan"),
            "log_objective": float("nan"),
        })
        if stop.done(trace.rows):
            break
    comps = [c.with_mean(vectorize(core)) for c, core in zip(model.components, tt.cores)]
    return model.replace(components=comps), trace
