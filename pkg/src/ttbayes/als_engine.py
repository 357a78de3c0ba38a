"""Design matrices and the Bayesian alternating linear scheme.

Every decomposition (CP, Tucker, TT) is multilinear, so with all components
but the ``n``-th fixed the vectorized tensor is ``U_n g_n``. Each ALS step
solves for ``g_n``; the Bayesian variant replaces the least-squares solve by
a Gaussian conjugate update of the component's mean and covariance.
"""

from dataclasses import dataclass, field
import csv
import io
import logging
import math

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, KindError, StructureError
from .gaussian import GaussianComponent, cho_factor_jitter
from .tensor_core import (
    khatri_rao,
    mode_n_product,
    mode_n_unfold,
    vectorize,
)
from .tt_format import TensorTrain, left_unfold, right_unfold, tt_contract

logger = logging.getLogger(__name__)

__all__ = [
    "BayesTDModel",
    "StoppingRule",
    "ConvergenceTrace",
    "tt_interfaces",
    "build_u",
    "build_u_cp",
    "build_u_tucker",
    "build_u_tt",
    "gram_and_projection",
    "recompute_tucker_core",
    "posterior_update",
    "posterior_from_gram",
    "conventional_als_update",
    "bayes_als",
    "conventional_als",
    "recursive_update",
    "log_posterior_objective",
    "rel_error",
]

KINDS = ("cp", "tucker", "tt")


def rel_error(estimate, reference):
    """``||reference - estimate|| / ||reference||``.

    Tensors are vectorized column-major, so a dense tensor can be compared
    with a vectorized one.
    """
    reference = np.asarray(reference, dtype=np.float64).ravel(order="F")
    estimate = np.asarray(estimate, dtype=np.float64).ravel(order="F")
    if reference.size != estimate.size:
        raise DimensionError(f"cannot compare {estimate.size} entries with {reference.size}")
    denom = np.linalg.norm(reference)
    if denom == 0:
        raise ValueError("relative error against a zero reference")
    return float(np.linalg.norm(reference - estimate) / denom)


# ---------------------------------------------------------------------------
# model


@dataclass
class BayesTDModel:
    """Full inference state: Gaussian components plus decomposition metadata.

    Parameters
    ----------
    kind : {"cp", "tucker", "tt"}
    dims : tuple of int
        Dimensions of the approximated tensor.
    ranks : tuple of int
        CP: ``(R,)``. Tucker: ``(R_1, ..., R_N)``. TT: rank chain
        ``(1, R_2, ..., R_N, 1)``.
    components : list of GaussianComponent
        One per mode; the vectorized factor matrix (CP, Tucker) or core (TT).
    noise_var : float
        Measurement noise variance ``sigma^2``.
    weights : ndarray, optional
        CP weight vector; defaults to ones.
    core : ndarray, optional
        Tucker core tensor (a point estimate, not a random variable).
    """

    kind: str
    dims: tuple
    ranks: tuple
    components: list
    noise_var: float
    weights: np.ndarray = None
    core: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise KindError(f"unknown decomposition kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)
        self.ranks = tuple(int(r) for r in self.ranks)
        self.components = list(self.components)
        if not self.noise_var > 0:
            raise ValueError(f"noise variance must be positive, got {self.noise_var}")
        order = len(self.dims)
        if len(self.components) != order:
            raise DimensionError(f"{len(self.components)} components for {order} modes")
        if self.kind == "tt":
            if len(self.ranks) != order + 1 or self.ranks[0] != 1 or self.ranks[-1] != 1:
                raise StructureError(f"invalid TT rank chain {self.ranks}")
        elif self.kind == "tucker" and len(self.ranks) != order:
            raise StructureError(f"Tucker needs {order} ranks, got {self.ranks}")
        elif self.kind == "cp" and len(self.ranks) != 1:
            raise StructureError(f"CP needs a single rank, got {self.ranks}")
        for n, comp in enumerate(self.components):
            if comp.size != self.component_size(n + 1):
                raise DimensionError(
                    f"component {n + 1} has {comp.size} entries, expected "
                    f"{self.component_size(n + 1)}"
                )
        if self.kind == "cp" and self.weights is None:
            self.weights = np.ones(self.ranks[0])
        if self.kind == "tucker" and self.core is not None:
            self.core = np.asarray(self.core, dtype=np.float64).reshape(self.ranks, order="F")

    @property
    def order(self):
        return len(self.dims)

    def component_shape(self, n):
        i = self.dims[n - 1]
        if self.kind == "tt":
            return (self.ranks[n - 1], i, self.ranks[n])
        if self.kind == "tucker":
            return (i, self.ranks[n - 1])
        return (i, self.ranks[0])

    def component_size(self, n):
        return math.prod(self.component_shape(n))

    def factor(self, n, means=None):
        """Mean of component ``n`` reshaped to its natural shape."""
        mean = self.components[n - 1].mean if means is None else means[n - 1]
        return mean.reshape(self.component_shape(n), order="F")

    def means(self):
        return [c.mean for c in self.components]

    def mean_tt(self):
        if self.kind != "tt":
            raise KindError("mean_tt needs a TT model")
        return TensorTrain([self.factor(n) for n in range(1, self.order + 1)])

    def mean_tensor(self):
        """Dense tensor built from the component means."""
        return _reconstruct(self, self.means())

    def replace(self, **changes):
        data = dict(kind=self.kind, dims=self.dims, ranks=self.ranks,
                    components=list(self.components), noise_var=self.noise_var,
                    weights=None if self.weights is None else self.weights.copy(),
                    core=None if self.core is None else self.core.copy(),
                    diagnostics=dict(self.diagnostics))
        data.update(changes)
        return BayesTDModel(**data)

    @classmethod
    def tt_from_means(cls, means, cov, noise_var):
        """TT model whose core ``n`` has mean ``means[n]`` (3-way) and covariance.

        ``cov`` is a scalar variance (isotropic prior) or a list of matrices.
        """
        means = [np.asarray(m, dtype=np.float64) for m in means]
        dims = tuple(m.shape[1] for m in means)
        ranks = tuple(m.shape[0] for m in means) + (1,)
        comps = []
        for k, m in enumerate(means):
            c = cov if np.isscalar(cov) else cov[k]
            if np.isscalar(c):
                comps.append(GaussianComponent.isotropic(vectorize(m), float(c)))
            else:
                comps.append(GaussianComponent(vectorize(m), c))
        return cls("tt", dims, ranks, comps, noise_var)


def _factor_list(model, means):
    return [model.factor(n, means) for n in range(1, model.order + 1)]


def _reconstruct(model, means):
    if model.kind == "tt":
        return tt_contract(TensorTrain(_factor_list(model, means)))
    if model.kind == "cp":
        factors = _factor_list(model, means)
        kr = factors[-1]
        for f in reversed(factors[:-1]):
            kr = khatri_rao(kr, f)
        return (kr @ model.weights).reshape(model.dims, order="F")
    factors = _factor_list(model, means)
    core = model.core if model.core is not None else np.zeros(model.ranks)
    out = core
    for n, f in enumerate(factors, start=1):
        out = mode_n_product(out, f, n)
    return out


# ---------------------------------------------------------------------------
# design matrices


def _unfolding_rows(dims, n):
    """Map from row ``p`` of ``vec(Y_(n))`` to its index in ``vec(Y)``."""
    idx = np.arange(math.prod(dims)).reshape(dims, order="F")
    return mode_n_unfold(idx, n).ravel(order="F").astype(np.int64)


def _permute_rows(u_unf, dims, n):
    u = np.empty_like(u_unf)
    u[_unfolding_rows(dims, n)] = u_unf
    return u


def _check_kind(model, kind):
    if model.kind != kind:
        raise KindError(f"operation needs a {kind} model, got {model.kind}")


def _check_n(model, n):
    if not 1 <= n <= model.order:
        raise DimensionError(f"component index {n} outside 1..{model.order}")


def _kr_others(factors, n):
    """``G_N (.) ... (.) G_{n+1} (.) G_{n-1} (.) ... (.) G_1``."""
    others = [f for k, f in enumerate(factors, start=1) if k != n]
    if not others:
        return np.ones((1, factors[0].shape[1]))
    acc = others[-1]
    for f in reversed(others[:-1]):
        acc = khatri_rao(acc, f)
    return acc


def _kron_others(factors, n):
    others = [f for k, f in enumerate(factors, start=1) if k != n]
    acc = np.ones((1, 1))
    for f in reversed(others):
        acc = np.kron(acc, f)
    return acc


def build_u_cp(model, n, means=None):
    """CP design matrix for factor ``n`` (weights absorbed into factor ``n``)."""
    _check_kind(model, "cp")
    _check_n(model, n)
    kr = _kr_others(_factor_list(model, means or model.means()), n)
    u_unf = np.kron(kr, np.eye(model.dims[n - 1]))
    return _permute_rows(u_unf, model.dims, n)


def build_u_tucker(model, n, means=None):
    """Tucker design matrix for factor ``n`` given the current core tensor."""
    _check_kind(model, "tucker")
    _check_n(model, n)
    if model.core is None:
        raise StructureError("Tucker model has no core tensor; call recompute_tucker_core")
    kron = _kron_others(_factor_list(model, means or model.means()), n)
    left = kron @ mode_n_unfold(model.core, n).T
    u_unf = np.kron(left, np.eye(model.dims[n - 1]))
    return _permute_rows(u_unf, model.dims, n)


def tt_interfaces(cores, n):
    """Left and right interface matrices around core ``n`` (1-based).

    Returns ``left`` of shape ``(prod(I_<n), R_n)`` and ``right`` of shape
    ``(R_{n+1}, prod(I_>n))`` such that the tensor, reshaped to
    ``(prod(I_<n), I_n, prod(I_>n))``, is ``left . core_n . right``.
    """
    left = np.ones((1, 1))
    for core in cores[: n - 1]:
        _, i, r1 = core.shape
        p = left.shape[0]
        left = (left @ right_unfold(core)).reshape(p * i, r1, order="F")
    right = np.ones((1, 1))
    for core in reversed(cores[n:]):
        r0, i, _ = core.shape
        q = right.shape[1]
        right = (left_unfold(core) @ right).reshape(r0, i * q, order="F")
    return left, right


def build_u_tt(model, n, means=None):
    """TT design matrix ``G_{>n} kron I_{I_n} kron G_{<n}^T``."""
    _check_kind(model, "tt")
    _check_n(model, n)
    left, right = tt_interfaces(_factor_list(model, means or model.means()), n)
    return np.kron(right.T, np.kron(np.eye(model.dims[n - 1]), left))


def build_u(model, n, means=None):
    return {"cp": build_u_cp, "tucker": build_u_tucker, "tt": build_u_tt}[model.kind](
        model, n, means)


def _tt_projection(left, right, y, dims, n):
    i = dims[n - 1]
    ymat = y.reshape(left.shape[0], i * right.shape[1], order="F")
    z = (left.T @ ymat).reshape(left.shape[1] * i, right.shape[1], order="F")
    return (z @ right.T).ravel(order="F")


def gram_and_projection(model, n, y, means=None):
    """``(U_n^T U_n, U_n^T y)`` without forming ``U_n`` for TT models."""
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    if model.kind == "tt":
        left, right = tt_interfaces(_factor_list(model, means or model.means()), n)
        i = model.dims[n - 1]
        gram = np.kron(right @ right.T, np.kron(np.eye(i), left.T @ left))
        return gram, _tt_projection(left, right, y, model.dims, n)
    u = build_u(model, n, means)
    return u.T @ u, u.T @ y


def recompute_tucker_core(model, y):
    """Least-squares core ``vec(C)`` for ``y = (G_N kron ... kron G_1) vec(C)``.

    Uses the pseudo-inverse of each factor; a rank-deficient factor is
    recorded in ``model.diagnostics["rank_deficient_factors"]``.
    """
    _check_kind(model, "tucker")
    y = np.asarray(y, dtype=np.float64).reshape(model.dims, order="F")
    core = y
    deficient = []
    for n in range(1, model.order + 1):
        g = model.factor(n)
        if np.linalg.matrix_rank(g) < g.shape[1]:
            deficient.append(n)
        core = mode_n_product(core, np.linalg.pinv(g), n)
    out = model.replace(core=core)
    if deficient:
        logger.warning("rank-deficient Tucker factors %s; core solved by pseudo-inverse",
                       deficient)
        out.diagnostics["rank_deficient_factors"] = deficient
    return out


# ---------------------------------------------------------------------------
# single-component updates


def posterior_from_gram(prior, gram, proj, noise_var):
    """Conjugate Gaussian update from ``U^T U`` and ``U^T y``.

    ``P+ = [P0^-1 + U^T U / s2]^-1`` and
    ``m+ = P+ [U^T y / s2 + P0^-1 m0]``.
    """
    if not noise_var > 0:
        raise ValueError(f"noise variance must be positive, got {noise_var}")
    prec0 = prior.precision
    prec = prec0 + gram / noise_var
    prec = 0.5 * (prec + prec.T)
    rhs = proj / noise_var + prec0 @ prior.mean
    factor = cho_factor_jitter(prec, "posterior precision")
    mean = linalg.cho_solve(factor, rhs, check_finite=False)
    return GaussianComponent(mean, precision=prec, _factor=factor)


def posterior_update(prior, u, y, noise_var):
    """Posterior of one component given its design matrix ``u`` and data ``y``."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    if u.shape != (y.size, prior.size):
        raise DimensionError(f"design matrix {u.shape} incompatible with y ({y.size}) "
                             f"and component ({prior.size})")
    return posterior_from_gram(prior, u.T @ u, u.T @ y, noise_var)


def _solve_normal(gram, proj):
    try:
        factor = linalg.cho_factor(gram, check_finite=False)
        return linalg.cho_solve(factor, proj, check_finite=False), False
    except linalg.LinAlgError:
        logger.debug("normal equations singular; using the pseudo-inverse")
        return np.linalg.pinv(gram, hermitian=True) @ proj, True


def conventional_als_update(u, y):
    """Least-squares solution of ``min ||y - U g||``."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    g, _ = _solve_normal(u.T @ u, u.T @ y)
    return g


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class StoppingRule:
    """When to stop sweeping.

    Sweeping stops after ``max_sweeps`` or as soon as any enabled
    relative-change criterion drops below its tolerance. ``None`` disables a
    criterion.
    """

    max_sweeps: int = 20
    meas_tol: float = 1e-8
    cov_tol: float = None
    objective_tol: float = None

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")

    def done(self, rows):
        if len(rows) >= self.max_sweeps:
            return True
        if len(rows) < 2:
            return False
        prev, cur = rows[-2], rows[-1]

        def small(key, tol):
            if tol is None:
                return False
            a, b = prev[key], cur[key]
            return abs(b - a) <= tol * max(abs(a), 1e-300)

        if small("eps_meas", self.meas_tol) or small("log_objective", self.objective_tol):
            return True
        if self.cov_tol is not None and "cov_fro" in cur and cur["cov_fro"] is not None:
            a = np.asarray(prev["cov_fro"])
            b = np.asarray(cur["cov_fro"])
            if np.all(np.abs(b - a) <= self.cov_tol * np.abs(a)):
                return True
        return False


@dataclass
class ConvergenceTrace:
    """Per-sweep convergence records (and per-update events for ortho sweeps)."""

    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def column(self, key):
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def cov_column(self, key, n):
        return np.array([r[key][n - 1] for r in self.rows], dtype=np.float64)

    def flat_rows(self):
        out = []
        for r in self.rows:
            flat = {k: v for k, v in r.items() if k not in ("cov_trace", "cov_fro")}
            for key in ("cov_trace", "cov_fro"):
                vals = r.get(key)
                if vals is not None:
                    for n, v in enumerate(vals, start=1):
                        flat[f"{key}_{n}"] = v
            out.append(flat)
        return out

    def to_csv(self, path=None):
        rows = self.flat_rows()
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def log_posterior_objective(model, y, priors=None, means=None):
    """``log N(y; yhat, s2 I) + sum_i log N(m_i; m_i0, P_i0)`` at the means.

    ``priors`` defaults to ``model.components``.
    """
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    means = model.means() if means is None else means
    priors = model.components if priors is None else priors
    resid = y - vectorize(_reconstruct(model, means))
    s2 = model.noise_var
    loglik = -0.5 * (resid @ resid / s2 + y.size * np.log(2 * np.pi * s2))
    logprior = sum(p.log_pdf(m) for p, m in zip(priors, means))
    return float(loglik + logprior)


def _normalize_cp(model, n, comp):
    """Move column norms of CP factor ``n`` into the weight vector."""
    i = model.dims[n - 1]
    g = comp.mean.reshape(i, model.ranks[0], order="F")
    norms = np.linalg.norm(g, axis=0)
    norms[norms == 0] = 1.0
    model.weights = norms
    return comp.scaled(np.repeat(1.0 / norms, i))


def _sweep_row(model, sweep, y, truth, priors, means, comps, record_covariance):
    yhat = vectorize(_reconstruct(model, means))
    row = {
        "sweep": sweep,
        "eps_meas": rel_error(yhat, y),
        "eps_truth": rel_error(yhat, truth) if truth is not None else float("nan"),
        "log_objective": log_posterior_objective(model, y, priors, means),
    }
    if record_covariance and comps is not None:
        row["cov_trace"] = [c.trace() for c in comps]
        row["cov_fro"] = [c.fro() for c in comps]
    return row


def _check_data(model, y, truth):
    y = np.asarray(y, dtype=np.float64).ravel(order="F")
    if y.size != math.prod(model.dims):
        raise DimensionError(f"measurement of length {y.size} for dims {model.dims}")
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64).ravel(order="F")
        if truth.size != y.size:
            raise DimensionError("truth and measurement lengths differ")
    return y, truth


def bayes_als(model, y, stop=None, truth=None, record_covariance=True):
    """ALS in a Bayesian framework.

    Components are updated in order ``1..N`` per sweep; each update is the
    Gaussian posterior of that component given the data and the current means
    of all others. The components of ``model`` act as priors throughout.

    Parameters
    ----------
    model : BayesTDModel
        Prior means and covariances (also the initial estimate).
    y : array_like
        Measurement, vectorized column-major (or the dense tensor).
    stop : StoppingRule, optional
    truth : array_like, optional
        Ground truth, only used for the ``eps_truth`` trace column.
    record_covariance : bool
        Compute traces and Frobenius norms of the posterior covariances each
        sweep (costs one inversion per component).

    Returns
    -------
    posterior : BayesTDModel
    trace : ConvergenceTrace
    """
    stop = stop or StoppingRule()
    y, truth = _check_data(model, y, truth)
    priors = list(model.components)
    work = model.replace()
    if work.kind == "tucker" and work.core is None:
        work = recompute_tucker_core(work, y)
    comps = list(priors)
    means = [p.mean for p in priors]
    trace = ConvergenceTrace()
    sweep = 0
    while True:
        sweep += 1
        for n in range(1, work.order + 1):
            gram, proj = gram_and_projection(work, n, y, means)
            post = posterior_from_gram(priors[n - 1], gram, proj, work.noise_var)
            if work.kind == "cp":
                post = _normalize_cp(work, n, post)
            comps[n - 1] = post
            means[n - 1] = post.mean
            if work.kind == "tucker":
                work.components = list(comps)
                work = recompute_tucker_core(work, y)
        trace.rows.append(_sweep_row(work, sweep, y, truth, priors, means, comps,
                                     record_covariance))
        if stop.done(trace.rows):
            break
    return work.replace(components=comps), trace


def conventional_als(model, y, stop=None, truth=None, orthogonalize=False):
    """Conventional ALS started from the component means of ``model``.

    With ``orthogonalize=True`` (TT only) the TT is kept in mixed-canonical
    form and swept ``1..N, N-1..2``; otherwise components are solved in order
    ``1..N`` from the normal equations. Covariances are left untouched.
    """
    stop = stop or StoppingRule()
    y, truth = _check_data(model, y, truth)
    if orthogonalize:
        from .ortho_bayes import conventional_als_ortho

        return conventional_als_ortho(model, y, stop, truth)
    work = model.replace()
    if work.kind == "tucker" and work.core is None:
        work = recompute_tucker_core(work, y)
    means = [c.mean for c in model.components]
    trace = ConvergenceTrace()
    sweep = 0
    while True:
        sweep += 1
        for n in range(1, work.order + 1):
            gram, proj = gram_and_projection(work, n, y, means)
            g, _ = _solve_normal(gram, proj)
            if work.kind == "cp":
                i = work.dims[n - 1]
                norms = np.linalg.norm(g.reshape(i, -1, order="F"), axis=0)
                norms[norms == 0] = 1.0
                work.weights = norms
                g = g / np.repeat(norms, i)
            means[n - 1] = g
            if work.kind == "tucker":
                work.components = [c.with_mean(m) for c, m in zip(model.components, means)]
                work = recompute_tucker_core(work, y)
        yhat = vectorize(_reconstruct(work, means))
        trace.rows.append({
            "sweep": sweep,
            "eps_meas": rel_error(yhat, y),
            "eps_truth": rel_error(yhat, truth) if truth is not None else float("nan"),
            "log_objective": float("nan"),
        })
        if stop.done(trace.rows):
            break
    comps = [c.with_mean(m) for c, m in zip(model.components, means)]
    return work.replace(components=comps), trace


def recursive_update(model, samples, stop=None, truth=None, record_covariance=True,
                     algorithm=None):
    """Fold :func:`bayes_als` over noisy samples; posterior ``k`` is prior ``k+1``.

    Returns the final model and the list of per-sample traces.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("recursive_update needs at least one sample")
    run = algorithm or bayes_als
    traces = []
    for y in samples:
        model, trace = run(model, y, stop=stop, truth=truth,
                           record_covariance=record_covariance)
        traces.append(trace)
    return model, traces
