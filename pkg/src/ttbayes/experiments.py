"""Synthetic and image experiments: noise, priors, studies and aggregation.

Every random draw comes from a Philox stream keyed by ``(seed, purpose,
index...)`` so that, for example, changing the number of trials never shifts
the noise realizations of the trials that remain.
"""

from dataclasses import asdict, dataclass, field, fields
import json
import logging
import math
import time

import numpy as np
from joblib import Parallel, delayed

from .als_engine import (
    BayesTDModel,
    StoppingRule,
    bayes_als,
    conventional_als,
    rel_error,
)
from .exceptions import DimensionError
from .gaussian import GaussianComponent
from .ortho_bayes import bayes_als_ortho
from .tensor_core import vectorize
from .tt_format import TensorTrain, tt_contract, tt_norm, tt_svd, ttm_trace
from .unscented_tt import UTParams, ut_tt

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "substream",
    "make_ground_truth",
    "noise_variance",
    "make_noisy_sample",
    "rel_error",
    "perturbed_prior",
    "random_prior",
    "aggregate",
    "run_convergence",
    "run_covariance_study",
    "run_comparison",
    "image_to_tensor",
    "tensor_to_image",
    "image_pipeline",
]

PURPOSES = {"truth": 0, "noise": 1, "prior": 2, "init": 3}
ALGORITHMS = ("bayes", "bayes_ortho", "conventional")
SNR_CONVENTIONS = ("truth", "measured")


@dataclass
class ExperimentConfig:
    """Experiment settings, serializable to JSON.

    ``prior_a = None`` draws the prior mean as fresh standard-normal cores
    instead of perturbing the ground truth. ``snr_convention`` selects how
    the noise level follows from ``snr_db`` (see :func:`noise_variance`).
    """

    seed: int = 0
    dims: tuple = (5, 5, 5)
    ranks: tuple = (1, 3, 3, 1)
    snr_db: float = 0.0
    n_samples: int = 1
    prior_a: float = None
    prior_b: float = 200.0
    max_sweeps: int = 20
    meas_tol: float = None
    algorithm: str = "bayes"
    trials: int = 100
    snr_convention: str = "truth"
    snr_grid: tuple = (0.0, 24.0)
    sample_grid: tuple = (1, 10, 100)
    seeds: int = 20
    ut_alpha: float = 1e-3
    ut_beta: float = 2.0
    ut_kappa: float = None
    ut_trials: int = None
    image: str = None
    image_size: int = 256
    tt_eps: float = 0.1
    pixel_scale: float = 1.0
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.ranks = tuple(int(r) for r in self.ranks)
        self.snr_grid = tuple(float(s) for s in self.snr_grid)
        self.sample_grid = tuple(int(s) for s in self.sample_grid)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.snr_convention not in SNR_CONVENTIONS:
            raise ValueError(f"snr_convention must be one of {SNR_CONVENTIONS}")

    def stop_rule(self):
        return StoppingRule(max_sweeps=self.max_sweeps, meas_tol=self.meas_tol)

    def ut_params(self):
        return UTParams(alpha=self.ut_alpha, beta=self.ut_beta, kappa=self.ut_kappa)

    def to_dict(self):
        out = asdict(self)
        for key in ("dims", "ranks", "snr_grid", "sample_grid"):
            out[key] = list(out[key])
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def substream(seed, purpose, *index):
    """Independent generator for ``(seed, purpose, index...)``."""
    key = (PURPOSES[purpose],) + tuple(int(i) for i in index)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed),
                                                                       spawn_key=key)))


def make_ground_truth(seed, dims, ranks, index=()):
    """TT with i.i.d. standard-normal cores from the ``truth`` stream."""
    rng = substream(seed, "truth", *index)
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims) + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise DimensionError(f"invalid rank chain {ranks} for dims {dims}")
    return TensorTrain([rng.standard_normal((ranks[k], dims[k], ranks[k + 1]))
                        for k in range(len(dims))])


def noise_variance(y_truth, snr_db):
    """``sigma^2`` with ``E||eps||^2 = ||y_truth||^2 / 10^(snr/10)``."""
    y_truth = np.asarray(y_truth, dtype=np.float64).ravel(order="F")
    power = float(y_truth @ y_truth)
    if power == 0:
        raise ValueError("cannot set an SNR for a zero signal")
    return power / (y_truth.size * 10.0 ** (snr_db / 10.0))


def _measured_scale(y_truth, e, snr_db):
    """Scale ``s`` with ``||y_t + s e||^2 / ||s e||^2 = 10^(snr/10)`` exactly."""
    ratio = 10.0 ** (snr_db / 10.0)
    ee = float(e @ e)
    ye = float(y_truth @ e)
    yy = float(y_truth @ y_truth)
    qa = (ratio - 1.0) * ee
    if abs(qa) < 1e-14 * ee:
        if ye >= 0:
            raise ValueError("this noise draw cannot reach the requested SNR")
        return -yy / (2.0 * ye)
    disc = ye * ye + qa * yy
    if disc < 0:
        raise ValueError("this noise draw cannot reach the requested SNR")
    roots = [(ye + sgn * math.sqrt(disc)) / qa for sgn in (1.0, -1.0)]
    roots = [r for r in roots if r > 0]
    if not roots:
        raise ValueError("this noise draw cannot reach the requested SNR")
    return min(roots)


def make_noisy_sample(y_truth, snr_db, rng, convention="truth", return_variance=False):
    """``y = y_truth + eps`` with Gaussian ``eps`` at the requested SNR.

    Parameters
    ----------
    y_truth : array_like
    snr_db : float
    rng : numpy.random.Generator
    convention : {"truth", "measured"}
        ``"truth"``: i.i.d. noise of variance :func:`noise_variance`, so the
        expected ratio ``||y_truth||^2 / ||eps||^2`` matches ``snr_db``.
        ``"measured"``: the realized draw is scaled so that
        ``||y||^2 / ||eps||^2`` matches exactly; this ratio exceeds one for
        typical draws, so 0 dB is only reachable for some draws.
    return_variance : bool
        Also return the variance of the noise that was applied.
    """
    y_truth = np.asarray(y_truth, dtype=np.float64).ravel(order="F")
    if not np.any(y_truth):
        raise ValueError("cannot set an SNR for a zero signal")
    e = rng.standard_normal(y_truth.size)
    if convention == "truth":
        var = noise_variance(y_truth, snr_db)
        scale = math.sqrt(var)
    elif convention == "measured":
        scale = _measured_scale(y_truth, e, snr_db)
        var = scale * scale
    else:
        raise ValueError(f"unknown SNR convention {convention!r}")
    y = y_truth + scale * e
    return (y, var) if return_variance else y


def perturbed_prior(truth, a, b, rng):
    """``m_i = vec(G_i) + a N(0, I)``, ``P_i = b^2 I`` (``b`` floored at 1e-12)."""
    if a < 0 or b < 0:
        raise ValueError("a and b must be non-negative")
    var = max(b, 1e-12) ** 2
    return [GaussianComponent.isotropic(vectorize(c) + a * rng.standard_normal(c.size), var)
            for c in truth.cores]


def random_prior(dims, ranks, b, rng):
    """Standard-normal prior means with covariance ``b^2 I``."""
    var = max(b, 1e-12) ** 2
    comps = []
    for k in range(len(dims)):
        size = ranks[k] * dims[k] * ranks[k + 1]
        comps.append(GaussianComponent.isotropic(rng.standard_normal(size), var))
    return comps


def aggregate(values):
    """Mean and ``mean -/+ 2 std`` over trials (axis 0)."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    return mean, mean - 2 * std, mean + 2 * std


def _prior_for(cfg, truth, trial, dims=None, ranks=None):
    rng = substream(cfg.seed, "prior", trial)
    if cfg.prior_a is None:
        return random_prior(dims or cfg.dims, ranks or cfg.ranks, cfg.prior_b, rng)
    return perturbed_prior(truth, cfg.prior_a, cfg.prior_b, rng)


def _model(comps, dims, ranks, noise_var):
    return BayesTDModel("tt", dims, ranks, comps, noise_var)


def _run_parallel(fn, items, threads):
    if threads and threads > 1:
        return Parallel(n_jobs=threads, prefer="threads")(delayed(fn)(i) for i in items)
    return [fn(i) for i in items]


def _algorithm(name):
    return {"bayes": bayes_als, "bayes_ortho": bayes_als_ortho}[name]


def run_convergence(cfg):
    """Error and objective traces of repeated runs on one noisy sample.

    One ground truth and one noisy sample; every trial draws its own prior.

    Returns
    -------
    dict
        ``"trials"``: per-trial rows ``(trial, sweep, eps_meas, eps_truth,
        log_objective)``; ``"summary"``: per-sweep mean and 2-sigma band.
    """
    truth = make_ground_truth(cfg.seed, cfg.dims, cfg.ranks)
    y_truth = vectorize(tt_contract(truth))
    y, var = make_noisy_sample(y_truth, cfg.snr_db, substream(cfg.seed, "noise", 0),
                               cfg.snr_convention, return_variance=True)
    stop = cfg.stop_rule()

    def one(trial):
        model = _model(_prior_for(cfg, truth, trial), cfg.dims, cfg.ranks, var)
        if cfg.algorithm == "conventional":
            _, tr = conventional_als(model, y, stop, truth=y_truth)
        else:
            _, tr = _algorithm(cfg.algorithm)(model, y, stop, truth=y_truth,
                                              record_covariance=False)
        return tr.rows

    per_trial = _run_parallel(one, range(cfg.trials), cfg.threads)
    rows = []
    for trial, trows in enumerate(per_trial):
        for r in trows:
            rows.append({"trial": trial, "sweep": r["sweep"], "eps_meas": r["eps_meas"],
                         "eps_truth": r["eps_truth"], "log_objective": r["log_objective"]})
    sweeps = min(len(t) for t in per_trial)
    summary = []
    stacked = {key: np.array([[t[s][key] for s in range(sweeps)] for t in per_trial])
               for key in ("eps_meas", "eps_truth", "log_objective")}
    for s in range(sweeps):
        row = {"sweep": s + 1}
        for key, vals in stacked.items():
            mean, lo, hi = aggregate(vals[:, s])
            row[f"{key}_mean"], row[f"{key}_lo"], row[f"{key}_hi"] = (
                float(mean), float(lo), float(hi))
        summary.append(row)
    return {"trials": rows, "summary": summary, "noise_var": var}


def _ut_stats(model, params):
    _, p_ut = ut_tt(model, params)
    return ttm_trace(p_ut), tt_norm(p_ut.as_tt())


def run_covariance_study(cfg):
    """Core covariances and UT covariance along the orthogonalized sweep.

    For every trial the trace and Frobenius norm of the covariance of the
    core that is updated next (after the norm has moved to it) are recorded,
    and after each full sweep the trace and Frobenius norm of the UT
    covariance of the tensor estimate (for the first ``ut_trials`` trials).

    Returns
    -------
    dict
        ``"cores"``: per-trial rows ``(trial, sweep, core, cov_trace,
        cov_fro)``, using the last record of each core within a sweep;
        ``"ut"``: per-trial rows ``(trial, sweep, ut_trace, ut_fro)``;
        ``"summary_cores"`` / ``"summary_ut"``: mean and 2-sigma band.
    """
    truth = make_ground_truth(cfg.seed, cfg.dims, cfg.ranks)
    y_truth = vectorize(tt_contract(truth))
    y, var = make_noisy_sample(y_truth, cfg.snr_db, substream(cfg.seed, "noise", 0),
                               cfg.snr_convention, return_variance=True)
    stop = cfg.stop_rule()
    params = cfg.ut_params()
    ut_trials = cfg.trials if cfg.ut_trials is None else min(cfg.ut_trials, cfg.trials)

    def one(trial):
        model = _model(_prior_for(cfg, truth, trial), cfg.dims, cfg.ranks, var)
        ut_rows = []

        def callback(state, event):
            if trial < ut_trials and event == "move" and state.site == 1:
                tr, fro = _ut_stats(state.model, params)
                ut_rows.append({"trial": trial, "sweep": state.sweep,
                                "ut_trace": tr, "ut_fro": fro})

        _, tr = bayes_als_ortho(model, y, stop, truth=y_truth, callback=callback)
        core_rows = {}
        for ev in tr.events:
            core_rows[(ev["sweep"], ev["site"])] = {
                "trial": trial, "sweep": ev["sweep"], "core": ev["site"],
                "cov_trace": ev["cov_trace"], "cov_fro": ev["cov_fro"]}
        return [core_rows[k] for k in sorted(core_rows)], ut_rows

    results = _run_parallel(one, range(cfg.trials), cfg.threads)
    cores = [r for res in results for r in res[0]]
    uts = [r for res in results for r in res[1]]
    return {"cores": cores, "ut": uts,
            "summary_cores": _summarize(cores, ("sweep", "core"), ("cov_trace", "cov_fro")),
            "summary_ut": _summarize(uts, ("sweep",), ("ut_trace", "ut_fro")),
            "noise_var": var}


def _summarize(rows, keys, values):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups):
        row = dict(zip(keys, key))
        for v in values:
            mean, lo, hi = aggregate([g[v] for g in groups[key]])
            row[f"{v}_mean"], row[f"{v}_lo"], row[f"{v}_hi"] = float(mean), float(lo), float(hi)
        row["count"] = len(groups[key])
        out.append(row)
    return out


def _recursive_errors(model, samples, checkpoints, stop, y_truth, algorithm):
    """Error after each checkpointed number of samples.

    Bayesian runs feed the posterior forward as the next prior; the
    conventional ALS restarts from the previous estimate.
    """
    errs = {}
    checkpoints = set(checkpoints)
    for k, y in enumerate(samples, start=1):
        if algorithm == "conventional":
            model, _ = conventional_als(model, y, stop)
        else:
            model, _ = _algorithm(algorithm)(model, y, stop, record_covariance=False)
        if k in checkpoints:
            errs[k] = rel_error(model.mean_tensor(), y_truth)
    return errs


def run_comparison(cfg):
    """Bayesian vs conventional ALS over seeds, SNRs and sample counts.

    Each seed draws its own ground truth, prior (shared by both algorithms,
    the conventional ALS starts from the prior mean) and noise.

    Returns
    -------
    dict
        ``"rows"``: ``(seed, snr_db, n_samples, algorithm, eps_truth)``;
        ``"summary"``: medians per ``(snr_db, n_samples, algorithm)``.
    """
    stop = cfg.stop_rule()
    bayes_alg = cfg.algorithm if cfg.algorithm != "conventional" else "bayes"
    max_samples = max(cfg.sample_grid)
    jobs = [(s, j, snr) for s in range(cfg.seeds) for j, snr in enumerate(cfg.snr_grid)]

    def one(job):
        seed_idx, snr_idx, snr = job
        truth = make_ground_truth(cfg.seed, cfg.dims, cfg.ranks, index=(seed_idx,))
        y_truth = vectorize(tt_contract(truth))
        var = None
        samples = []
        for k in range(max_samples):
            rng = substream(cfg.seed, "noise", seed_idx, snr_idx, k)
            y, var = make_noisy_sample(y_truth, snr, rng, cfg.snr_convention,
                                       return_variance=True)
            samples.append(y)
        if cfg.snr_convention == "truth":
            var = noise_variance(y_truth, snr)
        prior = _prior_for(cfg, truth, seed_idx)
        model = _model(prior, cfg.dims, cfg.ranks, var)
        out = []
        for alg in (bayes_alg, "conventional"):
            errs = _recursive_errors(model, samples, cfg.sample_grid, stop, y_truth, alg)
            for n, e in sorted(errs.items()):
                out.append({"seed": seed_idx, "snr_db": snr, "n_samples": n,
                            "algorithm": "conventional" if alg == "conventional" else alg,
                            "eps_truth": e})
        return out

    rows = [r for res in _run_parallel(one, jobs, cfg.threads) for r in res]
    groups = {}
    for r in rows:
        groups.setdefault((r["snr_db"], r["n_samples"], r["algorithm"]), []).append(
            r["eps_truth"])
    summary = [{"snr_db": k[0], "n_samples": k[1], "algorithm": k[2],
                "median_eps_truth": float(np.median(v)), "count": len(v)}
               for k, v in sorted(groups.items())]
    return {"rows": rows, "summary": summary}


# ---------------------------------------------------------------------------
# images


def _quaternary_order(side):
    k = round(math.log(side, 4))
    if side < 1 or 4 ** k != side:
        raise DimensionError(f"image side {side} is not a power of 4")
    return k


def image_to_tensor(image):
    """Reshape a square ``4^k x 4^k`` image into a ``2k``-way tensor of 4s."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DimensionError(f"expected a square grayscale image, got {image.shape}")
    k = _quaternary_order(image.shape[0])
    return image.reshape((4,) * (2 * k), order="F")


def tensor_to_image(t, side):
    return np.asarray(t).reshape(side, side, order="F")


def image_pipeline(image, tt_eps=0.1, snr_db=0.0, n_samples=10, algorithm="bayes",
                   seed=0, prior_b=1000.0, max_sweeps=3, checkpoints=None,
                   snr_convention="truth", pixel_scale=1.0):
    """Denoise a low-rank image from repeated noisy observations.

    The image is reshaped to a tensor of 4s, compressed by TT-SVD to relative
    accuracy ``tt_eps`` (this is the ground truth), observed ``n_samples``
    times with noise, and reconstructed with the requested algorithm, started
    from a random prior mean with covariance ``prior_b^2 I``.

    Returns
    -------
    dict
        ``"truth"`` (image), ``"reconstruction"`` (image after all samples),
        ``"errors"`` (``{n: eps_truth}`` at each checkpoint), ``"ranks"``,
        ``"tt_svd_error"``, ``"noise_var"`` and ``"timings"``.
    """
    image = np.asarray(image, dtype=np.float64) * pixel_scale
    side = image.shape[0]
    tensor = image_to_tensor(image)
    timings = {}
    t0 = time.perf_counter()
    truth_tt = tt_svd(tensor, eps=tt_eps)
    timings["tt_svd"] = time.perf_counter() - t0
    y_truth = vectorize(tt_contract(truth_tt))
    dims, ranks = truth_tt.dims, truth_tt.ranks
    var = noise_variance(y_truth, snr_db)
    samples = []
    for k in range(n_samples):
        y, v = make_noisy_sample(y_truth, snr_db, substream(seed, "noise", k),
                                 snr_convention, return_variance=True)
        samples.append(y)
        if snr_convention == "measured":
            var = v
    prior = random_prior(dims, ranks, prior_b, substream(seed, "prior", 0))
    model = _model(prior, dims, ranks, var)
    stop = StoppingRule(max_sweeps=max_sweeps, meas_tol=None)
    checkpoints = sorted(set(checkpoints or (1, n_samples)))
    errors = {}
    t0 = time.perf_counter()
    for k, y in enumerate(samples, start=1):
        if algorithm == "conventional":
            model, _ = conventional_als(model, y, stop)
        else:
            model, _ = _algorithm(algorithm)(model, y, stop, record_covariance=False)
        if k in checkpoints:
            errors[k] = rel_error(model.mean_tensor(), y_truth)
    timings["reconstruction"] = time.perf_counter() - t0
    return {
        "truth": tensor_to_image(tt_contract(truth_tt), side) / pixel_scale,
        "reconstruction": tensor_to_image(model.mean_tensor(), side) / pixel_scale,
        "errors": errors,
        "ranks": ranks,
        "tt_svd_error": rel_error(vectorize(tt_contract(truth_tt)), vectorize(tensor)),
        "noise_var": var,
        "timings": timings,
    }
