import numpy as np
import pytest

from ttbayes.als_engine import (
    BayesTDModel,
    StoppingRule,
    bayes_als,
    build_u,
    build_u_cp,
    build_u_tt,
    build_u_tucker,
    conventional_als,
    conventional_als_update,
    gram_and_projection,
    log_posterior_objective,
    posterior_update,
    recompute_tucker_core,
    recursive_update,
    rel_error,
)
from ttbayes.exceptions import DimensionError, KindError, StructureError
from ttbayes.gaussian import GaussianComponent
from ttbayes.tensor_core import khatri_rao, mode_n_product, vectorize
from ttbayes.tt_format import TensorTrain, random_tt, tt_contract


def _model(kind, dims, ranks, means, var=1.0, noise_var=0.1, **kw):
    comps = [GaussianComponent.isotropic(m, var) for m in means]
    return BayesTDModel(kind, dims, ranks, comps, noise_var, **kw)


def _tt_model(rng, dims=(3, 4, 2), ranks=(1, 2, 3, 1), var=1.0, noise_var=0.1):
    tt = random_tt(dims, ranks, rng)
    return _model("tt", dims, ranks, [vectorize(c) for c in tt.cores], var, noise_var)


def test_cp_two_way_outer_product(rng):
    a = rng.standard_normal((3, 1))
    b = rng.standard_normal((4, 1))
    model = _model("cp", (3, 4), (1,), [a.ravel(), b.ravel()])
    u = build_u_cp(model, 1)
    np.testing.assert_allclose(u @ a.ravel(), vectorize(np.outer(a, b)), atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_cp_multilinearity(rng, n):
    dims, r = (3, 4, 2), 2
    fs = [rng.standard_normal((d, r)) for d in dims]
    model = _model("cp", dims, (r,), [vectorize(f) for f in fs])
    g = rng.standard_normal(dims[n - 1] * r)
    fs2 = list(fs)
    fs2[n - 1] = g.reshape(dims[n - 1], r, order="F")
    dense = (khatri_rao(khatri_rao(fs2[2], fs2[1]), fs2[0]) @ np.ones(r)).reshape(dims, order="F")
    np.testing.assert_allclose(build_u_cp(model, n) @ g, vectorize(dense), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_tucker_identity(rng, n):
    dims, ranks = (3, 4, 2), (2, 3, 2)
    fs = [rng.standard_normal((d, r)) for d, r in zip(dims, ranks)]
    core = rng.standard_normal(ranks)
    model = _model("tucker", dims, ranks, [vectorize(f) for f in fs], core=core)
    dense = core
    for k, f in enumerate(fs, start=1):
        dense = mode_n_product(dense, f, k)
    np.testing.assert_allclose(build_u_tucker(model, n) @ vectorize(fs[n - 1]),
                               vectorize(dense), atol=1e-12)


def test_tucker_orthonormal_columns(rng):
    dims = (3, 3, 3)
    fs = [np.linalg.qr(rng.standard_normal((3, 3)))[0] for _ in dims]
    core = np.linalg.qr(rng.standard_normal((3, 3)))[0].reshape(3, 3, 1) * np.ones((1, 1, 3))
    core = np.zeros((3, 3, 3))
    for i in range(3):
        core[i, i, i] = 1.0
    # a unit-norm diagonal core with orthogonal factors gives orthonormal columns
    model = _model("tucker", dims, (3, 3, 3), [vectorize(f) for f in fs], core=core)
    u = build_u(model, 2)
    np.testing.assert_allclose(u.T @ u, np.eye(9), atol=1e-12)


def test_tucker_core_recovery(rng):
    dims, ranks = (4, 4, 3), (2, 3, 2)
    fs = [rng.standard_normal((d, r)) for d, r in zip(dims, ranks)]
    core = rng.standard_normal(ranks)
    y = core
    for k, f in enumerate(fs, start=1):
        y = mode_n_product(y, f, k)
    model = _model("tucker", dims, ranks, [vectorize(f) for f in fs])
    np.testing.assert_allclose(recompute_tucker_core(model, vectorize(y)).core, core, atol=1e-10)


def test_tt_design_first_core_two_way(rng):
    model = _tt_model(rng, dims=(3, 4), ranks=(1, 2, 1))
    g2 = model.factor(2)[:, :, 0]
    np.testing.assert_allclose(build_u_tt(model, 1), np.kron(g2.T, np.eye(3)), atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_tt_design_identity_and_gram(rng, n):
    model = _tt_model(rng)
    u = build_u_tt(model, n)
    np.testing.assert_allclose(u @ model.components[n - 1].mean, vectorize(model.mean_tensor()),
                               atol=1e-12)
    y = rng.standard_normal(24)
    gram, proj = gram_and_projection(model, n, y)
    np.testing.assert_allclose(gram, u.T @ u, atol=1e-12)
    np.testing.assert_allclose(proj, u.T @ y, atol=1e-12)


def test_tt_orthonormal_design(rng):
    from ttbayes.tt_format import to_site_n_canonical

    tt = to_site_n_canonical(random_tt((3, 4, 2), (1, 2, 2, 1), rng), 2)
    model = _model("tt", (3, 4, 2), (1, 2, 2, 1), [vectorize(c) for c in tt.cores])
    u = build_u_tt(model, 2)
    np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-12)


def test_posterior_frozen_k2():
    prior = GaussianComponent([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    u = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
    post = posterior_update(prior, u, [1.0, 2.0, 3.0], 1.0)
    # exact rational values: m = (89/45, -2/15), P = [[43/90, -2/15], [-2/15, 1/5]]
    np.testing.assert_allclose(post.mean, [89 / 45, -2 / 15], rtol=1e-13)
    np.testing.assert_allclose(post.cov, [[43 / 90, -2 / 15], [-2 / 15, 1 / 5]], rtol=1e-12)


def test_flat_prior_normal_equations(rng):
    u = rng.standard_normal((20, 4))
    y = rng.standard_normal(20)
    post = posterior_update(GaussianComponent.isotropic(np.zeros(4), 1e12), u, y, 1.0)
    ls = np.linalg.lstsq(u, y, rcond=None)[0]
    np.testing.assert_allclose(post.mean, ls, rtol=1e-6)
    np.testing.assert_allclose(conventional_als_update(u, y), ls, rtol=1e-10)


def test_posterior_dimension_error(rng):
    with pytest.raises(DimensionError):
        posterior_update(GaussianComponent.isotropic(np.zeros(3), 1.0), np.ones((5, 2)),
                         np.ones(5), 1.0)


def test_flat_prior_matches_conventional(rng):
    truth = tt_contract(random_tt((5, 5, 5), (1, 3, 3, 1), rng))
    y = truth + 0.1 * rng.standard_normal(truth.shape)
    model = _tt_model(rng, (5, 5, 5), (1, 3, 3, 1), var=1e12, noise_var=1.0)
    stop = StoppingRule(max_sweeps=3, meas_tol=None)
    bayes, _ = bayes_als(model, y, stop)
    conv, _ = conventional_als(model, y, stop)
    assert rel_error(bayes.mean_tensor(), conv.mean_tensor()) < 1e-6


def test_bayes_als_trace_and_objective(rng):
    truth = tt_contract(random_tt((4, 4, 4), (1, 2, 2, 1), rng))
    y = truth + 0.3 * rng.standard_normal(truth.shape)
    model = _tt_model(rng, (4, 4, 4), (1, 2, 2, 1), var=100.0, noise_var=0.09)
    post, trace = bayes_als(model, y, StoppingRule(max_sweeps=8, meas_tol=None), truth=truth)
    assert len(trace.rows) == 8
    obj = trace.column("log_objective")
    assert np.all(np.diff(obj[1:]) >= -1e-6 * np.abs(obj[1:-1]))
    assert trace.cov_column("cov_trace", 2).shape == (8,)
    np.testing.assert_allclose(obj[-1], log_posterior_objective(post, y, model.components),
                               rtol=1e-12)
    csv = trace.to_csv()
    assert csv.splitlines()[0].startswith("sweep,eps_meas,eps_truth,log_objective,cov_trace_1")


def test_recursive_zero_noise_fixed_point(rng):
    # core means of the non-orthogonalized sweep are gauge-free, so compare tensors
    truth = tt_contract(random_tt((3, 3, 3), (1, 2, 2, 1), rng))
    model = _tt_model(rng, (3, 3, 3), (1, 2, 2, 1), var=10.0, noise_var=1e-10)
    stop = StoppingRule(max_sweeps=30, meas_tol=None)
    first, _ = bayes_als(model, truth, stop, record_covariance=False)
    second, traces = recursive_update(first, [truth], stop, record_covariance=False)
    assert rel_error(second.mean_tensor(), first.mean_tensor()) < 1e-6
    assert len(traces) == 1


@pytest.mark.parametrize("kind", ["cp", "tucker"])
def test_other_kinds_run(rng, kind):
    dims = (3, 4, 3)
    ranks = (2,) if kind == "cp" else (2, 2, 2)
    rs = [ranks[0]] * 3 if kind == "cp" else ranks
    fs = [rng.standard_normal((d, r)) for d, r in zip(dims, rs)]
    model = _model(kind, dims, ranks, [vectorize(f) for f in fs], var=10.0, noise_var=0.01)
    y = rng.standard_normal(dims)
    post, trace = bayes_als(model, y, StoppingRule(max_sweeps=4))
    assert trace.rows[-1]["eps_meas"] <= trace.rows[0]["eps_meas"] + 1e-9
    conv, _ = conventional_als(model, y, StoppingRule(max_sweeps=4))
    assert np.isfinite(conv.mean_tensor()).all()


def test_model_validation(rng):
    with pytest.raises(KindError):
        _model("bogus", (2, 2), (1, 1, 1), [np.ones(2), np.ones(2)])
    with pytest.raises(StructureError):
        _model("tt", (2, 2), (2, 1, 1), [np.ones(4), np.ones(2)])
    with pytest.raises(DimensionError):
        _model("tt", (2, 2), (1, 1, 1), [np.ones(3), np.ones(2)])
    with pytest.raises(ValueError):
        _model("tt", (2, 2), (1, 1, 1), [np.ones(2), np.ones(2)], noise_var=0.0)
    model = _model("tt", (2, 2), (1, 1, 1), [np.ones(2), np.ones(2)])
    with pytest.raises(DimensionError):
        bayes_als(model, np.ones(5))
    with pytest.raises(KindError):
        build_u_cp(model, 1)


def test_rel_error_layouts(rng):
    t = rng.standard_normal((2, 3))
    assert rel_error(t, vectorize(t)) == 0.0
    with pytest.raises(ValueError):
        rel_error(t, np.zeros((2, 3)))


def test_stopping_rule():
    rows = [{"eps_meas": 1.0}, {"eps_meas": 1.0 + 1e-12}]
    assert StoppingRule(max_sweeps=5, meas_tol=1e-8).done(rows)
    assert not StoppingRule(max_sweeps=5, meas_tol=None).done(rows)
    with pytest.raises(ValueError):
        StoppingRule(max_sweeps=0)


def test_dense_tensor_and_vector_inputs_agree(rng):
    model = _tt_model(rng)
    y = rng.standard_normal((3, 4, 2))
    stop = StoppingRule(max_sweeps=2)
    a, _ = bayes_als(model, y, stop, record_covariance=False)
    b, _ = bayes_als(model, vectorize(y), stop, record_covariance=False)
    np.testing.assert_array_equal(a.mean_tensor(), b.mean_tensor())


def test_mean_tt_roundtrip(rng):
    model = _tt_model(rng)
    np.testing.assert_allclose(tt_contract(model.mean_tt()), model.mean_tensor())
    assert isinstance(model.mean_tt(), TensorTrain)
