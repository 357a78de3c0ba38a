import numpy as np
import pytest
from sklearn.base import clone

from ttbayes.estimators import TTSVD, BayesianTensorTrain, check_tensor
from ttbayes.exceptions import DimensionError
from ttbayes.tt_format import random_tt, tt_contract


@pytest.fixture
def problem(rng):
    t = tt_contract(random_tt((4, 5, 4), (1, 2, 2, 1), rng))
    samples = np.stack([t + 0.2 * rng.standard_normal(t.shape) for _ in range(5)])
    return t, samples


def test_check_tensor():
    assert check_tensor([[1, 2]]).dtype == np.float64
    with pytest.raises(DimensionError):
        check_tensor([1.0, 2.0], min_order=2)
    with pytest.raises(DimensionError):
        check_tensor(np.zeros((2, 0)))
    with pytest.raises(DimensionError):
        check_tensor(np.zeros((2, 2)), dims=(2, 3))
    with pytest.raises(ValueError):
        check_tensor([np.nan, 1.0])


def test_ttsvd_transformer(problem):
    t, _ = problem
    est = TTSVD(eps=1e-10).fit(t)
    assert est.ranks_ == (1, 2, 2, 1)
    np.testing.assert_allclose(est.transform(t), t, atol=1e-10 * np.linalg.norm(t))
    assert est.relative_error_ < 1e-10
    assert TTSVD(ranks=(1, 1, 1, 1)).fit_transform(t).shape == t.shape


def test_params_and_clone():
    est = BayesianTensorTrain((1, 2, 2, 1), noise_var=0.1, max_sweeps=3)
    params = est.get_params()
    assert params["ranks"] == (1, 2, 2, 1) and params["max_sweeps"] == 3
    other = clone(est).set_params(max_sweeps=5)
    assert other.max_sweeps == 5 and est.max_sweeps == 3


@pytest.mark.parametrize("orthogonalize", [True, False])
def test_fit_predict(problem, orthogonalize):
    t, samples = problem
    est = BayesianTensorTrain((1, 2, 2, 1), noise_var=0.04, prior_var=100.0, max_sweeps=10,
                              orthogonalize=orthogonalize, random_state=0).fit(samples)
    assert est.n_samples_seen_ == 5 and len(est.traces_) == 5
    noisy_err = np.linalg.norm(samples[0] - t) / np.linalg.norm(t)
    assert -est.score(t) < noisy_err
    mean, std = est.predict(return_std=True, ut_params=None)
    assert mean.shape == std.shape == t.shape and np.all(std >= 0)


def test_partial_fit_matches_fit(problem):
    _, samples = problem
    kw = dict(ranks=(1, 2, 2, 1), noise_var=0.04, prior_var=100.0, max_sweeps=4, random_state=1)
    full = BayesianTensorTrain(**kw).fit(samples)
    inc = BayesianTensorTrain(**kw).partial_fit(samples[:2]).partial_fit(samples[2:])
    np.testing.assert_allclose(inc.predict(), full.predict(), atol=1e-12)
    with pytest.raises(DimensionError):
        inc.partial_fit(np.zeros((3, 3, 3)))


def test_estimated_noise_var(problem):
    _, samples = problem
    est = BayesianTensorTrain((1, 2, 2, 1), max_sweeps=2, random_state=0).fit(samples[0])
    assert 0.01 < est.noise_var_ < 0.06


def test_wrong_order(problem):
    t, _ = problem
    with pytest.raises(DimensionError):
        BayesianTensorTrain((1, 2, 1)).fit(t[None, None])


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        BayesianTensorTrain((1, 2, 1)).predict()
