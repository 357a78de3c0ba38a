import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ttbayes.exceptions import BoundaryError, DimensionError, StructureError
from ttbayes.tensor_core import from_vector, vectorize
from ttbayes.tt_format import (
    TensorTrain,
    TTMatrix,
    canonical_site,
    left_unfold,
    orthogonality_check,
    random_tt,
    right_unfold,
    shift_norm_left,
    shift_norm_right,
    thin_qr,
    to_site_n_canonical,
    tt_add,
    tt_contract,
    tt_dot,
    tt_norm,
    tt_outer,
    tt_round,
    tt_scale,
    tt_svd,
    tt_vec_outer,
    ttm_contract,
    ttm_diag,
    ttm_round,
    ttm_trace,
    ttm_vec_product,
)


def _dense_ttm(ttm):
    """Entrywise sum over rank indices for a TT-matrix."""
    rows, cols = ttm.shape
    out = np.zeros((rows, cols))
    for ridx in np.ndindex(*ttm.row_dims[::-1]):
        ridx = ridx[::-1]
        for cidx in np.ndindex(*ttm.col_dims[::-1]):
            cidx = cidx[::-1]
            acc = np.ones((1, 1))
            for core, i, j in zip(ttm.cores, ridx, cidx):
                acc = acc @ core[:, i, j, :]
            r = np.ravel_multi_index(ridx, ttm.row_dims, order="F")
            c = np.ravel_multi_index(cidx, ttm.col_dims, order="F")
            out[r, c] = acc[0, 0]
    return out


def test_contract_two_cores_triple_loop(rng):
    g1 = rng.standard_normal((1, 3, 2))
    g2 = rng.standard_normal((2, 4, 1))
    out = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            for r in range(2):
                out[i, j] += g1[0, i, r] * g2[r, j, 0]
    np.testing.assert_allclose(tt_contract(TensorTrain([g1, g2])), out, atol=1e-14)


def test_unfoldings_index_map():
    core = from_vector(np.arange(1, 9), (2, 2, 2))
    left, right = left_unfold(core), right_unfold(core)
    for a in range(2):
        for i in range(2):
            for b in range(2):
                assert left[a + 2 * i, b] == core[a, i, b]
                assert right[a, i + 2 * b] == core[a, i, b]


def test_thin_qr_signs(rng):
    a = rng.standard_normal((6, 3))
    q, r = thin_qr(a)
    assert np.all(np.diag(r) >= 0)
    np.testing.assert_allclose(q @ r, a, atol=1e-13)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-13)


def test_shift_left_orthogonalizes(rng):
    tt = random_tt((3, 4, 3), (1, 2, 3, 1), rng)
    out = shift_norm_left(tt, 3)
    assert orthogonality_check(out.cores[2], "right")
    np.testing.assert_allclose(tt_contract(out), tt_contract(tt), rtol=1e-12)


def test_site_one_from_three(rng):
    tt = random_tt((3, 4, 3), (1, 2, 3, 1), rng)
    tt = shift_norm_left(shift_norm_left(tt, 3), 2)
    assert orthogonality_check(tt.cores[1], "right")
    assert orthogonality_check(tt.cores[2], "right")
    assert canonical_site(tt) == 1


def test_sweep_right_reaches_last_site(rng):
    tt = random_tt((3, 3, 3, 3), (1, 2, 3, 2, 1), rng)
    for n in range(1, 4):
        tt = shift_norm_right(tt, n)
    for core in tt.cores[:-1]:
        assert orthogonality_check(core, "left")


@pytest.mark.parametrize("n", [1, 2, 3])
def test_site_n_norm_in_core(rng, n):
    tt = random_tt((3, 4, 3), (1, 2, 3, 1), rng)
    out = to_site_n_canonical(tt, n)
    assert canonical_site(out) == n or n == 1
    np.testing.assert_allclose(np.linalg.norm(out.cores[n - 1]),
                               np.linalg.norm(tt_contract(tt)), rtol=1e-12)


def test_shift_boundaries(rng):
    tt = random_tt((2, 2), (1, 2, 1), rng)
    with pytest.raises(BoundaryError):
        shift_norm_left(tt, 1)
    with pytest.raises(BoundaryError):
        shift_norm_right(tt, 2)


def test_tt_svd_exact_rank_recovery(rng):
    t = tt_contract(random_tt((3, 4, 5), (1, 2, 2, 1), rng))
    tt = tt_svd(t, eps=1e-12)
    assert tt.ranks == (1, 2, 2, 1)
    np.testing.assert_allclose(tt_contract(tt), t, atol=1e-12 * np.linalg.norm(t))


def test_tt_svd_fixed_ranks_and_eps_one(rng):
    t = rng.standard_normal((3, 3, 3))
    assert tt_svd(t, ranks=(1, 2, 2, 1)).ranks == (1, 2, 2, 1)
    assert tt_svd(t, eps=1.0).ranks == (1, 1, 1, 1)
    with pytest.raises(StructureError):
        tt_svd(t, ranks=(2, 2, 2, 1))
    with pytest.raises(ValueError):
        tt_svd(t)


def test_tt_svd_cat_image(cat_image_path):
    from ttbayes.experiments import image_to_tensor
    from ttbayes.io import read_image

    t = image_to_tensor(read_image(cat_image_path))
    tt = tt_svd(t, eps=0.1)
    err = np.linalg.norm(tt_contract(tt) - t) / np.linalg.norm(t)
    assert err <= 0.1
    assert tt.ranks[:3] == (1, 2, 5) and tt.ranks[-2:] == (4, 1)
    # frozen for the bundled image
    assert tt.ranks == (1, 2, 5, 13, 27, 26, 14, 4, 1)


def test_add_dense_oracle(rng):
    a = random_tt((2, 3, 4), (1, 2, 2, 1), rng)
    b = random_tt((2, 3, 4), (1, 3, 1, 1), rng)
    np.testing.assert_allclose(tt_contract(tt_add(a, b)), tt_contract(a) + tt_contract(b),
                               atol=1e-13)
    assert tt_add(a, b).ranks == (1, 5, 3, 1)
    with pytest.raises(DimensionError):
        tt_add(a, random_tt((2, 3, 3), (1, 1, 1, 1), rng))


def test_round_collapses_sum(rng):
    a = random_tt((3, 4, 3), (1, 2, 3, 1), rng)
    r = tt_round(tt_add(a, a), eps=1e-12)
    assert r.ranks == a.ranks
    np.testing.assert_allclose(tt_contract(r), 2 * tt_contract(a), rtol=1e-11)
    assert tt_round(a, eps=1.0).ranks == (1, 1, 1, 1)


def test_dot_norm_scale(rng):
    a = random_tt((2, 3, 4), (1, 2, 2, 1), rng)
    b = random_tt((2, 3, 4), (1, 2, 3, 1), rng)
    np.testing.assert_allclose(tt_dot(a, b), vectorize(tt_contract(a)) @ vectorize(tt_contract(b)))
    np.testing.assert_allclose(tt_norm(a), np.linalg.norm(tt_contract(a)))
    np.testing.assert_allclose(tt_contract(tt_scale(a, -2.5)), -2.5 * tt_contract(a))


def test_outer_dense_oracle(rng):
    a = random_tt((2, 3, 2), (1, 2, 2, 1), rng)
    va = vectorize(tt_contract(a))
    np.testing.assert_allclose(ttm_contract(tt_outer(a, a)), np.outer(va, va), atol=1e-13)


def test_vec_outer_unit_vector(rng):
    a = random_tt((2, 3, 2), (1, 2, 2, 1), rng)
    e1 = np.zeros(4)
    e1[0] = 1.0
    dense = ttm_contract(tt_vec_outer(a, e1))
    np.testing.assert_allclose(dense[:, 0], vectorize(tt_contract(a)))
    np.testing.assert_array_equal(dense[:, 1:], 0.0)


def test_ttm_operations(rng):
    cores = [rng.standard_normal((1, 2, 3, 2)), rng.standard_normal((2, 3, 2, 1))]
    ttm = TTMatrix(cores)
    dense = _dense_ttm(ttm)
    np.testing.assert_allclose(ttm_contract(ttm), dense, atol=1e-13)
    v = rng.standard_normal(6)
    np.testing.assert_allclose(ttm_vec_product(ttm, v), dense @ v, atol=1e-13)
    sq = TTMatrix([rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((2, 3, 3, 1))])
    dsq = _dense_ttm(sq)
    np.testing.assert_allclose(ttm_trace(sq), np.trace(dsq))
    np.testing.assert_allclose(vectorize(tt_contract(ttm_diag(sq))), np.diag(dsq))
    np.testing.assert_allclose(ttm_contract(ttm_round(sq, eps=1e-12)), dsq, atol=1e-12)
    np.testing.assert_allclose(ttm_contract(TTMatrix.from_tt(sq.as_tt(), (2, 3), (2, 3))), dsq)


def test_invalid_chain():
    with pytest.raises(StructureError):
        TensorTrain([np.zeros((1, 2, 2)), np.zeros((3, 2, 1))])


small_dims = st.lists(st.integers(2, 4), min_size=2, max_size=4).map(tuple)


@st.composite
def tt_strategy(draw):
    dims = draw(small_dims)
    ranks = (1,) + tuple(draw(st.integers(1, 3)) for _ in dims[1:]) + (1,)
    seed = draw(st.integers(0, 2**32 - 1))
    return random_tt(dims, ranks, seed)


@given(tt=tt_strategy(), data=st.data())
def test_canonical_form_preserves_tensor(tt, data):
    n = data.draw(st.integers(1, tt.order))
    out = to_site_n_canonical(tt, n)
    ref = tt_contract(tt)
    np.testing.assert_allclose(tt_contract(out), ref, atol=1e-10 * np.linalg.norm(ref))
    for k, core in enumerate(out.cores, start=1):
        if k < n:
            assert orthogonality_check(core, "left", 1e-8)
        elif k > n:
            assert orthogonality_check(core, "right", 1e-8)


@given(tt=tt_strategy(), eps=st.floats(0.01, 0.9))
def test_tt_svd_error_bound(tt, eps):
    t = tt_contract(tt)
    approx = tt_contract(tt_svd(t, eps=eps))
    assert np.linalg.norm(approx - t) <= eps * np.linalg.norm(t) * (1 + 1e-10)


@given(a=tt_strategy())
def test_round_error_bound_after_add(a):
    s = tt_add(a, tt_scale(a, 0.5))
    r = tt_round(s, eps=0.2)
    ref = tt_contract(s)
    assert np.linalg.norm(tt_contract(r) - ref) <= 0.2 * np.linalg.norm(ref) * (1 + 1e-10)
