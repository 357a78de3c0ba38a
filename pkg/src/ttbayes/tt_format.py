"""Tensor trains and TT-matrices.

A tensor train (TT) is a list of 3-way cores; core ``n`` has shape
``(R_n, I_n, R_{n+1})`` with ``R_1 = R_{N+1} = 1``. A TT-matrix (TTm) uses
4-way cores ``(R_n, I_n, J_n, R_{n+1})`` and represents a
``prod(I) x prod(J)`` matrix. Core unfoldings and vectorizations are
column-major, consistent with :mod:`ttbayes.tensor_core`.
"""

from dataclasses import dataclass
import math

import numpy as np

from .exceptions import BoundaryError, DimensionError, StructureError
from .tensor_core import as_tensor

__all__ = [
    "TensorTrain",
    "TTMatrix",
    "tt_contract",
    "left_unfold",
    "right_unfold",
    "orthogonality_check",
    "thin_qr",
    "shift_norm_left",
    "shift_norm_right",
    "to_site_n_canonical",
    "canonical_site",
    "tt_svd",
    "tt_add",
    "tt_scale",
    "tt_round",
    "tt_dot",
    "tt_norm",
    "ttm_contract",
    "ttm_vec_product",
    "ttm_diag",
    "ttm_trace",
    "ttm_round",
    "tt_outer",
    "tt_vec_outer",
    "random_tt",
]


def _check_chain(cores, ndim):
    if len(cores) == 0:
        raise StructureError("a tensor train needs at least one core")
    for k, c in enumerate(cores):
        if c.ndim != ndim:
            raise StructureError(f"core {k + 1} has {c.ndim} modes, expected {ndim}")
    if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
        raise StructureError(
            f"boundary ranks must be 1, got {cores[0].shape[0]} and {cores[-1].shape[-1]}"
        )
    for k in range(len(cores) - 1):
        if cores[k].shape[-1] != cores[k + 1].shape[0]:
            raise StructureError(
                f"rank mismatch between core {k + 1} ({cores[k].shape}) "
                f"and core {k + 2} ({cores[k + 1].shape})"
            )


@dataclass(frozen=True)
class TensorTrain:
    """Tensor train with cores of shape ``(R_n, I_n, R_{n+1})``.

    Parameters
    ----------
    cores : list of ndarray
        The TT-cores. They are copied to float64 and validated.
    """

    cores: tuple

    def __init__(self, cores):
        cores = tuple(np.array(c, dtype=np.float64) for c in cores)
        _check_chain(cores, 3)
        object.__setattr__(self, "cores", cores)

    @property
    def order(self):
        return len(self.cores)

    @property
    def dims(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self):
        """Full rank chain ``(R_1, ..., R_{N+1})``."""
        return tuple(c.shape[0] for c in self.cores) + (1,)

    @property
    def n_params(self):
        return sum(c.size for c in self.cores)

    def full(self):
        return tt_contract(self)

    def __neg__(self):
        return tt_scale(self, -1.0)

    def __repr__(self):
        return f"TensorTrain(dims={self.dims}, ranks={self.ranks})"


@dataclass(frozen=True)
class TTMatrix:
    """TT-matrix with cores of shape ``(R_n, I_n, J_n, R_{n+1})``."""

    cores: tuple

    def __init__(self, cores):
        cores = tuple(np.array(c, dtype=np.float64) for c in cores)
        _check_chain(cores, 4)
        object.__setattr__(self, "cores", cores)

    @property
    def order(self):
        return len(self.cores)

    @property
    def row_dims(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_dims(self):
        return tuple(c.shape[2] for c in self.cores)

    @property
    def ranks(self):
        return tuple(c.shape[0] for c in self.cores) + (1,)

    @property
    def shape(self):
        return (math.prod(self.row_dims), math.prod(self.col_dims))

    def full(self):
        return ttm_contract(self)

    def as_tt(self):
        """View as a TT whose mode ``n`` merges ``(i_n, j_n)`` with ``i_n`` fastest."""
        return TensorTrain(
            [c.reshape(c.shape[0], c.shape[1] * c.shape[2], c.shape[3], order="F")
             for c in self.cores]
        )

    @classmethod
    def from_tt(cls, tt, row_dims, col_dims):
        cores = []
        for c, i, j in zip(tt.cores, row_dims, col_dims):
            cores.append(c.reshape(c.shape[0], i, j, c.shape[2], order="F"))
        return cls(cores)

    def __repr__(self):
        return (f"TTMatrix(row_dims={self.row_dims}, col_dims={self.col_dims}, "
                f"ranks={self.ranks})")


# ---------------------------------------------------------------------------
# contraction and unfoldings


def left_unfold(core):
    """``(R_n I_n) x R_{n+1}`` unfolding of a core."""
    r0, i, r1 = core.shape
    return core.reshape(r0 * i, r1, order="F")


def right_unfold(core):
    """``R_n x (I_n R_{n+1})`` unfolding of a core."""
    r0, i, r1 = core.shape
    return core.reshape(r0, i * r1, order="F")


def _fold_left(mat, shape):
    return mat.reshape(shape, order="F")


def tt_contract(tt):
    """Dense tensor represented by ``tt``."""
    cores = tt.cores
    acc = cores[0].reshape(cores[0].shape[1], cores[0].shape[2], order="F")
    for core in cores[1:]:
        _, i, r1 = core.shape
        p = acc.shape[0]
        acc = (acc @ right_unfold(core)).reshape(p * i, r1, order="F")
    return acc.reshape(tt.dims, order="F")


def orthogonality_check(core, side, tol=1e-10):
    """Whether ``core`` is left- or right-orthogonal within ``tol`` (Frobenius)."""
    core = np.asarray(core)
    if side == "left":
        g = left_unfold(core)
        resid = g.T @ g - np.eye(g.shape[1])
    elif side == "right":
        g = right_unfold(core)
        resid = g @ g.T - np.eye(g.shape[0])
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return bool(np.linalg.norm(resid) <= tol)


def thin_qr(a):
    """Householder thin QR with a non-negative diagonal in ``R``."""
    q, r = np.linalg.qr(a, mode="reduced")
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s, r * s[:, None]


def _qr_core_right(core):
    """Right-orthogonalize ``core``; returns the new core and ``R^R``."""
    r0, i, r1 = core.shape
    q, r = thin_qr(right_unfold(core).T)
    k = q.shape[1]
    return q.T.reshape(k, i, r1, order="F"), r


def _qr_core_left(core):
    """Left-orthogonalize ``core``; returns the new core and ``R^L``."""
    r0, i, r1 = core.shape
    q, r = thin_qr(left_unfold(core))
    k = q.shape[1]
    return q.reshape(r0, i, k, order="F"), r


def _absorb_last(core, mat):
    """``core x_3 mat``."""
    r0, i, _ = core.shape
    out = left_unfold(core) @ mat.T
    return out.reshape(r0, i, mat.shape[0], order="F")


def _absorb_first(core, mat):
    """``core x_1 mat``."""
    _, i, r1 = core.shape
    out = mat @ right_unfold(core)
    return out.reshape(mat.shape[0], i, r1, order="F")


def shift_norm_left(tt, n):
    """Move the norm from core ``n`` to core ``n - 1`` (1-based, ``2 <= n <= N``)."""
    if not 2 <= n <= tt.order:
        raise BoundaryError(f"cannot shift the norm left from core {n} of {tt.order}")
    cores = list(tt.cores)
    cores[n - 1], r = _qr_core_right(cores[n - 1])
    cores[n - 2] = _absorb_last(cores[n - 2], r)
    return TensorTrain(cores)


def shift_norm_right(tt, n):
    """Move the norm from core ``n`` to core ``n + 1`` (1-based, ``1 <= n < N``)."""
    if not 1 <= n <= tt.order - 1:
        raise BoundaryError(f"cannot shift the norm right from core {n} of {tt.order}")
    cores = list(tt.cores)
    cores[n - 1], r = _qr_core_left(cores[n - 1])
    cores[n] = _absorb_first(cores[n], r)
    return TensorTrain(cores)


def to_site_n_canonical(tt, n):
    """Bring ``tt`` into site-``n``-mixed-canonical form."""
    if not 1 <= n <= tt.order:
        raise BoundaryError(f"site {n} outside 1..{tt.order}")
    for k in range(1, n):
        tt = shift_norm_right(tt, k)
    for k in range(tt.order, n, -1):
        tt = shift_norm_left(tt, k)
    return tt


def canonical_site(tt, tol=1e-10):
    """Site ``n`` at which ``tt`` is mixed-canonical, or ``None``."""
    left = [orthogonality_check(c, "left", tol) for c in tt.cores]
    right = [orthogonality_check(c, "right", tol) for c in tt.cores]
    for n in range(1, tt.order + 1):
        if all(left[: n - 1]) and all(right[n:]):
            return n
    return None


# ---------------------------------------------------------------------------
# TT-SVD, addition, rounding


def _truncation_rank(s, delta, max_rank=None):
    """Smallest rank whose discarded tail norm is strictly below ``delta``.

    Ties at the threshold keep the singular vector.
    """
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[k] = ||s[k:]||
    rank = len(s)
    for k in range(1, len(s)):
        if tail[k] < delta:
            rank = k
            break
    if max_rank is not None:
        rank = min(rank, max_rank)
    return max(rank, 1)


def _resolve_ranks(ranks, order):
    if ranks is None:
        return None
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != order + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise StructureError(
            f"rank chain must have length {order + 1} with unit ends, got {ranks}"
        )
    return ranks


def tt_svd(t, eps=None, ranks=None):
    """Decompose a dense tensor into a TT by sequential truncated SVDs.

    Parameters
    ----------
    t : array_like
        Dense tensor.
    eps : float, optional
        Relative Frobenius error bound in ``(0, 1]``. Each of the ``N - 1``
        truncations discards at most ``eps * ||t|| / sqrt(N - 1)``.
    ranks : sequence of int, optional
        Explicit rank chain ``(1, R_2, ..., R_N, 1)``; used as upper bounds.

    Returns
    -------
    TensorTrain
    """
    t = as_tensor(t)
    dims = t.shape
    order = len(dims)
    ranks = _resolve_ranks(ranks, order)
    if eps is None and ranks is None:
        raise ValueError("tt_svd needs eps or ranks")
    if eps is not None and not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    norm = np.linalg.norm(t)
    if norm == 0 and ranks is None:
        return TensorTrain([np.zeros((1, d, 1)) for d in dims])
    if order == 1:
        return TensorTrain([t.reshape(1, dims[0], 1)])
    delta = eps * norm / math.sqrt(order - 1) if eps is not None else 0.0
    force_one = eps is not None and eps >= 1
    cores = []
    rest = t.reshape(dims[0], -1, order="F")
    r_prev = 1
    for k in range(order - 1):
        mat = rest.reshape(r_prev * dims[k], -1, order="F")
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        cap = ranks[k + 1] if ranks is not None else None
        if force_one:
            r = 1
        elif eps is None:
            r = max(1, min(cap, len(s)))
        else:
            r = _truncation_rank(s, delta, cap)
        cores.append(u[:, :r].reshape(r_prev, dims[k], r, order="F"))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(rest.reshape(r_prev, dims[-1], 1, order="F"))
    return TensorTrain(cores)


def tt_scale(tt, alpha):
    cores = list(tt.cores)
    cores[0] = cores[0] * alpha
    return TensorTrain(cores)


def tt_add(a, b):
    """Sum of two tensor trains by block-stacking the cores."""
    if a.dims != b.dims:
        raise DimensionError(f"cannot add TTs with dims {a.dims} and {b.dims}")
    if a.order == 1:
        return TensorTrain([a.cores[0] + b.cores[0]])
    cores = []
    for k, (ca, cb) in enumerate(zip(a.cores, b.cores)):
        ra0, i, ra1 = ca.shape
        rb0, _, rb1 = cb.shape
        if k == 0:
            c = np.concatenate([ca, cb], axis=2)
        elif k == a.order - 1:
            c = np.concatenate([ca, cb], axis=0)
        else:
            c = np.zeros((ra0 + rb0, i, ra1 + rb1))
            c[:ra0, :, :ra1] = ca
            c[ra0:, :, ra1:] = cb
        cores.append(c)
    return TensorTrain(cores)


def _orthogonalize_right_to_left(cores):
    """Right-orthogonalize cores ``N..2`` in place; returns the list."""
    for k in range(len(cores) - 1, 0, -1):
        cores[k], r = _qr_core_right(cores[k])
        cores[k - 1] = _absorb_last(cores[k - 1], r)
    return cores


def tt_round(tt, eps=None, max_ranks=None):
    """Re-truncate a TT to relative accuracy ``eps`` and/or rank caps.

    Right-to-left QR sweep followed by a left-to-right truncated-SVD sweep.
    """
    if eps is None and max_ranks is None:
        raise ValueError("tt_round needs eps or max_ranks")
    order = tt.order
    if order == 1:
        return TensorTrain(tt.cores)
    max_ranks = _resolve_ranks(max_ranks, order)
    cores = _orthogonalize_right_to_left(list(tt.cores))
    norm = np.linalg.norm(cores[0])
    if norm == 0:
        return TensorTrain([np.zeros((1, d, 1)) for d in tt.dims])
    delta = eps * norm / math.sqrt(order - 1) if eps is not None else 0.0
    force_one = eps is not None and eps >= 1
    for k in range(order - 1):
        r0, i, r1 = cores[k].shape
        u, s, vt = np.linalg.svd(left_unfold(cores[k]), full_matrices=False)
        cap = max_ranks[k + 1] if max_ranks is not None else None
        if force_one:
            r = 1
        elif eps is None:
            r = max(1, min(cap, len(s)))
        else:
            r = _truncation_rank(s, delta, cap)
        cores[k] = u[:, :r].reshape(r0, i, r, order="F")
        cores[k + 1] = _absorb_first(cores[k + 1], s[:r, None] * vt[:r])
    return TensorTrain(cores)


def tt_dot(a, b):
    """Inner product ``<vec(a), vec(b)>`` without forming dense tensors."""
    if a.dims != b.dims:
        raise DimensionError(f"cannot take inner product of {a.dims} and {b.dims}")
    acc = np.ones((1, 1))
    for ca, cb in zip(a.cores, b.cores):
        acc = np.einsum("ab,aic,bid->cd", acc, ca, cb, optimize=True)
    return float(acc[0, 0])


def tt_norm(tt):
    cores = _orthogonalize_right_to_left(list(tt.cores))
    return float(np.linalg.norm(cores[0]))


# ---------------------------------------------------------------------------
# TT-matrices


def ttm_contract(ttm):
    """Dense ``prod(I) x prod(J)`` matrix represented by ``ttm``."""
    order = ttm.order
    full = tt_contract(ttm.as_tt())
    inter = full.reshape(
        tuple(x for pair in zip(ttm.row_dims, ttm.col_dims) for x in pair), order="F"
    )
    perm = list(range(0, 2 * order, 2)) + list(range(1, 2 * order, 2))
    return inter.transpose(perm).reshape(ttm.shape, order="F")


def ttm_vec_product(ttm, v):
    """Matrix-vector product ``A v`` with ``A`` in TTm format and dense ``v``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    rows, cols = ttm.shape
    if v.size != cols:
        raise DimensionError(f"vector of length {v.size} does not match {cols} columns")
    # w has axes (done rows, rank, remaining cols) in column-major layout
    w = v.reshape(1, 1, cols, order="F")
    for core in ttm.cores:
        r0, i, j, r1 = core.shape
        p, _, q = w.shape
        w = w.reshape(p, r0, j, q // j, order="F")
        w = np.einsum("prjq,rijs->pisq", w, core, optimize=True)
        w = w.reshape(p * i, r1, q // j, order="F")
    return w.reshape(rows, order="F")


def ttm_diag(ttm):
    """Diagonal of a square TTm (``I_n == J_n``) as a TT."""
    if ttm.row_dims != ttm.col_dims:
        raise DimensionError("diagonal needs matching row and column dims")
    cores = [np.einsum("aiib->aib", c) for c in ttm.cores]
    return TensorTrain(cores)


def ttm_trace(ttm):
    acc = np.ones((1, 1))
    for c in ttm.cores:
        acc = acc @ np.einsum("aiib->ab", c)
    return float(acc[0, 0])


def ttm_round(ttm, eps=None, max_ranks=None):
    rounded = tt_round(ttm.as_tt(), eps=eps, max_ranks=max_ranks)
    return TTMatrix.from_tt(rounded, ttm.row_dims, ttm.col_dims)


def tt_outer(a, b):
    """TTm of ``vec(a) vec(b)^T`` with a rank-1 connection between core pairs."""
    if a.order != b.order:
        raise DimensionError(f"outer product needs equal orders, got {a.order} and {b.order}")
    cores = []
    for ca, cb in zip(a.cores, b.cores):
        ra0, i, ra1 = ca.shape
        rb0, j, rb1 = cb.shape
        c = np.einsum("aib,cjd->acijbd", ca, cb)
        cores.append(c.reshape(ra0 * rb0, i, j, ra1 * rb1, order="F"))
    return TTMatrix(cores)


def tt_vec_outer(a, b):
    """TTm of ``vec(a) b^T`` for a dense vector ``b``.

    The column index of ``b`` is attached to the first core; the other cores
    get unit column dimensions.
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    cores = []
    for k, ca in enumerate(a.cores):
        r0, i, r1 = ca.shape
        if k == 0:
            cores.append(np.einsum("aic,j->aijc", ca, b))
        else:
            cores.append(ca.reshape(r0, i, 1, r1))
    return TTMatrix(cores)


def random_tt(dims, ranks, rng=None):
    """TT with i.i.d. standard-normal cores."""
    rng = np.random.default_rng(rng)
    ranks = _resolve_ranks(ranks, len(dims))
    return TensorTrain(
        [rng.standard_normal((ranks[k], dims[k], ranks[k + 1])) for k in range(len(dims))]
    )
