"""Dense tensor primitives.

Tensors are plain :class:`numpy.ndarray` objects of dtype float64. Every
flattening in this package (vectorization, unfoldings, core unfoldings) uses
first-index-fastest ordering, i.e. NumPy's ``order="F"``. Mode indices in the
public functions are 1-based.
"""

import numpy as np

from .exceptions import DimensionError, ModeIndexError

__all__ = [
    "as_tensor",
    "vectorize",
    "from_vector",
    "mode_n_unfold",
    "refold",
    "mode_n_product",
    "kronecker",
    "khatri_rao",
]


def as_tensor(t):
    """Return ``t`` as a float64 array with at least one mode."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise DimensionError(f"every mode needs size >= 1, got {t.shape}")
    return t


def _check_mode(n, order):
    if not 1 <= n <= order:
        raise ModeIndexError(f"mode index {n} outside 1..{order}")


def vectorize(t):
    """Column-major vectorization ``vec(t)``."""
    return as_tensor(t).ravel(order="F")


def from_vector(v, dims):
    """Inverse of :func:`vectorize` for a given dimension list."""
    v = np.asarray(v, dtype=np.float64).ravel()
    dims = tuple(int(d) for d in dims)
    if v.size != int(np.prod(dims)):
        raise DimensionError(f"vector of length {v.size} cannot hold dims {dims}")
    return v.reshape(dims, order="F")


def mode_n_unfold(t, n):
    """Mode-``n`` unfolding ``Y_(n)`` of shape ``I_n x prod_{k != n} I_k``.

    Columns follow the Kolda ordering: the remaining mode indices vary with
    the lowest mode fastest.

    Examples
    --------
    >>> t = from_vector(np.arange(1, 9), (2, 2, 2))
    >>> mode_n_unfold(t, 2)
    array([[1., 2., 5., 6.],
           [3., 4., 7., 8.]])
    """
    t = as_tensor(t)
    _check_mode(n, t.ndim)
    moved = np.moveaxis(t, n - 1, 0)
    return moved.reshape(t.shape[n - 1], -1, order="F")


def refold(m, n, dims):
    """Rebuild the tensor of shape ``dims`` whose mode-``n`` unfolding is ``m``."""
    m = np.asarray(m, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    _check_mode(n, len(dims))
    rest = int(np.prod(dims)) // dims[n - 1]
    if m.ndim != 2 or m.shape != (dims[n - 1], rest):
        raise DimensionError(
            f"matrix of shape {m.shape} is not a mode-{n} unfolding of {dims}"
        )
    moved_shape = (dims[n - 1],) + dims[: n - 1] + dims[n:]
    return np.moveaxis(m.reshape(moved_shape, order="F"), 0, n - 1)


def mode_n_product(t, a, n):
    """The ``n``-mode product ``t x_n a``.

    ``a`` has shape ``J x I_n``; mode ``n`` of the result has size ``J``.
    """
    t = as_tensor(t)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    _check_mode(n, t.ndim)
    if a.shape[1] != t.shape[n - 1]:
        raise DimensionError(
            f"matrix with {a.shape[1]} columns cannot act on mode {n} of size "
            f"{t.shape[n - 1]}"
        )
    out = np.tensordot(a, t, axes=([1], [n - 1]))
    return np.moveaxis(out, 0, n - 1)


def kronecker(a, b):
    """Kronecker product of two matrices."""
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def khatri_rao(a, b):
    """Column-wise Kronecker product; column ``k`` is ``kron(a_k, b_k)``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"khatri_rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}"
        )
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])
