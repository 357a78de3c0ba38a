"""Binary tensor, TT, TT-matrix and model files; images; CSV and manifests.

All binary formats are little-endian and store float64 data with the first
index varying fastest.

========  ==============================================================
``TBT1``  u32 N, N x u64 dims, data
``TTT1``  u32 N, (N+1) x u64 ranks, N x u64 dims, cores
``TTM1``  u32 N, (N+1) x u64 ranks, N x u64 row dims, N x u64 col dims,
          cores
``TBM1``  u8 kind, u32 N, N x u64 dims, u32 L, L x u64 ranks, f64 noise
          variance, per component (u64 K, K means, K x K covariance),
          then CP weights or (u8 flag, Tucker core)
========  ==============================================================
"""

import csv
import json
import math
import struct

import numpy as np

from .als_engine import BayesTDModel
from .exceptions import FormatError
from .gaussian import GaussianComponent
from .tt_format import TensorTrain, TTMatrix

__all__ = [
    "MAGICS",
    "write_tensor",
    "read_tensor",
    "write_tt",
    "read_tt",
    "write_ttm",
    "read_ttm",
    "write_model",
    "read_model",
    "read_any",
    "write_any",
    "describe",
    "read_image",
    "write_image",
    "write_csv",
    "write_json",
]

MAGICS = {b"TBT1": "tensor", b"TTT1": "tt", b"TTM1": "ttm", b"TBM1": "model"}
_KIND_TAGS = {"cp": 0, "tucker": 1, "tt": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def u8(self):
        return self.take("<B")[0]

    def u32(self):
        return self.take("<I")[0]

    def u64s(self, n):
        return tuple(int(v) for v in self.take(f"<{n}Q")) if n else ()

    def f64(self, n):
        size = 8 * n
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += size
        return out

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _open(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    reader = _Reader(data, path)
    reader.pos = 4
    return reader


def _f64_bytes(a):
    return np.asarray(a, dtype="<f8").ravel(order="F").tobytes()


def _u64_bytes(values):
    return struct.pack(f"<{len(values)}Q", *values)


def _write(path, parts):
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def write_tensor(path, tensor):
    """Write a dense tensor as ``TBT1``."""
    t = np.asarray(tensor, dtype=np.float64)
    _write(path, [b"TBT1", struct.pack("<I", t.ndim), _u64_bytes(t.shape), _f64_bytes(t)])


def read_tensor(path):
    """Read a ``TBT1`` dense tensor."""
    r = _open(path, b"TBT1")
    dims = r.u64s(r.u32())
    t = r.f64(math.prod(dims)).reshape(dims, order="F")
    r.finish()
    return t


def write_tt(path, tt):
    """Write a :class:`TensorTrain` as ``TTT1``."""
    _write(path, [b"TTT1", struct.pack("<I", tt.order), _u64_bytes(tt.ranks),
                  _u64_bytes(tt.dims)] + [_f64_bytes(c) for c in tt.cores])


def read_tt(path):
    """Read a ``TTT1`` tensor train."""
    r = _open(path, b"TTT1")
    n = r.u32()
    ranks, dims = r.u64s(n + 1), r.u64s(n)
    cores = [r.f64(ranks[k] * dims[k] * ranks[k + 1]).reshape(
        (ranks[k], dims[k], ranks[k + 1]), order="F") for k in range(n)]
    r.finish()
    try:
        return TensorTrain(cores)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_ttm(path, ttm):
    """Write a :class:`TTMatrix` as ``TTM1``."""
    _write(path, [b"TTM1", struct.pack("<I", ttm.order), _u64_bytes(ttm.ranks),
                  _u64_bytes(ttm.row_dims), _u64_bytes(ttm.col_dims)]
           + [_f64_bytes(c) for c in ttm.cores])


def read_ttm(path):
    """Read a ``TTM1`` TT-matrix."""
    r = _open(path, b"TTM1")
    n = r.u32()
    ranks, rows, cols = r.u64s(n + 1), r.u64s(n), r.u64s(n)
    cores = []
    for k in range(n):
        shape = (ranks[k], rows[k], cols[k], ranks[k + 1])
        cores.append(r.f64(math.prod(shape)).reshape(shape, order="F"))
    r.finish()
    try:
        return TTMatrix(cores)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_model(path, model):
    """Write a :class:`BayesTDModel` checkpoint as ``TBM1``."""
    parts = [b"TBM1", struct.pack("<BI", _KIND_TAGS[model.kind], model.order),
             _u64_bytes(model.dims), struct.pack("<I", len(model.ranks)),
             _u64_bytes(model.ranks), struct.pack("<d", model.noise_var)]
    for comp in model.components:
        parts += [struct.pack("<Q", comp.size), _f64_bytes(comp.mean), _f64_bytes(comp.cov)]
    if model.kind == "cp":
        parts.append(_f64_bytes(model.weights))
    elif model.kind == "tucker":
        has_core = model.core is not None
        parts.append(struct.pack("<B", int(has_core)))
        if has_core:
            parts.append(_f64_bytes(model.core))
    _write(path, parts)


def read_model(path):
    """Read a ``TBM1`` model checkpoint."""
    r = _open(path, b"TBM1")
    tag = r.u8()
    if tag not in _TAG_KINDS:
        raise FormatError(f"{path}: unknown kind tag {tag}")
    kind = _TAG_KINDS[tag]
    dims = r.u64s(r.u32())
    ranks = r.u64s(r.u32())
    noise_var = r.take("<d")[0]
    comps = []
    for _ in dims:
        k = r.take("<Q")[0]
        mean = r.f64(k)
        cov = r.f64(k * k).reshape((k, k), order="F")
        comps.append(GaussianComponent(mean, cov))
    weights = core = None
    if kind == "cp":
        weights = r.f64(ranks[0])
    elif kind == "tucker" and r.u8():
        core = r.f64(math.prod(ranks)).reshape(ranks, order="F")
    r.finish()
    try:
        return BayesTDModel(kind, dims, ranks, comps, noise_var, weights=weights, core=core)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


_READERS = {"tensor": read_tensor, "tt": read_tt, "ttm": read_ttm, "model": read_model}
_WRITERS = {"tensor": write_tensor, "tt": write_tt, "ttm": write_ttm, "model": write_model}


def file_kind(path):
    """Format name of a binary file from its magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic not in MAGICS:
        raise FormatError(f"{path}: unrecognized magic {magic!r}")
    return MAGICS[magic]


def read_any(path):
    """Read any binary format; returns ``(kind, object)``."""
    kind = file_kind(path)
    return kind, _READERS[kind](path)


def write_any(path, kind, obj):
    _WRITERS[kind](path, obj)


def describe(kind, obj):
    """JSON-friendly summary of an object read by :func:`read_any`."""
    if kind == "tensor":
        return {"format": "TBT1", "dims": list(obj.shape),
                "norm": float(np.linalg.norm(obj))}
    if kind == "tt":
        return {"format": "TTT1", "dims": list(obj.dims), "ranks": list(obj.ranks),
                "n_params": int(sum(c.size for c in obj.cores))}
    if kind == "ttm":
        return {"format": "TTM1", "row_dims": list(obj.row_dims),
                "col_dims": list(obj.col_dims), "ranks": list(obj.ranks)}
    return {"format": "TBM1", "kind": obj.kind, "dims": list(obj.dims),
            "ranks": list(obj.ranks), "noise_var": obj.noise_var,
            "component_sizes": [c.size for c in obj.components]}


def read_image(path):
    """Grayscale image as a float array in ``[0, 1]``; colour is converted to luminance."""
    from PIL import Image

    try:
        with Image.open(path) as img:
            gray = img.convert("L") if img.mode != "L" else img
            return np.asarray(gray, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_image(path, image):
    """Write an image in ``[0, 1]`` as 8-bit grayscale (PGM for ``.pgm``)."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def write_csv(path, rows, columns=None):
    """Write a list of dicts as CSV."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
