"""Sampled Gaussian derivative kernels, separable 3D filtering and Gaussian 2-jets.

Kernels are applied as correlations, ``out[i] = sum_t coeffs[t] * f[i + t - radius]``,
so the first-order kernel measures ``df/dx`` with a positive sign.

A 2-jet of a C-channel field has 10*C channels; input channel ``c`` owns
slots ``10*c .. 10*c + 9`` laid out as ``JET_LABELS``.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import _backend
from .errors import KernelLargerThanAxisWithReflect, NonPositiveSigma, ShapeMismatch

JET_LABELS = ("u", "u_x", "u_y", "u_z", "u_xx", "u_xy", "u_yy", "u_xz", "u_yz", "u_zz")

# derivative orders (x, y, z) of each jet slot
JET_ORDERS = (
    (0, 0, 0),
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (2, 0, 0), (1, 1, 0), (0, 2, 0), (1, 0, 1), (0, 1, 1), (0, 0, 2),
)
PADDINGS = ("reflect", "zero")


@dataclass(frozen=True, eq=False)
class Kernel1D:
    sigma: float
    order: int
    radius: int
    coeffs: np.ndarray = field(repr=False)

    @property
    def width(self):
        return 2 * self.radius + 1


def default_radius(sigma):
    return max(1, int(math.ceil(3.0 * sigma)))


@lru_cache(maxsize=256)
def _kernel(sigma, order, radius):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * sigma * sigma)) / (math.sqrt(2.0 * math.pi) * sigma)
    if order == 0:
        c = g / g.sum()
    elif order == 1:
        raw = t / sigma**2 * g  # -G'(t): correlation form of d/dx
        c = raw / np.dot(t, raw)
    else:
        raw = (t * t / sigma**4 - 1.0 / sigma**2) * g
        raw = raw - g * (raw.sum() / g.sum())
        c = raw / np.dot(t * t / 2.0, raw)
    c.setflags(write=False)
    return Kernel1D(float(sigma), order, radius, c)


def make_kernel(sigma, order, radius=None):
    """Sampled Gaussian derivative of ``order`` 0, 1 or 2, calibrated for exact polynomial response.

    Order 0 sums to 1. Order 1 sums to 0 and maps the ramp ``f(i) = i`` to 1.
    Order 2 sums to 0, annihilates the ramp and maps ``i**2 / 2`` to 1.
    """
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    radius = default_radius(sigma) if radius is None else int(radius)
    if radius < (1 if order else 0):
        raise ValueError(f"radius {radius} too small for order {order}")
    return _kernel(float(sigma), order, radius)


class AxisOperator:
    """A 1D filter along one axis of length ``n`` as a sparse (m x n) matrix.

    Boundary handling is folded into the matrix; ``stride`` keeps every
    ``stride``-th output row. The adjoint is the CSR transpose.
    """

    def __init__(self, n, kernel, padding="reflect", stride=1):
        if padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")
        r = kernel.radius
        if padding == "reflect" and r > n - 1 and r > 0:
            raise KernelLargerThanAxisWithReflect(
                f"kernel radius {r} needs an axis of at least {r + 1} samples, got {n}")
        rows = np.arange(0, n, stride)
        rr, cc, vv = [], [], []
        for t in range(-r, r + 1):
            p = rows + t
            coef = kernel.coeffs[t + r]
            if padding == "reflect":
                p = np.where(p < 0, -p, p)
                p = np.where(p > n - 1, 2 * (n - 1) - p, p)
                keep = np.ones(len(rows), dtype=bool)
            else:
                keep = (p >= 0) & (p < n)
            rr.append(np.arange(len(rows))[keep])
            cc.append(p[keep])
            vv.append(np.full(keep.sum(), coef))
        m = len(rows)
        mat = sp.coo_matrix(
            (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(m, n)).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        self.n, self.m = n, m
        self.matrix = mat
        self._fwd = self._pack(mat)
        tr = mat.T.tocsr()
        tr.sort_indices()
        self._adj = self._pack(tr)

    @staticmethod
    def _pack(mat):
        """Split ``mat`` into a band of rows sharing one kernel plus CSR pieces for the rest."""
        band = _find_band(mat)
        m = mat.shape[0]
        a, b = (band[0], band[1]) if band else (m, m)
        pieces = []
        for lo, hi in ((0, a), (b, m)):
            if hi > lo:
                ip = mat.indptr[lo:hi + 1]
                sl = slice(ip[0], ip[-1])
                pieces.append((lo, hi, (ip - ip[0]).astype(np.int32),
                               mat.indices[sl].astype(np.int32), _by_dtype(mat.data[sl])))
        if band:
            band = (a, b, band[2], _by_dtype(band[3]))
        return band, pieces

    def apply(self, a, axis, adjoint=False):
        """Filter contiguous array ``a`` along ``axis``."""
        band, pieces = self._adj if adjoint else self._fwd
        n_in, n_out = (self.m, self.n) if adjoint else (self.n, self.m)
        if a.shape[axis] != n_in:
            raise ShapeMismatch(f"axis {axis} has length {a.shape[axis]}, operator expects {n_in}")
        a = np.ascontiguousarray(a)
        outer = int(np.prod(a.shape[:axis], dtype=np.int64))
        inner = int(np.prod(a.shape[axis + 1:], dtype=np.int64))
        shape = list(a.shape)
        shape[axis] = n_out
        out = np.empty(shape, dtype=a.dtype)
        src3 = a.reshape(outer, n_in, inner)
        out3 = out.reshape(outer, n_out, inner)
        for lo, hi, indptr, indices, data in pieces:
            _backend.apply_csr_axis(src3, indptr, indices, data[a.dtype], out3[:, lo:hi, :])
        if band:
            lo, hi, first, coeffs = band
            _backend.apply_band_axis(src3, coeffs[a.dtype], lo + first, out3[:, lo:hi, :])
        return out


def _by_dtype(x):
    return {np.dtype(np.float64): np.ascontiguousarray(x, dtype=np.float64),
            np.dtype(np.float32): np.ascontiguousarray(x, dtype=np.float32)}


def _find_band(mat):
    """Longest run of rows ``i`` reading columns ``i + off .. i + off + L - 1`` with identical weights.

    Returns ``(first_row, end_row, off, weights)`` or None.
    """
    m = mat.shape[0]
    if m == 0:
        return None
    ip, ix, dv = mat.indptr, mat.indices, mat.data

    def row(i):
        return ix[ip[i]:ip[i + 1]], dv[ip[i]:ip[i + 1]]

    mid = m // 2
    cols, ref = row(mid)
    L = len(cols)
    if L == 0 or not np.array_equal(cols, np.arange(cols[0], cols[0] + L)):
        return None
    off = int(cols[0]) - mid

    def match(i):
        c, d = row(i)
        return len(c) == L and c[0] == i + off and np.array_equal(c, np.arange(i + off, i + off + L)) \
            and np.array_equal(d, ref)

    a = mid
    while a > 0 and match(a - 1):
        a -= 1
    b = mid + 1
    while b < m and match(b):
        b += 1
    return a, b, off, ref.copy()


@lru_cache(maxsize=512)
def axis_operator(n, sigma, order, radius, padding="reflect", stride=1):
    return AxisOperator(n, make_kernel(sigma, order, radius), padding, stride)


def _as5d(v):
    a = np.asarray(v)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    if a.ndim == 4:
        return np.ascontiguousarray(a)[None], True
    if a.ndim != 5:
        raise ShapeMismatch(f"expected (W, H, D, C) or (B, W, H, D, C), got {a.shape}")
    return np.ascontiguousarray(a), False


def conv_separable(v, kx, ky, kz, padding="reflect"):
    """Three sequential 1D correlations along x, y, z; channels independent, shape preserved."""
    a, single = _as5d(v)
    for axis, k in zip((1, 2, 3), (kx, ky, kz)):
        op = AxisOperator(a.shape[axis], k, padding) if not isinstance(k, AxisOperator) else k
        a = op.apply(a, axis)
    return a[0] if single else a


def _ops(shape, sigma, radius, padding, stride):
    return [
        [axis_operator(shape[ax], float(sigma), o, radius, padding, stride) for o in range(3)]
        for ax in range(3)
    ]


def jet2(v, sigma, padding="reflect", stride=1, radius=None):
    """Gaussian 2-jet of every channel of ``v``.

    ``v`` is ``(W, H, D, C)`` or batched ``(B, W, H, D, C)``; the result has
    the same leading layout with 10*C channels (see ``JET_LABELS``). With
    ``stride`` 2 only even voxel indices are evaluated, which is identical to
    subsampling the full-resolution jet.
    """
    a, single = _as5d(v)
    radius = default_radius(sigma) if radius is None else int(radius)
    make_kernel(sigma, 2, radius)  # validates sigma/radius
    ops = _ops(a.shape[1:4], sigma, radius, padding, stride)
    xs = [ops[0][i].apply(a, 1) for i in range(3)]
    xy = {(i, j): ops[1][j].apply(xs[i], 2) for i in range(3) for j in range(3 - i)}
    B, _, _, _, C = a.shape
    m = (ops[0][0].m, ops[1][0].m, ops[2][0].m)
    out = np.empty((B,) + m + (C, 10), dtype=a.dtype)
    for slot, (i, j, k) in enumerate(JET_ORDERS):
        out[..., slot] = ops[2][k].apply(xy[i, j], 3)
    out = out.reshape((B,) + m + (10 * C,))
    return out[0] if single else out


def jet2_adjoint(dj, sigma, spatial_shape, padding="reflect", stride=1, radius=None):
    """Transpose of ``jet2`` (for a fixed input shape): maps jet cotangents to input cotangents."""
    a, single = _as5d(dj)
    radius = default_radius(sigma) if radius is None else int(radius)
    ops = _ops(tuple(spatial_shape), sigma, radius, padding, stride)
    B = a.shape[0]
    C = a.shape[-1] // 10
    a6 = a.reshape(a.shape[:4] + (C, 10))
    xy = {}
    for slot, (i, j, k) in enumerate(JET_ORDERS):
        part = ops[2][k].apply(np.ascontiguousarray(a6[..., slot]), 3, adjoint=True)
        xy[i, j] = part if (i, j) not in xy else xy[i, j] + part
    xs = {}
    for (i, j), val in xy.items():
        part = ops[1][j].apply(val, 2, adjoint=True)
        xs[i] = part if i not in xs else xs[i] + part
    out = None
    for i, val in xs.items():
        part = ops[0][i].apply(val, 1, adjoint=True)
        out = part if out is None else out + part
    assert out.shape == (B,) + tuple(spatial_shape) + (C,)
    return out[0] if single else out
