"""Pure numpy/scipy versions of the compiled kernels in ``_core.pyx``.

Signatures match the compiled module exactly (outputs are written into
caller-provided arrays) so ``_backend`` can swap one for the other.
"""

import numpy as np
import scipy.sparse as sp

# (row, col) of each unique Hessian slot in the 10-channel jet layout
_HESS_SLOTS = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))


def apply_csr_axis(src, indptr, indices, data, out):
    outer, n, inner = src.shape
    m = out.shape[1]
    op = sp.csr_matrix((data, indices, indptr), shape=(m, n))
    moved = np.ascontiguousarray(src.transpose(1, 0, 2)).reshape(n, outer * inner)
    res = op @ moved
    out[...] = res.reshape(m, outer, inner).transpose(1, 0, 2)


def apply_band_axis(src, coeffs, first, out):
    mb = out.shape[1]
    if first < 0 or first + mb + len(coeffs) - 1 > src.shape[1]:
        raise ValueError("apply_band_axis: band reads outside the source axis")
    acc = coeffs[0] * src[:, first:first + mb, :]
    for t in range(1, len(coeffs)):
        acc += coeffs[t] * src[:, first + t:first + t + mb, :]
    out[...] = acc


def _sym(h6):
    a = np.empty(h6.shape[:-1] + (3, 3), dtype=h6.dtype)
    for k, (r, c) in enumerate(_HESS_SLOTS):
        a[..., r, c] = h6[..., k]
        a[..., c, r] = h6[..., k]
    return a


def eigh3_batch(h6, lam, vecs, max_sweeps=30, rtol=1e-14):
    a = _sym(np.asarray(h6, dtype=np.float64))
    n = a.shape[0]
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    fro = np.sqrt(np.einsum("nij,nij->n", a, a))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2))
        active = ~(off <= rtol * fro)
        if not active.any():
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            sel = active & (apq != 0.0)
            if not sel.any():
                continue
            idx = np.nonzero(sel)[0]
            apq = apq[idx]
            app, aqq = a[idx, p, p], a[idx, q, q]
            theta = (aqq - app) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            with np.errstate(over="ignore", invalid="ignore"):
                t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta < 0.0, -t, t)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            a[idx, p, p] = app - t * apq
            a[idx, q, q] = aqq + t * apq
            a[idx, p, q] = 0.0
            a[idx, q, p] = 0.0
            r = 3 - p - q
            arp, arq = a[idx, r, p], a[idx, r, q]
            a[idx, r, p] = a[idx, p, r] = c * arp - s * arq
            a[idx, r, q] = a[idx, q, r] = s * arp + c * arq
            vp, vq = v[idx, :, p], v[idx, :, q]
            v[idx, :, p] = c[:, None] * vp - s[:, None] * vq
            v[idx, :, q] = s[:, None] * vp + c[:, None] * vq
    d = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(-d, axis=1, kind="stable")
    lam[...] = np.take_along_axis(d, order, axis=1)
    vecs[...] = np.take_along_axis(v.transpose(0, 2, 1), order[:, :, None], axis=1)


def apply_frame(P, jet, out):
    out[:, :, 0] = jet[:, :, 0]
    out[:, :, 1:4] = np.einsum("nab,ncb->nca", P, jet[:, :, 1:4])
    H = _sym(jet[:, :, 4:10])
    rot = np.einsum("nab,ncbd,ned->ncae", P, H, P)
    for k, (r, c) in enumerate(_HESS_SLOTS):
        out[:, :, 4 + k] = rot[:, :, r, c]


def apply_frame_adjoint(P, dout, djet):
    djet[:, :, 0] = dout[:, :, 0]
    djet[:, :, 1:4] = np.einsum("nab,nca->ncb", P, dout[:, :, 1:4])
    B = np.zeros(dout.shape[:2] + (3, 3), dtype=dout.dtype)
    for k, (r, c) in enumerate(_HESS_SLOTS):
        B[:, :, r, c] = dout[:, :, 4 + k]
    G = np.einsum("nai,nqab,nbj->nqij", P, B, P)
    for k, (r, c) in enumerate(_HESS_SLOTS):
        djet[:, :, 4 + k] = G[:, :, r, c] if r == c else G[:, :, r, c] + G[:, :, c, r]
