# cython: language_level=3
"""Compiled kernels: sparse axis operators, batched 3x3 Jacobi, frame application.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``_backend`` picks one at import time.
"""

from libc.math cimport fabs, sqrt

ctypedef fused floating:
    float
    double


def apply_csr_axis(const floating[:, :, ::1] src,
                   const int[::1] indptr,
                   const int[::1] indices,
                   const floating[::1] data,
                   floating[:, :, :] out):
    """out[o, i, :] = sum_p data[p] * src[o, indices[p], :] over row i of the CSR operator."""
    cdef Py_ssize_t outer = src.shape[0]
    cdef Py_ssize_t inner = src.shape[2]
    cdef Py_ssize_t m = out.shape[1]
    cdef Py_ssize_t o, i, p, k
    cdef floating c
    cdef floating* dst
    cdef const floating* s
    if out.shape[0] != outer or out.shape[2] != inner or indptr.shape[0] != m + 1:
        raise ValueError("apply_csr_axis: shape mismatch")
    if inner > 1 and out.strides[2] != sizeof(floating):
        raise ValueError("apply_csr_axis: output rows must be contiguous")
    if outer == 0 or m == 0 or inner == 0:
        return
    with nogil:
        for o in range(outer):
            for i in range(m):
                dst = &out[o, i, 0]
                for k in range(inner):
                    dst[k] = 0
                for p in range(indptr[i], indptr[i + 1]):
                    c = data[p]
                    s = &src[o, indices[p], 0]
                    for k in range(inner):
                        dst[k] += c * s[k]


def apply_band_axis(const floating[:, :, ::1] src,
                    const floating[::1] coeffs,
                    Py_ssize_t first,
                    floating[:, :, :] out):
    """out[o, i, :] = sum_t coeffs[t] * src[o, first + i + t, :] (a shared-kernel band of rows)."""
    cdef Py_ssize_t outer = src.shape[0]
    cdef Py_ssize_t n = src.shape[1]
    cdef Py_ssize_t inner = src.shape[2]
    cdef Py_ssize_t mb = out.shape[1]
    cdef Py_ssize_t L = coeffs.shape[0]
    cdef Py_ssize_t total = mb * inner
    cdef Py_ssize_t o, t, j, j0, j1
    cdef floating c
    cdef floating* dst
    cdef const floating* s
    if out.shape[0] != outer or out.shape[2] != inner:
        raise ValueError("apply_band_axis: shape mismatch")
    if first < 0 or first + mb + L - 1 > n:
        raise ValueError("apply_band_axis: band reads outside the source axis")
    if mb == 0 or inner == 0 or outer == 0:
        return
    if (inner > 1 and out.strides[2] != sizeof(floating)) or (mb > 1 and out.strides[1] != inner * sizeof(floating)):
        raise ValueError("apply_band_axis: output rows must be contiguous")
    with nogil:
        for o in range(outer):
            dst = &out[o, 0, 0]
            s = &src[o, first, 0]
            j0 = 0
            while j0 < total:
                j1 = j0 + 512
                if j1 > total:
                    j1 = total
                c = coeffs[0]
                for j in range(j0, j1):
                    dst[j] = c * s[j]
                for t in range(1, L):
                    c = coeffs[t]
                    for j in range(j0, j1):
                        dst[j] += c * s[j + t * inner]
                j0 = j1


cdef inline void _jacobi3(double a[3][3], double v[3][3], int max_sweeps, double rtol) noexcept nogil:
    cdef int sweep, p, q, r, j
    cdef double fro, off, apq, theta, t, c, s, arp, arq, vrp, vrq
    cdef int pairs[3][2]
    pairs[0][0] = 0; pairs[0][1] = 1
    pairs[1][0] = 0; pairs[1][1] = 2
    pairs[2][0] = 1; pairs[2][1] = 2
    for p in range(3):
        for q in range(3):
            v[p][q] = 1.0 if p == q else 0.0
    fro = 0.0
    for p in range(3):
        for q in range(3):
            fro += a[p][q] * a[p][q]
    fro = sqrt(fro)
    for sweep in range(max_sweeps):
        off = sqrt(2.0 * (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]))
        if off <= rtol * fro:
            break
        for j in range(3):
            p = pairs[j][0]
            q = pairs[j][1]
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            if fabs(theta) > 1e150:
                t = 0.5 / theta
            else:
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
            c = 1.0 / sqrt(t * t + 1.0)
            s = t * c
            a[p][p] = a[p][p] - t * apq
            a[q][q] = a[q][q] + t * apq
            a[p][q] = 0.0
            a[q][p] = 0.0
            for r in range(3):
                if r != p and r != q:
                    arp = a[r][p]
                    arq = a[r][q]
                    a[r][p] = c * arp - s * arq
                    a[p][r] = a[r][p]
                    a[r][q] = s * arp + c * arq
                    a[q][r] = a[r][q]
            for r in range(3):
                vrp = v[r][p]
                vrq = v[r][q]
                v[r][p] = c * vrp - s * vrq
                v[r][q] = s * vrp + c * vrq


def eigh3_batch(const double[:, ::1] h6, double[:, ::1] lam, double[:, :, ::1] vecs,
                int max_sweeps=30, double rtol=1e-14):
    """Cyclic Jacobi on N symmetric 3x3 matrices given as (xx, xy, yy, xz, yz, zz).

    Eigenvalues land in ``lam`` sorted non-increasing (stable), eigenvectors
    in the ROWS of ``vecs[n]``.
    """
    cdef Py_ssize_t n, N = h6.shape[0]
    cdef double a[3][3]
    cdef double v[3][3]
    cdef double d[3]
    cdef int order[3]
    cdef int i, j, tmp
    if lam.shape[0] != N or vecs.shape[0] != N:
        raise ValueError("eigh3_batch: shape mismatch")
    with nogil:
        for n in range(N):
            a[0][0] = h6[n, 0]
            a[0][1] = h6[n, 1]; a[1][0] = h6[n, 1]
            a[1][1] = h6[n, 2]
            a[0][2] = h6[n, 3]; a[2][0] = h6[n, 3]
            a[1][2] = h6[n, 4]; a[2][1] = h6[n, 4]
            a[2][2] = h6[n, 5]
            _jacobi3(a, v, max_sweeps, rtol)
            for i in range(3):
                d[i] = a[i][i]
                order[i] = i
            # stable insertion sort, descending
            for i in range(1, 3):
                j = i
                while j > 0 and d[order[j - 1]] < d[order[j]]:
                    tmp = order[j - 1]
                    order[j - 1] = order[j]
                    order[j] = tmp
                    j -= 1
            for i in range(3):
                lam[n, i] = d[order[i]]
                for j in range(3):
                    vecs[n, i, j] = v[j][order[i]]


def apply_frame(const floating[:, :, ::1] P,
                const floating[:, :, ::1] jet,
                floating[:, :, ::1] out):
    """Per voxel n, channel c: (u, P g, P H P^T) with the 10-slot jet layout."""
    cdef Py_ssize_t n, c, N = jet.shape[0], Q = jet.shape[1]
    cdef floating p00, p01, p02, p10, p11, p12, p20, p21, p22
    cdef floating hxx, hxy, hyy, hxz, hyz, hzz
    cdef floating gx, gy, gz
    cdef floating m00, m01, m02, m10, m11, m12, m20, m21, m22
    cdef const floating* j
    cdef floating* o
    if P.shape[0] != N or out.shape[0] != N or out.shape[1] != Q:
        raise ValueError("apply_frame: shape mismatch")
    with nogil:
        for n in range(N):
            p00 = P[n, 0, 0]; p01 = P[n, 0, 1]; p02 = P[n, 0, 2]
            p10 = P[n, 1, 0]; p11 = P[n, 1, 1]; p12 = P[n, 1, 2]
            p20 = P[n, 2, 0]; p21 = P[n, 2, 1]; p22 = P[n, 2, 2]
            for c in range(Q):
                j = &jet[n, c, 0]
                o = &out[n, c, 0]
                gx = j[1]; gy = j[2]; gz = j[3]
                hxx = j[4]; hxy = j[5]; hyy = j[6]; hxz = j[7]; hyz = j[8]; hzz = j[9]
                o[0] = j[0]
                o[1] = p00 * gx + p01 * gy + p02 * gz
                o[2] = p10 * gx + p11 * gy + p12 * gz
                o[3] = p20 * gx + p21 * gy + p22 * gz
                # M = P H
                m00 = p00 * hxx + p01 * hxy + p02 * hxz
                m01 = p00 * hxy + p01 * hyy + p02 * hyz
                m02 = p00 * hxz + p01 * hyz + p02 * hzz
                m10 = p10 * hxx + p11 * hxy + p12 * hxz
                m11 = p10 * hxy + p11 * hyy + p12 * hyz
                m12 = p10 * hxz + p11 * hyz + p12 * hzz
                m20 = p20 * hxx + p21 * hxy + p22 * hxz
                m21 = p20 * hxy + p21 * hyy + p22 * hyz
                m22 = p20 * hxz + p21 * hyz + p22 * hzz
                # (M P^T) unique entries
                o[4] = m00 * p00 + m01 * p01 + m02 * p02
                o[5] = m00 * p10 + m01 * p11 + m02 * p12
                o[6] = m10 * p10 + m11 * p11 + m12 * p12
                o[7] = m00 * p20 + m01 * p21 + m02 * p22
                o[8] = m10 * p20 + m11 * p21 + m12 * p22
                o[9] = m20 * p20 + m21 * p21 + m22 * p22


def apply_frame_adjoint(const floating[:, :, ::1] P,
                        const floating[:, :, ::1] dout,
                        floating[:, :, ::1] djet):
    """Transpose of ``apply_frame`` for a fixed frame field."""
    cdef Py_ssize_t n, c, N = dout.shape[0], Q = dout.shape[1]
    cdef floating p00, p01, p02, p10, p11, p12, p20, p21, p22
    cdef floating b00, b01, b11, b02, b12, b22
    cdef floating t00, t01, t02, t10, t11, t12, t20, t21, t22
    cdef floating g00, g01, g02, g10, g11, g12, g20, g21, g22
    cdef const floating* d
    cdef floating* o
    if P.shape[0] != N or djet.shape[0] != N or djet.shape[1] != Q:
        raise ValueError("apply_frame_adjoint: shape mismatch")
    with nogil:
        for n in range(N):
            p00 = P[n, 0, 0]; p01 = P[n, 0, 1]; p02 = P[n, 0, 2]
            p10 = P[n, 1, 0]; p11 = P[n, 1, 1]; p12 = P[n, 1, 2]
            p20 = P[n, 2, 0]; p21 = P[n, 2, 1]; p22 = P[n, 2, 2]
            for c in range(Q):
                d = &dout[n, c, 0]
                o = &djet[n, c, 0]
                o[0] = d[0]
                o[1] = p00 * d[1] + p10 * d[2] + p20 * d[3]
                o[2] = p01 * d[1] + p11 * d[2] + p21 * d[3]
                o[3] = p02 * d[1] + p12 * d[2] + p22 * d[3]
                # B is upper-triangular: B[a][b] = cotangent of output (a, b), a <= b
                b00 = d[4]; b01 = d[5]; b11 = d[6]; b02 = d[7]; b12 = d[8]; b22 = d[9]
                # T = B P
                t00 = b00 * p00 + b01 * p10 + b02 * p20
                t01 = b00 * p01 + b01 * p11 + b02 * p21
                t02 = b00 * p02 + b01 * p12 + b02 * p22
                t10 = b11 * p10 + b12 * p20
                t11 = b11 * p11 + b12 * p21
                t12 = b11 * p12 + b12 * p22
                t20 = b22 * p20
                t21 = b22 * p21
                t22 = b22 * p22
                # G = P^T T
                g00 = p00 * t00 + p10 * t10 + p20 * t20
                g01 = p00 * t01 + p10 * t11 + p20 * t21
                g02 = p00 * t02 + p10 * t12 + p20 * t22
                g10 = p01 * t00 + p11 * t10 + p21 * t20
                g11 = p01 * t01 + p11 * t11 + p21 * t21
                g12 = p01 * t02 + p11 * t12 + p21 * t22
                g20 = p02 * t00 + p12 * t10 + p22 * t20
                g21 = p02 * t01 + p12 * t11 + p22 * t21
                g22 = p02 * t02 + p12 * t12 + p22 * t22
                o[4] = g00
                o[5] = g01 + g10
                o[6] = g11
                o[7] = g02 + g20
                o[8] = g12 + g21
                o[9] = g22
