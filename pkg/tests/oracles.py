"""Reference implementations the package code is checked against."""

import io

import numpy as np


def npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def dense_correlate3(v, kx, ky, kz, padding="reflect"):
    """Brute-force 3D correlation of a (W, H, D) array with the outer-product kernel."""
    rx, ry, rz = (len(k) // 2 for k in (kx, ky, kz))
    mode = "reflect" if padding == "reflect" else "constant"
    p = np.pad(np.asarray(v, dtype=np.float64), ((rx, rx), (ry, ry), (rz, rz)), mode=mode)
    W, H, D = v.shape
    out = np.zeros((W, H, D))
    for a in range(len(kx)):
        for b in range(len(ky)):
            for c in range(len(kz)):
                w = kx[a] * ky[b] * kz[c]
                if w != 0.0:
                    out += w * p[a:a + W, b:b + H, c:c + D]
    return out


def centered_coords(shape):
    axes = [np.arange(n) - (n - 1) / 2.0 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def rotate_jet(jet10, R):
    """Prolonged action on (..., 10) jets: value moves, gradient by R, Hessian by R H R^T."""
    out = np.array(jet10, dtype=np.float64)
    out[..., 1:4] = jet10[..., 1:4] @ R.T
    H = np.empty(jet10.shape[:-1] + (3, 3))
    slots = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))
    for k, (r, c) in enumerate(slots):
        H[..., r, c] = H[..., c, r] = jet10[..., 4 + k]
    Hr = R @ H @ R.T
    for k, (r, c) in enumerate(slots):
        out[..., 4 + k] = Hr[..., r, c]
    return out


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def central_diff(f, x, h):
    """Central differences of scalar ``f`` at every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(x.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)
