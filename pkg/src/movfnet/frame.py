"""Per-voxel rotation frames from the Gaussian Hessian, and their action on jets.

The frame at a voxel is the matrix P whose rows are the Hessian eigenvectors
(eigenvalues non-increasing), each signed to point along the gradient. Rows
whose gradient projection is too small to fix a sign are zeroed. Applying P
to a 2-jet gives ``(u, P grad, P H P^T)``, which is unchanged when the input
volume is rotated, because P co-rotates: ``P'(R x) = P(x) R^T``.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import MultiChannelInput, NonFiniteInput, ShapeMismatch
from .gaussian import jet2
from .volume import rotate_grid

SYM3_SLOTS = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))
DEFAULT_TAU = 1e-2


@dataclass(frozen=True)
class EigenDecomp3:
    lambdas: np.ndarray  # (3,), non-increasing
    V: np.ndarray  # (3, 3), rows are unit eigenvectors


def sym3(m):
    """Full symmetric (..., 3, 3) -> six unique entries (xx, xy, yy, xz, yz, zz)."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., r, c] for r, c in SYM3_SLOTS], axis=-1)


def sym3_full(h6):
    h6 = np.asarray(h6)
    out = np.empty(h6.shape[:-1] + (3, 3), dtype=h6.dtype)
    for k, (r, c) in enumerate(SYM3_SLOTS):
        out[..., r, c] = h6[..., k]
        out[..., c, r] = h6[..., k]
    return out


def eigh3_batch(h6, max_sweeps=30, rtol=1e-14):
    """Cyclic Jacobi on a stack of symmetric 3x3 matrices (six-entry form), in float64.

    Returns ``(lambdas, V)`` with shapes ``(..., 3)`` and ``(..., 3, 3)``;
    eigenvectors are the rows of ``V``.
    """
    h6 = np.asarray(h6, dtype=np.float64)
    if h6.shape[-1] != 6:
        raise ShapeMismatch(f"expected six unique entries in the last axis, got {h6.shape}")
    if not np.isfinite(h6).all():
        raise NonFiniteInput("eigh3 input contains non-finite entries")
    lead = h6.shape[:-1]
    flat = np.ascontiguousarray(h6.reshape(-1, 6))
    lam = np.empty((flat.shape[0], 3))
    vecs = np.empty((flat.shape[0], 3, 3))
    _backend.eigh3_batch(flat, lam, vecs, max_sweeps, rtol)
    return lam.reshape(lead + (3,)), vecs.reshape(lead + (3, 3))


def eigh3(h):
    """Eigendecomposition of one symmetric 3x3 matrix (full or six-entry form)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape == (3, 3):
        h = sym3(h)
    if h.shape != (6,):
        raise ShapeMismatch(f"expected a 3x3 matrix or 6 entries, got {h.shape}")
    lam, V = eigh3_batch(h[None])
    return EigenDecomp3(lam[0], V[0])


@dataclass(frozen=True)
class FrameField:
    """Frames ``P`` of shape ``(..., W, H, D, 3, 3)`` and eigenvalues ``(..., W, H, D, 3)``."""

    P: np.ndarray
    eigvals: np.ndarray

    @property
    def spatial_shape(self):
        return self.P.shape[-5:-2]

    def subsample(self, stride=2):
        s = slice(None, None, stride)
        return FrameField(
            np.ascontiguousarray(self.P[..., s, s, s, :, :]),
            np.ascontiguousarray(self.eigvals[..., s, s, s, :]),
        )

    def rotate(self, g):
        """Frame field of the rotated volume: voxels move by ``g`` and ``P -> P R^T``."""
        nd = self.P.ndim
        R = g.matrix.astype(np.float64)
        P = rotate_grid(self.P, g, axes=(nd - 5, nd - 4, nd - 3)) @ R.T
        ev = rotate_grid(self.eigvals, g)
        return FrameField(np.ascontiguousarray(P), ev)

    def take(self, idx):
        return FrameField(self.P[idx], self.eigvals[idx])


def build_frame(jet, tau=DEFAULT_TAU, disambiguate=True):
    """Moving frame from a single-channel 2-jet (``(..., W, H, D, 10)``).

    Each eigenvector row is signed so that its dot product with the gradient
    is non-negative; a row is zeroed when ``|v . grad| < tau * max(|grad|, tau)``.
    ``disambiguate=False`` skips the sign rule (used only by the mutation checks).
    """
    jet = np.asarray(jet, dtype=np.float64)
    if jet.shape[-1] != 10:
        raise MultiChannelInput(
            f"frames are built from a single-channel jet (10 slots), got {jet.shape[-1]} channels")
    lam, V = eigh3_batch(jet[..., 4:10])
    grad = jet[..., 1:4]
    proj = np.einsum("...ij,...j->...i", V, grad)
    if disambiguate:
        V = np.where((proj < 0)[..., None], -V, V)
    gnorm = np.sqrt(np.einsum("...i,...i->...", grad, grad))
    weak = np.abs(proj) < tau * np.maximum(gnorm, tau)[..., None]
    V = np.where(weak[..., None], 0.0, V)
    return FrameField(np.ascontiguousarray(V), np.ascontiguousarray(lam))


def frame_from_volume(v, sigma, tau=DEFAULT_TAU, padding="reflect", disambiguate=True, stride=1):
    """Frames of a single-channel volume (or batch), with the jet taken at scale ``sigma`` in float64.

    ``stride`` 2 evaluates only the even-index subgrid.
    """
    a = np.asarray(v, dtype=np.float64)
    if a.shape[-1] != 1:
        raise MultiChannelInput(f"frames need a single-channel input, got {a.shape[-1]} channels")
    return build_frame(jet2(a, sigma, padding, stride=stride), tau, disambiguate)


def _flat(frames, jet):
    jet = np.asarray(jet)
    if jet.shape[-1] % 10:
        raise ShapeMismatch(f"jet channel count {jet.shape[-1]} is not a multiple of 10")
    if frames.P.shape[:-2] != jet.shape[:-1]:
        raise ShapeMismatch(f"frame grid {frames.P.shape[:-2]} does not match jet grid {jet.shape[:-1]}")
    dtype = jet.dtype if jet.dtype in (np.float32, np.float64) else np.float32
    P = np.ascontiguousarray(frames.P.reshape(-1, 3, 3), dtype=dtype)
    q = jet.shape[-1] // 10
    return P, np.ascontiguousarray(jet, dtype=dtype).reshape(P.shape[0], q, 10)


def apply_frame(frames, jet):
    """Rotate every channel's jet into its voxel's frame: ``(u, P grad, P H P^T)``."""
    P, j = _flat(frames, jet)
    out = np.empty_like(j)
    _backend.apply_frame(P, j, out)
    return out.reshape(np.shape(jet))


def apply_frame_adjoint(frames, dout):
    """Transpose of ``apply_frame`` in its jet argument (the frame is a constant)."""
    P, d = _flat(frames, dout)
    out = np.empty_like(d)
    _backend.apply_frame_adjoint(P, d, out)
    return out.reshape(np.shape(dout))
