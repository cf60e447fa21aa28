"""Equivariance and invariance checks, rotation sweeps, gradient checks and the selftest suites."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .errors import UnknownChannelTransformType
from .frame import eigh3_batch, frame_from_volume, sym3, sym3_full
from .gaussian import JET_ORDERS, jet2, make_kernel
from .network import (
    compute_frames,
    network_backward,
    network_forward,
    random_params,
    small_arch,
    medmnist_arch,
)
from .train import cross_entropy, metrics_from_logits, predict_logits
from .volume import octahedral_group, rotate_grid, rotate_interp

SWEEP_HEADER = ("axis", "angle_deg", "accuracy", "mean_logit_dev")
DEFAULT_SWEEP_ANGLES = tuple(range(0, 361, 15))
CHANNEL_TYPES = ("scalar", "jet2")


# --------------------------------------------------------- channel actions

def transform_channels(a, g, channel_type="scalar"):
    """Apply ``g`` to an output field: move voxels, then act on each channel group.

    ``scalar`` channels only move. ``jet2`` channels come in groups of ten:
    the value moves, the gradient rotates by R and the Hessian by R H R^T.
    """
    if channel_type not in CHANNEL_TYPES:
        raise UnknownChannelTransformType(
            f"unknown channel transform type {channel_type!r}; expected one of {CHANNEL_TYPES}")
    out = rotate_grid(np.asarray(a), g)
    if channel_type == "scalar":
        return out
    if out.shape[-1] % 10:
        raise UnknownChannelTransformType(f"jet2 channels come in groups of 10, got {out.shape[-1]}")
    R = g.matrix.astype(np.float64)
    j = out.astype(np.float64).reshape(out.shape[:-1] + (-1, 10))
    res = np.empty_like(j)
    res[..., 0] = j[..., 0]
    res[..., 1:4] = j[..., 1:4] @ R.T
    res[..., 4:10] = sym3(R @ sym3_full(j[..., 4:10]) @ R.T)
    return res.reshape(out.shape).astype(out.dtype)


def operator_equivariance(op, v, g, channel_type="scalar"):
    """``max |op(g v) - g op(v)|`` with the output action given by ``channel_type``."""
    lhs = np.asarray(op(rotate_grid(v, g)), dtype=np.float64)
    rhs = transform_channels(np.asarray(op(v), dtype=np.float64), g, channel_type)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


# -------------------------------------------------------- logit invariance

def rotation_logits(params, arch, v, disambiguate=True):
    """Logits of all 24 lattice rotations of ``v`` (row 0 is the identity)."""
    group = octahedral_group()
    dtype = params["head.w"].dtype
    batch = np.stack([rotate_grid(np.asarray(v, dtype=dtype), g) for g in group])
    frames = None
    if not disambiguate:
        frames = frame_from_volume(batch, arch.frame_sigma, arch.tau, arch.padding,
                                   disambiguate=False, stride=arch.blocks[0].stride)
    out = []
    for i in range(0, len(group), 8):
        fr = None if frames is None else frames.take(slice(i, i + 8))
        lg, _ = network_forward(batch[i:i + 8], arch, params, mode="eval", frames=fr)
        out.append(lg)
    return np.concatenate(out)


def logit_invariance(params, arch, v, disambiguate=True):
    """Max over the 24 lattice rotations of ``|logits(g v) - logits(v)|_inf``."""
    lg = rotation_logits(params, arch, v, disambiguate).astype(np.float64)
    return float(np.max(np.abs(lg - lg[0])))


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    axis: str
    angles: tuple
    accuracy: list
    mean_logit_dev: list
    predictions: dict = field(default_factory=dict, repr=False)
    logits: dict = field(default_factory=dict, repr=False)

    def rows(self):
        return [(self.axis, a, acc, dev)
                for a, acc, dev in zip(self.angles, self.accuracy, self.mean_logit_dev)]


def rotation_sweep(params, arch, xs, ys, axis, angles=DEFAULT_SWEEP_ANGLES, batch_size=32):
    """Evaluate the test set rotated (trilinear) by each angle in degrees about ``axis``."""
    angles = tuple(float(a) for a in angles)
    if 0.0 not in angles:
        raise ValueError("sweep angles must include 0")
    if any(b <= a for a, b in zip(angles, angles[1:])):
        raise ValueError("sweep angles must be strictly increasing")
    res = SweepResult(axis.upper(), angles, [], [])
    base = predict_logits(xs, params, arch, batch_size).astype(np.float64)
    for ang in angles:
        if ang == 0.0:
            lg = base
        else:
            rot = np.stack([rotate_interp(x, axis, math.radians(ang)) for x in xs])
            lg = predict_logits(rot.astype(xs.dtype, copy=False), params, arch, batch_size)
            lg = lg.astype(np.float64)
        m = metrics_from_logits(lg, ys, arch.num_classes)
        dev = np.max(np.abs(lg - base), axis=1)
        res.accuracy.append(m.accuracy)
        res.mean_logit_dev.append(float(dev.mean()) if len(dev) else 0.0)
        res.predictions[ang] = m.predictions
        res.logits[ang] = lg
    return res


def write_sweep_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in results:
            for axis, ang, acc, dev in r.rows():
                w.writerow([axis, f"{ang:g}", repr(float(acc)), repr(float(dev))])


def logit_margin(logits):
    """Gap between the largest and second-largest logit of every row."""
    s = np.sort(np.asarray(logits, dtype=np.float64), axis=1)
    return s[:, -1] - s[:, -2]


# -------------------------------------------------------- gradient check

@dataclass
class GradCheck:
    rel_err: dict  # tensor name -> max |g - fd| / max(|g|, |fd|, floor)
    refined: dict  # tensor name -> entries re-measured with a smaller step
    unresolved: int

    @property
    def max_rel_err(self):
        return max(self.rel_err.values())


def _activation_pattern(cache):
    parts = [np.packbits(b.pre1 > 0).tobytes() for b in cache.blocks]
    parts.append(cache.argmax.tobytes())
    return b"".join(parts)


def gradient_check(params, arch, x, y, h=1e-3, floor=1e-6, mode="train", min_h=1e-7):
    """Central differences against ``network_backward`` for every trainable entry.

    The loss is piecewise smooth (leaky ReLU, max pooling). When the
    activation pattern differs between ``p - h`` and ``p + h`` the difference
    straddles a kink and is no estimate of the derivative, so that entry is
    re-measured with ``h / 10`` until the pattern is stable (down to ``min_h``).
    """
    frames = compute_frames(x, arch)

    def run(p):
        lg, cache = network_forward(x, arch, p, mode=mode, frames=frames)
        return cross_entropy(lg, y), cache

    (_, dlogits), cache = run(params)
    grads = network_backward(cache, dlogits, params, arch)
    rel, refined, unresolved = {}, {}, 0
    for name in sorted(grads):
        base = params[name]
        fd = np.empty(base.size)
        n_ref = 0
        for i in range(base.size):
            step = h
            while True:
                vals, pats = [], []
                for sgn in (1.0, -1.0):
                    p = dict(params)
                    t = base.copy().reshape(-1)
                    t[i] += sgn * step
                    p[name] = t.reshape(base.shape)
                    (loss, _), c = run(p)
                    vals.append(loss)
                    pats.append(_activation_pattern(c))
                if pats[0] == pats[1] or step / 10 < min_h:
                    unresolved += pats[0] != pats[1]
                    break
                if step == h:
                    n_ref += 1
                step /= 10
            fd[i] = (vals[0] - vals[1]) / (2 * step)
        g = grads[name].reshape(-1).astype(np.float64)
        denom = max(np.max(np.abs(g)), np.max(np.abs(fd)), floor)
        rel[name] = float(np.max(np.abs(g - fd)) / denom)
        refined[name] = n_ref
    return GradCheck(rel, refined, unresolved)


# --------------------------------------------------------------- oracles

def dense_jet_oracle(v, sigma, padding="reflect"):
    """2-jet of a single-channel (W, H, D) volume by direct 3D correlation with full kernels."""
    v = np.asarray(v, dtype=np.float64)
    k = [make_kernel(sigma, o).coeffs for o in range(3)]
    mode = "mirror" if padding == "reflect" else "constant"
    out = np.empty(v.shape + (10,))
    for slot, (i, j, l) in enumerate(JET_ORDERS):
        w3 = k[i][:, None, None] * k[j][None, :, None] * k[l][None, None, :]
        out[..., slot] = ndi.correlate(v, w3, mode=mode, cval=0.0)
    return out


def smooth_volume(rng, size, sigma=1.5):
    return ndi.gaussian_filter(rng.normal(size=(size,) * 3), sigma)[..., None]


def random_symmetric(rng, n, near_degenerate=0):
    """Random symmetric 3x3 matrices, the last ``near_degenerate`` with eigen-gaps down to 1e-8."""
    a = rng.normal(size=(n, 3, 3))
    h = (a + np.swapaxes(a, 1, 2)) / 2
    if near_degenerate:
        q, _ = np.linalg.qr(rng.normal(size=(near_degenerate, 3, 3)))
        lam = rng.normal(size=(near_degenerate, 3))
        gaps = 10.0 ** rng.uniform(-8, -2, size=near_degenerate)
        lam[:, 1] = lam[:, 0] + gaps
        h[-near_degenerate:] = q @ (lam[:, :, None] * np.swapaxes(q, 1, 2))
        h = (h + np.swapaxes(h, 1, 2)) / 2
    return h


def eigh_residuals(h):
    """Max scaled reconstruction residual, orthogonality error, and whether all orders are sorted."""
    lam, V = eigh3_batch(sym3(h))
    rec = np.swapaxes(V, -1, -2) @ (lam[..., :, None] * V)
    scale = np.maximum(1.0, np.linalg.norm(h, axis=(-2, -1)))
    res = np.max(np.abs(rec - h).max(axis=(-2, -1)) / scale)
    orth = np.max(np.abs(V @ np.swapaxes(V, -1, -2) - np.eye(3)))
    return float(res), float(orth), bool(np.all(np.diff(lam, axis=-1) <= 0))


def frame_corotation(v, g, sigma=2.0, tau=1e-2, gap=1e-3, disambiguate=True):
    """Max ``|P'(R x) - P(x) R^T|`` over voxels whose frame is well defined."""
    f = frame_from_volume(v, sigma, tau, disambiguate=disambiguate)
    fr = frame_from_volume(rotate_grid(v, g), sigma, tau, disambiguate=disambiguate)
    moved = f.rotate(g)
    lam = moved.eigvals
    ok = (np.min(np.abs(np.diff(lam, axis=-1)), axis=-1) >= gap)
    ok &= np.all(np.abs(moved.P).sum(axis=-1) > 0, axis=-1)
    ok &= np.all(np.abs(fr.P).sum(axis=-1) > 0, axis=-1)
    if not ok.any():
        return 0.0, 0
    return float(np.max(np.abs(fr.P - moved.P)[ok])), int(ok.sum())


# ----------------------------------------------------------- selftest

@dataclass
class SuiteResult:
    name: str
    max_residual: float
    tolerance: float
    note: str = ""

    @property
    def passed(self):
        return bool(self.max_residual <= self.tolerance)


def suite_gaussian(seed=0, n=6, size=9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        v = rng.normal(size=(size,) * 3)
        for s in (0.8, 1.0, 2.0):
            ref = dense_jet_oracle(v, s)
            got = jet2(v[..., None], s).astype(np.float64)
            worst = max(worst, np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    return SuiteResult("gaussian-oracle", float(worst), 1e-5)


def suite_eigh(seed=0, n=20000):
    rng = np.random.default_rng(seed)
    h = random_symmetric(rng, n, near_degenerate=n // 5) * 10.0 ** rng.uniform(-3, 3, size=(n, 1, 1))
    res, orth, ordered = eigh_residuals(h)
    worst = max(res / 1e-10, orth / 1e-12) * 1e-10
    return SuiteResult("eigh3", worst if ordered else math.inf, 1e-10,
                       f"reconstruction {res:.2e}, orthogonality {orth:.2e}")


def suite_frame(seed=0, n=2, size=13, disambiguate=True):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        v = smooth_volume(rng, size)
        for g in octahedral_group():
            worst = max(worst, frame_corotation(v, g, disambiguate=disambiguate)[0])
    return SuiteResult("frame-equivariance", worst, 1e-5)


def suite_gradient(seed=0):
    arch = small_arch((4, 4), 3)
    rng = np.random.default_rng(seed)
    x = np.stack([smooth_volume(rng, 7) for _ in range(2)])
    params = random_params(arch, seed, np.float64)
    gc = gradient_check(params, arch, x, np.array([0, 2]))
    return SuiteResult("gradient-check", gc.max_rel_err, 1e-3,
                       f"{sum(gc.refined.values())} entries re-measured near a kink")


def suite_logits(seed=0, precision=32, disambiguate=True, n=2, size=15):
    dtype = np.float64 if precision == 64 else np.float32
    arch = medmnist_arch(2)
    rng = np.random.default_rng(seed)
    vols = np.stack([smooth_volume(rng, size) for _ in range(n)]).astype(dtype)
    params = random_params(arch, seed, dtype, calibrate_on=vols)
    worst = max(logit_invariance(params, arch, v, disambiguate) for v in vols)
    return SuiteResult("logit-invariance", worst, 1e-8 if precision == 64 else 1e-3)


def run_selftest(precision=32, disambiguate=True, seed=0):
    return [
        suite_gaussian(seed),
        suite_eigh(seed),
        suite_frame(seed, disambiguate=disambiguate),
        suite_gradient(seed),
        suite_logits(seed, precision, disambiguate),
    ]
