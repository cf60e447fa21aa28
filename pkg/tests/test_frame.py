import numpy as np
import pytest
import scipy.ndimage as ndi
from hypothesis import given, settings, strategies as st

from movfnet.errors import MultiChannelInput, NonFiniteInput, ShapeMismatch
from movfnet.frame import (
    FrameField,
    apply_frame,
    apply_frame_adjoint,
    build_frame,
    eigh3,
    eigh3_batch,
    frame_from_volume,
    sym3,
    sym3_full,
)
from movfnet.gaussian import jet2
from movfnet.volume import GridRotation, octahedral_group, rotate_grid
from oracles import centered_coords, random_rotation, rotate_jet


def _smooth(rng, n=13, sigma=1.5):
    v = ndi.gaussian_filter(rng.random((n, n, n)), sigma, mode="mirror")
    v = (v - v.min()) / (v.max() - v.min())
    return v[..., None]


def _quadratic_volume(n, g, H, c0=0.0):
    x = np.stack(centered_coords((n,) * 3), axis=-1)
    return (c0 + x @ g + 0.5 * np.einsum("...i,ij,...j->...", x, H, x))[..., None]


# --------------------------------------------------------------- eigh3

def test_sym3_round_trip(rng):
    A = rng.normal(size=(4, 3, 3))
    H = A + A.transpose(0, 2, 1)
    np.testing.assert_array_equal(sym3_full(sym3(H)), H)
    assert sym3(H).shape == (4, 6)


def test_eigh3_identity():
    d = eigh3(np.eye(3))
    np.testing.assert_allclose(d.lambdas, [1, 1, 1])
    np.testing.assert_allclose(d.V @ d.V.T, np.eye(3), atol=1e-15)


def test_eigh3_diagonal_sorted():
    d = eigh3(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(d.lambdas, [3.0, 2.0, 1.0])
    np.testing.assert_array_equal(np.abs(d.V), np.eye(3)[[0, 2, 1]])


def test_eigh3_quarter_turn_conjugate():
    R = GridRotation.quarter("Z").matrix.astype(np.float64)
    H = R @ np.diag([2.0, 1.0, 0.0]) @ R.T
    d = eigh3(H)
    # independent: roots of the characteristic polynomial
    char = np.poly(H)
    np.testing.assert_allclose(d.lambdas, np.sort(np.roots(char).real)[::-1], atol=1e-12)
    np.testing.assert_allclose(d.lambdas, [2, 1, 0], atol=1e-14)
    assert np.linalg.norm(d.V.T @ np.diag(d.lambdas) @ d.V - H) <= 1e-12


def test_eigh3_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        eigh3(np.array([1.0, 0, np.nan, 0, 0, 1]))
    with pytest.raises(ShapeMismatch):
        eigh3(np.zeros(5))


@pytest.mark.parametrize("gap", [1e-2, 1e-5, 1e-8, 0.0])
def test_eigh3_near_degenerate(gap, rng):
    n = 2000
    Q = np.stack([random_rotation(rng) for _ in range(n)])
    base = rng.normal(size=(n, 1)) * 3
    D = np.concatenate([base, base + gap, rng.normal(size=(n, 1))], axis=1)
    H = np.einsum("nij,nj,nkj->nik", Q, D, Q)
    H = 0.5 * (H + H.transpose(0, 2, 1))
    lam, V = eigh3_batch(sym3(H))
    fro = np.linalg.norm(H, axis=(1, 2))
    resid = np.linalg.norm(V @ H @ V.transpose(0, 2, 1) - lam[:, :, None] * np.eye(3), axis=(1, 2))
    orth = np.linalg.norm(V @ V.transpose(0, 2, 1) - np.eye(3), axis=(1, 2))
    assert np.all(resid <= 1e-10 * np.maximum(1, fro))
    assert np.all(orth <= 1e-12)
    assert np.all(np.diff(lam, axis=1) <= 0)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(H)[:, ::-1], atol=1e-12 * max(1, fro.max()))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=6, max_size=6))
def test_eigh3_property(entries):
    h = np.array(entries)
    d = eigh3(h)
    H = sym3_full(h)
    fro = np.linalg.norm(H)
    assert np.linalg.norm(d.V @ H @ d.V.T - np.diag(d.lambdas)) <= 1e-10 * max(1.0, fro)
    assert np.linalg.norm(d.V @ d.V.T - np.eye(3)) <= 1e-12
    assert d.lambdas[0] >= d.lambdas[1] >= d.lambdas[2]


def test_eigh3_deterministic(rng):
    h = rng.normal(size=(100, 6))
    a, b = eigh3_batch(h), eigh3_batch(h.copy())
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


# --------------------------------------------------------------- build_frame

def test_frame_of_saddle_with_gradient():
    n = 15
    v = _quadratic_volume(n, np.array([0.1, 0, 0]), np.diag([1.0, 0.0, -1.0]))
    fr = frame_from_volume(v, 2.0)
    c = n // 2
    P = fr.P[c, c, c]
    np.testing.assert_allclose(fr.eigvals[c, c, c], [1, 0, -1], atol=1e-10)
    np.testing.assert_allclose(P[0], [1, 0, 0], atol=1e-10)
    np.testing.assert_array_equal(P[1:], 0.0)


def test_frame_of_constant_region():
    fr = frame_from_volume(np.full((9, 9, 9, 1), 0.4), 1.0)
    assert not fr.P.any()
    np.testing.assert_allclose(fr.eigvals, 0.0, atol=1e-14)


def test_frame_rows_follow_rotated_quadratic(rng):
    for _ in range(10):
        R = random_rotation(rng)
        D = np.sort(rng.uniform(-2, 2, size=3))[::-1]
        g = rng.uniform(0.2, 1.0, size=3)  # positive: sign rule keeps the columns of R
        jet = np.zeros(10)
        jet[1:4] = R @ g
        jet[4:] = sym3(R @ np.diag(D) @ R.T)
        fr = build_frame(jet)
        np.testing.assert_allclose(fr.P, R.T, atol=1e-10)
        np.testing.assert_allclose(fr.eigvals, D, atol=1e-12)
        # same through the volume path, checked at the centre voxel
        n = 13
        v = _quadratic_volume(n, R @ g, R @ np.diag(D) @ R.T)
        P = frame_from_volume(v, 1.0).P[n // 2, n // 2, n // 2]
        np.testing.assert_allclose(P, R.T, atol=1e-8)


def test_frame_sign_rule_and_zeroing(rng):
    jets = rng.normal(size=(500, 10))
    fr = build_frame(jets, tau=0.05)
    grad = jets[:, 1:4]
    proj = np.einsum("nij,nj->ni", fr.P, grad)
    nonzero = np.any(fr.P != 0, axis=2)
    assert np.all(proj[nonzero] >= 0)
    gnorm = np.linalg.norm(grad, axis=1)
    assert np.all(proj[nonzero] >= 0.05 * np.maximum(gnorm, 0.05)[:, None].repeat(3, 1)[nonzero])


def test_frame_field_invariants(rng):
    fr = frame_from_volume(_smooth(rng), 2.0)
    P = fr.P.reshape(-1, 3, 3)
    norms = np.linalg.norm(P, axis=2)
    nz = norms > 0
    assert np.all(np.abs(norms[nz] - 1) <= 1e-6)
    G = P @ P.transpose(0, 2, 1)
    both = nz[:, :, None] & nz[:, None, :]
    off = both & ~np.eye(3, dtype=bool)
    assert np.all(np.abs(G[off]) <= 1e-6)
    assert np.all(np.diff(fr.eigvals, axis=-1) <= 0)


def test_frame_rejects_multichannel(rng):
    with pytest.raises(MultiChannelInput):
        build_frame(rng.normal(size=(3, 3, 3, 20)))
    with pytest.raises(MultiChannelInput):
        frame_from_volume(rng.random((5, 5, 5, 2)), 1.0)


def test_frame_stride_matches_subsample(rng):
    v = _smooth(rng, 11)
    full = frame_from_volume(v, 2.0)
    sub = frame_from_volume(v, 2.0, stride=2)
    np.testing.assert_allclose(sub.P, full.subsample(2).P, atol=1e-12)
    np.testing.assert_allclose(sub.eigvals, full.subsample(2).eigvals, atol=1e-12)


# ---------------------------------------------------------- equivariance

def _stable_mask(fr, gap=1e-3):
    rows = np.all(np.any(fr.P != 0, axis=-1), axis=-1)
    lam = fr.eigvals
    gaps = np.minimum(lam[..., 0] - lam[..., 1], lam[..., 1] - lam[..., 2])
    return rows & (gaps >= gap)


@pytest.mark.parametrize("g_index", range(24))
def test_frame_corotation(g_index, rng):
    g = octahedral_group()[g_index]
    R = g.matrix.astype(np.float64)
    v = _smooth(rng)
    fr = frame_from_volume(v, 2.0)
    fr_rot = frame_from_volume(rotate_grid(v, g), 2.0)
    expected = rotate_grid(fr.P, g, axes=(0, 1, 2)) @ R.T
    mask = rotate_grid(_stable_mask(fr)[..., None], g)[..., 0]
    assert mask.sum() > 100
    assert np.max(np.abs(fr_rot.P[mask] - expected[mask])) <= 1e-5
    assert np.max(np.abs(fr_rot.eigvals - rotate_grid(fr.eigvals, g))) <= 1e-6
    np.testing.assert_allclose(fr.rotate(g).P[mask], expected[mask], atol=0)


@pytest.mark.parametrize("g_index", range(24))
def test_invariantized_jet_is_invariant(g_index, rng):
    g = octahedral_group()[g_index]
    v = _smooth(rng)
    vr = rotate_grid(v, g)
    a = apply_frame(frame_from_volume(v, 2.0), jet2(v, 1.0))
    b = apply_frame(frame_from_volume(vr, 2.0), jet2(vr, 1.0))
    mask = rotate_grid(_stable_mask(frame_from_volume(v, 2.0))[..., None], g)[..., 0]
    assert np.max(np.abs(b[mask] - rotate_grid(a, g)[mask])) <= 1e-5


def test_fundamental_invariants_have_diagonal_hessian(rng):
    for _ in range(3):
        v = _smooth(rng)
        jet = jet2(v, 2.0)
        fr = build_frame(jet)
        out = apply_frame(fr, jet)
        full = np.all(np.any(fr.P != 0, axis=-1), axis=-1)
        off = out[..., [5, 7, 8]]
        assert np.max(np.abs(off[full])) <= 1e-4
        np.testing.assert_allclose(out[..., [4, 6, 9]][full], fr.eigvals[full], atol=1e-6)


# ---------------------------------------------------------- apply_frame

def test_identity_frame_passthrough(rng):
    jet = rng.normal(size=(4, 5, 6, 30))
    P = np.broadcast_to(np.eye(3), (4, 5, 6, 3, 3))
    fr = FrameField(P, np.zeros((4, 5, 6, 3)))
    np.testing.assert_allclose(apply_frame(fr, jet), jet, atol=1e-14)


def test_zero_frame_keeps_value_only(rng):
    jet = rng.normal(size=(3, 3, 3, 20))
    fr = FrameField(np.zeros((3, 3, 3, 3, 3)), np.zeros((3, 3, 3, 3)))
    out = apply_frame(fr, jet).reshape(3, 3, 3, 2, 10)
    np.testing.assert_array_equal(out[..., 0], jet.reshape(3, 3, 3, 2, 10)[..., 0])
    assert not out[..., 1:].any()


def test_apply_frame_matches_prolonged_action(backend, rng):
    P = np.stack([random_rotation(rng) for _ in range(60)]).reshape(3, 4, 5, 3, 3)
    jet = rng.normal(size=(3, 4, 5, 10))
    out = apply_frame(FrameField(P, np.zeros((3, 4, 5, 3))), jet)
    ref = np.empty_like(jet)
    for idx in np.ndindex(3, 4, 5):
        ref[idx] = rotate_jet(jet[idx], P[idx])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_apply_frame_linear_and_adjoint(backend, rng):
    fr = FrameField(rng.normal(size=(2, 3, 3, 3, 3, 3)), np.zeros((2, 3, 3, 3, 3)))
    j1, j2 = rng.normal(size=(2, 2, 3, 3, 3, 20))
    a, b = 0.7, -1.9
    lhs = apply_frame(fr, a * j1 + b * j2)
    assert np.max(np.abs(lhs - a * apply_frame(fr, j1) - b * apply_frame(fr, j2))) <= 1e-6
    d = rng.normal(size=j1.shape)
    assert abs(np.sum(apply_frame(fr, j1) * d) - np.sum(j1 * apply_frame_adjoint(fr, d))) <= 1e-10


def test_apply_frame_shape_errors(rng):
    fr = FrameField(np.zeros((3, 3, 3, 3, 3)), np.zeros((3, 3, 3, 3)))
    with pytest.raises(ShapeMismatch):
        apply_frame(fr, rng.normal(size=(3, 3, 4, 10)))
    with pytest.raises(ShapeMismatch):
        apply_frame(fr, rng.normal(size=(3, 3, 3, 11)))


def test_apply_frame_preserves_float32(rng):
    fr = frame_from_volume(_smooth(rng, 7), 1.0)
    jet = jet2(rng.random((7, 7, 7, 2)).astype(np.float32), 1.0)
    assert apply_frame(fr, jet).dtype == np.float32
