import io
import math
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from movfnet.errors import (
    BadMagic,
    BadZip,
    FortranOrder,
    MissingEntry,
    TruncatedPayload,
    UnsupportedDtype,
    VersionMismatch,
)
from movfnet.volume import (
    GridRotation,
    IDENTITY,
    container_to_npz,
    fingerprint,
    load_npy,
    load_npz,
    npz_to_container,
    octahedral_group,
    read_container,
    read_dataset,
    read_npy_array,
    resize_trilinear,
    rotate_grid,
    rotate_interp,
    save_npy,
    save_npz,
    write_container,
)
from oracles import centered_coords, npy_bytes


def _zip(entries, mode=zipfile.ZIP_DEFLATED):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", mode) as zf:
        for name, arr in entries.items():
            zf.writestr(name + ".npy", npy_bytes(arr))
    return buf.getvalue()


# ----------------------------------------------------------------- NPY

def test_load_npy_u8_rescaled():
    v = load_npy(npy_bytes(np.full((1, 1, 1), 255, dtype=np.uint8)))
    assert v.shape == (1, 1, 1, 1)
    assert v.dtype == np.float32
    assert v[0, 0, 0, 0] == 1.0


def test_load_npy_zeros_f32():
    v = load_npy(npy_bytes(np.zeros((2, 2, 2), dtype=np.float32)))
    assert v.shape == (2, 2, 2, 1)
    assert not v.any()


def test_load_npy_rank4_keeps_channels(rng):
    a = rng.random((3, 4, 5, 2))
    v = load_npy(npy_bytes(a))
    np.testing.assert_array_equal(v, a.astype(np.float32))


def test_fortran_order_rejected():
    data = npy_bytes(np.asfortranarray(np.arange(8, dtype=np.float32).reshape(2, 2, 2)))
    with pytest.raises(FortranOrder) as exc:
        load_npy(data)
    assert exc.value.field == "fortran_order"


def test_bad_magic():
    with pytest.raises(BadMagic) as exc:
        load_npy(b"NOTNUMPY" + b"\x00" * 100)
    assert exc.value.field == "magic"


def test_unsupported_version():
    data = bytearray(npy_bytes(np.zeros((2, 2, 2), dtype=np.float32)))
    data[6] = 2
    with pytest.raises(BadMagic) as exc:
        load_npy(bytes(data))
    assert exc.value.field == "version"


def test_unsupported_dtype():
    with pytest.raises(UnsupportedDtype) as exc:
        load_npy(npy_bytes(np.zeros((2, 2, 2), dtype=np.float16)))
    assert exc.value.field == "descr"


def test_truncated_payload():
    data = npy_bytes(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(TruncatedPayload):
        load_npy(data[:-5])


def test_wrong_rank_rejected():
    with pytest.raises(ValueError):
        load_npy(npy_bytes(np.zeros((2, 2), dtype=np.float32)))


@settings(max_examples=60, deadline=None)
@given(
    shape=st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple),
    dtype=st.sampled_from(["u1", "<f4", "<f8", "<i8"]),
    seed=st.integers(0, 2**31),
)
def test_save_npy_matches_reference_writer(shape, dtype, seed):
    a = (np.random.default_rng(seed).random(shape) * 200).astype(dtype)
    assert save_npy(a) == npy_bytes(a)
    np.testing.assert_array_equal(read_npy_array(save_npy(a)), a)


def test_npy_round_trip_payload(rng):
    a = rng.random((3, 3, 3)).astype(np.float32)
    b = npy_bytes(a)
    assert save_npy(load_npy(b)[..., 0]) == b


# ----------------------------------------------------------------- NPZ

def test_load_npz_single_entry():
    out = load_npz(_zip({"a": np.zeros((2, 2, 2), dtype=np.float32)}))
    assert list(out) == ["a"]
    assert out["a"].shape == (2, 2, 2, 1) and not out["a"].any()


def test_load_npz_stored_entries():
    out = load_npz(_zip({"a": np.ones((2, 2, 2), dtype=np.float32)}, zipfile.ZIP_STORED))
    assert out["a"].min() == 1.0


def test_load_npz_empty_archive():
    assert load_npz(_zip({})) == {}


def test_load_npz_corrupted_central_directory():
    data = bytearray(_zip({"a": np.zeros((2, 2, 2), dtype=np.float32)}))
    eocd = data.rfind(b"PK\x05\x06")
    data[eocd:eocd + 4] = b"XXXX"
    with pytest.raises(BadZip):
        load_npz(bytes(data))


def test_load_npz_labels_and_images():
    imgs = np.arange(2 * 3 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3, 3)
    out = load_npz(_zip({"train_images": imgs, "train_labels": np.array([[1], [0]], dtype=np.uint8)}))
    assert out["train_labels"] == [1, 0]
    assert out["train_images"].shape == (2, 3, 3, 3, 1)
    np.testing.assert_allclose(out["train_images"][..., 0], imgs / 255.0, rtol=1e-7)


def test_load_npz_missing_entry():
    with pytest.raises(MissingEntry) as exc:
        load_npz(_zip({}), require=("train_images",))
    assert "train_images" in str(exc.value)


def test_save_npz_readable_by_numpy(rng):
    a = rng.random((2, 3, 3, 3)).astype(np.float32)
    with np.load(io.BytesIO(save_npz({"x": a}))) as z:
        np.testing.assert_array_equal(z["x"], a)


# ----------------------------------------------------------- containers

def test_container_round_trip_bit_identical(tmp_path, rng):
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=4)}
    write_container(tmp_path / "c.zip", tensors, {"format": "x", "version": 1})
    man, back = read_container(tmp_path / "c.zip")
    assert man["format"] == "x"
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()
    with zipfile.ZipFile(tmp_path / "c.zip") as zf:
        assert all(i.compress_type == zipfile.ZIP_STORED for i in zf.infolist())


def test_fingerprint_sensitive_to_content(rng):
    a = {"x": rng.random(5)}
    b = {"x": a["x"].copy()}
    assert fingerprint(a) == fingerprint(b)
    b["x"][0] += 1e-9
    assert fingerprint(a) != fingerprint(b)


def test_dataset_container_round_trip_bytes(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 5, 5, 5), dtype=np.uint8)
    labels = np.array([[0], [2], [1]], dtype=np.uint8)
    src = save_npz({"train_images": imgs, "train_labels": labels})
    man = npz_to_container(src, tmp_path / "d.mfd")
    assert man["u8_scaled"] == ["train_images"]
    _, stored = read_container(tmp_path / "d.mfd")
    assert stored["train_images"].dtype == np.float32
    assert stored["train_images"].max() <= 1.0
    back = container_to_npz(tmp_path / "d.mfd")
    with np.load(io.BytesIO(back)) as z:
        assert z["train_images"].tobytes() == imgs.tobytes()
        assert z["train_labels"].tobytes() == labels.tobytes()
    arrays, fp = read_dataset(tmp_path / "d.mfd")
    assert arrays["train_labels"].tolist() == [0, 2, 1]
    assert fp == man["fingerprint"]


def test_dataset_container_requires_train_images(tmp_path):
    with pytest.raises(MissingEntry):
        npz_to_container(save_npz({"train_labels": np.zeros(2, dtype=np.uint8)}), tmp_path / "d")


def test_container_to_npz_rejects_other_formats(tmp_path):
    write_container(tmp_path / "c", {"a": np.zeros(2)}, {"format": "other", "version": 1})
    with pytest.raises(VersionMismatch):
        container_to_npz(tmp_path / "c")


# ---------------------------------------------------------------- resize

def test_resize_constant_exact():
    v = np.full((28, 28, 28, 1), 3.5, dtype=np.float32)
    out = resize_trilinear(v, (29, 29, 29))
    assert out.shape == (29, 29, 29, 1)
    assert np.all(out == 3.5)


def test_resize_identity_bit_identical(rng):
    v = rng.random((6, 7, 8, 2)).astype(np.float32)
    out = resize_trilinear(v, (6, 7, 8))
    assert out.tobytes() == v.tobytes()


def test_resize_ramp_corner_aligned():
    i = np.arange(5, dtype=np.float32)
    v = np.broadcast_to(i[:, None, None, None], (5, 5, 5, 1))
    out = resize_trilinear(v, (9, 9, 9))
    expected = 0.5 * np.arange(9)
    np.testing.assert_allclose(out[:, 3, 4, 0], expected, atol=1e-6)
    np.testing.assert_allclose(np.diff(out[..., 0], axis=0), 0.5, atol=1e-6)
    np.testing.assert_allclose(np.diff(out[..., 0], axis=1), 0.0, atol=1e-6)


# -------------------------------------------------------------- rotations

def test_group_has_24_elements_and_is_closed():
    G = octahedral_group()
    assert len(G) == 24 and G[0] == IDENTITY
    mats = {g.matrix.tobytes() for g in G}
    assert len(mats) == 24
    for a in G:
        assert a.inverse() in G
        assert a @ a.inverse() == IDENTITY
        for b in G:
            assert (a @ b).matrix.tobytes() in mats


def test_group_elements_are_proper_rotations():
    for g in octahedral_group():
        m = g.matrix
        assert np.array_equal(m @ m.T, np.eye(3, dtype=int))
        assert round(np.linalg.det(m)) == 1


def test_quarter_turn_zero_is_identity(rng):
    v = rng.random((3, 4, 5, 2)).astype(np.float32)
    assert rotate_grid(v, GridRotation.quarter("Z", 0)).tobytes() == v.tobytes()


@pytest.mark.parametrize("axis", "XYZ")
def test_four_quarter_turns_identity(axis, rng):
    v = rng.random((5, 5, 5, 1)).astype(np.float32)
    q = GridRotation.quarter(axis)
    out = v
    for _ in range(4):
        out = rotate_grid(out, q)
    assert out.tobytes() == v.tobytes()


@pytest.mark.parametrize("g_index", range(24))
def test_one_hot_moves_by_signed_permutation(g_index):
    g = octahedral_group()[g_index]
    v = np.zeros((3, 3, 3, 1), dtype=np.float32)
    v[1, 0, 0, 0] = 1.0
    out = rotate_grid(v, g)
    c = np.array([1, 0, 0]) - 1
    dest = tuple(g.matrix @ c + 1)
    assert out[dest + (0,)] == 1.0 and out.sum() == 1.0


def test_quarter_z_one_hot_explicit():
    v = np.zeros((3, 3, 3, 1), dtype=np.float32)
    v[1, 0, 0, 0] = 1.0  # centred (0, -1, 0); a quarter turn about Z maps it to (1, 0, 0)
    out = rotate_grid(v, GridRotation.quarter("Z"))
    assert out[2, 1, 0, 0] == 1.0


@settings(max_examples=40, deadline=None)
@given(g_index=st.integers(0, 23), dims=st.tuples(*[st.integers(1, 6)] * 3),
       seed=st.integers(0, 2**31))
def test_rotate_then_inverse_is_identity(g_index, dims, seed):
    g = octahedral_group()[g_index]
    v = np.random.default_rng(seed).random(dims + (2,)).astype(np.float32)
    back = rotate_grid(rotate_grid(v, g), g.inverse())
    assert back.tobytes() == v.tobytes()


def test_rotate_grid_preserves_values(rng):
    v = rng.random((4, 5, 6, 1)).astype(np.float32)
    for g in octahedral_group():
        out = rotate_grid(v, g)
        assert np.array_equal(np.sort(out, axis=None), np.sort(v, axis=None))


def test_rotate_grid_matches_coordinate_map(rng):
    """out[R c] = v[c] on centred coordinates, checked voxel by voxel."""
    v = rng.random((3, 5, 7, 1))
    for g in octahedral_group():
        out = rotate_grid(v, g)
        R = g.matrix
        cin = np.stack(centered_coords(v.shape[:3]), axis=-1).reshape(-1, 3)
        cout = cin @ R.T
        dims_out = np.abs(R) @ np.array(v.shape[:3])
        idx_out = np.rint(cout + (dims_out - 1) / 2).astype(int)
        idx_in = np.rint(cin + (np.array(v.shape[:3]) - 1) / 2).astype(int)
        np.testing.assert_array_equal(out[tuple(idx_out.T)], v[tuple(idx_in.T)])


def test_rotate_interp_zero_angle_bit_identical(rng):
    v = rng.random((7, 7, 7, 1)).astype(np.float32)
    assert rotate_interp(v, "Z", 0.0).tobytes() == v.tobytes()


@pytest.mark.parametrize("axis", "XYZ")
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_rotate_interp_quarter_turns_match_grid(axis, k, rng):
    v = rng.random((9, 9, 9, 1)).astype(np.float32)
    out = rotate_interp(v, axis, k * math.pi / 2)
    ref = rotate_grid(v, GridRotation.quarter(axis, k))
    assert np.max(np.abs(out - ref)) <= 1e-6


def test_rotate_interp_constant_ball():
    v = np.full((11, 11, 11, 1), 2.0, dtype=np.float32)
    out = rotate_interp(v, "X", 0.6)
    c = np.stack(centered_coords((11, 11, 11)), axis=-1)
    r = np.linalg.norm(c, axis=-1)
    np.testing.assert_allclose(out[r <= 5.0, 0], 2.0, atol=1e-6)
    assert out[0, 0, 10, 0] == 0.0 and out[0, 10, 0, 0] == 0.0


def test_rotate_interp_full_turn_is_identity(rng):
    v = rng.random((9, 9, 9, 1)).astype(np.float32)
    assert rotate_interp(v, "Y", 2 * math.pi).tobytes() == v.tobytes()
