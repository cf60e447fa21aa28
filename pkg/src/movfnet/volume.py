"""Dense 3D volumes: NPY/NPZ ingestion, resizing, exact and interpolated rotations.

A volume is a C-contiguous float32 array of shape ``(W, H, D, C)`` on a unit
grid. Axis 0 is x, axis 1 is y, axis 2 is z; the trailing axis holds channels.
Functions that act on space (rotations) also accept leading batch axes and
treat the three axes before the last as spatial unless told otherwise.
"""

import ast
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    BadMagic,
    BadZip,
    FormatError,
    FortranOrder,
    MissingEntry,
    NonFiniteInput,
    TruncatedPayload,
    UnsupportedDtype,
    VersionMismatch,
)

NPY_MAGIC = b"\x93NUMPY"

_DESCR = {
    "|u1": np.dtype("u1"),
    "<u1": np.dtype("u1"),
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i8": np.dtype("<i8"),
    "<i4": np.dtype("<i4"),
}
VOLUME_DESCRS = ("|u1", "<u1", "<f4", "<f8")


def as_volume(arr):
    """Validate and coerce ``arr`` to a float32 ``(W, H, D, C)`` volume (rank 3 gains C=1)."""
    a = np.asarray(arr)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4 or min(a.shape) < 1:
        raise ValueError(f"volume must have shape (W, H, D, C) with all sizes >= 1, got {a.shape}")
    a = np.ascontiguousarray(a, dtype=np.float32)
    if not np.isfinite(a).all():
        raise NonFiniteInput("volume contains non-finite values")
    return a


# --------------------------------------------------------------------- NPY

def read_npy_array(data, allowed=None):
    """Parse NPY v1.0 bytes into a fresh numpy array.

    ``allowed`` restricts the accepted ``descr`` strings (default: all of
    ``_DESCR``). Errors carry the offending header field in ``.field``.
    """
    data = bytes(data)
    if len(data) < 10 or data[:6] != NPY_MAGIC:
        raise BadMagic("not an NPY file (magic string mismatch)", field="magic")
    if (data[6], data[7]) != (1, 0):
        raise BadMagic(f"unsupported NPY version {data[6]}.{data[7]} (only 1.0)", field="version")
    hlen = int.from_bytes(data[8:10], "little")
    if len(data) < 10 + hlen:
        raise TruncatedPayload(f"header declares {hlen} bytes, file ends early", field="header_len")
    try:
        header = ast.literal_eval(data[10:10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise BadMagic(f"unparseable NPY header: {exc}", field="header") from None
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= header.keys():
        raise BadMagic("NPY header lacks descr/fortran_order/shape", field="header")
    descr = header["descr"]
    accepted = _DESCR.keys() if allowed is None else allowed
    if not isinstance(descr, str) or descr not in accepted:
        raise UnsupportedDtype(f"unsupported dtype descr {descr!r}", field="descr")
    if header["fortran_order"]:
        raise FortranOrder("Fortran-ordered arrays are not supported", field="fortran_order")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise BadMagic(f"invalid shape {shape!r}", field="shape")
    dtype = _DESCR[descr]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = memoryview(data)[10 + hlen:]
    if len(payload) < need:
        raise TruncatedPayload(
            f"payload has {len(payload)} bytes, shape {shape} needs {need}", field="shape")
    return np.frombuffer(payload[:need], dtype=dtype).reshape(shape).copy()


def _to_float32(arr):
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr.astype(np.float32)


def load_npy(data):
    """NPY bytes -> float32 volume. uint8 data is rescaled to [0, 1]."""
    arr = read_npy_array(data, allowed=VOLUME_DESCRS)
    if arr.ndim not in (3, 4):
        raise FormatError(f"volume arrays must be rank 3 or 4, got shape {arr.shape}", field="shape")
    return as_volume(_to_float32(arr))


def save_npy(arr):
    """Serialize an array as NPY v1.0 bytes (little-endian, C order)."""
    arr = np.asarray(arr)
    dt = arr.dtype
    if dt == np.uint8:
        descr = "|u1"
    else:
        dt = dt.newbyteorder("<")
        descr = dt.str
        if descr not in _DESCR:
            raise UnsupportedDtype(f"cannot write dtype {arr.dtype}", field="descr")
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple(arr.shape)!r}, }}"
    header += " " * ((64 - (11 + len(header)) % 64) % 64) + "\n"
    body = np.ascontiguousarray(arr, dtype=dt).tobytes()
    return NPY_MAGIC + b"\x01\x00" + len(header).to_bytes(2, "little") + header.encode("latin1") + body


# --------------------------------------------------------------------- ZIP

def _open_zip(data):
    try:
        return zipfile.ZipFile(io.BytesIO(bytes(data)))
    except zipfile.BadZipFile as exc:
        raise BadZip(f"not a readable ZIP archive: {exc}", field="central_directory") from None


def _read_member(zf, name):
    try:
        return zf.read(name)
    except (zipfile.BadZipFile, OSError) as exc:
        raise BadZip(f"cannot read entry {name!r}: {exc}", field=name) from None


def load_npz(data, require=()):
    """Decode an NPZ archive.

    Entries ending in ``labels`` become lists of ints, entries ending in
    ``images`` become float32 stacks ``(N, W, H, D, C)``, everything else a
    single volume.
    """
    out = {}
    with _open_zip(data) as zf:
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            key = name[:-4]
            raw = _read_member(zf, name)
            if key.endswith("labels"):
                arr = read_npy_array(raw)
                out[key] = [int(x) for x in arr.reshape(-1)]
            elif key.endswith("images"):
                out[key] = _image_stack(read_npy_array(raw, allowed=VOLUME_DESCRS))
            else:
                out[key] = load_npy(raw)
    for name in require:
        if name not in out:
            raise MissingEntry(name)
    return out


def _image_stack(arr):
    if arr.ndim == 4:
        arr = arr[..., None]
    if arr.ndim != 5:
        raise FormatError(f"image stacks must be rank 4 or 5, got {arr.shape}", field="shape")
    arr = np.ascontiguousarray(_to_float32(arr))
    if not np.isfinite(arr).all():
        raise NonFiniteInput("image stack contains non-finite values")
    return arr


def save_npz(arrays, compress=True):
    buf = io.BytesIO()
    mode = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(buf, "w", mode) as zf:
        for name, arr in arrays.items():
            zf.writestr(name + ".npy", save_npy(arr))
    return buf.getvalue()


def write_container(path, tensors, manifest):
    """ZIP (stored) of ``manifest.json`` plus one NPY entry per tensor."""
    man = dict(manifest)
    man["tensors"] = sorted(tensors)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(man, indent=2, sort_keys=True))
        for name in sorted(tensors):
            zf.writestr(name + ".npy", save_npy(tensors[name]))


def read_container(path):
    """Inverse of ``write_container``: ``(manifest, {name: array})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    with _open_zip(data) as zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise MissingEntry("manifest.json")
        try:
            manifest = json.loads(_read_member(zf, "manifest.json").decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}", field="manifest") from None
        tensors = {}
        for name in manifest.get("tensors", []):
            if name + ".npy" not in names:
                continue
            tensors[name] = read_npy_array(_read_member(zf, name + ".npy"))
    return manifest, tensors


def fingerprint(arrays):
    """sha256 over names, dtypes, shapes and payloads, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(f"{name}|{a.dtype.str}|{a.shape}|".encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ resize

def _lerp_axis(a, axis, new_n):
    n = a.shape[axis]
    if new_n == n:
        return a
    if n == 1:
        return np.repeat(a, new_n, axis=axis)
    if new_n == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(new_n) * ((n - 1) / (new_n - 1))
    i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    w = pos - i0
    shape = [1] * a.ndim
    shape[axis] = new_n
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo + w * (hi - lo)


def resize_trilinear(v, new_dims):
    """Corner-aligned trilinear resize; channels independent, constants preserved exactly."""
    v = as_volume(v)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValueError(f"new_dims must be three sizes >= 1, got {new_dims}")
    if tuple(new_dims) == v.shape[:3]:
        return v.copy()
    out = v.astype(np.float64)
    for ax, n in enumerate(new_dims):
        out = _lerp_axis(out, ax, int(n))
    return np.ascontiguousarray(out, dtype=np.float32)


# --------------------------------------------------------------- rotations

AXES = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class GridRotation:
    """A rotation of the voxel lattice: ``(R c)[a] = signs[a] * c[perm[a]]``."""

    perm: tuple = (0, 1, 2)
    signs: tuple = (1, 1, 1)

    @property
    def matrix(self):
        m = np.zeros((3, 3), dtype=np.int64)
        for a in range(3):
            m[a, self.perm[a]] = self.signs[a]
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.rint(np.asarray(m)).astype(np.int64)
        perm = tuple(int(np.flatnonzero(m[a])[0]) for a in range(3))
        signs = tuple(int(m[a, perm[a]]) for a in range(3))
        g = cls(perm, signs)
        if not np.array_equal(g.matrix, m) or round(np.linalg.det(m)) != 1:
            raise ValueError("matrix is not a proper signed permutation")
        return g

    @classmethod
    def quarter(cls, axis, quarter_turns=1):
        return cls.from_matrix(np.rint(rotation_matrix(axis, quarter_turns * math.pi / 2)))

    def compose(self, other):
        """Matrix product ``self @ other`` (apply ``other`` first)."""
        return GridRotation.from_matrix(self.matrix @ other.matrix)

    def inverse(self):
        return GridRotation.from_matrix(self.matrix.T)

    def __matmul__(self, other):
        return self.compose(other)


IDENTITY = GridRotation()


def rotation_matrix(axis, angle):
    """Right-handed rotation by ``angle`` radians about coordinate ``axis`` ('X', 'Y' or 'Z')."""
    c, s = math.cos(angle), math.sin(angle)
    ax = AXES[axis.upper()] if isinstance(axis, str) else int(axis)
    if ax == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if ax == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@lru_cache(maxsize=None)
def octahedral_group():
    """The 24 lattice rotations, sorted deterministically; element 0 is the identity."""
    import itertools

    elems = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            g = GridRotation(perm, signs)
            if round(np.linalg.det(g.matrix)) == 1:
                elems.append(g)
    elems.sort(key=lambda g: (g != IDENTITY, g.perm, tuple(-s for s in g.signs)))
    return tuple(elems)


def rotate_grid(a, g, axes=None):
    """Apply lattice rotation ``g`` to the spatial axes of ``a`` (pure index permutation).

    ``axes`` defaults to the three axes before the trailing channel axis.
    The result satisfies ``out[R c] = a[c]`` in centered coordinates.
    """
    a = np.asarray(a)
    if axes is None:
        axes = (a.ndim - 4, a.ndim - 3, a.ndim - 2)
    axes = tuple(ax % a.ndim for ax in axes)
    order = list(range(a.ndim))
    for k in range(3):
        order[axes[k]] = axes[g.perm[k]]
    out = a.transpose(order)
    flips = tuple(axes[k] for k in range(3) if g.signs[k] < 0)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)


def _snap(x):
    r = np.rint(x)
    return np.where(np.abs(x - r) < 1e-9, r, x)


def rotate_interp(v, axis, angle):
    """Rotate about the grid center by ``angle`` radians with trilinear inverse mapping.

    Samples that fall outside the grid read 0. Source coordinates within
    1e-9 of a lattice point are snapped to it, so quarter turns on odd grids
    reproduce ``rotate_grid`` exactly.
    """
    v = as_volume(v)
    if angle == 0:
        return v.copy()
    W, H, D, C = v.shape
    R = rotation_matrix(axis, angle)
    centre = (np.array([W, H, D]) - 1) / 2.0
    grid = np.stack(np.meshgrid(np.arange(W), np.arange(H), np.arange(D), indexing="ij"), axis=-1)
    c = grid.reshape(-1, 3) - centre
    src = _snap(c @ R + centre)  # rows of R^T c
    dims = np.array([W, H, D])
    inside = np.all((src >= -1e-9) & (src <= dims - 1 + 1e-9), axis=1)
    src = np.clip(src, 0, dims - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), np.maximum(dims - 2, 0))
    w = src - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    flat = v.astype(np.float64)

    def at(ix, iy, iz):
        return flat[ix, iy, iz]

    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    wx, wy, wz = (w[:, k:k + 1] for k in range(3))
    c00 = at(x0, y0, z0) + wx * (at(x1, y0, z0) - at(x0, y0, z0))
    c10 = at(x0, y1, z0) + wx * (at(x1, y1, z0) - at(x0, y1, z0))
    c01 = at(x0, y0, z1) + wx * (at(x1, y0, z1) - at(x0, y0, z1))
    c11 = at(x0, y1, z1) + wx * (at(x1, y1, z1) - at(x0, y1, z1))
    c0 = c00 + wy * (c10 - c00)
    c1 = c01 + wy * (c11 - c01)
    val = c0 + wz * (c1 - c0)
    val[~inside] = 0.0
    return np.ascontiguousarray(val.reshape(W, H, D, C), dtype=np.float32)


# ----------------------------------------------------------------- datasets

DATASET_FORMAT = "movfnet-dataset"
DATASET_VERSION = 1


def _raw_npz(data):
    out = {}
    with _open_zip(data) as zf:
        for name in zf.namelist():
            if name.endswith(".npy"):
                out[name[:-4]] = read_npy_array(_read_member(zf, name))
    return out


def npz_to_container(npz_bytes, path, require=("train_images", "train_labels")):
    """Store an NPZ dataset as a container; uint8 image stacks become [0, 1] float32 once.

    The manifest lists the rescaled entries so ``container_to_npz`` restores
    the original bytes.
    """
    raw = _raw_npz(npz_bytes)
    for name in require:
        if name not in raw:
            raise MissingEntry(name)
    tensors, scaled = {}, []
    for name, arr in raw.items():
        if name.endswith("images") and arr.dtype == np.uint8:
            tensors[name] = arr.astype(np.float32) / np.float32(255.0)
            scaled.append(name)
        else:
            tensors[name] = arr
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "u8_scaled": sorted(scaled),
        "fingerprint": fingerprint(raw),
    }
    write_container(path, tensors, manifest)
    return manifest


def container_to_npz(path, compress=True):
    manifest, tensors = read_container(path)
    if manifest.get("format") != DATASET_FORMAT:
        raise VersionMismatch(f"not a dataset container (format {manifest.get('format')!r})",
                              field="format")
    if manifest.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"dataset container version {manifest.get('version')!r}", field="version")
    out = {}
    for name, arr in tensors.items():
        if name in manifest.get("u8_scaled", []):
            arr = np.rint(arr.astype(np.float64) * 255.0).astype(np.uint8)
        out[name] = arr
    return save_npz(out, compress=compress)


def read_dataset(path):
    """Images ``(N, W, H, D, C)`` float32 and int64 labels from an NPZ file or a dataset container.

    Returns ``(arrays, fingerprint)``; label arrays are flattened.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    with _open_zip(data) as zf:
        is_container = "manifest.json" in zf.namelist()
    if is_container:
        manifest, raw = read_container(path)
        if manifest.get("format") != DATASET_FORMAT:
            raise VersionMismatch(f"not a dataset container (format {manifest.get('format')!r})",
                                  field="format")
        fp = manifest.get("fingerprint") or fingerprint(raw)
    else:
        raw = _raw_npz(data)
        fp = fingerprint(raw)
    out = {}
    for name, arr in raw.items():
        if name.endswith("labels"):
            out[name] = np.asarray(arr).reshape(-1).astype(np.int64)
        elif name.endswith("images"):
            out[name] = _image_stack(arr)
    return out, fp
