"""Moving-frame network: blocks, full forward pass, manual backward pass, checkpoints.

The frame field is computed once from the network input and reused by every
block. Each block takes the Gaussian 2-jet of its input features, rotates it
into the fixed frame, runs a voxelwise two-layer MLP (linear, batchnorm,
leaky ReLU, linear, batchnorm) and optionally adds the block input. Because
the frame is an input, not a function of the parameters, every map between
parameters and logits is an ordinary composition of linear maps and
pointwise nonlinearities, and the backward pass never touches the
eigendecomposition.

Arrays are channels-last, batched: features ``(B, W, H, D, q)``.
Parameters live in a flat ``dict[str, ndarray]``.
"""

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    EvenDimensionWithStride,
    MissingTensor,
    ShapeMismatch,
    StaleCache,
    VersionMismatch,
)
from .frame import DEFAULT_TAU, FrameField, apply_frame, apply_frame_adjoint, frame_from_volume
from .gaussian import jet2, jet2_adjoint
from .volume import read_container, write_container

CHECKPOINT_FORMAT = "movfnet-checkpoint"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    mlp_hidden: int = 0  # 0 -> same as channels
    sigma: float = 1.0
    leaky_slope: float = 0.01
    residual: bool = True
    stride: int = 1

    @property
    def hidden(self):
        return self.mlp_hidden or self.channels


@dataclass(frozen=True)
class Arch:
    blocks: tuple
    num_classes: int
    frame_sigma: float = 2.0
    tau: float = DEFAULT_TAU
    in_channels: int = 1
    padding: str = "reflect"
    eig_to_first: bool = True

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValueError("architecture needs at least one block")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels != 1:
            raise ValueError("frames are built from a single-channel input; in_channels must be 1")
        if blocks[0].residual and blocks[0].channels != self.in_channels:
            raise ValueError("a residual first block needs channels == in_channels")
        for b in blocks:
            if b.channels < 1 or b.hidden < 1 or b.sigma <= 0 or b.stride not in (1, 2):
                raise ValueError(f"invalid block config {b}")

    def block_input_channels(self, l):
        return self.in_channels if l == 0 else self.blocks[l].channels

    def has_transition(self, l):
        return l > 0 and self.blocks[l - 1].channels != self.blocks[l].channels

    def mlp_inputs(self, l):
        extra = 3 if (l == 0 and self.eig_to_first) else 0
        return 10 * self.block_input_channels(l) + extra

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockConfig(**b) for b in d["blocks"])
        return cls(**d)


def medmnist_arch(num_classes, frame_sigma=2.0, sigma=1.0, tau=DEFAULT_TAU):
    """Five blocks of 16, 16, 32, 32, 64 channels with stride 2 in the second block."""
    widths = (16, 16, 32, 32, 64)
    blocks = tuple(
        BlockConfig(channels=w, sigma=sigma, residual=(i > 0), stride=2 if i == 1 else 1)
        for i, w in enumerate(widths))
    return Arch(blocks, num_classes, frame_sigma=frame_sigma, tau=tau)


def small_arch(widths, num_classes, stride_block=None, frame_sigma=2.0, sigma=1.0, tau=DEFAULT_TAU):
    blocks = tuple(
        BlockConfig(channels=w, sigma=sigma, residual=(i > 0), stride=2 if i == stride_block else 1)
        for i, w in enumerate(widths))
    return Arch(blocks, num_classes, frame_sigma=frame_sigma, tau=tau)


# ------------------------------------------------------------- parameters

def tensor_shapes(arch):
    shapes = {}
    for l, b in enumerate(arch.blocks):
        if arch.has_transition(l):
            shapes[f"t{l}.w"] = (arch.blocks[l - 1].channels, b.channels)
        fin, h, q = arch.mlp_inputs(l), b.hidden, b.channels
        p = f"b{l}."
        shapes.update({
            p + "w1": (fin, h), p + "b1": (h,),
            p + "bn1.gamma": (h,), p + "bn1.beta": (h,), p + "bn1.mean": (h,), p + "bn1.var": (h,),
            p + "w2": (h, q), p + "b2": (q,),
            p + "bn2.gamma": (q,), p + "bn2.beta": (q,), p + "bn2.mean": (q,), p + "bn2.var": (q,),
        })
    shapes["head.w"] = (arch.blocks[-1].channels, arch.num_classes)
    shapes["head.b"] = (arch.num_classes,)
    return shapes


def is_buffer(name):
    """Running batchnorm statistics are state, not trainable parameters."""
    return name.endswith(".mean") or name.endswith(".var")


def init_params(arch, seed=0, dtype=np.float32):
    """He-uniform weights (leaky-ReLU gain), zero biases, unit batchnorm scale.

    The head starts small: max-pooled features are large, so a full-scale
    head gives a badly saturated initial softmax.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in tensor_shapes(arch).items():
        if name == "head.w":
            bound = 0.1 / np.sqrt(shape[0])
            val = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".w") or name.endswith("w1") or name.endswith("w2"):
            slope = 0.01
            bound = np.sqrt(6.0 / ((1.0 + slope**2) * shape[0]))
            val = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma") or name.endswith(".var"):
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = val.astype(dtype)
    return params


def cast_params(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def params_token(params):
    crc = 0
    for name in sorted(params):
        a = np.ascontiguousarray(params[name])
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(a.tobytes(), crc)
    return crc


def check_params(arch, params):
    for name, shape in tensor_shapes(arch).items():
        if name not in params:
            raise MissingTensor(name)
        if tuple(params[name].shape) != tuple(shape):
            raise ShapeMismatch(f"{name}: expected shape {shape}, got {params[name].shape}")


# -------------------------------------------------------------- batchnorm

def _bn_forward(a, params, prefix, mode):
    gamma, beta = params[prefix + "gamma"], params[prefix + "beta"]
    if mode == "train":
        mean = a.mean(axis=0)
        var = a.var(axis=0)
    else:
        mean, var = params[prefix + "mean"], params[prefix + "var"]
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(a.dtype)
    xhat = (a - mean) * inv
    return xhat * gamma + beta, (xhat, inv, mean, var)


def _bn_backward(dy, bn_cache, gamma, mode):
    xhat, inv, _, _ = bn_cache
    dgamma = np.einsum("nc,nc->c", dy, xhat)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if mode == "train":
        n = dy.shape[0]
        da = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.einsum("nc,nc->c", dxhat, xhat))
    else:
        da = dxhat * inv
    return da, dgamma, dbeta


# ------------------------------------------------------------------ block

@dataclass
class BlockCache:
    in_shape: tuple
    frames: FrameField
    mlp_in: np.ndarray
    bn1: tuple
    pre1: np.ndarray
    hidden: np.ndarray
    bn2: tuple
    n_jet: int


def _check_stride(shape, stride):
    if stride > 1 and any(n % 2 == 0 for n in shape):
        raise EvenDimensionWithStride(
            f"stride-2 subsampling needs odd spatial dimensions to keep the grid center, got {shape}")


def block_forward(features, frames, cfg, params, prefix, mode="eval", eigvals=False,
                  padding="reflect"):
    """One block on batched features ``(B, W, H, D, q)`` with the fixed frames at the same grid.

    Returns ``(out, cache)``; with ``cfg.stride == 2`` the output lives on the
    even-index subgrid.
    """
    x = np.asarray(features)
    if x.ndim != 5:
        raise ShapeMismatch(f"block input must be (B, W, H, D, q), got {x.shape}")
    _check_stride(x.shape[1:4], cfg.stride)
    sub = x.shape[:1] + tuple((n + cfg.stride - 1) // cfg.stride for n in x.shape[1:4])
    if frames.P.shape[:4] == x.shape[:4]:
        fr = frames.subsample(cfg.stride) if cfg.stride > 1 else frames
    elif frames.P.shape[:4] == sub:
        fr = frames  # already on the output subgrid
    else:
        raise ShapeMismatch(f"frames {frames.P.shape[:4]} do not match features {x.shape[:4]}")
    J = jet2(x, cfg.sigma, padding, stride=cfg.stride)
    Z = apply_frame(fr, J)
    out_grid = Z.shape[:4]
    n = int(np.prod(out_grid))
    Z = Z.reshape(n, -1)
    n_jet = Z.shape[1]
    if eigvals:
        Z = np.concatenate([Z, fr.eigvals.reshape(n, 3).astype(Z.dtype)], axis=1)
    a1 = Z @ params[prefix + "w1"] + params[prefix + "b1"]
    y1, bn1 = _bn_forward(a1, params, prefix + "bn1.", mode)
    h = np.where(y1 > 0, y1, y1 * x.dtype.type(cfg.leaky_slope))
    a2 = h @ params[prefix + "w2"] + params[prefix + "b2"]
    y2, bn2 = _bn_forward(a2, params, prefix + "bn2.", mode)
    out = y2.reshape(out_grid + (cfg.channels,))
    if cfg.residual:
        s = slice(None, None, cfg.stride)
        out = out + x[:, s, s, s, :]
    cache = BlockCache(x.shape, fr, Z, bn1, y1, h, bn2, n_jet)
    return np.ascontiguousarray(out), cache


def block_backward(dout, cache, cfg, params, prefix, grads, mode, padding="reflect", need_input=True):
    n = cache.mlp_in.shape[0]
    d2 = dout.reshape(n, -1)
    da2, grads[prefix + "bn2.gamma"], grads[prefix + "bn2.beta"] = _bn_backward(
        d2, cache.bn2, params[prefix + "bn2.gamma"], mode)
    grads[prefix + "w2"] = cache.hidden.T @ da2
    grads[prefix + "b2"] = da2.sum(axis=0)
    dh = da2 @ params[prefix + "w2"].T
    dy1 = np.where(cache.pre1 > 0, dh, dh * dh.dtype.type(cfg.leaky_slope))
    da1, grads[prefix + "bn1.gamma"], grads[prefix + "bn1.beta"] = _bn_backward(
        dy1, cache.bn1, params[prefix + "bn1.gamma"], mode)
    grads[prefix + "w1"] = cache.mlp_in.T @ da1
    grads[prefix + "b1"] = da1.sum(axis=0)
    if not need_input:
        return None
    dZ = da1 @ params[prefix + "w1"][: cache.n_jet].T
    out_grid = dout.shape[:4]
    dJ = apply_frame_adjoint(cache.frames, dZ.reshape(out_grid + (cache.n_jet,)))
    dx = jet2_adjoint(dJ, cfg.sigma, cache.in_shape[1:4], padding, stride=cfg.stride)
    if cfg.residual:
        s = slice(None, None, cfg.stride)
        dx[:, s, s, s, :] += dout
    return dx


# ---------------------------------------------------------------- network

@dataclass
class ForwardCache:
    mode: str
    token: int
    transitions: dict
    blocks: list
    pooled: np.ndarray
    argmax: np.ndarray
    final_shape: tuple
    running: dict = field(default_factory=dict)
    batch_stats: dict = field(default_factory=dict)


def compute_frames(x, arch):
    """Frames for a batch, evaluated only where the first block needs them."""
    x = np.asarray(x)
    if x.ndim == 4:
        x = x[None]
    return frame_from_volume(x, arch.frame_sigma, arch.tau, arch.padding, stride=arch.blocks[0].stride)


def _as_batch(v, dtype):
    x = np.asarray(v)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise ShapeMismatch(f"network input must be (W, H, D, 1) or (B, W, H, D, 1), got {x.shape}")
    return np.ascontiguousarray(x, dtype=dtype)


def network_forward(v, arch, params, mode="eval", frames=None, momentum=BN_MOMENTUM):
    """Logits ``(B, num_classes)`` and a cache for ``network_backward``.

    Compute precision follows ``params`` (float32 or float64); frames are
    always derived in float64. In train mode the cache carries the updated
    running batchnorm statistics in ``cache.running``; ``params`` is not mutated.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = params["head.w"].dtype
    x = _as_batch(v, dtype)
    stride_grid = x.shape[1:4]
    for b in arch.blocks:
        _check_stride(stride_grid, b.stride)
        if b.stride > 1:
            stride_grid = tuple((n + 1) // 2 for n in stride_grid)
    if frames is None:
        frames = compute_frames(x, arch)
    frames = FrameField(frames.P.astype(dtype, copy=False), frames.eigvals.astype(dtype, copy=False))
    cache = ForwardCache(mode, params_token(params), {}, [], None, None, None)
    feats = x
    for l, b in enumerate(arch.blocks):
        if arch.has_transition(l):
            cache.transitions[l] = feats
            feats = feats @ params[f"t{l}.w"]
        prefix = f"b{l}."
        feats, bc = block_forward(feats, frames, b, params, prefix, mode,
                                  eigvals=(l == 0 and arch.eig_to_first), padding=arch.padding)
        cache.blocks.append(bc)
        if b.stride > 1:
            frames = bc.frames
        if mode == "train":
            for k, bn in (("bn1.", bc.bn1), ("bn2.", bc.bn2)):
                _, _, mean, var = bn
                cache.batch_stats[prefix + k + "mean"] = mean
                cache.batch_stats[prefix + k + "var"] = var
                for stat, val in (("mean", mean), ("var", var)):
                    old = params[prefix + k + stat]
                    cache.running[prefix + k + stat] = (momentum * old + (1 - momentum) * val).astype(dtype)
    B, q = feats.shape[0], feats.shape[-1]
    flat = feats.reshape(B, -1, q)
    cache.argmax = flat.argmax(axis=1)
    cache.pooled = np.take_along_axis(flat, cache.argmax[:, None, :], axis=1)[:, 0, :]
    cache.final_shape = feats.shape
    logits = cache.pooled @ params["head.w"] + params["head.b"]
    return logits, cache


def network_backward(cache, dlogits, params, arch):
    """Exact reverse-mode gradients for every trainable tensor (buffers excluded)."""
    if cache is None or cache.token != params_token(params):
        raise StaleCache("cache was produced with different parameter values")
    dlogits = np.asarray(dlogits, dtype=params["head.w"].dtype)
    grads = {}
    grads["head.w"] = cache.pooled.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dpool = dlogits @ params["head.w"].T
    B, q = dpool.shape
    dfeat = np.zeros((B, int(np.prod(cache.final_shape[1:4])), q), dtype=dpool.dtype)
    np.put_along_axis(dfeat, cache.argmax[:, None, :], dpool[:, None, :], axis=1)
    dfeat = dfeat.reshape(cache.final_shape)
    for l in reversed(range(len(arch.blocks))):
        b = arch.blocks[l]
        need = l > 0
        dfeat = block_backward(dfeat, cache.blocks[l], b, params, f"b{l}.", grads, cache.mode,
                               arch.padding, need_input=need)
        if l in cache.transitions:
            tin = cache.transitions[l]
            qin = tin.shape[-1]
            grads[f"t{l}.w"] = tin.reshape(-1, qin).T @ dfeat.reshape(-1, b.channels)
            dfeat = dfeat @ params[f"t{l}.w"].T
    return grads


def calibrate_batchnorm(params, arch, x):
    """Copy batch statistics of a train-mode pass over ``x`` into the running buffers."""
    _, cache = network_forward(x, arch, params, mode="train")
    out = dict(params)
    for name, val in cache.batch_stats.items():
        out[name] = np.asarray(val, dtype=params[name].dtype)
    return out


def random_params(arch, seed, dtype=np.float32, calibrate_on=None):
    """Initialized weights plus randomized batchnorm affine terms (for harness checks)."""
    rng = np.random.default_rng(seed + 7919)
    params = init_params(arch, seed, dtype)
    for name in params:
        if name.endswith(".gamma"):
            params[name] = rng.uniform(0.5, 1.5, params[name].shape).astype(dtype)
        elif name.endswith(".beta") or name.endswith(".b1") or name.endswith(".b2") or name == "head.b":
            params[name] = rng.normal(0, 0.1, params[name].shape).astype(dtype)
        elif name == "head.w":
            fan_in = params[name].shape[0]
            params[name] = rng.normal(0, 1 / np.sqrt(fan_in), params[name].shape).astype(dtype)
    if calibrate_on is not None:
        params = calibrate_batchnorm(params, arch, calibrate_on)
    return params


# ------------------------------------------------------------ checkpoints

def save_checkpoint(params, arch, path, extra=None):
    """ZIP of one NPY per tensor plus ``manifest.json`` (format, version, architecture)."""
    check_params(arch, params)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": arch.to_dict(),
    }
    if extra:
        manifest["extra"] = extra
    write_container(path, params, manifest)


def load_checkpoint(path, with_manifest=False):
    manifest, tensors = read_container(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"not a checkpoint (format {manifest.get('format')!r})", field="format")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {manifest.get('version')!r}, this build reads {CHECKPOINT_VERSION}",
            field="version")
    arch = Arch.from_dict(manifest["arch"])
    for name in tensor_shapes(arch):
        if name not in tensors:
            raise MissingTensor(name)
    params = {name: tensors[name] for name in tensor_shapes(arch)}
    check_params(arch, params)
    if with_manifest:
        return params, arch, manifest
    return params, arch
