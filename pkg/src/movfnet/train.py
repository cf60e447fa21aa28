"""Loss, optimizers, augmentation, the training loop and evaluation metrics."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch
from .frame import FrameField
from .network import compute_frames, init_params, is_buffer, network_backward, network_forward
from .volume import octahedral_group, rotate_grid, rotate_interp

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_accuracy")
FRAME_CACHE_BYTES = 1 << 30


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sgd_momentum: float = 0.0
    augment: str = "none"  # none | octahedral | arbitrary
    seed: int = 0
    deterministic: bool = True
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive and epochs non-negative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.augment not in ("none", "octahedral", "arbitrary"):
            raise ValueError(f"augment must be none, octahedral or arbitrary, got {self.augment!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Metrics:
    accuracy: float
    mean_cross_entropy: float
    class_total: np.ndarray
    class_correct: np.ndarray
    predictions: np.ndarray = field(repr=False)
    logits: np.ndarray = field(repr=False)

    @property
    def total(self):
        return int(self.class_total.sum())


# ------------------------------------------------------------------ loss

def cross_entropy(logits, labels):
    """Softmax cross-entropy via log-sum-exp.

    A 1D ``logits`` with an int label gives ``(loss, softmax - onehot)``.
    A batch ``(B, K)`` gives the mean loss and the gradient of that mean.
    """
    lg = np.asarray(logits, dtype=np.float64)
    single = lg.ndim == 1
    if single:
        lg = lg[None]
    y = np.atleast_1d(np.asarray(labels))
    K = lg.shape[1]
    if K < 2:
        raise ValueError("cross_entropy needs at least two classes")
    if y.shape != (lg.shape[0],):
        raise ShapeMismatch(f"{lg.shape[0]} logit rows but labels of shape {y.shape}")
    if np.any(y < 0) or np.any(y >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K}), got {y.tolist()}")
    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(s) + m
    rows = np.arange(lg.shape[0])
    losses = lse[:, 0] - lg[rows, y]
    grad = e / s
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / lg.shape[0]


# ------------------------------------------------------------- optimizers

def adam_init():
    return {"t": 0, "m": {}, "v": {}}


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam on every tensor in ``grads``; returns new params and state."""
    t = state["t"] + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params = dict(params)
    m_all, v_all = dict(state["m"]), dict(state["v"])
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = m_all.get(name, np.zeros_like(p))
        v = v_all.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_params[name] = (p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
        m_all[name], v_all[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, {"t": t, "m": m_all, "v": v_all}


def sgd_step(params, grads, state, cfg):
    new_params = dict(params)
    vel = dict(state.get("m", {}))
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        u = cfg.sgd_momentum * vel.get(name, np.zeros_like(p)) + g
        vel[name] = u
        new_params[name] = (p - cfg.learning_rate * u).astype(p.dtype)
    return new_params, {"t": state.get("t", 0) + 1, "m": vel, "v": {}}


# ----------------------------------------------------------- augmentation

def augment_octahedral(v, rng):
    """Apply one of the 24 lattice rotations, chosen uniformly."""
    group = octahedral_group()
    return rotate_grid(v, group[int(rng.integers(len(group)))])


def augment_arbitrary(v, rng):
    axis = "XYZ"[int(rng.integers(3))]
    return rotate_interp(v, axis, float(rng.uniform(0, 2 * math.pi)))


def _augment_batch(xb, mode, rng):
    if mode == "none":
        return xb
    fn = augment_octahedral if mode == "octahedral" else augment_arbitrary
    return np.stack([fn(x, rng) for x in xb])


# ------------------------------------------------------------ evaluation

def precompute_frames(xs, arch, dtype=np.float32, batch_size=32):
    """Frames of a whole dataset, or None when they would not fit the cache budget."""
    if len(xs) == 0:
        return None
    first = compute_frames(xs[:1], arch)
    per_sample = (first.P[0].size + first.eigvals[0].size) * np.dtype(dtype).itemsize
    if per_sample * len(xs) > FRAME_CACHE_BYTES:
        return None
    P = np.empty((len(xs),) + first.P.shape[1:], dtype=dtype)
    ev = np.empty((len(xs),) + first.eigvals.shape[1:], dtype=dtype)
    for i in range(0, len(xs), batch_size):
        fr = compute_frames(xs[i:i + batch_size], arch)
        P[i:i + batch_size] = fr.P
        ev[i:i + batch_size] = fr.eigvals
    return FrameField(P, ev)


def predict_logits(xs, params, arch, batch_size=32, frames=None):
    out = []
    for i in range(0, len(xs), batch_size):
        fr = None if frames is None else frames.take(slice(i, i + batch_size))
        lg, _ = network_forward(xs[i:i + batch_size], arch, params, mode="eval", frames=fr)
        out.append(lg)
    return np.concatenate(out) if out else np.zeros((0, arch.num_classes))


def metrics_from_logits(logits, labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    logits = np.asarray(logits)
    pred = logits.argmax(axis=1) if len(logits) else np.zeros(0, dtype=np.int64)
    total = np.bincount(labels, minlength=num_classes)
    correct = np.bincount(labels[pred == labels], minlength=num_classes)
    ce = cross_entropy(logits, labels)[0] if len(labels) else float("nan")
    acc = float(correct.sum()) / len(labels) if len(labels) else float("nan")
    return Metrics(acc, ce, total, correct, pred, logits)


def evaluate(xs, ys, params, arch, batch_size=32, frames=None):
    """Eval-mode forward over a dataset; accuracy is correct / total exactly."""
    logits = predict_logits(xs, params, arch, batch_size, frames)
    return metrics_from_logits(logits, ys, arch.num_classes)


# --------------------------------------------------------------- training

def trainable(params):
    return [k for k in params if not is_buffer(k)]


def train_step(params, opt_state, xb, yb, arch, cfg, frames=None):
    logits, cache = network_forward(xb, arch, params, mode="train", frames=frames)
    loss, dlogits = cross_entropy(logits, yb)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    grads = network_backward(cache, dlogits, params, arch)
    step = adam_step if cfg.optimizer == "adam" else sgd_step
    params, opt_state = step(params, grads, opt_state, cfg)
    params.update(cache.running)
    return params, opt_state, loss


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_accuracy"]))])


def train_loop(train_x, train_y, val_x, val_y, arch, cfg, params=None, history_path=None,
               on_epoch=None):
    """Seeded mini-batch training with per-epoch validation.

    Returns ``(best_params, history)``; ``best_params`` are the parameters
    after the epoch with the highest validation accuracy (earliest on ties).
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ShapeMismatch("images and labels differ in length")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(arch, seed=cfg.seed)
    params = dict(params)
    opt_state = {"t": 0, "m": {}, "v": {}}
    train_y = np.asarray(train_y, dtype=np.int64)
    dtype = params["head.w"].dtype
    # frames depend only on the input, so without augmentation they are computed once
    train_fr = precompute_frames(train_x, arch, dtype) if cfg.augment == "none" else None
    val_fr = precompute_frames(val_x, arch, dtype)
    history = []
    best, best_acc = dict(params), -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_x))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            xb = _augment_batch(train_x[idx], cfg.augment, rng)
            fr = None if train_fr is None else train_fr.take(idx)
            params, opt_state, loss = train_step(params, opt_state, xb, train_y[idx], arch, cfg, fr)
            losses.append(loss)
        val = evaluate(val_x, val_y, params, arch, cfg.eval_batch_size, val_fr)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": val.accuracy}
        history.append(row)
        log.info("epoch %d loss %.4f val_acc %.4f (%.1fs)", epoch, row["train_loss"],
                 val.accuracy, time.perf_counter() - t0)
        if val.accuracy > best_acc:
            best_acc, best = val.accuracy, dict(params)
        if on_epoch is not None:
            on_epoch(row, params)
        if history_path is not None:
            write_history(history_path, history)
    return best, history


# ------------------------------------------------------- synthetic task

def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _blob(grid, centre, rng, amplitude):
    R = _random_rotation(rng)
    stds = rng.uniform(1.0, 2.0, size=3)
    prec = R @ np.diag(1.0 / stds**2) @ R.T
    d = grid - centre
    return amplitude * np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, prec, d))


def make_blob_dataset(n, size=29, seed=0, noise=0.02):
    """Binary task: label 0 = one anisotropic Gaussian blob, label 1 = two.

    Blob orientations are uniform on SO(3) and the first centre is uniform in
    the interior. The second blob sits 5.5 to 8 voxels from the first in a
    uniformly random direction, so a pair always fits inside one receptive
    field (global max pooling cannot count blobs that are far apart).
    """
    if size < 19:
        raise ValueError(f"blob volumes need size >= 19 to fit a pair, got {size}")
    rng = np.random.default_rng(seed)
    c = np.arange(size, dtype=np.float64)
    grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    lo, hi = 6.0, size - 7.0
    xs = np.empty((n, size, size, size, 1), dtype=np.float32)
    ys = rng.integers(0, 2, size=n)
    for i in range(n):
        first = rng.uniform(lo, hi, size=3)
        vol = _blob(grid, first, rng, rng.uniform(0.7, 1.0))
        if ys[i] == 1:
            while True:
                d = rng.normal(size=3)
                second = first + d / np.linalg.norm(d) * rng.uniform(5.5, 8.0)
                if np.all(second >= lo - 2) and np.all(second <= hi + 2):
                    break
            vol += _blob(grid, second, rng, rng.uniform(0.7, 1.0))
        vol += rng.normal(0.0, noise, size=vol.shape)
        xs[i, ..., 0] = vol
    return xs, ys.astype(np.int64)
