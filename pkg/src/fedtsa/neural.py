"""From-scratch CNN classifier: forward, manual backprop, SGD, local training.

The model maps a (T, N, P) observation window, treated as a T x N image with
P channels, through two valid-padding conv layers, one max pool, dropout,
and two dense layers to a 5-class softmax. Everything runs in float64 numpy;
parameters live in one flat vector so they can be averaged and shipped
between processes without bookkeeping.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import ClientDataset

N_CLASSES = 5
PROB_FLOOR = 1e-12

_INIT_TAG = 0x494E4954      # seed-stream tag: parameter init
_EPOCH_TAG = 0x45504F43     # seed-stream tag: per-epoch shuffle + dropout

_CKPT_MAGIC = b"FTSM"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHQQ")


class CheckpointError(ValueError):
    """Corrupt or mismatched model checkpoint."""


def rng_for(*entropy: int) -> np.random.Generator:
    """Deterministic generator for a tuple of integer keys."""
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass(frozen=True)
class ModelArch:
    """Layer hyperparameters plus the derived shape chain.

    Defaults follow the reference configuration: conv kernels (3,1) and
    (1,3), a (3,1) max pool with stride (2,1), 20% dropout, and dense layers
    down to the five operating-state classes.
    """

    window_len: int = 5
    n_generators: int = 10
    n_parameters: int = 5
    conv1_filters: int = 16
    conv1_kernel: tuple[int, int] = (3, 1)
    conv2_filters: int = 32
    conv2_kernel: tuple[int, int] = (1, 3)
    pool_kernel: tuple[int, int] = (3, 1)
    pool_stride: tuple[int, int] = (2, 1)
    dropout_rate: float = 0.20
    hidden_units: int = 64
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        for h, w in self.shape_chain():
            if h < 1 or w < 1:
                raise ValueError(f"inconsistent layer shapes: {self.shape_chain()}")

    def shape_chain(self) -> list[tuple[int, int]]:
        """Spatial (H, W) after input, conv1, conv2, pool."""
        h, w = self.window_len, self.n_generators
        h1, w1 = h - self.conv1_kernel[0] + 1, w - self.conv1_kernel[1] + 1
        h2, w2 = h1 - self.conv2_kernel[0] + 1, w1 - self.conv2_kernel[1] + 1
        hp = (h2 - self.pool_kernel[0]) // self.pool_stride[0] + 1
        wp = (w2 - self.pool_kernel[1]) // self.pool_stride[1] + 1
        return [(h, w), (h1, w1), (h2, w2), (hp, wp)]

    @property
    def flat_units(self) -> int:
        hp, wp = self.shape_chain()[3]
        return self.conv2_filters * hp * wp

    def shape_table(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("conv1_w", (self.conv1_filters, self.n_parameters, *self.conv1_kernel)),
            ("conv1_b", (self.conv1_filters,)),
            ("conv2_w", (self.conv2_filters, self.conv1_filters, *self.conv2_kernel)),
            ("conv2_b", (self.conv2_filters,)),
            ("dense1_w", (self.flat_units, self.hidden_units)),
            ("dense1_b", (self.hidden_units,)),
            ("dense2_w", (self.hidden_units, self.n_classes)),
            ("dense2_b", (self.n_classes,)),
        ]

    @property
    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.shape_table())

    def arch_hash(self) -> int:
        """Stable u64 fingerprint of the architecture."""
        payload = json.dumps(
            {
                "input": [self.window_len, self.n_generators, self.n_parameters],
                "table": self.shape_table(),
                "pool": [self.pool_kernel, self.pool_stride],
                "dropout": self.dropout_rate,
            },
            sort_keys=True,
        ).encode()
        return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector with its architecture."""

    arch: ModelArch
    theta: np.ndarray

    def __post_init__(self):
        if self.theta.shape != (self.arch.parameter_count,):
            raise ValueError(
                f"expected {self.arch.parameter_count} parameters, "
                f"got {self.theta.shape}"
            )

    @property
    def parameter_count(self) -> int:
        return self.theta.size

    def view(self, name: str) -> np.ndarray:
        off = 0
        for key, shape in self.arch.shape_table():
            size = int(np.prod(shape))
            if key == name:
                return self.theta[off : off + size].reshape(shape)
            off += size
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.theta.copy())


@dataclass(frozen=True)
class TrainState:
    params: ModelParams
    iteration: int = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    local_epochs: int = 8
    batch_size: int = 64
    seed: int = 0
    client_id: int = 0
    epoch_offset: int = 0
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class TrainResult:
    params: ModelParams
    train_losses: list[float]
    val_losses: list[float]
    val_accuracy: float
    iterations: int


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray  # (5, 5) int64, rows = true class, cols = predicted


def init_params(arch: ModelArch, seed: int) -> ModelParams:
    """Seeded He-style fan-in uniform init; biases start at zero."""
    rng = rng_for(seed, _INIT_TAG)
    parts = []
    for name, shape in arch.shape_table():
        if name.endswith("_b"):
            parts.append(np.zeros(shape).ravel())
            continue
        if name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
        else:
            fan_in = shape[0]
        bound = np.sqrt(6.0 / fan_in)
        parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ModelParams(arch, np.concatenate(parts))


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _conv_forward(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for dy in range(kh):
        for dx in range(kw):
            out += np.einsum(
                "fc,bchw->bfhw", w[:, :, dy, dx], x[:, :, dy : dy + ho, dx : dx + wo]
            )
    return out + b[None, :, None, None]


def _conv_backward(x, w, dout):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    dw = np.zeros_like(w)
    dx_acc = np.zeros_like(x)
    for dy in range(kh):
        for dx in range(kw):
            xs = x[:, :, dy : dy + ho, dx : dx + wo]
            dw[:, :, dy, dx] = np.einsum("bfhw,bchw->fc", dout, xs)
            dx_acc[:, :, dy : dy + ho, dx : dx + wo] += np.einsum(
                "fc,bfhw->bchw", w[:, :, dy, dx], dout
            )
    return dw, dout.sum(axis=(0, 2, 3)), dx_acc


def _pool_forward(x, kernel, stride):
    b, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((b, c, ho, wo))
    arg = np.empty((b, c, ho, wo), dtype=np.intp)
    for oy in range(ho):
        for ox in range(wo):
            win = x[:, :, oy * sh : oy * sh + kh, ox * sw : ox * sw + kw]
            flat = win.reshape(b, c, -1)
            arg[:, :, oy, ox] = flat.argmax(axis=2)
            out[:, :, oy, ox] = np.take_along_axis(
                flat, arg[:, :, oy, ox][:, :, None], axis=2
            )[:, :, 0]
    return out, arg


def _pool_backward(dout, arg, x_shape, kernel, stride):
    b, c = x_shape[:2]
    kh, kw = kernel
    sh, sw = stride
    dx = np.zeros(x_shape)
    bb, cc = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
    for oy in range(dout.shape[2]):
        for ox in range(dout.shape[3]):
            idx = arg[:, :, oy, ox]
            iy = oy * sh + idx // kw
            ix = ox * sw + idx % kw
            np.add.at(dx, (bb, cc, iy, ix), dout[:, :, oy, ox])
    return dx


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Model operations
# ---------------------------------------------------------------------------

def forward(
    params: ModelParams,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict | None]:
    """Class probabilities for a batch of (T, N, P) windows.

    In ``train_mode`` inverted dropout is applied (so inference needs no
    rescaling) and the activations needed by :func:`backward` are cached.
    """
    arch = params.arch
    if x.ndim != 4 or x.shape[1:] != (arch.window_len, arch.n_generators,
                                      arch.n_parameters):
        raise ValueError(
            f"expected batch of shape (B, {arch.window_len}, "
            f"{arch.n_generators}, {arch.n_parameters}), got {x.shape}"
        )
    xin = np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float64)

    c1_pre = _conv_forward(xin, params.view("conv1_w"), params.view("conv1_b"))
    c1 = np.maximum(c1_pre, 0.0)
    c2_pre = _conv_forward(c1, params.view("conv2_w"), params.view("conv2_b"))
    c2 = np.maximum(c2_pre, 0.0)
    pooled, pool_arg = _pool_forward(c2, arch.pool_kernel, arch.pool_stride)

    if train_mode and arch.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train_mode forward needs an rng for dropout")
        keep = 1.0 - arch.dropout_rate
        mask = (rng.random(pooled.shape) < keep) / keep
    else:
        mask = None
    dropped = pooled if mask is None else pooled * mask

    flat = dropped.reshape(x.shape[0], -1)
    d1_pre = flat @ params.view("dense1_w") + params.view("dense1_b")
    d1 = np.maximum(d1_pre, 0.0)
    logits = d1 @ params.view("dense2_w") + params.view("dense2_b")
    probs = _softmax(logits)

    if not train_mode:
        return probs, None
    cache = {
        "xin": xin, "c1_pre": c1_pre, "c1": c1, "c2_pre": c2_pre, "c2": c2,
        "pooled": pooled, "pool_arg": pool_arg, "mask": mask, "flat": flat,
        "d1_pre": d1_pre, "d1": d1, "probs": probs,
    }
    return probs, cache


def loss(probs: np.ndarray, labels: np.ndarray,
         class_weights: np.ndarray | None = None) -> float:
    """Mean (optionally class-weighted) cross-entropy of labels 1..5."""
    labels = np.asarray(labels)
    if np.any(labels < 1) or np.any(labels > N_CLASSES):
        raise ValueError("labels must lie in 1..5")
    p = np.clip(probs[np.arange(len(labels)), labels - 1], PROB_FLOOR, None)
    ce = -np.log(p)
    if class_weights is not None:
        ce = ce * np.asarray(class_weights)[labels - 1]
    return float(ce.mean())


def backward(params: ModelParams, cache: dict, labels: np.ndarray,
             class_weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the flat parameter vector."""
    if cache is None:
        raise ValueError("backward requires the cache from a train_mode forward")
    labels = np.asarray(labels)
    if np.any(labels < 1) or np.any(labels > N_CLASSES):
        raise ValueError("labels must lie in 1..5")
    arch = params.arch
    batch = len(labels)

    dlogits = cache["probs"].copy()
    dlogits[np.arange(batch), labels - 1] -= 1.0
    if class_weights is not None:
        dlogits *= np.asarray(class_weights)[labels - 1][:, None]
    dlogits /= batch

    dw2 = cache["d1"].T @ dlogits
    db2 = dlogits.sum(axis=0)
    dd1 = dlogits @ params.view("dense2_w").T
    dd1_pre = dd1 * (cache["d1_pre"] > 0.0)

    dw1 = cache["flat"].T @ dd1_pre
    db1 = dd1_pre.sum(axis=0)
    dflat = dd1_pre @ params.view("dense1_w").T

    ddropped = dflat.reshape(cache["pooled"].shape)
    dpooled = ddropped if cache["mask"] is None else ddropped * cache["mask"]
    dc2 = _pool_backward(dpooled, cache["pool_arg"], cache["c2"].shape,
                         arch.pool_kernel, arch.pool_stride)
    dc2_pre = dc2 * (cache["c2_pre"] > 0.0)
    dw_c2, db_c2, dc1 = _conv_backward(cache["c1"], params.view("conv2_w"), dc2_pre)
    dc1_pre = dc1 * (cache["c1_pre"] > 0.0)
    dw_c1, db_c1, _ = _conv_backward(cache["xin"], params.view("conv1_w"), dc1_pre)

    return np.concatenate([
        dw_c1.ravel(), db_c1.ravel(), dw_c2.ravel(), db_c2.ravel(),
        dw1.ravel(), db1.ravel(), dw2.ravel(), db2.ravel(),
    ])


def sgd_step(state: TrainState, grad: np.ndarray, learning_rate: float) -> TrainState:
    """One gradient-descent update; the iteration counter always advances."""
    if grad.shape != state.params.theta.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match parameters "
            f"{state.params.theta.shape}"
        )
    bad = ~np.isfinite(grad)
    if np.any(bad):
        raise FloatingPointError(
            f"non-finite gradient in {int(bad.sum())} of {grad.size} entries "
            f"(first at index {int(np.flatnonzero(bad)[0])})"
        )
    theta = state.params.theta - learning_rate * grad
    return TrainState(ModelParams(state.params.arch, theta), state.iteration + 1)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train_local(params: ModelParams, ds: ClientDataset,
                config: TrainConfig) -> TrainResult:
    """Seeded mini-batch SGD over the training split for ``local_epochs``.

    The shuffle and dropout stream of epoch ``e`` depends only on
    (seed, client_id, epoch_offset + e), so a federated round schedule can be
    replayed exactly by a standalone run.
    """
    if not ds.normalized:
        raise ValueError("dataset must be normalized before training")
    train_idx = ds.indices("train")
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    val_idx = ds.indices("val")

    state = TrainState(params.copy())
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(config.local_epochs):
        rng = rng_for(config.seed, config.client_id, _EPOCH_TAG,
                      config.epoch_offset + epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        batch_losses = []
        for batch in _batches(order, config.batch_size):
            x = ds.features[batch].astype(np.float64)
            y = ds.labels[batch]
            probs, cache = forward(state.params, x, train_mode=True, rng=rng)
            batch_losses.append(loss(probs, y, config.class_weights))
            grad = backward(state.params, cache, y, config.class_weights)
            state = sgd_step(state, grad, config.learning_rate)
        train_losses.append(float(np.mean(batch_losses)))
        val_losses.append(
            _split_loss(state.params, ds, val_idx, config.class_weights)
        )
    val_eval = evaluate(state.params, ds, "val")
    return TrainResult(
        params=state.params,
        train_losses=train_losses,
        val_losses=val_losses,
        val_accuracy=val_eval.accuracy,
        iterations=state.iteration,
    )


def _split_loss(params, ds, idx, class_weights, batch_size=512):
    if idx.size == 0:
        return float("nan")
    total = 0.0
    for batch in _batches(idx, batch_size):
        probs, _ = forward(params, ds.features[batch].astype(np.float64))
        total += loss(probs, ds.labels[batch], class_weights) * len(batch)
    return total / idx.size


def evaluate(params: ModelParams, ds: ClientDataset, split: str = "test",
             batch_size: int = 512) -> EvalResult:
    """Loss, accuracy, and confusion matrix on one split."""
    idx = ds.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    total = 0.0
    for batch in _batches(idx, batch_size):
        probs, _ = forward(params, ds.features[batch].astype(np.float64))
        y = ds.labels[batch]
        total += loss(probs, y) * len(batch)
        pred = probs.argmax(axis=1) + 1
        np.add.at(confusion, (y - 1, pred - 1), 1)
    accuracy = float(np.trace(confusion) / idx.size)
    return EvalResult(loss=total / idx.size, accuracy=accuracy, confusion=confusion)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION,
                                   params.arch.arch_hash(),
                                   params.parameter_count))
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path, arch: ModelArch | None = None) -> ModelParams:
    arch = arch or ModelArch()
    blob = open(path, "rb").read()
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, arch_hash, count = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {_CKPT_VERSION}")
    if arch_hash != arch.arch_hash():
        raise CheckpointError(
            f"{path}: checkpoint architecture {arch_hash:#x} does not match "
            f"{arch.arch_hash():#x}"
        )
    if len(blob) != _CKPT_HEADER.size + 8 * count or count != arch.parameter_count:
        raise CheckpointError(f"{path}: parameter block size mismatch")
    theta = np.frombuffer(blob, "<f8", count, _CKPT_HEADER.size).copy()
    return ModelParams(arch, theta)
