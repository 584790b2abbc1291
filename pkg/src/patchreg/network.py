"""Two-channel 3D CNN patch classifier with exact analytic gradients.

The fixed and moving patches enter as two input channels (early fusion).
The default stack is four strided conv+ReLU layers, a global average pool,
dropout on the pooled features, and a dense layer producing two logits for
the unregistered/registered classes.  The pre-softmax logit difference is
the per-patch similarity score: the log likelihood ratio of the two
classes.

Everything is plain numpy.  Convolutions materialize strided windows and
reduce them with tensordot so both float32 (training) and float64
(gradient checking) paths share one code base.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from patchreg.errors import (
    BadMagicError,
    DescriptorMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)

DMR_MAGIC = b"DMR1"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    pad: int


@dataclass(frozen=True)
class Architecture:
    """Conv stack descriptor; the dense layer maps the last width to 2."""

    convs: tuple[ConvSpec, ...]
    n_classes: int = 2

    @property
    def feature_width(self) -> int:
        return self.convs[-1].out_ch

    def spatial_chain(self, patch_size: int) -> list[int]:
        """Spatial size after each conv layer, starting from the input."""
        sizes = [patch_size]
        n = patch_size
        for c in self.convs:
            n = (n + 2 * c.pad - c.kernel) // c.stride + 1
            if n < 1:
                raise ValueError(f"patch size {patch_size} collapses at {c}")
            sizes.append(n)
        return sizes


def default_architecture() -> Architecture:
    return Architecture(convs=(
        ConvSpec(2, 16, 5, 2, 2),
        ConvSpec(16, 32, 3, 2, 1),
        ConvSpec(32, 32, 3, 2, 1),
        ConvSpec(32, 64, 3, 2, 1),
    ))


class ModelParams:
    """All weights of the classifier plus its architecture descriptor."""

    def __init__(self, arch: Architecture, conv_w, conv_b, dense_w, dense_b,
                 version: int = MODEL_FORMAT_VERSION):
        self.arch = arch
        self.conv_w = [np.asarray(w) for w in conv_w]
        self.conv_b = [np.asarray(b) for b in conv_b]
        self.dense_w = np.asarray(dense_w)
        self.dense_b = np.asarray(dense_b)
        self.version = version
        self._validate()

    def _validate(self):
        if len(self.conv_w) != len(self.arch.convs):
            raise ValueError("conv weight count does not match architecture")
        for w, b, spec in zip(self.conv_w, self.conv_b, self.arch.convs):
            k = spec.kernel
            if w.shape != (spec.out_ch, spec.in_ch, k, k, k):
                raise ValueError(f"conv weights {w.shape} do not match {spec}")
            if b.shape != (spec.out_ch,):
                raise ValueError(f"conv bias {b.shape} does not match {spec}")
        if self.dense_w.shape != (self.arch.n_classes, self.arch.feature_width):
            raise ValueError(f"dense weights {self.dense_w.shape} do not match architecture")
        if self.dense_b.shape != (self.arch.n_classes,):
            raise ValueError(f"dense bias {self.dense_b.shape} does not match architecture")
        for a in self.param_arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("model parameters must be finite")

    @property
    def dtype(self):
        return self.conv_w[0].dtype

    def param_arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical (file) order."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        out.extend([self.dense_w, self.dense_b])
        return out

    def weight_indices(self) -> list[int]:
        """Indices into param_arrays of weight (not bias) arrays."""
        return [2 * i for i in range(len(self.conv_w))] + [2 * len(self.conv_w)]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            [w.copy() for w in self.conv_w],
            [b.copy() for b in self.conv_b],
            self.dense_w.copy(),
            self.dense_b.copy(),
            self.version,
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.arch,
            [w.astype(dtype) for w in self.conv_w],
            [b.astype(dtype) for b in self.conv_b],
            self.dense_w.astype(dtype),
            self.dense_b.astype(dtype),
            self.version,
        )


def init_model(arch: Architecture | None = None, seed: int = 0,
               dtype=np.float32) -> ModelParams:
    """He-style fan-in scaled Gaussian weights, zero biases."""
    if arch is None:
        arch = default_architecture()
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    for c in arch.convs:
        fan_in = c.in_ch * c.kernel ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(c.out_ch, c.in_ch, c.kernel, c.kernel, c.kernel))
        conv_w.append(w.astype(dtype))
        conv_b.append(np.zeros(c.out_ch, dtype=dtype))
    dense_w = rng.normal(0.0, np.sqrt(1.0 / arch.feature_width),
                         size=(arch.n_classes, arch.feature_width)).astype(dtype)
    dense_b = np.zeros(arch.n_classes, dtype=dtype)
    return ModelParams(arch, conv_w, conv_b, dense_w, dense_b)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Window columns (N*Do*Ho*Wo, C*k^3) plus the output spatial shape."""
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else x
    N, C, D, H, W = xp.shape
    out = tuple((n - k) // stride + 1 for n in (D, H, W))
    sN, sC, sD, sH, sW = xp.strides
    win = as_strided(
        xp,
        shape=(N, C) + out + (k, k, k),
        strides=(sN, sC, sD * stride, sH * stride, sW * stride, sD, sH, sW),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(N * out[0] * out[1] * out[2], C * k ** 3), out


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
                   pad: int, cols=None) -> np.ndarray:
    """Strided 3D cross-correlation over a (N, C, D, H, W) batch."""
    k = w.shape[2]
    if cols is None:
        cols, out = _im2col(x, k, stride, pad)
    else:
        cols, out = cols
    N = x.shape[0]
    y = cols @ w.reshape(w.shape[0], -1).T
    y = y.reshape((N,) + out + (w.shape[0],))
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
    return y + b[None, :, None, None, None]


def conv3d_backward(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                    dy: np.ndarray, cols=None):
    """Gradients of conv3d_forward w.r.t. input, weights and bias."""
    k = w.shape[2]
    n_out, c_in = w.shape[0], w.shape[1]
    if cols is None:
        cols, _ = _im2col(x, k, stride, pad)
    else:
        cols = cols[0]
    N = x.shape[0]
    Do, Ho, Wo = dy.shape[2:]
    dy_cols = np.ascontiguousarray(np.moveaxis(dy, 1, -1)).reshape(-1, n_out)
    dw = (dy_cols.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3, 4))
    dcols = (dy_cols @ w.reshape(n_out, -1)).reshape(N, Do, Ho, Wo, c_in, k, k, k)
    pad_shape = tuple(n + 2 * pad for n in x.shape[2:])
    dxp = np.zeros((N, c_in) + pad_shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, :,
                    i:i + stride * Do:stride,
                    j:j + stride * Ho:stride,
                    l:l + stride * Wo:stride] += np.moveaxis(dcols[..., i, j, l], -1, 1)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return dxp, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def presoftmax_score(logits) -> float:
    """Log likelihood ratio of registered vs unregistered: l1 - l0."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    return float(logits[1] - logits[0])


def forward_batch(model: ModelParams, x: np.ndarray, train: bool = False,
                  rng: np.random.Generator | None = None,
                  drop_rate: float = 0.5, keep_cols: bool = False):
    """Forward pass over a (N, 2, P, P, P) batch.

    Returns (logits (N,2), trace).  In train mode each pooled feature is
    dropped with probability drop_rate and survivors are scaled by
    1/(1-drop_rate); the multiplier is recorded in the trace so gradients
    reproduce the exact stochastic forward.  keep_cols retains the window
    columns of every conv layer for a subsequent backward pass.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 5 or x.shape[1] != model.arch.convs[0].in_ch:
        raise ValueError(f"expected (N, {model.arch.convs[0].in_ch}, P, P, P), got {x.shape}")
    model.arch.spatial_chain(x.shape[2])

    acts = [x]
    relu_masks = []
    col_cache = [] if keep_cols else None
    h = x
    for spec, w, b in zip(model.arch.convs, model.conv_w, model.conv_b):
        cols = _im2col(h, spec.kernel, spec.stride, spec.pad)
        pre = conv3d_forward(h, w, b, spec.stride, spec.pad, cols=cols)
        if keep_cols:
            col_cache.append(cols)
        mask = pre > 0
        h = pre * mask
        acts.append(h)
        relu_masks.append(mask)

    pooled = h.mean(axis=(2, 3, 4))
    if train:
        if rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        keep = rng.random(pooled.shape) >= drop_rate
        drop_mult = keep.astype(model.dtype) / model.dtype.type(1.0 - drop_rate)
    else:
        drop_mult = np.ones_like(pooled)
    dropped = pooled * drop_mult
    logits = dropped @ model.dense_w.T + model.dense_b

    trace = {
        "acts": acts,
        "relu_masks": relu_masks,
        "cols": col_cache,
        "pooled": pooled,
        "drop_mult": drop_mult,
        "dropped": dropped,
    }
    return logits, trace


def _stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """(N,2,P,P,P) inputs and labels from PatchPair-like items or a dataset."""
    if hasattr(batch, "u") and hasattr(batch, "v") and hasattr(batch, "z"):
        x = np.stack([batch.u, batch.v], axis=1)
        z = np.asarray(batch.z, dtype=np.int64)
        return x, z
    pairs = list(batch)
    if not pairs:
        raise ValueError("empty batch")
    x = np.stack([np.stack([p.u_patch, p.v_patch]) for p in pairs])
    z = np.array([p.z for p in pairs], dtype=np.int64)
    return x, z


def model_forward(model: ModelParams, pair, mode: str = "eval",
                  rng: np.random.Generator | None = None):
    """Logits for one patch pair: (l_unregistered, l_registered)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    x = np.stack([pair.u_patch, pair.v_patch])[None]
    logits, trace = forward_batch(model, x, train=(mode == "train"), rng=rng)
    return logits[0], trace


def model_gradients(model: ModelParams, batch, weight_decay: float = 0.0,
                    mode: str = "eval", rng: np.random.Generator | None = None,
                    drop_rate: float = 0.5):
    """Mean cross-entropy loss plus L2 weight penalty, and its exact gradients.

    Returns (loss, grads) with grads ordered like model.param_arrays().
    The penalty (weight_decay/2)*sum(w^2) applies to weights only, never
    biases.  In eval mode dropout is disabled; in train mode one dropout
    draw is made and the returned gradients match that traced forward.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode}")
    x, z = _stack_batch(batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    logits, trace = forward_batch(model, x, train=(mode == "train"), rng=rng,
                                  drop_rate=drop_rate, keep_cols=True)

    probs = softmax(logits)
    data_loss = float(-np.mean(np.log(probs[np.arange(n), z])))
    reg_loss = 0.0
    if weight_decay:
        for i in model.weight_indices():
            a = model.param_arrays()[i]
            reg_loss += 0.5 * weight_decay * float(np.sum(a.astype(np.float64) ** 2))
    loss = data_loss + reg_loss

    dlogits = (probs - np.eye(model.arch.n_classes)[z]) / n
    dlogits = dlogits.astype(model.dtype)

    d_dense_w = dlogits.T @ trace["dropped"]
    d_dense_b = dlogits.sum(axis=0)
    d_dropped = dlogits @ model.dense_w
    d_pooled = d_dropped * trace["drop_mult"]

    h_last = trace["acts"][-1]
    n_positions = h_last[0, 0].size
    dh = np.broadcast_to(
        (d_pooled / model.dtype.type(n_positions))[:, :, None, None, None],
        h_last.shape,
    ).astype(model.dtype)

    grads: list[np.ndarray] = [None] * (2 * len(model.conv_w) + 2)
    grads[-2] = d_dense_w
    grads[-1] = d_dense_b
    for li in range(len(model.arch.convs) - 1, -1, -1):
        spec = model.arch.convs[li]
        dpre = dh * trace["relu_masks"][li]
        dh, dw, db = conv3d_backward(trace["acts"][li], model.conv_w[li],
                                     spec.stride, spec.pad, dpre,
                                     cols=trace["cols"][li])
        grads[2 * li] = dw
        grads[2 * li + 1] = db

    if weight_decay:
        wd = model.dtype.type(weight_decay)
        for i in model.weight_indices():
            grads[i] = grads[i] + wd * model.param_arrays()[i]
    return loss, grads


_DMR_HEAD = struct.Struct("<II")
_DMR_CONV = struct.Struct("<5I")


def save_model(path, model: ModelParams) -> None:
    """Write a model in the DMR1 format (float32 parameters)."""
    path = Path(path)
    parts = [DMR_MAGIC, _DMR_HEAD.pack(MODEL_FORMAT_VERSION, len(model.arch.convs))]
    for c in model.arch.convs:
        parts.append(_DMR_CONV.pack(c.in_ch, c.out_ch, c.kernel, c.stride, c.pad))
    parts.append(struct.pack("<I", model.arch.n_classes))
    for a in model.param_arrays():
        parts.append(np.asarray(a, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def load_model(path) -> ModelParams:
    """Read a DMR1 model; errors distinguish magic, version, truncation and
    descriptor/payload mismatch."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic header")
    magic = data[:4]
    if magic != DMR_MAGIC:
        if magic[:3] == DMR_MAGIC[:3]:
            raise UnsupportedVersionError(f"{path}: unsupported model magic {magic!r}")
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    off = 4
    if len(data) < off + _DMR_HEAD.size:
        raise TruncatedFileError(f"{path}: truncated model header")
    version, n_conv = _DMR_HEAD.unpack_from(data, off)
    off += _DMR_HEAD.size
    if version != MODEL_FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported model version {version}")
    convs = []
    for _ in range(n_conv):
        if len(data) < off + _DMR_CONV.size:
            raise TruncatedFileError(f"{path}: truncated conv descriptor")
        convs.append(ConvSpec(*_DMR_CONV.unpack_from(data, off)))
        off += _DMR_CONV.size
    if len(data) < off + 4:
        raise TruncatedFileError(f"{path}: truncated descriptor")
    (n_classes,) = struct.unpack_from("<I", data, off)
    off += 4
    if not convs:
        raise DescriptorMismatchError(f"{path}: descriptor declares no conv layers")
    for prev, cur in zip(convs, convs[1:]):
        if prev.out_ch != cur.in_ch:
            raise DescriptorMismatchError(f"{path}: channel chain broken at {cur}")
    arch = Architecture(convs=tuple(convs), n_classes=n_classes)

    shapes = []
    for c in convs:
        shapes.append((c.out_ch, c.in_ch, c.kernel, c.kernel, c.kernel))
        shapes.append((c.out_ch,))
    shapes.append((n_classes, arch.feature_width))
    shapes.append((n_classes,))
    count = sum(int(np.prod(s)) for s in shapes)
    if len(data) < off + 4 * count:
        raise TruncatedFileError(f"{path}: truncated parameter payload")
    if len(data) != off + 4 * count:
        raise DescriptorMismatchError(
            f"{path}: payload size {len(data) - off} does not match descriptor ({4 * count})"
        )
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    arrays = []
    pos = 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).astype(np.float32))
        pos += size
    conv_w = arrays[0:2 * n_conv:2]
    conv_b = arrays[1:2 * n_conv:2]
    return ModelParams(arch, conv_w, conv_b, arrays[-2], arrays[-1], version)
