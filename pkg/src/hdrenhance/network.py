"""U-Net enhancer in plain numpy, with hand-written backward passes.

Tensors are ``(batch, channels, height, width)``. Each convolutional block
is (3x3 conv -> ReLU -> batch norm) twice; the decoder upsamples with a
stride-2 4x4 transposed convolution followed by ReLU, concatenates the
mirrored encoder output and runs another block. A final 3x3 conv with a
sigmoid produces the image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

CHECKPOINT_MAGIC = b"HDRUNETC"
CHECKPOINT_VERSION = 1
SKIP_WIRING = "concat(upsampled, encoder)"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 32
    depth: int = 6
    input_size: int = 512
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")
        if self.input_size % self.multiple:
            raise ValueError(
                f"input_size {self.input_size} is not a multiple of {self.multiple}"
            )

    @property
    def multiple(self):
        """Spatial sizes must be divisible by this."""
        return 2 ** (self.depth - 1)

    @property
    def widths(self):
        return [self.base_width * 2**level for level in range(self.depth)]

    @classmethod
    def desk(cls, **overrides):
        """Reduced model for CPU experiments."""
        return cls(**{"base_width": 4, "depth": 3, "input_size": 64, **overrides})


def he_init(shape, rng, fan_in=None, dtype=np.float64):
    """Zero-mean normal weights with variance 2 / fan_in."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


# --------------------------------------------------------------------------
# Layers


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution (cross-correlation). ``w``: (K, C, 3, 3)."""
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"conv expects {w.shape[1]} input channels, got {c}")
    cols = _im2col3(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)


def _im2col3(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3_backward(dout, x, w):
    n, c, h, wd = x.shape
    k = w.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (d.T @ _im2col3(x)).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(k, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def conv_transpose4x4_forward(x, w, b):
    """Stride-2, padding-1 4x4 transposed convolution; doubles H and W.

    ``w`` has shape (C_in, C_out, 4, 4).
    """
    n, ci, h, wd = x.shape
    if w.shape[0] != ci:
        raise ValueError(f"transposed conv expects {w.shape[0]} input channels, got {ci}")
    co = w.shape[1]
    taps = (x.transpose(0, 2, 3, 1).reshape(-1, ci) @ w.reshape(ci, -1))
    taps = taps.reshape(n, h, wd, co, 4, 4).transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((n, co, 2 * h + 2, 2 * wd + 2), dtype=np.result_type(x, w))
    for ki in range(4):
        for kj in range(4):
            full[:, :, ki:ki + 2 * h:2, kj:kj + 2 * wd:2] += taps[..., ki, kj]
    return full[:, :, 1:-1, 1:-1] + b[None, :, None, None]


def _gather_taps(y, h, wd):
    """Stride-2 4x4 windows of padded ``y`` as (N*h*w, C*16)."""
    n, c = y.shape[:2]
    yp = np.pad(y, ((0, 0), (0, 0), (1, 1), (1, 1)))
    g = np.empty((n, h, wd, c, 4, 4), dtype=y.dtype)
    for ki in range(4):
        for kj in range(4):
            g[..., ki, kj] = yp[:, :, ki:ki + 2 * h:2, kj:kj + 2 * wd:2].transpose(0, 2, 3, 1)
    return g.reshape(n * h * wd, c * 16)


def conv4x4_stride2(y, w):
    """Stride-2, padding-1 4x4 convolution, the adjoint of the transposed conv.

    ``y``: (N, C_out, 2h, 2w); ``w``: (C_in, C_out, 4, 4); returns (N, C_in, h, w).
    """
    n, co, h2, w2 = y.shape
    h, wd = h2 // 2, w2 // 2
    out = _gather_taps(y, h, wd) @ w.reshape(w.shape[0], -1).T
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)


def conv_transpose4x4_backward(dout, x, w):
    n, ci, h, wd = x.shape
    g = _gather_taps(dout, h, wd)
    dx = (g @ w.reshape(ci, -1).T).reshape(n, h, wd, ci).transpose(0, 3, 1, 2)
    dw = (x.transpose(0, 2, 3, 1).reshape(-1, ci).T @ g).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pool needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(dout, idx):
    n, c, h2, w2 = dout.shape
    grad = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return grad.reshape(n, c, 2 * h2, 2 * w2)


def batchnorm_forward(x, scale, shift, running_mean, running_var, train,
                      eps=1e-5, momentum=0.99):
    """Per-channel batch norm. In train mode the running buffers are updated in place.

    Returns (out, cache).
    """
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError("batch norm in train mode needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return out, (xhat, inv, train)


def batchnorm_backward(dout, scale, cache):
    xhat, inv, train = cache
    dscale = (dout * xhat).sum(axis=(0, 2, 3))
    dshift = dout.sum(axis=(0, 2, 3))
    dxhat = dout * scale[None, :, None, None]
    if not train:
        return dxhat * inv[None, :, None, None], dscale, dshift
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (
        dxhat * count
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    ) * (inv[None, :, None, None] / count)
    return dx, dscale, dshift


def sigmoid(x):
    return expit(x)


# --------------------------------------------------------------------------
# U-Net


class UNet:
    def __init__(self, config=UNetConfig(), rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params = {}
        self.buffers = {}
        self._cache = None
        if rng is None:
            rng = np.random.default_rng(0)
        self._build(rng)

    # parameters --------------------------------------------------------
    def _conv(self, name, cin, cout, rng):
        self.params[f"{name}.weight"] = he_init((cout, cin, 3, 3), rng, cin * 9, self.dtype)
        self.params[f"{name}.bias"] = np.zeros(cout, self.dtype)

    def _bn(self, name, ch):
        self.params[f"{name}.scale"] = np.ones(ch, self.dtype)
        self.params[f"{name}.shift"] = np.zeros(ch, self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(ch, self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(ch, self.dtype)

    def _block(self, name, cin, cout, rng):
        for j in range(2):
            self._conv(f"{name}.conv{j}", cin if j == 0 else cout, cout, rng)
            self._bn(f"{name}.bn{j}", cout)

    def _build(self, rng):
        cfg = self.config
        widths = cfg.widths
        cin = cfg.in_channels
        for level, width in enumerate(widths):
            self._block(f"enc{level}", cin, width, rng)
            cin = width
        for level in reversed(range(cfg.depth - 1)):
            ci, co = widths[level + 1], widths[level]
            self.params[f"up{level}.weight"] = he_init((ci, co, 4, 4), rng, ci * 16, self.dtype)
            self.params[f"up{level}.bias"] = np.zeros(co, self.dtype)
            self._block(f"dec{level}", 2 * co, co, rng)
        self._conv("out", widths[0], cfg.out_channels, rng)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def channel_trace(self):
        """Filter counts of the convolutional blocks, first to last."""
        widths = self.config.widths
        return widths + widths[-2::-1]

    # forward -----------------------------------------------------------
    def _block_forward(self, name, h):
        p, cfg = self.params, self.config
        caches = []
        for j in range(2):
            conv, bn = f"{name}.conv{j}", f"{name}.bn{j}"
            z = conv3x3_forward(h, p[f"{conv}.weight"], p[f"{conv}.bias"])
            out, bn_cache = batchnorm_forward(
                relu_forward(z), p[f"{bn}.scale"], p[f"{bn}.shift"],
                self.buffers[f"{bn}.running_mean"], self.buffers[f"{bn}.running_var"],
                self.training, cfg.bn_eps, cfg.bn_momentum,
            )
            caches.append((conv, bn, h, z, bn_cache))
            h = out
        return h, caches

    def forward(self, x):
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (batch, {cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % cfg.multiple or x.shape[3] % cfg.multiple:
            raise ValueError(
                f"spatial size {x.shape[2]}x{x.shape[3]} must be a multiple of {cfg.multiple}"
            )
        tape = {"x": x, "enc": [], "pool": [], "up": [], "dec": []}
        skips = []
        h = x
        for level in range(cfg.depth):
            h, caches = self._block_forward(f"enc{level}", h)
            tape["enc"].append(caches)
            if level < cfg.depth - 1:
                skips.append(h)
                h, idx = maxpool2x2_forward(h)
                tape["pool"].append(idx)
        for level in reversed(range(cfg.depth - 1)):
            w, b = self.params[f"up{level}.weight"], self.params[f"up{level}.bias"]
            z = conv_transpose4x4_forward(h, w, b)
            tape["up"].append((level, h, z))
            h = np.concatenate([relu_forward(z), skips[level]], axis=1)
            h, caches = self._block_forward(f"dec{level}", h)
            tape["dec"].append(caches)
        logits = conv3x3_forward(h, self.params["out.weight"], self.params["out.bias"])
        y = sigmoid(logits)
        tape["head"] = (h, y)
        self._cache = tape
        return y

    __call__ = forward

    # backward ----------------------------------------------------------
    def _block_backward(self, caches, dh, grads):
        p = self.params
        for conv, bn, h_in, z, bn_cache in reversed(caches):
            dr, grads[f"{bn}.scale"], grads[f"{bn}.shift"] = batchnorm_backward(
                dh, p[f"{bn}.scale"], bn_cache
            )
            dh, grads[f"{conv}.weight"], grads[f"{conv}.bias"] = conv3x3_backward(
                relu_backward(dr, z), h_in, p[f"{conv}.weight"]
            )
        return dh

    def backward(self, grad_out):
        """Gradients of ``sum(grad_out * forward(x))`` for every parameter and the input.

        Returns ``(grads, dx)``; must follow a call to :meth:`forward`.
        """
        tape = self._cache
        if tape is None:
            raise RuntimeError("backward called before forward")
        cfg = self.config
        grads = {}
        h, y = tape["head"]
        dlogits = np.asarray(grad_out, dtype=self.dtype) * y * (1 - y)
        dh, grads["out.weight"], grads["out.bias"] = conv3x3_backward(
            dlogits, h, self.params["out.weight"]
        )
        dskips = {}
        for (level, up_in, z), caches in zip(reversed(tape["up"]), reversed(tape["dec"])):
            dcat = self._block_backward(caches, dh, grads)
            width = cfg.widths[level]
            dz = relu_backward(dcat[:, :width], z)
            dskips[level] = dcat[:, width:]
            dh, grads[f"up{level}.weight"], grads[f"up{level}.bias"] = conv_transpose4x4_backward(
                dz, up_in, self.params[f"up{level}.weight"]
            )
        for level in reversed(range(cfg.depth)):
            if level < cfg.depth - 1:
                dh = maxpool2x2_backward(dh, tape["pool"][level]) + dskips[level]
            dh = self._block_backward(tape["enc"][level], dh, grads)
        return {name: grads[name] for name in self.params}, dh


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, net, extra=None, meta=None):
    """Write parameters, buffers and optional extra tensors as float32 LE.

    Layout: 8-byte magic, uint32 version, uint32 header length, JSON header,
    then the raw row-major tensors in header order.
    """
    tensors = {**{f"param:{k}": v for k, v in net.params.items()},
               **{f"buffer:{k}": v for k, v in net.buffers.items()},
               **{f"extra:{k}": v for k, v in (extra or {}).items()}}
    index, offset, blobs = [], 0, []
    for name, value in tensors.items():
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        index.append({"name": name, "dims": list(np.shape(value)), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({
        "config": asdict(net.config),
        "skip_wiring": SKIP_WIRING,
        "block_order": "conv-relu-bn",
        "tensors": index,
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32):
    """Inverse of :func:`save_checkpoint`; returns ``(net, extra, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a U-Net checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    if header.get("skip_wiring") != SKIP_WIRING:
        raise ValueError(f"{path}: unsupported skip wiring {header.get('skip_wiring')!r}")
    base = 16 + hlen
    net = UNet(UNetConfig(**header["config"]), dtype=dtype)
    extra = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["dims"]))
        value = np.frombuffer(data, "<f4", count, base + entry["offset"]).reshape(entry["dims"])
        kind, name = entry["name"].split(":", 1)
        target = {"param": net.params, "buffer": net.buffers, "extra": extra}[kind]
        if kind != "extra" and target[name].shape != value.shape:
            raise ValueError(f"{path}: tensor {name} has shape {value.shape}, expected {target[name].shape}")
        target[name] = value.astype(dtype if kind != "extra" else np.float32)
    return net, extra, header["meta"]
