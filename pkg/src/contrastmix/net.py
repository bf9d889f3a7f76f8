"""Small 3D convolutional encoder-decoder with hand-written backward passes.

The network is a fixed-topology U-Net style stack: per resolution level
one 3x3x3 same-padded conv + instance norm + SiLU, 2x2x2 strided convs
down, 2x2x2 transposed convs up, skip concatenation, and a 1x1x1 head
with channel softmax.  Parameters live in a flat name -> array dict;
``forward`` returns the softmax output plus a cache, ``backward`` maps a
gradient w.r.t. the output probabilities to gradients for every
parameter.  SiLU keeps the whole map smooth so central finite
differences are a valid oracle for the analytic gradients.

Tensors are channel-first numpy arrays ``(C, nx, ny, nz)``; float32 for
training, float64 for gradient checking (pass dtype-cast parameters).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng

NORM_EPS = 1e-5

CKPT_MAGIC = b"MCKPT1\0\0"


class ConfigurationError(ValueError):
    pass


class GradientNaNError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"NaN gradient in layer '{layer}'")
        self.layer = layer


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    num_classes: int
    widths: tuple[int, ...] = (8, 16, 32)
    norm: str = "instance"  # "instance" | "none"

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ConfigurationError("widths must be positive")
        if self.norm not in ("instance", "none"):
            raise ConfigurationError(f"unknown normalization kind '{self.norm}'")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def down_factor(self) -> int:
        return 2 ** (self.levels - 1)


# ---------------------------------------------------------------------------
# primitives

def _conv_same(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    y = np.einsum("cxyzijk,ocijk->oxyz", win, w, optimize=True) + b[:, None, None, None]
    return y, xp


def _conv_same_back(dy, xp, w):
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    dw = np.einsum("oxyz,cxyzijk->ocijk", dy, win, optimize=True)
    db = dy.sum(axis=(1, 2, 3))
    dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (1, 1)))
    wflip = w[:, :, ::-1, ::-1, ::-1]
    dwin = sliding_window_view(dyp, (3, 3, 3), axis=(1, 2, 3))
    dx = np.einsum("oxyzijk,ocijk->cxyz", dwin, wflip, optimize=True)
    return dx, dw, db


def _conv_down(x, w, b):
    c, nx, ny, nz = x.shape
    xr = x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    y = np.einsum("cxiyjzk,ocijk->oxyz", xr, w, optimize=True) + b[:, None, None, None]
    return y, xr


def _conv_down_back(dy, xr, w):
    dw = np.einsum("oxyz,cxiyjzk->ocijk", dy, xr, optimize=True)
    db = dy.sum(axis=(1, 2, 3))
    dxr = np.einsum("oxyz,ocijk->cxiyjzk", dy, w, optimize=True)
    c = dxr.shape[0]
    dx = dxr.reshape(c, dxr.shape[1] * 2, dxr.shape[3] * 2, dxr.shape[5] * 2)
    return dx, dw, db


def _tconv_up(x, w, b):
    # w: (c_in, c_out, 2, 2, 2)
    y6 = np.einsum("cxyz,coijk->oxiyjzk", x, w, optimize=True)
    o = y6.shape[0]
    y = y6.reshape(o, y6.shape[1] * 2, y6.shape[3] * 2, y6.shape[5] * 2) + b[:, None, None, None]
    return y


def _tconv_up_back(dy, x, w):
    o, nx, ny, nz = dy.shape
    dyr = dy.reshape(o, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    dw = np.einsum("cxyz,oxiyjzk->coijk", x, dyr, optimize=True)
    db = dy.sum(axis=(1, 2, 3))
    dx = np.einsum("oxiyjzk,coijk->cxyz", dyr, w, optimize=True)
    return dx, dw, db


def _instance_norm(x, g, s):
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    y = g[:, None, None, None] * xhat + s[:, None, None, None]
    return y, (xhat, inv)


def _instance_norm_back(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(1, 2, 3))
    ds = dy.sum(axis=(1, 2, 3))
    dxhat = dy * g[:, None, None, None]
    m1 = dxhat.mean(axis=(1, 2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, ds


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _silu_back(dy, x, sig):
    return dy * (sig + x * sig * (1.0 - sig))


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _softmax_back(dp, p):
    return p * (dp - (dp * p).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# parameter table

def _param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["enc0.conv.w"] = (w[0], cfg.in_channels, 3, 3, 3)
    shapes["enc0.conv.b"] = (w[0],)
    for i in range(1, cfg.levels):
        shapes[f"down{i}.w"] = (w[i], w[i - 1], 2, 2, 2)
        shapes[f"down{i}.b"] = (w[i],)
        shapes[f"enc{i}.conv.w"] = (w[i], w[i], 3, 3, 3)
        shapes[f"enc{i}.conv.b"] = (w[i],)
    for i in range(cfg.levels - 2, -1, -1):
        shapes[f"up{i}.w"] = (w[i + 1], w[i], 2, 2, 2)
        shapes[f"up{i}.b"] = (w[i],)
        shapes[f"dec{i}.conv.w"] = (w[i], 2 * w[i], 3, 3, 3)
        shapes[f"dec{i}.conv.b"] = (w[i],)
    if cfg.norm == "instance":
        for name in [k[: -len(".conv.w")] for k in list(shapes) if k.endswith(".conv.w")]:
            shapes[f"{name}.norm.g"] = shapes[f"{name}.conv.w"][:1]
            shapes[f"{name}.norm.s"] = shapes[f"{name}.conv.w"][:1]
    shapes["head.w"] = (cfg.num_classes, w[0])
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled Gaussian kernels, zero biases, unit norm scales."""
    params: dict[str, np.ndarray] = {}
    for idx, (name, shape) in enumerate(sorted(_param_shapes(cfg).items())):
        if name.endswith(".b") or name.endswith(".s"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            gen = rng.stream(seed, "net-init", idx)
            params[name] = rng.normal(gen, shape, 1.0 / np.sqrt(fan_in)).astype(np.float32)
    return params


def params_astype(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward / backward

def _block(name, x, params, cfg, caches):
    y, xp = _conv_same(x, params[f"{name}.conv.w"], params[f"{name}.conv.b"])
    caches[f"{name}.conv"] = xp
    if cfg.norm == "instance":
        y, nc = _instance_norm(y, params[f"{name}.norm.g"], params[f"{name}.norm.s"])
        caches[f"{name}.norm"] = nc
    a, sig = _silu(y)
    caches[f"{name}.act"] = (y, sig)
    return a


def _block_back(name, da, params, cfg, caches, grads):
    y, sig = caches[f"{name}.act"]
    dy = _silu_back(da, y, sig)
    if cfg.norm == "instance":
        dy, dg, ds = _instance_norm_back(dy, caches[f"{name}.norm"], params[f"{name}.norm.g"])
        grads[f"{name}.norm.g"] = dg
        grads[f"{name}.norm.s"] = ds
    dx, dw, db = _conv_same_back(dy, caches[f"{name}.conv"], params[f"{name}.conv.w"])
    grads[f"{name}.conv.w"] = dw
    grads[f"{name}.conv.b"] = db
    return dx


def forward(params: dict[str, np.ndarray], cfg: NetConfig, x: np.ndarray):
    """Softmax class probabilities (C, nx, ny, nz) plus a backward cache."""
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ConfigurationError(f"input shape {x.shape} incompatible with {cfg.in_channels} input channels")
    if any(d % cfg.down_factor for d in x.shape[1:]):
        raise ConfigurationError(f"spatial dims {x.shape[1:]} not divisible by {cfg.down_factor}")
    caches: dict = {"x.shape": x.shape}
    skips = []
    h = _block("enc0", x, params, cfg, caches)
    for i in range(1, cfg.levels):
        skips.append(h)
        d, xr = _conv_down(h, params[f"down{i}.w"], params[f"down{i}.b"])
        caches[f"down{i}"] = xr
        h = _block(f"enc{i}", d, params, cfg, caches)
    for i in range(cfg.levels - 2, -1, -1):
        u = _tconv_up(h, params[f"up{i}.w"], params[f"up{i}.b"])
        caches[f"up{i}"] = h
        cat = np.concatenate([u, skips[i]], axis=0)
        caches[f"dec{i}.split"] = u.shape[0]
        h = _block(f"dec{i}", cat, params, cfg, caches)
    logits = np.einsum("cxyz,oc->oxyz", h, params["head.w"], optimize=True) + params["head.b"][:, None, None, None]
    caches["head"] = h
    probs = _softmax(logits)
    caches["probs"] = probs
    return probs, caches


def backward(params: dict[str, np.ndarray], cfg: NetConfig, caches: dict, dprobs: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a scalar loss with gradient dprobs at the output."""
    grads: dict[str, np.ndarray] = {}
    dz = _softmax_back(dprobs, caches["probs"])
    h = caches["head"]
    grads["head.w"] = np.einsum("oxyz,cxyz->oc", dz, h, optimize=True)
    grads["head.b"] = dz.sum(axis=(1, 2, 3))
    dh = np.einsum("oxyz,oc->cxyz", dz, params["head.w"], optimize=True)

    dskips = [None] * (cfg.levels - 1)
    for i in range(0, cfg.levels - 1):
        dcat = _block_back(f"dec{i}", dh, params, cfg, caches, grads)
        nu = caches[f"dec{i}.split"]
        du, dskips[i] = dcat[:nu], dcat[nu:]
        dh, dw, db = _tconv_up_back(du, caches[f"up{i}"], params[f"up{i}.w"])
        grads[f"up{i}.w"] = dw
        grads[f"up{i}.b"] = db

    for i in range(cfg.levels - 1, 0, -1):
        dd = _block_back(f"enc{i}", dh, params, cfg, caches, grads)
        dprev, dw, db = _conv_down_back(dd, caches[f"down{i}"], params[f"down{i}.w"])
        grads[f"down{i}.w"] = dw
        grads[f"down{i}.b"] = db
        dh = dprev + dskips[i - 1]
    _block_back("enc0", dh, params, cfg, caches, grads)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientNaNError(name)
    return grads


def forward_padded(params: dict[str, np.ndarray], cfg: NetConfig, x: np.ndarray) -> np.ndarray:
    """Forward with automatic zero-padding to a divisible spatial size."""
    f = cfg.down_factor
    pads = [(0, 0)] + [(0, (-x.shape[1 + a]) % f) for a in range(3)]
    if any(p[1] for p in pads):
        probs, _ = forward(params, cfg, np.pad(x, pads))
        return probs[:, : x.shape[1], : x.shape[2], : x.shape[3]]
    probs, _ = forward(params, cfg, x)
    return probs


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Length-prefixed layer table followed by raw little-endian f32 tensors."""
    path = Path(path)
    table = b""
    payload = b""
    offset = 0
    entries = list(params.items())
    table += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = arr.astype("<f4").tobytes()
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        payload += raw
        offset += len(raw)
    path.write_bytes(CKPT_MAGIC + table + payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))
    base = pos
    params = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape))
        start = base + offset
        chunk = raw[start:start + 4 * n]
        if len(chunk) != 4 * n:
            raise ValueError(f"{path}: truncated tensor '{name}'")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return params
