"""Miniature encoder-decoder segmentation network.

Two down/up levels with additive skip connections, nearest-neighbor
resampling, and a per-pixel affine head. The activation feeding the head is
exposed as the per-pixel feature map used by the boundary module. Small on
purpose: ~13k parameters at the defaults.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tape, Tensor
from .rng import Rng

CHECKPOINT_MAGIC = b"MDCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    classes: int = 2
    base_width: int = 8
    depth: int = 2
    feature_dim: int = 16

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1:
            raise ValueError("in_channels, base_width, depth must be >= 1")

    def level_channels(self) -> list[int]:
        return [self.base_width * (1 << lvl) for lvl in range(self.depth + 1)]


@dataclass
class ForwardOutput:
    logits: np.ndarray    # (H, W, L)
    features: np.ndarray  # (H, W, D), activation feeding the affine head
    probs: np.ndarray     # (H, W, L)


def param_layout(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Deterministic segment table for a config. Encoder convs from the
    surface in, decoder convs from the bottleneck out, then the feature
    conv and the affine head."""
    ch = cfg.level_channels()
    segs = []
    offset = 0

    def put(name, shape):
        nonlocal offset
        segs.append((name, shape, offset))
        offset += int(np.prod(shape, dtype=int))

    prev = cfg.in_channels
    for lvl, c in enumerate(ch):
        put(f"enc{lvl}.w", (3, 3, prev, c))
        put(f"enc{lvl}.b", (c,))
        prev = c
    for lvl in range(cfg.depth - 1, -1, -1):
        put(f"dec{lvl}.w", (3, 3, ch[lvl + 1], ch[lvl]))
        put(f"dec{lvl}.b", (ch[lvl],))
    put("feat.w", (3, 3, ch[0], cfg.feature_dim))
    put("feat.b", (cfg.feature_dim,))
    put("head.w", (cfg.feature_dim, cfg.classes))
    put("head.b", (cfg.classes,))
    return segs


def num_params(cfg: NetConfig) -> int:
    segs = param_layout(cfg)
    name, shape, offset = segs[-1]
    return offset + int(np.prod(shape, dtype=int))


def init_params(cfg: NetConfig, seed: int) -> ParamVector:
    """Fan-in uniform weights, zero biases, drawn from a SplitMix64 stream
    in segment order. Bit-identical for identical (cfg, seed)."""
    segs = param_layout(cfg)
    values = np.zeros(num_params(cfg), dtype=np.float64)
    rng = Rng(seed)
    for name, shape, offset in segs:
        k = int(np.prod(shape, dtype=int))
        if name.endswith(".b"):
            continue  # biases stay zero
        if name.endswith(".w") and len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
        else:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        seg = np.empty(k, dtype=np.float64)
        for i in range(k):
            seg[i] = rng.uniform(-bound, bound)
        values[offset:offset + k] = seg
    return ParamVector(segs, values)


def as_batch(x: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Normalize input to (N, H, W, C). A 3-d array whose last dim equals
    in_channels is read as one (H, W, C) image, otherwise as an (N, H, W)
    batch of single-channel images."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[None] if x.shape[-1] == cfg.in_channels else x[..., None]
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ad.GraphError(f"input shape {x.shape} does not match config")
    return x


class _P:
    """Per-segment tensor views of a flat parameter tensor on a tape."""

    def __init__(self, theta: Tensor, segments):
        self._views: dict[str, Tensor] = {}
        for name, shape, offset in segments:
            k = int(np.prod(shape, dtype=int))
            self._views[name] = ad.reshape(ad.slice1d(theta, offset, k), shape)

    def __getitem__(self, name: str) -> Tensor:
        return self._views[name]


def build_forward(cfg: NetConfig, theta: Tensor, x: np.ndarray,
                  segments) -> tuple[Tensor, Tensor, Tensor]:
    """Build the forward graph for a batch x (N,H,W,C) on theta's tape.
    Returns (logits, features, probs) tensors of shapes (N,H,W,L) /
    (N,H,W,D) / (N,H,W,L)."""
    x = as_batch(x, cfg)
    h, w = x.shape[1], x.shape[2]
    step = 1 << cfg.depth
    if h % step or w % step:
        raise ad.GraphError(f"H and W must be divisible by {step}, got {h}x{w}")

    p = _P(theta, segments)
    tape = theta.tape
    t = tape.const(x)

    skips = []
    for lvl in range(cfg.depth + 1):
        if lvl > 0:
            t = ad.down2(t)
        t = ad.relu(ad.bias_add(ad.conv3x3(t, p[f"enc{lvl}.w"]), p[f"enc{lvl}.b"]))
        if lvl < cfg.depth:
            skips.append(t)
    for lvl in range(cfg.depth - 1, -1, -1):
        t = ad.up2(t)
        t = ad.bias_add(ad.conv3x3(t, p[f"dec{lvl}.w"]), p[f"dec{lvl}.b"])
        t = ad.relu(ad.add(t, skips[lvl]))
    features = ad.relu(ad.bias_add(ad.conv3x3(t, p["feat.w"]), p["feat.b"]))
    logits = ad.pixel_affine(features, p["head.w"], p["head.b"])
    probs = ad.softmax(logits)
    return logits, features, probs


def forward(x: np.ndarray, theta: ParamVector, cfg: NetConfig,
            dtype=ad.F64) -> ForwardOutput:
    """Run the network on one image (H,W) or (H,W,C). Pure in (x, theta)."""
    with Tape(dtype) as tape:
        tv = tape.const(theta.values.astype(dtype, copy=False))
        logits, features, probs = build_forward(cfg, tv, x, theta.segments)
        return ForwardOutput(logits=logits.data[0].copy(),
                             features=features.data[0].copy(),
                             probs=probs.data[0].copy())


def pseudo_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of a probability map (..., L). Ties break toward
    the lowest class index; the result carries no gradient."""
    probs = np.asarray(probs)
    return np.argmax(probs, axis=-1).astype(np.int64)


def save_checkpoint(path, cfg: NetConfig, theta: ParamVector) -> None:
    """Binary format: magic, version u32, five u32 config fields, then the
    flat float32 little-endian parameter array in layout order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<6I", CHECKPOINT_VERSION, cfg.in_channels,
                             cfg.classes, cfg.base_width, cfg.depth,
                             cfg.feature_dim))
        fh.write(theta.values.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[NetConfig, ParamVector]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic at byte 0: {blob[:4]!r}")
    version, c, l, b, d, f = struct.unpack_from("<6I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = NetConfig(in_channels=c, classes=l, base_width=b, depth=d, feature_dim=f)
    expected = num_params(cfg)
    body = blob[28:]
    if len(body) != 4 * expected:
        raise ValueError(f"checkpoint has {len(body)} param bytes, expected {4 * expected}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return cfg, ParamVector(param_layout(cfg), values)
