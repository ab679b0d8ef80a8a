"""Tape-based reverse-mode differentiation over numpy arrays.

The engine supports exactly the operation set the segmentation network and
its losses need: 3x3 convolution, bias add, relu, 2x nearest down/up
sampling, a per-pixel affine head, softmax over the class axis, fused
softmax cross-entropy, elementwise arithmetic, reductions, a Euclidean norm
over the last axis, and pixel gathering. Anything else is out of scope on
purpose; the whitelist keeps every gradient checkable against central
finite differences.

A ``Tape`` is a linear list of op records built eagerly. ``backward`` walks
the records once in reverse, accumulating adjoints; ``jvp`` walks them once
forward, pushing tangents (used for per-pixel directional derivatives).
Tapes are single-use and thread-confined. Every op output is checked for
NaN/Inf and faults with the op name and record index.

Precision is selected per tape: float64 for verification, float32 for
faster training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

F32 = np.float32
F64 = np.float64


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class GraphError(ValueError):
    """Raised on malformed graph usage (shape mismatch, cross-tape ops)."""


# ---------------------------------------------------------------------------
# Tensor arena accounting. A portable proxy for peak memory: every record
# output and every adjoint allocated during backward is counted while its
# tape is alive; Tape.release() returns the bytes.

_live_bytes = 0
_peak_bytes = 0


def _note_alloc(n: int) -> None:
    global _live_bytes, _peak_bytes
    _live_bytes += n
    if _live_bytes > _peak_bytes:
        _peak_bytes = _live_bytes


def _note_free(n: int) -> None:
    global _live_bytes
    _live_bytes -= n


def arena_reset_peak() -> None:
    global _peak_bytes
    _peak_bytes = _live_bytes


def arena_peak_bytes() -> int:
    return _peak_bytes


def arena_live_bytes() -> int:
    return _live_bytes


# ---------------------------------------------------------------------------


@dataclass
class Record:
    name: str
    parents: tuple[int, ...]
    # bwd(adjoint) -> one adjoint contribution per parent (None = zero)
    bwd: Optional[Callable]
    # jvp(parent tangents, None = zero) -> output tangent (None = zero)
    jvp: Optional[Callable]
    needs_grad: bool
    nbytes: int


class Tensor:
    """A value bound to a tape record. Wraps one contiguous numpy array."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: "Tape", idx: int, data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __add__(self, other):
        return shift(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return shift(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.data.shape})"


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


class Tape:
    """Linear op record list. Single-use, confined to one thread."""

    def __init__(self, dtype=F64, check_finite: bool = True):
        if dtype not in (F32, F64):
            raise GraphError("tape dtype must be float32 or float64")
        self.dtype = dtype
        self.check_finite = check_finite
        self.records: list[Record] = []
        self.bytes = 0
        self._released = False

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def release(self) -> None:
        if not self._released:
            _note_free(self.bytes)
            self._released = True

    def _emit(self, name, data, parents, bwd, jvp, needs_grad) -> Tensor:
        data = np.asarray(data, dtype=self.dtype)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        idx = len(self.records)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in op '{name}' (record {idx})")
        self.records.append(Record(name, parents, bwd, jvp, needs_grad, data.nbytes))
        self.bytes += data.nbytes
        _note_alloc(data.nbytes)
        return Tensor(self, idx, data)

    def leaf(self, array, const: bool = False) -> Tensor:
        """Register an input. Non-const leaves receive adjoints."""
        return self._emit("leaf", array, (), None, None, not const)

    def const(self, array) -> Tensor:
        return self.leaf(array, const=True)

    def _alloc_adjoint(self, arr: np.ndarray) -> None:
        self.bytes += arr.nbytes
        _note_alloc(arr.nbytes)


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise GraphError("ops cannot mix tensors from different tapes")
    if tape._released:
        raise GraphError("tape already released")
    return tape


def _emit(name, inputs: Sequence[Tensor], out, bwd, jvp) -> Tensor:
    tape = _tape_of(*inputs)
    needs = any(tape.records[t.idx].needs_grad for t in inputs)
    return tape._emit(name, out, tuple(t.idx for t in inputs), bwd, jvp, needs)


def _as_const(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(np.asarray(x, dtype=tape.dtype))


def _require_same_shape(name, a, b) -> None:
    if a.data.shape != b.data.shape:
        raise GraphError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    b = _as_const(a.tape, b)
    _require_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (g, g),
                 lambda ta, tb: _tan_sum(ta, tb))


def sub(a: Tensor, b) -> Tensor:
    b = _as_const(a.tape, b)
    _require_same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (g, -g),
                 lambda ta, tb: _tan_sum(ta, None if tb is None else -tb))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data,
                 lambda g: (-g,),
                 lambda ta: None if ta is None else -ta)


def mul(a: Tensor, b) -> Tensor:
    b = _as_const(a.tape, b)
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (g * bd, g * ad),
                 lambda ta, tb: _tan_sum(None if ta is None else ta * bd,
                                         None if tb is None else ad * tb))


def div(a: Tensor, b) -> Tensor:
    b = _as_const(a.tape, b)
    _require_same_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (g / bd, -g * out / bd),
                 lambda ta, tb: _tan_sum(None if ta is None else ta / bd,
                                         None if tb is None else -out * tb / bd))


def scale(a: Tensor, c) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c,
                 lambda g: (g * c,),
                 lambda ta: None if ta is None else ta * c)


def shift(a: Tensor, c) -> Tensor:
    c = float(c)
    return _emit("shift", (a,), a.data + c,
                 lambda g: (g,),
                 lambda ta: ta)


def asum(a: Tensor) -> Tensor:
    """Sum of all elements, returned as a scalar tensor."""
    shape = a.data.shape
    return _emit("sum", (a,), a.data.sum(),
                 lambda g: (np.broadcast_to(g, shape).copy(),),
                 lambda ta: None if ta is None else ta.sum())


def slice1d(a: Tensor, offset: int, size: int) -> Tensor:
    if a.data.ndim != 1:
        raise GraphError("slice1d expects a flat tensor")
    n = a.data.shape[0]
    if offset < 0 or offset + size > n:
        raise GraphError(f"slice1d [{offset}:{offset + size}] out of range for {n}")

    def bwd(g):
        full = np.zeros(n, dtype=g.dtype)
        full[offset:offset + size] = g
        return (full,)

    return _emit("slice1d", (a,), a.data[offset:offset + size].copy(), bwd,
                 lambda ta: None if ta is None else ta[offset:offset + size])


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),),
                 lambda ta: None if ta is None else ta.reshape(shape))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0),
                 lambda g: (np.where(mask, g, 0.0),),
                 lambda ta: None if ta is None else np.where(mask, ta, 0.0))


def _tan_sum(ta, tb):
    if ta is None:
        return tb
    if tb is None:
        return ta
    return ta + tb


# ---------------------------------------------------------------------------
# Network ops. Layout is channels-last: images (N, H, W, C).


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise GraphError("bias_add: bias must be 1-D matching the channel axis")
    axes = tuple(range(x.data.ndim - 1))
    return _emit("bias_add", (x, b), x.data + b.data,
                 lambda g: (g, g.sum(axis=axes)),
                 lambda tx, tb: _tan_sum(tx, None if tb is None else
                                         np.broadcast_to(tb, x.data.shape).copy()))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of x (N,H,W,C) as a contiguous matrix
    (N*H*W, C*9) whose inner order is (C, row, col)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    view = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,C,3,3)
    return np.ascontiguousarray(view).reshape(n * h * w, c * 9)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(3,3,Cin,Cout) -> (Cin*9, Cout) matching the _im2col3 inner order."""
    return np.ascontiguousarray(np.transpose(w, (2, 0, 1, 3))).reshape(-1, w.shape[3])


def _conv3_raw(x: np.ndarray, w: np.ndarray,
               cols: np.ndarray | None = None) -> np.ndarray:
    n, h, ww, _ = x.shape
    if cols is None:
        cols = _im2col3(x)
    return (cols @ _kernel_matrix(w)).reshape(n, h, ww, w.shape[3])


def conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. x: (N,H,W,Cin),
    w: (3,3,Cin,Cout) -> (N,H,W,Cout)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[:2] != (3, 3) or wd.shape[2] != xd.shape[3]:
        raise GraphError(f"conv3x3: bad shapes x{xd.shape} w{wd.shape}")
    cin, cout = wd.shape[2], wd.shape[3]
    x_cols = _im2col3(xd)

    def bwd(g):
        # dx is the full correlation of g with the flipped kernel; dw is the
        # patch matrix against the flat output adjoint.
        wflip = wd[::-1, ::-1].transpose(0, 1, 3, 2)  # (3,3,Cout,Cin)
        dx = _conv3_raw(g, wflip)
        dw = (x_cols.T @ g.reshape(-1, cout)).reshape(cin, 3, 3, cout)
        return dx, np.transpose(dw, (1, 2, 0, 3))

    def jvp(tx, tw):
        return _tan_sum(None if tx is None else _conv3_raw(tx, wd),
                        None if tw is None else _conv3_raw(xd, tw, cols=x_cols))

    return _emit("conv3x3", (x, w), _conv3_raw(xd, wd, cols=x_cols), bwd, jvp)


def down2(x: Tensor) -> Tensor:
    """Nearest 2x downsample: keeps the top-left sample of each 2x2 block."""
    xd = x.data
    if xd.ndim != 4 or xd.shape[1] % 2 or xd.shape[2] % 2:
        raise GraphError(f"down2: H and W must be even, got {xd.shape}")

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[:, ::2, ::2, :] = g
        return (dx,)

    return _emit("down2", (x,), xd[:, ::2, ::2, :].copy(), bwd,
                 lambda tx: None if tx is None else tx[:, ::2, ::2, :].copy())


def up2(x: Tensor) -> Tensor:
    """Nearest 2x upsample: each sample becomes a 2x2 block."""
    xd = x.data
    if xd.ndim != 4:
        raise GraphError(f"up2: expected (N,H,W,C), got {xd.shape}")
    n, h, w, c = xd.shape

    def bwd(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _emit("up2", (x,), xd.repeat(2, axis=1).repeat(2, axis=2), bwd,
                 lambda tx: None if tx is None else tx.repeat(2, axis=1).repeat(2, axis=2))


def pixel_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel affine head: (N,H,W,D) @ (D,L) + (L,) -> (N,H,W,L)."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 4 or wd.ndim != 2 or xd.shape[3] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise GraphError(f"pixel_affine: bad shapes x{xd.shape} w{wd.shape} b{bd.shape}")

    def bwd(g):
        dx = np.tensordot(g, wd.T, axes=([-1], [0]))
        dw = np.tensordot(xd, g, axes=((0, 1, 2), (0, 1, 2)))
        return dx, dw, g.sum(axis=(0, 1, 2))

    def jvp(tx, tw, tb):
        parts = []
        if tx is not None:
            parts.append(np.tensordot(tx, wd, axes=([-1], [0])))
        if tw is not None:
            parts.append(np.tensordot(xd, tw, axes=([-1], [0])))
        if tb is not None:
            parts.append(np.broadcast_to(tb, xd.shape[:3] + (wd.shape[1],)).copy())
        if not parts:
            return None
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    return _emit("pixel_affine", (x, w, b),
                 np.tensordot(xd, wd, axes=([-1], [0])) + bd, bwd, jvp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    def jvp(tx):
        if tx is None:
            return None
        return p * (tx - (p * tx).sum(axis=-1, keepdims=True))

    return _emit("softmax", (x,), p, bwd, jvp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Fused per-pixel cross-entropy of softmax(logits) against integer
    labels. logits: (..., L), labels: integer array of the leading shape.
    Returns the CE map of shape labels.shape."""
    ld = logits.data
    labels = np.asarray(labels)
    if labels.shape != ld.shape[:-1]:
        raise GraphError(f"softmax_cross_entropy: labels {labels.shape} vs logits {ld.shape}")
    n_classes = ld.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise GraphError(f"label out of range [0, {n_classes})")

    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True)
    p = e / se
    lab = labels[..., None]
    picked = np.take_along_axis(ld, lab, axis=-1)[..., 0]
    ce = np.log(se)[..., 0] + m[..., 0] - picked

    onehot = np.zeros_like(ld)
    np.put_along_axis(onehot, lab, 1.0, axis=-1)

    def bwd(g):
        return ((p - onehot) * g[..., None],)

    def jvp(tl):
        if tl is None:
            return None
        return ((p - onehot) * tl).sum(axis=-1)

    return _emit("softmax_ce", (logits,), ce, bwd, jvp)


def norm_last(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. Gradient at an exact zero vector
    is taken as zero."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def bwd(g):
        return (np.where(n[..., None] > 0, xd / safe[..., None], 0.0) * g[..., None],)

    def jvp(tx):
        if tx is None:
            return None
        return np.where(n > 0, (xd * tx).sum(axis=-1) / safe, 0.0)

    return _emit("norm_last", (x,), n, bwd, jvp)


def take_channel(x: Tensor, c: int) -> Tensor:
    """Select one index of the last axis: (..., C) -> (...)."""
    xd = x.data
    if not (0 <= c < xd.shape[-1]):
        raise GraphError(f"channel {c} out of range for shape {xd.shape}")

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[..., c] = g
        return (dx,)

    return _emit("take_channel", (x,), xd[..., c].copy(), bwd,
                 lambda tx: None if tx is None else tx[..., c].copy())


def take_index(x: Tensor, i: int) -> Tensor:
    """Select one index of the leading axis: (N, ...) -> (...)."""
    xd = x.data
    if not (0 <= i < xd.shape[0]):
        raise GraphError(f"index {i} out of range for shape {xd.shape}")

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[i] = g
        return (dx,)

    return _emit("take_index", (x,), xd[i].copy(), bwd,
                 lambda tx: None if tx is None else tx[i].copy())


def gather_pixels(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select pixel vectors from a (H,W,D) map: out[k] = x[rows[k], cols[k]]."""
    xd = x.data
    if xd.ndim != 3:
        raise GraphError("gather_pixels expects (H,W,D)")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bwd(g):
        dx = np.zeros_like(xd)
        np.add.at(dx, (rows, cols), g)
        return (dx,)

    return _emit("gather_pixels", (x,), xd[rows, cols], bwd,
                 lambda tx: None if tx is None else tx[rows, cols])


# ---------------------------------------------------------------------------
# Backward / forward-tangent sweeps


def backward(out: Tensor, seed: float = 1.0) -> list[Optional[np.ndarray]]:
    """Reverse sweep from a scalar tensor. Returns one adjoint per record
    (None where the adjoint is identically zero or not needed)."""
    if out.data.shape != ():
        raise GraphError("backward seeds must be scalar tensors")
    tape = out.tape
    recs = tape.records
    adj: list[Optional[np.ndarray]] = [None] * len(recs)
    adj[out.idx] = np.asarray(seed, dtype=tape.dtype)
    for i in range(out.idx, -1, -1):
        rec = recs[i]
        g = adj[i]
        if g is None or rec.bwd is None or not rec.needs_grad:
            continue
        if tape.check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite adjoint at op '{rec.name}' (record {i})")
        contribs = rec.bwd(g)
        for p, c in zip(rec.parents, contribs):
            if c is None or not recs[p].needs_grad:
                continue
            if adj[p] is None:
                adj[p] = c
                tape._alloc_adjoint(np.asarray(c))
            else:
                adj[p] = adj[p] + c
    return adj


def jvp(tape: Tape, seeds: dict[int, np.ndarray]) -> list[Optional[np.ndarray]]:
    """Forward tangent sweep over the whole tape. seeds maps leaf record
    indices to tangent arrays; returns one tangent per record (None = zero)."""
    recs = tape.records
    tans: list[Optional[np.ndarray]] = [None] * len(recs)
    for idx, t in seeds.items():
        if recs[idx].parents:
            raise GraphError("jvp seeds must be leaves")
        tans[idx] = np.asarray(t, dtype=tape.dtype)
    for i, rec in enumerate(recs):
        if rec.jvp is None:
            continue
        tans[i] = rec.jvp(*[tans[p] for p in rec.parents])
    return tans


# ---------------------------------------------------------------------------
# Parameter vectors


class ParamVector:
    """Flat parameter storage with a deterministic (name, shape, offset)
    segment table. Offsets must tile the value array exactly."""

    __slots__ = ("segments", "values")

    def __init__(self, segments: Sequence[tuple[str, tuple[int, ...], int]],
                 values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 1:
            raise GraphError("ParamVector values must be flat")
        pos = 0
        for name, shape, offset in segments:
            if offset != pos:
                raise GraphError(f"segment '{name}' offset {offset}, expected {pos}")
            pos += int(np.prod(shape, dtype=int))
        if pos != values.shape[0]:
            raise GraphError(f"segments cover {pos} values, array has {values.shape[0]}")
        self.segments = tuple((n, tuple(s), int(o)) for n, s, o in segments)
        self.values = values

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def view(self, name: str) -> np.ndarray:
        for n, shape, offset in self.segments:
            if n == name:
                k = int(np.prod(shape, dtype=int))
                return self.values[offset:offset + k].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.values.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments, np.zeros_like(self.values))

    def __repr__(self):
        return f"ParamVector({len(self.segments)} segments, {self.size} values)"


def value_and_grad(f: Callable[[Tensor], Tensor], theta: ParamVector,
                   dtype=F64) -> tuple[float, ParamVector]:
    """Evaluate a scalar function of a parameter vector and its gradient.

    f receives the parameters as a flat tensor leaf and must build its
    result from the supported op set. The returned gradient shares theta's
    segment layout.
    """
    with Tape(dtype) as tape:
        tv = tape.leaf(theta.values.astype(dtype, copy=True))
        out = f(tv)
        if out.data.shape != ():
            raise GraphError("value_and_grad requires a scalar-valued function")
        adj = backward(out)
        g = adj[tv.idx]
        grad = np.zeros(theta.size, dtype=dtype) if g is None else g.copy()
        return float(out.data), ParamVector(theta.segments, grad)


def eval_scalar(f: Callable[[Tensor], Tensor], theta: ParamVector, dtype=F64) -> float:
    """Forward-only evaluation of a scalar function of a parameter vector."""
    with Tape(dtype) as tape:
        tv = tape.leaf(theta.values.astype(dtype, copy=True))
        return float(f(tv).data)


def finite_diff_grad(f: Callable[[Tensor], Tensor], theta: ParamVector,
                     h: float = 1e-5, dtype=F64) -> ParamVector:
    """Central-difference gradient: (f(theta + h e_k) - f(theta - h e_k)) / 2h
    per coordinate. The oracle for every reverse-mode check."""
    if h <= 0:
        raise ValueError("finite_diff_grad requires h > 0")
    base = theta.values.astype(dtype, copy=True)
    grad = np.zeros_like(base)
    work = ParamVector(theta.segments, base)
    for k in range(base.shape[0]):
        orig = base[k]
        base[k] = orig + h
        fp = eval_scalar(f, work, dtype)
        base[k] = orig - h
        fm = eval_scalar(f, work, dtype)
        base[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
    return ParamVector(theta.segments, grad)
