"""Small reverse-mode autodiff over numpy arrays, plus the optimizer pieces.

Tensors wrap an ``ndarray``; every op records its parents and a closure that
pushes the upstream gradient back to them. Parameters are stored as float32
(see :class:`ParamStore`) while activations, losses and gradient reductions run
in float64.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np


class AutodiffError(Exception):
    pass


class GraphCycle(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class MissingGrad(AutodiffError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class CheckpointError(AutodiffError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptPayload(CheckpointError):
    pass


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order: List[Tensor] = []
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: List[Tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise GraphCycle("cycle detected in autodiff graph")
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphCycle("cycle detected in autodiff graph")
                if pmark is None:
                    stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)

    loss._accumulate(np.ones_like(loss.data, dtype=np.float64))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    def _bw(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), _bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g):
        a._accumulate(g * out)

    return _make(out, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _bw(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), _bw)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def _bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), _bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere so finite differences behave
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        a._accumulate(g * d)

    return _make(out, (a,), _bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), _bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), _bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), _bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def _bw(g):
        full = np.zeros(a.shape, dtype=np.float64)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def _bw(g):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(table.data[ids].astype(np.float64), (table,), _bw)


# ---------------------------------------------------------------- normalizers


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    out = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))

    def _bw(g):
        p = np.exp(out)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), _bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = x / x.sum(axis=axis, keepdims=True)

    def _bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), _bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            da = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            a._accumulate(da)

    return _make(out, (a, gain, bias), _bw)


def softmax_cross_entropy(logp: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None,
                          smoothing: float = 0.0) -> Tensor:
    """Per-row cross entropy against (optionally smoothed) one-hot targets.

    ``logp`` is (..., V) log probabilities; returns the weighted sum over rows.
    Smoothing puts ``1 - smoothing`` on the target and spreads the rest evenly
    over the other ``V - 1`` entries.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logp.shape[-1]
    q = np.full(logp.shape, smoothing / (v - 1) if v > 1 else 0.0)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    if weights is not None:
        q = q * np.asarray(weights, dtype=np.float64)[..., None]
    out = -(q * logp.data).sum()

    def _bw(g):
        logp._accumulate(-g * q)

    return _make(np.asarray(out), (logp,), _bw)


# ---------------------------------------------------------------- parameters


class ParamStore(dict):
    """Named parameters. Iteration is always in sorted-name order."""

    def __iter__(self):
        return iter(sorted(super().keys()))

    def keys(self):
        return sorted(super().keys())

    def items(self):
        return [(k, self[k]) for k in self.keys()]

    def values(self):
        return [self[k] for k in self.keys()]

    def add(self, name: str, value: np.ndarray, dtype=np.float32) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def snapshot(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy(), requires_grad=True, name=k)
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.values()))


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimizerState, lr: Optional[float] = None) -> float:
    """One Adam update. Clips the global grad norm first, then adds the L2 term.

    Returns the pre-clip gradient norm.
    """
    for name, t in params.items():
        if t.grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
    norm = clip_grad_norm(params, state.clip)
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in params.items():
        theta = t.data.astype(np.float64)
        g = t.grad + state.weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.data = (theta - update).astype(t.data.dtype)
    return norm


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * warmup_steps**0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def average_checkpoints(checkpoints: Sequence[ParamStore]) -> ParamStore:
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    first = checkpoints[0]
    names = first.keys()
    for ck in checkpoints[1:]:
        if ck.keys() != names:
            raise ShapeMismatch("checkpoints have different parameter names")
        for k in names:
            if ck[k].shape != first[k].shape:
                raise ShapeMismatch(f"shape mismatch for {k!r}: {ck[k].shape} vs {first[k].shape}")
    out = ParamStore()
    for k in names:
        acc = np.zeros(first[k].shape, dtype=np.float64)
        for ck in checkpoints:
            acc += ck[k].data
        out.add(k, acc / len(checkpoints), dtype=first[k].data.dtype)
    return out


# ---------------------------------------------------------------- checkpoint files

_MAGIC = b"APHCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path, metadata: Optional[bytes] = None) -> None:
    """Write ``store`` as float32 little-endian records sorted by name.

    Layout: magic, u32 version, u32 metadata length, metadata bytes, u32 count,
    then per parameter (u16 name length, name, u8 ndim, u32 dims, payload), and a
    trailing CRC32 of everything before it. Written to a temp file then renamed.
    """
    metadata = metadata or b""
    chunks = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(metadata)), metadata,
              struct.pack("<I", len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    _atomic_write(Path(path), body)


def load_checkpoint(path) -> Tuple[ParamStore, bytes]:
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 16 or not data.startswith(_MAGIC):
        raise CorruptPayload(f"{path}: not a checkpoint file or truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, meta_len = struct.unpack_from("<II", data, len(_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptPayload(f"{path}: checksum mismatch")
    off = len(_MAGIC) + 8
    metadata = body[off:off + meta_len]
    off += meta_len
    store = ParamStore()
    try:
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            store.add(name, arr.astype(np.float32), dtype=np.float32)
    except (struct.error, ValueError) as exc:
        raise CorruptPayload(f"{path}: {exc}") from exc
    if off != len(body):
        raise CorruptPayload(f"{path}: trailing bytes after last parameter")
    return store, metadata


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
