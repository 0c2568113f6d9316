"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations the solver heads need are provided.  Every op records a
closure that pushes the output gradient to its inputs; ``backward`` walks the
graph in reverse topological order.  The graph is rebuilt on every forward
pass, which suits the per-problem, per-layer shapes of the decoder.
"""

from __future__ import annotations

import contextlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # interior grads may alias arrays held elsewhere: never update them in place
        if self.grad is None:
            self.grad = g if self._backward is not None else np.array(g, dtype=np.float64)
        elif self._backward is None:
            self.grad += g
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold the batch axes so the weight gradient is one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return _make(out, (a, b), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tensors, backward)


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing (slices, row gathers); repeats accumulate."""

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), backward)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather along the first axis, i.e. an embedding lookup."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        x._accumulate(full)

    return _make(x.data[rows], (x,), backward)


embedding = take_rows


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """``out[s] = sum(x[i] for segments[i] == s)`` along the first axis."""
    segments = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)

    def backward(g):
        x._accumulate(g[segments])

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _make(s, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g):
        x._accumulate(g * e)

    return _make(e, (x,), backward)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the input clamped at ``floor``; clamped entries pass no gradient."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor

    def backward(g):
        x._accumulate(np.where(live, g / clamped, 0.0))

    return _make(np.log(clamped), (x,), backward)


def floor_at(x: Tensor, theta: float) -> Tensor:
    """``max(theta, x)``; gradient flows only where ``x > theta``."""
    live = x.data > theta

    def backward(g):
        x._accumulate(g * live)

    return _make(np.where(live, x.data, theta), (x,), backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax; positions where ``mask`` is False receive exactly zero weight."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            )

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; ``mask`` marks valid keys."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    scores = mul(matmul(q, transpose_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d x into ``.grad`` of every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    interior = [t for t in order if t._backward is not None]
    for t in interior:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    # drop the graph so intermediates can be freed
    for t in interior:
        t._backward = None
        t._parents = ()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)


@dataclass
class AdamState:
    params: list[Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p.data) for p in self.params]
            self.second_moment = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState) -> None:
    """One bias-corrected Adam update of ``state.params`` from their grads."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(state.params, state.first_moment, state.second_moment):
        g = p.grad
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def halved_lr(base_lr: float, epoch: int, period: int) -> float:
    """Learning rate for 1-based ``epoch`` when halving every ``period`` epochs."""
    if period <= 0:
        return base_lr
    return base_lr * 0.5 ** ((epoch - 1) // period)


def grad_check(
    function: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    For each input tensor the error is ``‖a − n‖ / max(1e-8, ‖a‖ + ‖n‖)``
    over the checked entries; the worst tensor is returned.  ``function``
    re-runs the forward pass reading the current ``inputs`` data.  With
    ``max_entries`` only a seeded random subset of each tensor is perturbed.
    """
    zero_grad(inputs)
    backward(function())
    analytic = [p.grad.copy() for p in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(inputs, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(len(entries))
            for j, e in enumerate(entries):
                orig = flat[e]
                flat[e] = orig + step
                fp = function().item()
                flat[e] = orig - step
                fm = function().item()
                flat[e] = orig
                num[j] = (fp - fm) / (2.0 * step)
            an = a.reshape(-1)[entries]
            err = np.linalg.norm(an - num) / max(1e-8, np.linalg.norm(an) + np.linalg.norm(num))
            worst = max(worst, float(err))
    return worst


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


MAGIC = b"FC2C1"


def save_arrays(path, arrays: dict[str, np.ndarray], config: Optional[dict] = None) -> None:
    """Write the ``FC2C1`` container plus a ``.json`` sidecar holding ``config``.

    Layout: magic, little-endian uint64 manifest length, JSON manifest of
    ``{name, shape, offset}`` entries, then the raw ``<f8`` arrays.
    Offsets are relative to the start of the data block.
    """
    path = Path(path)
    manifest, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    if config is not None:
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")


def load_arrays(path) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an FC2C1 checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest = json.loads(raw[pos : pos + hlen])
    base = pos + hlen
    arrays = {}
    for entry in manifest:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    sidecar = path.with_suffix(".json")
    config = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return arrays, config
