"""A small reverse-mode autodiff engine over numpy arrays, plus the toy
encoders, projection heads and the SGD optimiser used for pretraining.

Every op builds a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back into them.  ``Tensor.backward`` walks the
graph in reverse topological order, so each node is visited once and leaf
gradients accumulate additively.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

EPS_NORM = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch {a.shape} + {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    """Concatenate along rows (default) or any other axis."""
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), back)


def pick(a, cols) -> Tensor:
    """Per-row element selection ``a[i, cols[i]]`` -> (M,)."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _make(a.data[rows, cols], (a,), back)


def logsumexp(a) -> Tensor:
    """Row-wise log-sum-exp of an M x K matrix, max-shifted."""
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _make(out, (a,), lambda g: (g[:, None] * soft,))


def l2_normalize(a, eps: float = EPS_NORM) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = a.data / denom

    def back(g):
        # rows where the norm is active: (g - y <g, y>) / ||x||
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / eps),)

    return _make(out, (a,), back)


def pool_by_group(a, groups, num_groups=None, mode="mean") -> Tensor:
    """Pool rows sharing a group id; ids must be contiguous and non-empty."""
    a = as_tensor(a)
    groups = np.asarray(groups, dtype=np.int64)
    if len(groups) != a.shape[0]:
        raise ValueError("one group id per row required")
    m = int(groups.max()) + 1 if num_groups is None else num_groups
    counts = np.bincount(groups, minlength=m)
    if len(counts) > m or np.any(counts[:m] == 0):
        raise ValueError("empty group in pool_by_group")
    d = a.shape[1]
    if mode == "mean":
        out = np.zeros((m, d))
        np.add.at(out, groups, a.data)
        out /= counts[:, None]
        return _make(out, (a,), lambda g: ((g / counts[:, None])[groups],))
    if mode == "max":
        out = np.full((m, d), -np.inf)
        np.maximum.at(out, groups, a.data)
        # first row (in index order) attaining the max owns the gradient
        hit = a.data == out[groups]
        n = a.shape[0]
        winner = np.full((m, d), n, dtype=np.int64)
        rr, cc = np.nonzero(hit)
        np.minimum.at(winner, (groups[rr], cc), rr)

        def back(g):
            grad = np.zeros_like(a.data)
            cols = np.broadcast_to(np.arange(d), (m, d))
            grad[winner, cols] = g
            return (grad,)

        return _make(out, (a,), back)
    raise ValueError(f"unknown pooling mode {mode!r}")


def gather_max(a, index) -> Tensor:
    """Row i of the output is the column-wise max of ``a[index[i]]``.

    ``index`` is an N x k integer array.  Ties go to the first neighbour in
    ``index[i]`` order.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[1] == 0:
        raise ValueError("index must be N x k with k >= 1")
    out = a.data[index[:, 0]]
    for j in range(1, index.shape[1]):
        np.maximum(out, a.data[index[:, j]], out=out)

    def back(grad):
        # winning row per output entry; scanning backwards leaves the first match
        src = np.repeat(index[:, -1:], a.shape[1], axis=1)
        for j in range(index.shape[1] - 2, -1, -1):
            np.copyto(src, index[:, j:j + 1], where=a.data[index[:, j]] == out)
        d = a.shape[1]
        flat = np.bincount((src * d + np.arange(d)).ravel(), grad.ravel(), a.shape[0] * d)
        return (flat.reshape(a.shape),)

    return _make(out, (a,), back)


def upsample_matrix(n: int, ratio: int) -> np.ndarray:
    """(n*ratio) x n interpolation weights, half-pixel centres, edge clamped."""
    out = n * ratio
    src = (np.arange(out) + 0.5) / ratio - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    w = np.zeros((out, n))
    w[np.arange(out), lo] += 1 - frac
    w[np.arange(out), hi] += frac
    return w


def bilinear_upsample(a, ratio: int) -> Tensor:
    """Upsample an h x w x D grid by an integer ratio (align_corners=False)."""
    a = as_tensor(a)
    if int(ratio) != ratio or ratio < 1:
        raise ValueError("ratio must be a positive integer")
    if ratio == 1:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    h, w, _ = a.shape
    wh, ww = upsample_matrix(h, ratio), upsample_matrix(w, ratio)
    out = np.einsum("yh,hwd,xw->yxd", wh, a.data, ww, optimize=True)
    return _make(out, (a,), lambda g: (np.einsum("yh,yxd,xw->hwd", wh, g, ww, optimize=True),))


def cross_entropy(logits, targets) -> Tensor:
    logits = as_tensor(logits)
    return mean_all(add(logsumexp(logits), scale(pick(logits, targets), -1.0)))


# --- layers -------------------------------------------------------------------

class Module:
    """Parameter registry: attributes that are Tensors or Modules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ValueError(f"parameter names differ: {sorted(set(own) ^ set(state))}")
        for k, v in own.items():
            if v.shape != np.shape(state[k]):
                raise ValueError(f"{k}: shape {np.shape(state[k])} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = Tensor(rng.normal(0, math.sqrt(2.0 / n_in), (n_in, n_out)), True)
        self.bias = Tensor(np.zeros(n_out), True)

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)


class MLP(Module):
    def __init__(self, n_in, hidden, n_out, rng):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))


class PointEncoder(Module):
    """Point MLP with one neighbourhood layer.

    ``h = relu(W1 x)`` per point, then ``out = W2 [h_i, max_{j in kNN(i)} h_j]``.
    Inputs are (xyz / position_scale, point features); neighbours are the
    ``neighbors`` nearest points of the same cloud, the point itself included.
    """

    def __init__(self, n_features=1, hidden=64, channels=32, rng=None, position_scale=10.0, neighbors=16):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(3 + n_features, hidden, rng)
        self.fc2 = Linear(2 * hidden, channels, rng)
        self.channels = channels
        self.position_scale = position_scale
        self.neighbors = neighbors

    def _inputs(self, positions, features):
        x = np.concatenate([positions, features], axis=1).astype(np.float64)
        x[:, :3] /= self.position_scale
        return x

    def knn(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        k = min(self.neighbors, len(positions))
        _, idx = cKDTree(positions).query(positions, k)
        return idx.reshape(len(positions), k)

    def encode(self, positions, features, knn=None):
        knn = self.knn(positions) if knn is None else knn
        h = relu(self.fc1(Tensor(self._inputs(positions, features))))
        return self.fc2(concat([h, gather_max(h, knn)], axis=1))

    def embed(self, clouds) -> np.ndarray:
        """Features outside any graph for a list of ``(positions, features, rows)``.

        Each cloud is encoded whole so neighbourhoods are complete; only
        ``rows`` (all rows when None) are returned, stacked in order.
        """
        out = []
        for positions, features, rows in clouds:
            knn = self.knn(positions)
            x = self._inputs(positions, features)
            h = np.maximum(x @ self.fc1.weight.data + self.fc1.bias.data, 0.0)
            z = np.concatenate([h, h[knn].max(axis=1)], axis=1)
            f = z @ self.fc2.weight.data + self.fc2.bias.data
            out.append(f if rows is None else f[rows])
        return np.concatenate(out)


def downsample_mean(arr: np.ndarray, stride: int) -> np.ndarray:
    h, w = arr.shape[:2]
    hs, ws = h // stride, w // stride
    a = arr[: hs * stride, : ws * stride]
    return a.reshape(hs, stride, ws, stride, -1).mean(axis=(1, 3))


class ImageEncoder(MLP):
    """Per-pixel MLP on (RGB, x/W, y/H) evaluated at output stride ``s``."""

    def __init__(self, hidden=64, channels=32, stride=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(5, hidden, channels, rng)
        self.stride = stride
        self.channels = channels

    def encode(self, image):
        img = np.asarray(image, dtype=np.float64)
        if np.issubdtype(np.asarray(image).dtype, np.integer):
            img = img / 255.0
        small = downsample_mean(img, self.stride)
        h, w = small.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        x = np.concatenate([small, (xx / w)[..., None], (yy / h)[..., None]], axis=2)
        out = self(Tensor(x.reshape(h * w, 5)))
        return reshape(out, (h, w, self.channels))


class PointHead(Module):
    def __init__(self, channels=32, dim=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj = Linear(channels, dim, rng)

    def __call__(self, feats):
        return l2_normalize(self.proj(feats))


class ImageHead(Module):
    """1x1 convolution, fixed bilinear upsampling, then row normalisation."""

    def __init__(self, channels=32, dim=16, ratio=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj = Linear(channels, dim, rng)
        self.ratio = ratio
        self.dim = dim

    def __call__(self, grid):
        h, w, c = grid.shape
        x = self.proj(reshape(grid, (h * w, c)))
        up = bilinear_upsample(reshape(x, (h, w, self.dim)), self.ratio)
        hh, ww = h * self.ratio, w * self.ratio
        return reshape(l2_normalize(reshape(up, (hh * ww, self.dim))), (hh, ww, self.dim))


# --- optimisation -----------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """SGD with momentum, dampening and L2 weight decay on a cosine schedule.

    Update per parameter: ``g = grad + wd * p``; ``buf = momentum * buf +
    (1 - dampening) * g``; ``p -= lr(step) * buf``.
    """

    def __init__(self, params, lr0, total_steps, momentum=0.9, weight_decay=1e-4, dampening=0.1):
        self.params = list(params)
        self.lr0 = lr0
        self.total_steps = total_steps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.dampening = dampening
        self.step_count = 0
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.step_count, self.total_steps), self.total_steps, self.lr0)

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        lr = self.lr
        for p, g, buf in zip(self.params, grads, self.buffers):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += (1.0 - self.dampening) * g
            p.data = p.data - lr * buf
        self.step_count += 1
        return lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# --- checkpoints --------------------------------------------------------------

CK_MAGIC = b"SEALCK1\n"


def save_checkpoint(state: dict, path) -> None:
    parts = [CK_MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CK_MAGIC):
        raise ValueError("bad checkpoint magic")
    off = len(CK_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if len(data) < off + 8 * size:
                raise ValueError("truncated checkpoint payload")
            state[name] = np.frombuffer(data, "<f8", size, off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    return state
