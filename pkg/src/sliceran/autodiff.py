"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: just the primitives needed for MLP encoders, masked
multi-head attention, dueling/actor/critic heads and their scalar losses.
Arrays are kept in float64 so finite-difference gradient checks can be
tight. A Tensor records its parents and a vector-Jacobian closure when
gradients are enabled; ``backward()`` walks that record once, in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np

_grad_enabled = True

# When on, every op asserts its output is finite. Meant for tests and
# selftest; costs ~30% on small tensors, so off by default.
check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (target nets, acting)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad for every recorded leaf.

        self must be a scalar. Each graph node is visited exactly once.
        """
        if self.data.shape != ():
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones(())
        for node in reversed(topo):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if parent.requires_grad and g is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data, rng=None, shape=None):
    """A leaf tensor that collects gradients."""
    if data is None:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    # Sum g down to `shape`, undoing numpy broadcasting.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, vjp):
    if check_finite and not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced by a tensor op")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


# -- primitives --------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b):
    """Matrix product; leading axes broadcast (numpy matmul semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def softmax(x, tau=1.0, mask=None):
    """Softmax over the last axis of ``tau * x``.

    ``mask`` (broadcastable boolean) excludes entries entirely: they get
    probability exactly 0 and receive zero gradient. Max-subtraction keeps
    the exponentials stable.
    """
    x = as_tensor(x)
    z = tau * x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (tau * p * (g - inner),)

    return _make(p, (x,), vjp)


def log_softmax(x, tau=1.0):
    """Log-probabilities over the last axis of ``tau * x``.

    Stays finite however saturated the logits are, unlike
    log(softmax(x)); use it wherever a log-probability feeds a loss.
    """
    x = as_tensor(x)
    z = tau * x.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (tau * (g - p * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), vjp)


def entropy(p):
    """Shannon entropy -sum p ln p over the last axis; 0 ln 0 := 0."""
    p = as_tensor(p)
    safe = np.where(p.data > 0, p.data, 1.0)
    logp = np.log(safe)
    h = -(p.data * logp).sum(axis=-1)

    def vjp(g):
        gp = np.where(p.data > 0, -(logp + 1.0), 0.0)
        return (np.expand_dims(g, -1) * gp,)

    return _make(h, (p,), vjp)


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.data.shape, float(g) / n),))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def take(a, index, axis):
    """Select one integer index along ``axis`` (dimension is dropped)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        z[tuple(sl)] = g
        return (z,)

    return _make(out, (a,), vjp)


def gather(a, idx):
    """Per-row column pick: out[i] = a[i, idx[i]] for a rank-2 tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _make(out, (a,), vjp)


# -- optimizer ---------------------------------------------------------

class Adam:
    """Adaptive moment estimation with bias correction.

    `weight_decay` is decoupled (AdamW style): a plain shrink applied next
    to the adaptive step, not mixed into the moments.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoints -------------------------------------------------------
#
# Layout: <dir>/params.bin is the concatenation of every tensor's float64
# C-order bytes, in manifest order; <dir>/manifest.json lists
# {name, shape, offset} with offsets in bytes into params.bin.

def save_checkpoint(directory, named):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name in sorted(named):
            arr = np.asarray(named[name], dtype=np.float64)
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"dtype": "<f8", "tensors": entries}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    raw = (directory / "params.bin").read_bytes()
    out = {}
    for ent in manifest["tensors"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=manifest["dtype"], count=n,
                            offset=ent["offset"]).reshape(shape)
        out[ent["name"]] = arr.copy()
    return out
