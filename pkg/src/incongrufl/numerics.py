"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that accumulates gradients into its parents; calling
``Tensor.backward`` walks the graph once in reverse topological order.  The
module also hosts the pieces of training plumbing that sit directly on top of
the tensor type: finite-difference gradient checking, a decoupled-weight-decay
Adam optimizer and the seeded RNG streams used everywhere else.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MASK_SENTINEL = -1e9

_grad_enabled = True


class DegenerateInputError(ValueError):
    """Raised when an op receives input it has no defined value for."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher / eval passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other) -> Tensor:
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, p: float) -> Tensor:
        return power(self, p)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, sa)), (b, _unbroadcast(g, sb))))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: ((a, _unbroadcast(g * bd, ad.shape)),
                            (b, _unbroadcast(g * ad, bd.shape))))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: ((a, g * p * ad ** (p - 1)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: ((a, g / ad),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: ((a, g * m),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)),)

    return _make(out, (a,), backward)


# shape ---------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, shape)),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(src)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: ((a, np.transpose(g, inv)),))


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return ((a, full),)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, cuts, axis=axis)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    return index(table, np.asarray(ids, dtype=np.intp))


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ((a, _unbroadcast(ga, ad.shape)), (b, _unbroadcast(gb, bd.shape)))

    return _make(ad @ bd, (a, b), backward)


# normalizations and losses ---------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis.

    ``-inf`` entries (and anything at or below the mask sentinel) come out as
    exact zeros.  A slice with no finite entry has no defined softmax.
    """
    x = as_tensor(x)
    xd = x.data
    mx = xd.max(axis=-1, keepdims=True)
    if np.any(mx <= MASK_SENTINEL):
        raise DegenerateInputError("softmax slice with every position masked")
    # exp underflows to exactly 0.0 for -inf and sentinel entries
    e = np.exp(xd - mx)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return _make(out, (x,), backward)


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return ((x, g - sm * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return ((x, dx), (gain, (g * xhat).sum(axis=red)), (bias, g.sum(axis=red)))

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stable."""
    logits = as_tensor(logits)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ValueError(f"label shape {y.shape} != logit shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    z = logits.data
    # max(z,0) - z*y + log(1+exp(-|z|))
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward(g):
        return ((logits, g * (sig - y) / n),)

    return _make(np.asarray(loss.mean()), (logits,), backward)


def kl_softmax(p_logits, q_logits) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q)) over the last axis.

    Gradients flow to whichever argument requires them; detaching the
    reference distribution is the caller's job.
    """
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError("kl_softmax needs equal shapes")
    lp = log_softmax_lastdim(p_logits)
    lq = log_softmax_lastdim(q_logits)
    p = exp(lp)
    per_row = (p * (lp - lq)).sum(axis=-1)
    return per_row.mean()


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis (batched if inputs are 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero vector")
    dot = (a * b).sum(axis=-1)
    norm_a = power((a * a).sum(axis=-1), 0.5)
    norm_b = power((b * b).sum(axis=-1), 0.5)
    return dot / (norm_a * norm_b)


# verification ----------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Tensor(x0)).data)
            flat[i] = old - h
            fm = float(f(Tensor(x0)).data)
            flat[i] = old
            num_flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# optimization ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a dict of numpy arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        for k, p in self.params.items():
            g = grads.get(k)
            if g is not None:
                p -= self.lr * g


# randomness --------------------------------------------------------------------

def rng_stream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent Philox stream keyed by ``seed`` and a path of labels.

    String labels are folded to integers so that e.g. ``("client", 2, "round", 7)``
    always names the same stream regardless of call order.
    """
    key = tuple(_label(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _label(p: int | str) -> int:
    if isinstance(p, (int, np.integer)):
        return int(p)
    h = 0
    for ch in str(p).encode():
        h = (h * 131 + ch) % (2 ** 32)
    return h


def params_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
