"""Dense numeric substrate: a small tape-based reverse-mode engine over numpy.

Only the operations the models need are provided. Most are generic
(broadcasting arithmetic, matmul, reductions); cosine similarity, kernel
pooling and masked softmax are fused ops with hand-derived backward passes
because they dominate the cost of a forward pass.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
COS_EPS = 1e-8
KERNEL_CLAMP = 1e-10

_grad_enabled = True


class NumericError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


class EmptySupportError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording (used by evaluation and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __array_priority__ = 100

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        if _grad_enabled and self.requires_grad:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.value + other.value, (self, other),
                      lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.value, other.value
        return Tensor(x * y, (self, other),
                      lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=DTYPE))

    def reciprocal(self):
        out = 1.0 / self.value
        return Tensor(out, (self,), lambda g: (-g * out * out,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(self.value[idx], (self,), back)

    # shape ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,), back)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a, b):
        return Tensor(self.value.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def broadcast_to(self, shape):
        old = self.shape
        return Tensor(np.broadcast_to(self.value, shape), (self,),
                      lambda g: (_unbroadcast(g, old),))

    def expand_dims(self, axis):
        return self.reshape(np.expand_dims(self.value, axis).shape)


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    def __init__(self, value, name):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.value, b.value

    def back(g):
        if y.ndim == 1:
            ga = np.multiply.outer(g, y)
            gb = np.tensordot(g, x, axes=(list(range(g.ndim)), list(range(g.ndim))))
            return _unbroadcast(ga, x.shape), gb
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor(x @ y, (a, b), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def relu(x):
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.value)
    return Tensor(out, (x,), lambda g: (g * out,))


def embedding(table, ids):
    """Row lookup ``table[ids]`` with a scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor(table.value[ids], (table,), back)


def log_clamped(x, floor):
    """log(max(x, floor)); gradient is zero where the floor is active."""
    active = x.value > floor
    safe = np.where(active, x.value, floor)
    return Tensor(np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0.0),))


# fused ops -------------------------------------------------------------


def masked_softmax(x, mask, axis=-1):
    """Softmax along ``axis`` restricted to ``mask``; masked entries are exactly 0."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise EmptySupportError("empty support")
    shifted = np.where(mask, x.value, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (x,), back)


def cosine(a, b):
    """Pairwise cosine over the last axis: [..., n, d] x [..., m, d] -> [..., n, m].

    The denominator is guarded by ``COS_EPS`` so zero rows give 0; results are
    clipped to [-1, 1] after rounding (the clip passes gradients straight through).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    A, B = a.value, b.value
    na = np.sqrt((A * A).sum(-1))
    nb = np.sqrt((B * B).sum(-1))
    num = A @ np.swapaxes(B, -1, -2)
    prod = na[..., :, None] * nb[..., None, :]
    active = prod > COS_EPS
    den = np.where(active, prod, COS_EPS)
    C = num / den
    out = np.clip(C, -1.0, 1.0)

    def back(g):
        gd = g / den
        coef = np.where(active, gd * C, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ra = np.where(na > 0, 1.0 / np.where(na > 0, na, 1.0), 0.0)
            rb = np.where(nb > 0, 1.0 / np.where(nb > 0, nb, 1.0), 0.0)
        # d(prod)/dA_i = nb_j * A_i / na_i
        ca = (coef * nb[..., None, :]).sum(-1) * ra
        cb = (coef * na[..., :, None]).sum(-2) * rb
        ga = gd @ B - ca[..., None] * A
        gb = np.swapaxes(gd, -1, -2) @ A - cb[..., None] * B
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor(out, (a, b), back)


def kernel_pool(m, col_mask, row_mask, mu, sigma):
    """Gaussian kernel pooling of each row of a similarity matrix.

    ``m``: [..., a, b]; masks broadcast to [..., b] and [..., a].
    Returns [..., a, K] with feature k = log(sum_j exp(-(m_ij - mu_k)^2 / (2 sigma_k^2)) + 1e-10)
    over unmasked columns. Masked rows are exactly zero. The additive floor
    bounds features below by ln 1e-10 without the gradient jump a hard clamp
    would introduce.
    """
    m = as_tensor(m)
    mu = np.asarray(mu, dtype=DTYPE)
    sigma = np.asarray(sigma, dtype=DTYPE)
    cm = np.asarray(col_mask, dtype=bool)[..., None, :, None]
    rm = np.asarray(row_mask, dtype=bool)[..., None]
    neg_inv2s2 = -1.0 / (2.0 * sigma * sigma)
    diff = m.value[..., None] - mu
    E = np.square(diff)
    E *= neg_inv2s2
    np.exp(E, out=E)
    E *= cm
    S = E.sum(-2)
    out = np.log(S + KERNEL_CLAMP)
    out *= rm

    def back(g):
        w = np.where(rm, g / (S + KERNEL_CLAMP), 0.0) * (2.0 * neg_inv2s2)
        # dE/dm = E * diff * (-1 / sigma^2); contract over kernels with a batched matmul
        E2 = E * diff
        return ((E2 @ w[..., :, None])[..., 0],)

    return Tensor(out, (m,), back)


# layers ---------------------------------------------------------------


class Affine:
    """y = x W^T + b."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.shape[0] != bias.shape[0]:
            raise ValueError("weight rows must match bias length")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, name, n_in, n_out, rng, scale=None):
        scale = 1.0 / math.sqrt(n_in) if scale is None else scale
        w = rng.uniform(-scale, scale, size=(n_out, n_in))
        return cls(Parameter(w, f"{name}.weight"), Parameter(np.zeros(n_out), f"{name}.bias"))

    def __call__(self, x):
        return matmul(x, self.weight.swapaxes(0, 1)) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class TwoLayerPerceptron:
    def __init__(self, first: Affine, second: Affine):
        if first.weight.shape[0] != second.weight.shape[1]:
            raise ValueError("inner dimensions do not chain")
        self.first = first
        self.second = second

    @classmethod
    def init(cls, name, n_in, n_hidden, n_out, rng):
        return cls(Affine.init(f"{name}.0", n_in, n_hidden, rng),
                   Affine.init(f"{name}.1", n_hidden, n_out, rng))

    def __call__(self, x):
        return self.second(relu(self.first(x)))

    def parameters(self):
        return self.first.parameters() + self.second.parameters()


# plain-array conveniences ------------------------------------------------


def softmax(v, mask=None):
    v = np.asarray(v, dtype=DTYPE)
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax input must be finite")
    mask = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    with no_grad():
        return masked_softmax(Tensor(v), mask).value


def cosine_matrix(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_2d(np.asarray(b, dtype=DTYPE))
    with no_grad():
        return cosine(Tensor(a), Tensor(b)).value


# optimisation ----------------------------------------------------------


@dataclass
class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, lr):
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, optimizer, lr):
    optimizer.step(params, lr)
    return params


def lr_schedule(step, total_steps, peak_lr, warmup):
    """Linear warmup over ceil(warmup * total) steps, then linear decay to 0."""
    if total_steps <= 0:
        return 0.0
    warm = max(1, math.ceil(warmup * total_steps))
    if step <= warm:
        return peak_lr * step / warm
    if warm >= total_steps:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warm))


# gradient checking -------------------------------------------------------


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool


def _central_differences(loss_fn, p, indices, eps):
    flat = p.value.reshape(-1)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn().value
        flat[i] = orig - eps
        lo = loss_fn().value
        flat[i] = orig
        out.append(float((hi - lo) / (2 * flat.dtype.type(eps))))
    return np.array(out)


def _rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradcheck(loss_fn, params, eps=1e-5, tol=1e-3, refine_dtype=np.longdouble):
    """Compare analytic gradients of ``loss_fn()`` to central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. Every element is first differenced in double precision.
    Elements whose error exceeds tol/10 are differenced again with all
    values held in ``refine_dtype``: in double, one ulp of the loss divided
    by 2 eps is already ~1e-11, which is 1e-3 relative at the 1e-8 floor.
    Returns one GradcheckResult per parameter.
    """
    global DTYPE
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: p.grad.reshape(-1).copy() for p in params}
    with no_grad():
        base = float(loss_fn().value)
    if base != float(loss.value):
        raise NumericError("non-deterministic forward: two evaluations differ")

    numeric = {}
    with no_grad():
        for p in params:
            numeric[p.name] = _central_differences(loss_fn, p, range(p.value.size), eps)
    suspect = {p.name: np.flatnonzero(_rel_error(analytic[p.name], numeric[p.name]) > tol / 10)
               for p in params}

    if refine_dtype is not None and any(len(v) for v in suspect.values()):
        saved_dtype, saved = DTYPE, [p.value for p in params]
        try:
            DTYPE = refine_dtype
            for p in params:
                p.value = p.value.astype(refine_dtype)
            with no_grad():
                for p in params:
                    idx = suspect[p.name]
                    if len(idx):
                        numeric[p.name][idx] = _central_differences(loss_fn, p, idx, eps)
        finally:
            DTYPE = saved_dtype
            for p, v in zip(params, saved):
                p.value = v

    results = []
    for p in params:
        a, n = analytic[p.name], numeric[p.name]
        err = _rel_error(a, n)
        i = int(np.argmax(err))
        results.append(GradcheckResult(p.name, float(err[i]), np.unravel_index(i, p.shape),
                                       float(a[i]), float(n[i]), bool(err[i] < tol)))
    return results
