"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Var` wraps an array and, when any input requires a gradient,
records the op that produced it. Ops live in a registry (``OPS``) as
forward/backward pairs so that a recorded graph can be re-evaluated node by
node; the gradient checker uses that to localise a faulty backward rule.

Only what the prompt-learning graph needs is implemented: broadcasting
arithmetic, matmul, gathers, reductions, a few pointwise maps, and fused
softmax / L2-normalize / bilinear-upsample / focal / dice nodes.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vip2clip import numerics
from vip2clip.errors import GraphNotRecorded, ShapeMismatch


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def register(name):
    def wrap(cls):
        OPS[name] = Op(name, cls.forward, cls.backward)
        return cls
    return wrap


class Var:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "attrs", "saved", "name")
    # make ``ndarray <op> Var`` defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self.attrs = {}
        self.saved = None
        self.name = name

    def __repr__(self):
        tag = self.op or ("param" if self.requires_grad else "const")
        return f"Var({tag}, shape={self.data.shape})"

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

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

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, float(1.0 / other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def backward(self, grad=None):
        backward(self, grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def apply(name: str, *inputs, **attrs) -> Var:
    op = OPS[name]
    arrays = [np.asarray(x) for x in inputs if not isinstance(x, (int, float))]
    if len(arrays) < len(inputs):
        # python scalars follow the array operands' precision
        ref = np.result_type(*arrays) if arrays else np.float64
        inputs = [np.asarray(x, dtype=ref) if isinstance(x, (int, float)) else x for x in inputs]
    parents = tuple(as_var(x) for x in inputs)
    data, saved = op.forward(*(p.data for p in parents), **attrs)
    out = Var(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = name
        out.parents = parents
        out.attrs = attrs
        out.saved = saved
    return out


def topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not root.requires_grad:
        raise GraphNotRecorded("backward() on a value with no recorded graph")
    if grad is None:
        if root.data.size != 1:
            raise ShapeMismatch("backward() without grad needs a scalar output")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        op = OPS[node.op]
        pgrads = op.backward(g, node.saved, *(p.data for p in node.parents), **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


@register("add")
class _Add:
    forward = staticmethod(lambda a, b: (a + b, None))

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register("sub")
class _Sub:
    forward = staticmethod(lambda a, b: (a - b, None))

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register("mul")
class _Mul:
    forward = staticmethod(lambda a, b: (a * b, None))

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def backward(g, saved, a, b):
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g @ b.T, a.T @ g


@register("transpose")
class _Transpose:
    forward = staticmethod(lambda a: (a.T, None))
    backward = staticmethod(lambda g, saved, a: (g.T,))


@register("reshape")
class _Reshape:
    forward = staticmethod(lambda a, shape: (a.reshape(shape), None))
    backward = staticmethod(lambda g, saved, a, shape: (g.reshape(a.shape),))


@register("index")
class _Index:
    forward = staticmethod(lambda a, key: (a[key], None))

    @staticmethod
    def backward(g, saved, a, key):
        out = np.zeros_like(a)
        np.add.at(out, key, g)
        return (out,)


@register("concat")
class _Concat:
    forward = staticmethod(lambda *xs, axis=0: (np.concatenate(xs, axis=axis), None))

    @staticmethod
    def backward(g, saved, *xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@register("stack")
class _Stack:
    forward = staticmethod(lambda *xs, axis=0: (np.stack(xs, axis=axis), None))

    @staticmethod
    def backward(g, saved, *xs, axis=0):
        return tuple(np.moveaxis(g, axis, 0))


@register("sum")
class _Sum:
    forward = staticmethod(lambda a, axis=None: (np.sum(a, axis=axis), None))

    @staticmethod
    def backward(g, saved, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@register("mean")
class _Mean:
    forward = staticmethod(lambda a, axis=None: (np.mean(a, axis=axis), None))

    @staticmethod
    def backward(g, saved, a, axis=None):
        n = a.size if axis is None else a.shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)


# ------------------------------------------------------------------ pointwise


@register("relu")
class _Relu:
    forward = staticmethod(lambda a: (np.maximum(a, 0), None))
    backward = staticmethod(lambda g, saved, a: (g * (a > 0),))


@register("tanh")
class _Tanh:
    @staticmethod
    def forward(a):
        y = np.tanh(a)
        return y, y

    backward = staticmethod(lambda g, y, a: (g * (1 - y * y),))


@register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        y = np.exp(a)
        return y, y

    backward = staticmethod(lambda g, y, a: (g * y,))


@register("log")
class _Log:
    forward = staticmethod(lambda a: (np.log(a), None))
    backward = staticmethod(lambda g, saved, a: (g / a,))


@register("clamp")
class _Clamp:
    forward = staticmethod(lambda a, lo, hi: (np.clip(a, lo, hi), None))
    backward = staticmethod(lambda g, saved, a, lo, hi: (g * ((a > lo) & (a < hi)),))


@register("power")
class _Power:
    forward = staticmethod(lambda a, p: (a ** p, None))
    backward = staticmethod(lambda g, saved, a, p: (g * p * a ** (p - 1),))


# ---------------------------------------------------------------- fused nodes


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(a, temperature=1.0):
        y = numerics.softmax(a, temperature)
        return y, y

    @staticmethod
    def backward(g, y, a, temperature=1.0):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)) / temperature,)


@register("l2_normalize")
class _L2Normalize:
    @staticmethod
    def forward(a, eps=1e-12):
        norm = np.maximum(np.sqrt(np.sum(a * a, axis=-1, keepdims=True)), eps)
        y = a / norm
        return y, (y, norm)

    @staticmethod
    def backward(g, saved, a, eps=1e-12):
        y, norm = saved
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)


@register("upsample")
class _Upsample:
    @staticmethod
    def forward(a, out_h, out_w):
        return numerics.upsample_bilinear(a, out_h, out_w), None

    @staticmethod
    def backward(g, saved, a, out_h, out_w):
        ah = numerics.interp_matrix(a.shape[0], out_h, g.dtype)
        aw = numerics.interp_matrix(a.shape[1], out_w, g.dtype)
        return (ah.T @ g @ aw,)


@register("focal")
class _Focal:
    """Mean focal loss; ``probs[..., 1]`` is the abnormal channel, ``gt`` is binary."""

    @staticmethod
    def forward(probs, gt, gamma, alpha, clip):
        pt = np.where(gt > 0.5, probs[..., 1], probs[..., 0])
        pc = np.clip(pt, clip, 1 - clip)
        loss = -alpha * (1 - pc) ** gamma * np.log(pc)
        return np.asarray(loss.mean(), dtype=probs.dtype), (pt, pc)

    @staticmethod
    def backward(g, saved, probs, gt, gamma, alpha, clip):
        pt, pc = saved
        one_minus = 1 - pc
        d = alpha * gamma * one_minus ** (gamma - 1) * np.log(pc) - alpha * one_minus ** gamma / pc
        d = d * ((pt > clip) & (pt < 1 - clip)) * (g / pt.size)
        out = np.zeros_like(probs)
        positive = gt > 0.5
        out[..., 1] = np.where(positive, d, 0)
        out[..., 0] = np.where(positive, 0, d)
        return out, None


@register("dice")
class _Dice:
    @staticmethod
    def forward(pred, target, eps):
        num = 2 * np.sum(pred * target) + eps
        den = np.sum(pred) + np.sum(target) + eps
        return np.asarray(1 - num / den, dtype=pred.dtype), (num, den)

    @staticmethod
    def backward(g, saved, pred, target, eps):
        num, den = saved
        return -g * (2 * target * den - num) / (den * den), None


# ------------------------------------------------------------- functional API


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def matmul(a, b):
    return apply("matmul", a, b)


def transpose(a):
    return apply("transpose", a)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def index(a, key):
    return apply("index", a, key=key)


def concat(xs, axis=0):
    return apply("concat", *xs, axis=axis)


def stack(xs, axis=0):
    return apply("stack", *xs, axis=axis)


def reduce_sum(a, axis=None):
    return apply("sum", a, axis=axis)


def reduce_mean(a, axis=None):
    return apply("mean", a, axis=axis)


def relu(a):
    return apply("relu", a)


def tanh(a):
    return apply("tanh", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def clamp(a, lo, hi):
    return apply("clamp", a, lo=lo, hi=hi)


def power(a, p):
    return apply("power", a, p=p)


def softmax(a, temperature=1.0):
    return apply("softmax", a, temperature=temperature)


def l2_normalize(a, eps=1e-12):
    return apply("l2_normalize", a, eps=eps)


def upsample(a, out_h, out_w):
    return apply("upsample", a, out_h=int(out_h), out_w=int(out_w))


def focal(probs, gt, gamma=2.0, alpha=0.25, clip=1e-7):
    return apply("focal", probs, gt, gamma=gamma, alpha=alpha, clip=clip)


def dice(pred, target, eps=1.0):
    return apply("dice", pred, target, eps=eps)
