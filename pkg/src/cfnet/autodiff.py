"""A small reverse-mode autodiff tape over numpy arrays.

Nodes are recorded in execution order, so the tape is already topologically
sorted and the backward sweep is a single reverse pass. Complex quantities
never appear on the tape: they travel as trailing (real, imag) axes and the
complex kernels (see :mod:`cfnet.rate_graph`) register hand-written adjoints.
"""
from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TapeStateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "parents", "vjp", "name")

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or 'node'}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


_backward_lock = threading.Lock()
_backward_calls = 0


def backward_calls() -> int:
    """Process-wide number of backward passes run so far."""
    return _backward_calls


class Tape:
    """Records one forward pass; `backward` may run once."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.consumed = False
        self.op_count = 0

    def leaf(self, value, name=None) -> Var:
        v = Var(value, self, name=name)
        self.nodes.append(v)
        return v

    def record(self, value, parents, vjp, name=None) -> Var:
        if self.consumed:
            raise TapeStateError("tape already consumed by backward")
        v = Var(value, self, tuple(parents), vjp, name)
        self.nodes.append(v)
        self.op_count += 1
        return v

    def backward(self, outputs, seeds=None) -> None:
        """Accumulate adjoints into every node's ``grad``.

        ``outputs`` is a Var or a list of Vars; ``seeds`` the matching upstream
        gradients (default: ones, i.e. d out / d leaves for a scalar).
        """
        if self.consumed:
            raise TapeStateError("backward already ran on this tape")
        outs = [outputs] if isinstance(outputs, Var) else list(outputs)
        if seeds is None:
            seeds = [np.ones_like(o.value) for o in outs]
        elif isinstance(outputs, Var):
            seeds = [seeds]
        if not outs or any(o.tape is not self for o in outs):
            raise TapeStateError("backward called before the forward pass recorded its output")
        global _backward_calls
        with _backward_lock:
            _backward_calls += 1
        for node in self.nodes:
            node.grad = None
        for o, s in zip(outs, seeds):
            s = np.broadcast_to(np.asarray(s, dtype=float), o.shape)
            o.grad = s.copy() if o.grad is None else o.grad + s
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            pgrads = node.vjp(node.grad)
            for p, g in zip(node.parents, pgrads):
                if g is None or not isinstance(p, Var):
                    continue
                p.grad = g if p.grad is None else p.grad + g
        self.consumed = True
        self.release()

    def release(self) -> None:
        """Drop graph edges so the tape's arrays are freed without waiting for the cycle collector.

        Values and leaf gradients stay readable; further recording or backward is refused.
        """
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes = []
        self.consumed = True


# --- helpers ----------------------------------------------------------------

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeStateError("operation needs at least one tape variable")


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise and structural ops ------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(av + bv, (a, b),
                                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(av - bv, (a, b),
                                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(av * bv, (a, b),
                                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(
        av / bv, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / bv**2, bv.shape)))


def square(x):
    xv = x.value
    return x.tape.record(xv**2, (x,), lambda g: (2.0 * xv * g,))


def exp(x):
    out = np.exp(x.value)
    return x.tape.record(out, (x,), lambda g: (g * out,))


def log_(x):
    xv = x.value
    return x.tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def elementwise(x, fn, dfn, name=None):
    """Apply a scalar kernel with a known derivative."""
    xv = x.value
    return x.tape.record(fn(xv), (x,), lambda g: (g * dfn(xv),), name=name)


def sum_(x, axis=None, keepdims=False):
    xv = x.value

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape.record(np.sum(xv, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None):
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, idx):
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(xv[idx], (x,), vjp)


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _tape_of(*xs).record(np.concatenate(vals, axis=axis), tuple(xs), vjp)


def clip_min(x, floor):
    xv = x.value
    return x.tape.record(np.maximum(xv, floor), (x,), lambda g: (g * (xv > floor),))


def straight_through(x, fn):
    """Forward ``fn(x)``, backward as identity."""
    return x.tape.record(fn(x.value), (x,), lambda g: (g,))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# --- layer primitives --------------------------------------------------------

def affine(x, W, b):
    xv, Wv = _val(x), _val(W)
    out = xv @ Wv + _val(b)
    return _tape_of(x, W, b).record(out, (x, W, b), lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0)))


def relu(x):
    xv = x.value
    return x.tape.record(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape.record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x):
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return x.tape.record(out, (x,), vjp)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool = True):
    """Batch normalization over axis 0.

    Train mode normalizes with the (biased) batch statistics and folds them
    into the running averages; eval mode, and train batches of one, use the
    running statistics.
    """
    xv = _val(x)
    gv = _val(gamma)
    n = xv.shape[0]
    if train and n == 1:
        log.warning("batchnorm: batch of one in train mode, using running statistics")
        train = False
    if train:
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mu) * inv_std
    out = gv * xhat + _val(beta)

    def vjp(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = np.sum(g, axis=0)
        dxhat = g * gv
        if train:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _tape_of(x, gamma, beta).record(out, (x, gamma, beta), vjp)


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState) -> bool:
    """In-place bias-corrected Adam update. Returns False (and skips) on non-finite grads."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("adam: non-finite gradient for %s, update skipped", k)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# --- finite differences -------------------------------------------------------

def numerical_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn(x)
        flat[k] = orig - h
        fm = fn(x)
        flat[k] = orig
        out.reshape(-1)[k] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"CFTH"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(raw):
                raise ValueError(f"truncated tensor {name!r} at byte {pos}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint at byte {pos}") from exc
    return out
