"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Ops compute eagerly with numpy. When a Tape is active (used as a context
manager) and an input requires gradients, the op records a vector-Jacobian
closure; `backward` replays the records in reverse and accumulates gradients
by summation over all paths. Without an active tape, ops are plain numpy
evaluation, which is what inference paths use.

Tensors are immutable values once created; a tape is a single-threaded
context and can be consumed by exactly one backward pass.
"""

import threading

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    """An objective, intensity or sampler became non-finite or invalid."""


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of primitive ops; consumed by a single backward pass."""

    def __init__(self):
        self._nodes = []  # (output Tensor, [(input Tensor, vjp fn), ...])
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def __len__(self):
        return len(self._nodes)


def _record(out: Tensor, pairs) -> Tensor:
    """Attach vjp closures for (input, vjp) pairs if a tape is recording."""
    tape = _active_tape()
    grads_needed = [(x, vjp) for x, vjp in pairs if x.requires_grad]
    if tape is not None and grads_needed:
        out.requires_grad = True
        out._leaf = False
        tape._nodes.append((out, grads_needed))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}") from exc


# -- elementwise binary ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))])


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, [(a, lambda g: g * c)])


# -- matmul ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")

    if b.data.ndim == 2 and a.data.ndim > 2:
        # N-D activations times a weight matrix: flatten the batch so the
        # whole product is a single GEMM instead of a stacked loop
        lead = a.data.shape[:-1]
        k, n = b.data.shape
        a2 = a.data.reshape(-1, k)
        out = Tensor((a2 @ b.data).reshape(lead + (n,)))

        def grad_a(g):
            return (g.reshape(-1, n) @ b.data.T).reshape(a.data.shape)

        def grad_b(g):
            return a2.T @ g.reshape(-1, n)

        return _record(out, [(a, grad_a), (b, grad_b)])

    out = Tensor(a.data @ b.data)

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _record(out, [(a, grad_a), (b, grad_b)])


# -- structural --------------------------------------------------------------

def concat(tensors, axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(idx)]
        return vjp

    return _record(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return full

    return _record(out, [(x, vjp)])


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, [(x, lambda g: g.reshape(x.data.shape))])


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    return _record(out, [(x, lambda g: np.swapaxes(g, a, b))])


def embedding_gather(table: Tensor, indices) -> Tensor:
    """Rows of `table` selected by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx])

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.data.shape[-1]))
        return full

    return _record(out, [(table, vjp)])


# -- elementwise unary -------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    val = np.exp(x.data)
    out = Tensor(val)
    return _record(out, [(x, lambda g: g * val)])


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, [(x, lambda g: g / x.data)])


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.data)
    out = Tensor(val)
    return _record(out, [(x, lambda g: g * (1.0 - val * val))])


def _sigmoid_val(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    val = _sigmoid_val(x.data)
    out = Tensor(val)
    return _record(out, [(x, lambda g: g * val * (1.0 - val))])


def softplus_scaled(x: Tensor, s: float = 1.0) -> Tensor:
    """s * log(1 + exp(x / s)), overflow-safe on both tails."""
    if not s > 0:
        raise ValueError(f"softplus scale must be > 0, got {s}")
    z = x.data / s
    out = Tensor(s * np.logaddexp(0.0, z))
    return _record(out, [(x, lambda g: g * _sigmoid_val(z))])


# -- reductions and normalization --------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, x.data.shape).copy()

    return _record(out, [(x, vjp)])


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, x.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2 / n, x.data.shape).copy()

    return _record(out, [(x, vjp)])


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where `mask` is true with a constant; they get zero gradient."""
    m = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(m, value, x.data))
    return _record(out, [(x, lambda g: np.where(m, 0.0, g))])


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(val)

    def vjp(g):
        dot = (g * val).sum(axis=-1, keepdims=True)
        return val * (g - dot)

    return _record(out, [(x, vjp)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def grad_x(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        return inv * (gg - m1 - xhat * m2)

    return _record(out, [
        (x, grad_x),
        (gain, lambda g: _unbroadcast(g * xhat, gain.data.shape)),
        (bias, lambda g: _unbroadcast(g, bias.data.shape)),
    ])


# -- compositions ------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def logsumexp_lastdim(x: Tensor, keepdims: bool = False) -> Tensor:
    # the max shift is a constant w.r.t. differentiation; gradients are exact
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = reduce_sum(exp(sub(x, Tensor(m))), axis=-1, keepdims=True)
    res = add(log(s), Tensor(m))
    if not keepdims:
        res = reshape(res, x.data.shape[:-1])
    return res


def log_softmax_lastdim(x: Tensor) -> Tensor:
    return sub(x, logsumexp_lastdim(x, keepdims=True))


# -- backward and checking ---------------------------------------------------

def backward(tape: Tape, out: Tensor) -> dict:
    """Accumulate gradients of a scalar `out` through the tape.

    Sets `.grad` on every requires_grad leaf tensor reached, returns a dict
    mapping id(tensor) -> gradient array. A tape can be consumed once.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if out.data.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {out.data.shape}")
    tape._consumed = True

    grads = {id(out): np.ones_like(out.data)}
    for node_out, pairs in reversed(tape._nodes):
        g = grads.get(id(node_out))
        if g is None:
            continue
        for inp, vjp in pairs:
            contrib = vjp(g)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
            if inp._leaf and inp.requires_grad:
                inp.grad = grads[key]
    return grads


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of `fn` and central differences.

    `fn` takes the input tensors and returns a scalar Tensor; it must be
    deterministic (freeze any Monte Carlo sample points before checking).
    """
    for x in inputs:
        x.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    backward(tape, out)

    max_err = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.ravel()
        gflat = np.asarray(g).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            f_lo = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1.0)
            max_err = max(max_err, err)
    return max_err
