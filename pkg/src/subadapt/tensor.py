"""Dense float64 tensors with taped reverse-mode differentiation.

Operations executed while a Tape is active are appended to it in execution
order, which is already a topological order of the computation graph.
backward() walks the recorded operations once in reverse and accumulates
gradients for every tensor marked requires_grad. Everything is float64;
no other dtype is ever created.

The op set is intentionally closed: exactly what the three networks and
their training losses need (1-D convolution, dense layers, the activations,
elementwise arithmetic, reductions, a clamped log, and the bookkeeping ops
reshape/concat/pick/detach).
"""
from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(ValueError):
    """Differentiation request violates the tape contract (e.g. non-scalar loss)."""


_STACK = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STACK, "stack"):
        _STACK.stack = []
    return _STACK.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy; gradients never flow through the result."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar so loss code reads like the algebra it implements
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


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class TapeOp:
    """One recorded operation: inputs, output, a pure recompute fn, a gradient fn."""

    __slots__ = ("name", "inputs", "output", "forward_fn", "grad_fn", "needs")

    def __init__(self, name, inputs, output, forward_fn, grad_fn, needs):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.grad_fn = grad_fn
        self.needs = needs


class Tape:
    """Ordered record of operations; one tape is active per thread at a time."""

    def __init__(self):
        self.ops: list[TapeOp] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    @staticmethod
    def current() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None

    def replay(self, verify: bool = True) -> bool:
        """Recompute every op from current leaf data, in recorded order.

        With verify=True, demands bit-for-bit equality with the recorded
        outputs (the inputs must not have been mutated since recording).
        """
        values: dict[int, np.ndarray] = {}
        for op in self.ops:
            args = [values.get(id(t), t.data) for t in op.inputs]
            out = op.forward_fn(*args)
            if verify and not np.array_equal(out, op.output.data):
                return False
            values[id(op.output)] = out
        return True


class paused:
    """Context manager suspending recording (used for constant side computations)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def _record(name, output: Tensor, inputs: tuple, forward_fn, grad_fn) -> None:
    tape = Tape.current()
    if tape is None:
        return
    needs = tuple(t.requires_grad or id(t) in tape._tracked for t in inputs)
    if any(needs):
        tape._tracked.add(id(output))
    tape.ops.append(TapeOp(name, inputs, output, forward_fn, grad_fn, needs))


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(tensor) into .grad for every requires_grad tensor on the tape.

    Tensors recorded on the tape but unreachable from the loss get zero
    gradients. Returns {tensor: gradient array} for the requires_grad set.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        out_grad = flowing.get(id(op.output))
        if out_grad is None or not any(op.needs):
            continue
        contribs = op.grad_fn(out_grad, op.needs)
        for tens, contrib, need in zip(op.inputs, contribs, op.needs):
            if not need or contrib is None:
                continue
            prior = flowing.get(id(tens))
            flowing[id(tens)] = contrib if prior is None else prior + contrib
    result: dict[Tensor, np.ndarray] = {}
    for op in tape.ops:
        for tens in (*op.inputs, op.output):
            if tens.requires_grad and tens not in result:
                grad = flowing.get(id(tens))
                if grad is None:
                    grad = np.zeros_like(tens.data)
                else:
                    grad = np.broadcast_to(grad, tens.data.shape).astype(np.float64, copy=True) \
                        if grad.shape != tens.data.shape else grad
                tens.grad = grad if tens.grad is None else tens.grad + grad
                result[tens] = grad
    return result


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    sa, sb = a.data.shape, b.data.shape

    def grad(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    _record("add", out, (a, b), lambda x, y: x + y, grad)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    sa, sb = a.data.shape, b.data.shape

    def grad(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    _record("sub", out, (a, b), lambda x, y: x - y, grad)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    da, db = a.data, b.data

    def grad(g, needs):
        return (_unbroadcast(g * db, da.shape) if needs[0] else None,
                _unbroadcast(g * da, db.shape) if needs[1] else None)

    _record("mul", out, (a, b), lambda x, y: x * y, grad)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    da = a.data

    def grad(g, needs):
        return (2.0 * da * g,)

    _record("square", out, (a,), lambda x: x * x, grad)
    return out


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); keeps cross-entropy finite at vanishing probabilities."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.log(clipped))
    da = a.data

    def grad(g, needs):
        return (np.where(da >= floor, g / np.maximum(da, floor), 0.0),)

    _record("log_clamped", out, (a,), lambda x: np.log(np.maximum(x, floor)), grad)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    shape = a.data.shape

    def grad(g, needs):
        return (np.full(shape, float(g.reshape(()))),)

    _record("sum_all", out, (a,), lambda x: np.asarray(x.sum()), grad)
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = Tensor(a.data.mean())
    shape, size = a.data.shape, a.data.size

    def grad(g, needs):
        return (np.full(shape, float(g.reshape(())) / size),)

    _record("mean_all", out, (a,), lambda x: np.asarray(x.mean()), grad)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    da = a.data

    def grad(g, needs):
        return (g * (da > 0.0),)

    _record("relu", out, (a,), lambda x: np.maximum(x, 0.0), grad)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.where(a.data > 0.0, a.data, slope * a.data))
    da = a.data

    def grad(g, needs):
        return (g * np.where(da > 0.0, 1.0, slope),)

    _record("leaky_relu", out, (a,), lambda x: np.where(x > 0.0, x, slope * x), grad)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def grad(g, needs):
        return (g * (1.0 - y * y),)

    _record("tanh", out, (a,), np.tanh, grad)
    return out


def _softmax_raw(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis; rows sum to 1 within 1e-12."""
    a = as_tensor(a)
    y = _softmax_raw(a.data)
    out = Tensor(y)

    def grad(g, needs):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    _record("softmax", out, (a,), _softmax_raw, grad)
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def grad(g, needs):
        return (g.reshape(orig),)

    _record("reshape", out, (a,), lambda x: x.reshape(shape), grad)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad(g, needs):
        pieces = np.split(g, cuts, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    _record("concat", out, tensors, lambda *xs: np.concatenate(xs, axis=axis), grad)
    return out


def repeat_to_length(a, length: int) -> Tensor:
    """Tile the last axis cyclically out to `length` (noise channel broadcast)."""
    a = as_tensor(a)
    n = a.data.shape[-1]
    if n <= 0:
        raise ShapeError("repeat_to_length needs a non-empty last axis")
    idx = np.arange(length) % n
    out = Tensor(a.data[..., idx])

    def grad(g, needs):
        d = np.zeros_like(a.data)
        np.add.at(d, (..., idx), g)
        return (d,)

    _record("repeat_to_length", out, (a,), lambda x: x[..., idx], grad)
    return out


def pick(a, indices) -> Tensor:
    """Row-wise gather: out[i] = a[i, indices[i]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-D tensor, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (a.data.shape[0],):
        raise ShapeError(f"pick needs one index per row: rows={a.data.shape[0]}, indices shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ShapeError("pick index out of range")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])
    shape = a.data.shape

    def grad(g, needs):
        d = np.zeros(shape)
        d[rows, idx] = g
        return (d,)

    _record("pick", out, (a,), lambda x: x[rows, idx], grad)
    return out


# ---------------------------------------------------------------------------
# network layers


def _pad_amounts(length: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding != "same":
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    out_len = -(-length // stride)
    total = max(0, (out_len - 1) * stride + kernel - length)
    left = total // 2
    return left, total - left


def _conv1d_raw(x, k, b, stride, pad_left, pad_right):
    xp = np.pad(x, ((0, 0), (0, 0), (pad_left, pad_right)))
    kernel = k.shape[2]
    out_len = (xp.shape[2] - kernel) // stride + 1
    idx = stride * np.arange(out_len)[:, None] + np.arange(kernel)[None, :]
    cols = xp[:, :, idx]
    out = np.einsum("bcok,fck->bfo", cols, k, optimize=True)
    if b is not None:
        out = out + b[None, :, None]
    return out


def conv1d(x, kernels, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """1-D cross-correlation over [batch, channels_in, length] input.

    Accepts an unbatched [channels_in, length] input and returns the
    matching unbatched output. Output length follows the usual
    floor((padded - k) / stride) + 1 rule.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    bias = as_tensor(bias) if bias is not None else None
    unbatched = x.data.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d input must be [channels, length] or [batch, channels, length], got {x.data.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv1d kernels must be [out, in, k], got {kernels.data.shape}")
    if kernels.data.shape[1] != xd.shape[1]:
        raise ShapeError(f"kernel input channels {kernels.data.shape[1]} do not match input channels {xd.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n_out, n_in, kernel = kernels.data.shape
    if bias is not None and bias.data.shape != (n_out,):
        raise ShapeError(f"bias must have shape ({n_out},), got {bias.data.shape}")
    length = xd.shape[2]
    pl, pr = _pad_amounts(length, kernel, stride, padding)
    if kernel > length + pl + pr:
        raise ShapeError(f"kernel size {kernel} exceeds padded length {length + pl + pr}")

    out_data = _conv1d_raw(xd, kernels.data, None if bias is None else bias.data, stride, pl, pr)
    out = Tensor(out_data[0] if unbatched else out_data)

    padded_len = length + pl + pr
    out_len = out_data.shape[2]
    idx = stride * np.arange(out_len)[:, None] + np.arange(kernel)[None, :]
    xd_saved = xd

    def grad(g, needs):
        gb = g[None] if unbatched else g
        d_x = d_k = d_b = None
        if needs[1]:
            xp = np.pad(xd_saved, ((0, 0), (0, 0), (pl, pr)))
            d_k = np.einsum("bfo,bcok->fck", gb, xp[:, :, idx], optimize=True)
        if needs[0]:
            if stride == 1:
                gp = np.pad(gb, ((0, 0), (0, 0), (kernel - 1, kernel - 1)))
                idx2 = np.arange(padded_len)[:, None] + (kernel - 1) - np.arange(kernel)[None, :]
                dxp = np.einsum("bfjt,fct->bcj", gp[:, :, idx2], kernels.data, optimize=True)
            else:
                dxp = np.zeros((gb.shape[0], n_in, padded_len))
                contrib = np.einsum("bfo,fck->bcok", gb, kernels.data, optimize=True)
                np.add.at(dxp, (slice(None), slice(None), idx), contrib)
            d_x = dxp[:, :, pl:pl + length]
            if unbatched:
                d_x = d_x[0]
        if bias is not None and needs[2]:
            d_b = gb.sum(axis=(0, 2))
        return (d_x, d_k) if bias is None else (d_x, d_k, d_b)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    if bias is None:
        def fwd(xv, kv):
            r = _conv1d_raw(xv[None] if unbatched else xv, kv, None, stride, pl, pr)
            return r[0] if unbatched else r
    else:
        def fwd(xv, kv, bv):
            r = _conv1d_raw(xv[None] if unbatched else xv, kv, bv, stride, pl, pr)
            return r[0] if unbatched else r

    _record("conv1d", out, inputs, fwd, grad)
    return out


def dense(x, weights, bias=None) -> Tensor:
    """Affine map: x [n] or [batch, n] against weights [m, n] plus bias [m]."""
    x, weights = as_tensor(x), as_tensor(weights)
    bias = as_tensor(bias) if bias is not None else None
    if weights.data.ndim != 2:
        raise ShapeError(f"dense weights must be 2-D [units, features], got {weights.data.shape}")
    m, n = weights.data.shape
    unbatched = x.data.ndim == 1
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 2 or xd.shape[1] != n:
        raise ShapeError(f"dense input features {x.data.shape} do not match weights {weights.data.shape}")
    if bias is not None and bias.data.shape != (m,):
        raise ShapeError(f"dense bias must have shape ({m},), got {bias.data.shape}")

    out_data = xd @ weights.data.T
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data[0] if unbatched else out_data)
    xd_saved, wd = xd, weights.data

    def grad(g, needs):
        gb = g[None] if unbatched else g
        d_x = (gb @ wd) if needs[0] else None
        if d_x is not None and unbatched:
            d_x = d_x[0]
        d_w = (gb.T @ xd_saved) if needs[1] else None
        if bias is None:
            return d_x, d_w
        d_b = gb.sum(axis=0) if needs[2] else None
        return d_x, d_w, d_b

    if bias is None:
        inputs = (x, weights)

        def fwd(xv, wv):
            r = (xv[None] if unbatched else xv) @ wv.T
            return r[0] if unbatched else r
    else:
        inputs = (x, weights, bias)

        def fwd(xv, wv, bv):
            r = (xv[None] if unbatched else xv) @ wv.T + bv
            return r[0] if unbatched else r

    _record("dense", out, inputs, fwd, grad)
    return out
