"""Dense tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array, float32 for training and float64 for
verification runs. Ops executed while a GradientTape is active are recorded
on that tape; ``backward`` replays the tape in reverse creation order and
returns one gradient per trainable leaf it reached. Tensors whose
``trainable`` flag is false never receive a gradient entry, and subgraphs
that cannot reach a trainable leaf are not recorded at all.

Every op checks its output for NaN/Inf and raises NumericError instead of
letting a poisoned value propagate. Mixed float32/float64 operands are
rejected rather than silently promoted: numpy's scalar promotion rules would
otherwise upcast a whole training graph to float64 (and cost a measured ~4x
in runtime).

All randomness flows from a single 64-bit seed through numpy's Philox
counter-based generator; independent streams are derived by hashing a stream
label into the second key word.
"""

from __future__ import annotations

import hashlib

import numpy as np

F32 = np.float32
F64 = np.float64
_FLOAT_KINDS = ("f",)

# smallest normal magnitude per dtype; softmax flushes exp() tails below this
# to exact zero so attention matmuls never chew on subnormals
_TINY = {np.dtype(np.float32): np.float32(1.1754944e-38),
         np.dtype(np.float64): np.float64(2.2250738585072014e-308)}


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf, or a verification probe went non-finite."""


class TapeError(RuntimeError):
    """Gradient bookkeeping misuse: no tape, wrong tape, or reused tape."""


def _quiet():
    # ops convert non-finite results into NumericError; numpy's own warning
    # would be redundant noise
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if arr.dtype.kind not in _FLOAT_KINDS:
        return
    # a single reduction is ~4x cheaper than isfinite().all(); NaN/Inf
    # poison the sum, and the rare legitimate-overflow false alarm is
    # caught by the exact recheck
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            return
        raise NumericError(f"{opname} produced non-finite values")


class Tensor:
    """A dense array plus the bookkeeping links the tape needs."""

    __slots__ = ("data", "trainable", "name", "_requires", "_parents", "_grad_fn")

    def __init__(self, data, dtype=None, trainable: bool = False, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.dtype(F32), np.dtype(F64)):
                arr = arr.astype(F32)
        self.data = arr
        self.trainable = bool(trainable)
        self.name = name
        self._requires = self.trainable
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        _check_finite(arr, "tensor")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, trainable=False)

    def __repr__(self):
        tag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; scalars are coerced to this tensor's dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, e):
        return pow_const(self, e)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


_TAPES: list["GradientTape"] = []


class GradientTape:
    """Ordered record of one forward execution.

    A tape is entered once, records every differentiable op executed inside
    its ``with`` block, and afterwards serves exactly that graph to
    ``backward``. Reuse across executions is an error.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._used = False
        self._active = False

    def __enter__(self):
        if self._used:
            raise TapeError("a GradientTape cannot be reused")
        self._used = True
        self._active = True
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        self._active = False
        _TAPES.pop()
        return False

    def gradients(self, loss: Tensor, params=None) -> dict[Tensor, np.ndarray]:
        """Gradient per trainable leaf; zeros filled in for listed ``params``
        the loss does not reach."""
        out = backward(loss, self)
        if params is not None:
            for p in params:
                if p not in out:
                    out[p] = np.zeros_like(p.data)
        return out


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.trainable = False
    out.name = None
    out._parents = ()
    out._grad_fn = None
    tape = _active_tape()
    if tape is not None and any(p._requires for p in parents):
        out._requires = True
        out._parents = parents
        out._grad_fn = grad_fn
        tape._nodes.append(out)
    else:
        out._requires = False
    return out


def _as_tensor(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=like.dtype))


def _same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"mixed dtypes {d0} and {t.data.dtype}; cast explicitly")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


def backward(loss: Tensor, tape: GradientTape | None = None) -> dict[Tensor, np.ndarray]:
    """Replay the tape in reverse; returns {trainable leaf: gradient}.

    The walk visits nodes in reverse creation order (a valid topological
    order by construction), which keeps accumulation order deterministic
    run to run.
    """
    if tape is None:
        raise TapeError("backward needs the tape the loss was recorded on")
    if tape._active:
        raise TapeError("backward must run after the tape's with-block exits")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._grad_fn is None and not loss.trainable:
        raise TapeError("loss is not recorded on a tape")
    if loss._grad_fn is not None and id(loss) not in _node_set(tape):
        raise TapeError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.trainable and loss._grad_fn is None:
        leaves[id(loss)] = loss

    for node in reversed(tape._nodes):
        nid = id(node)
        if nid not in grads or node._grad_fn is None:
            continue
        g = grads.pop(nid)
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent._requires:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            # never mutate a stored gradient; aliased views of upstream
            # buffers may be stored here
            grads[pid] = pg if acc is None else acc + pg
            if parent._grad_fn is None and parent.trainable:
                leaves[pid] = parent

    out: dict[Tensor, np.ndarray] = {}
    for pid, leaf in leaves.items():
        g = np.ascontiguousarray(grads[pid])
        _check_finite(g, "backward")
        out[leaf] = g
    return out


def _node_set(tape: GradientTape) -> set[int]:
    return {id(n) for n in tape._nodes}


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    out = a.data + b.data
    needs = (a._requires, b._requires)

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(g, b.data.shape) if needs[1] else None)

    return _record(out, (a, b), grad_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    out = a.data - b.data
    needs = (a._requires, b._requires)

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(-g, b.data.shape) if needs[1] else None)

    return _record(out, (a, b), grad_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    with _quiet():
        out = a.data * b.data
    needs = (a._requires, b._requires)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.data.shape) if needs[1] else None)

    return _record(out, (a, b), grad_fn, "mul")


def div(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _same_dtype(a, b)
    with _quiet():
        out = a.data / b.data
    needs = (a._requires, b._requires)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None
        return (ga, gb)

    return _record(out, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with _quiet():
        out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _record(out, (a,), grad_fn, "exp")


def log(a: Tensor) -> Tensor:
    with _quiet():
        out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _record(out, (a,), grad_fn, "log")


def pow_const(a: Tensor, e) -> Tensor:
    e = float(e)
    with _quiet():
        out = a.data ** a.dtype.type(e)

    def grad_fn(g):
        return (g * a.dtype.type(e) * a.data ** a.dtype.type(e - 1.0),)

    return _record(out, (a,), grad_fn, "pow")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    dt = a.dtype.type
    c0, c1, c2 = dt(0.5), dt(0.7978845608028654), dt(0.044715)
    x = a.data
    inner = c1 * (x + c2 * (x * x * x))
    t = np.tanh(inner)
    out = c0 * x * (dt(1.0) + t)

    def grad_fn(g):
        sech2 = dt(1.0) - t * t
        d = c0 * (dt(1.0) + t) + c0 * x * sech2 * c1 * (dt(1.0) + dt(3.0) * c2 * x * x)
        return (g * d,)

    return _record(out, (a,), grad_fn, "gelu")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (g.transpose(inv),)

    return _record(out, (a,), grad_fn, "transpose")


def mT(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("mT needs rank >= 2")
    perm = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return transpose(a, perm)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    _same_dtype(*parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [p._requires for p in parts]

    def grad_fn(g):
        gs = []
        sl = [slice(None)] * g.ndim
        for i in range(len(parts)):
            if not needs[i]:
                gs.append(None)
                continue
            sl[axis] = slice(offsets[i], offsets[i + 1])
            gs.append(g[tuple(sl)])
        return tuple(gs)

    return _record(out, tuple(parts), grad_fn, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start and start + length <= n and length >= 0):
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for extent {n}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def grad_fn(g):
        z = np.zeros_like(a.data)
        z[sl] = g
        return (z,)

    return _record(out, (a,), grad_fn, "narrow")


def chunk(a: Tensor, k: int, axis: int = -1) -> list[Tensor]:
    n = a.data.shape[axis]
    if n % k != 0:
        raise ShapeError(f"extent {n} not divisible into {k} chunks")
    axis = axis % a.data.ndim
    w = n // k
    return [narrow(a, axis, i * w, w) for i in range(k)]


def expand0(a: Tensor, n: int) -> Tensor:
    """Tile along a new leading axis; gradient sums back over it."""
    out = np.broadcast_to(a.data, (n,) + a.data.shape)

    def grad_fn(g):
        return (g.sum(axis=0),)

    return _record(out, (a,), grad_fn, "expand0")


def take0(a: Tensor, ids: np.ndarray) -> Tensor:
    """Index axis 0 with an integer array of any shape; duplicates allowed,
    gradients accumulate."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in ("i", "u"):
        raise ShapeError("take0 needs integer indices")
    n = a.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"index out of bounds for extent {n}")

    out = a.data[ids]

    def grad_fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, ids, g)
        return (z,)

    return _record(out, (a,), grad_fn, "take0")


def gather_rows(a: Tensor, ids) -> Tensor:
    """Row gather: ids must be one-dimensional."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError("gather_rows needs a 1-D index list")
    return take0(a, ids)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a rank-2 input."""
    if a.data.ndim != 2:
        raise ShapeError("take_per_row needs rank 2")
    idx = np.asarray(idx)
    r, c = a.data.shape
    if idx.shape != (r,):
        raise ShapeError("index length must match rows")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise IndexError(f"index out of bounds for extent {c}")
    rows = np.arange(r)
    out = a.data[rows, idx]

    def grad_fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _record(out, (a,), grad_fn, "take_per_row")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(np.asarray(out), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    inv = a.dtype.type(1.0 / count)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg * inv, a.data.shape).copy(),)

    return _record(np.asarray(out), (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, stacked over leading axes.

    Stacked slices are computed per 2-D pair, so a batched call is
    bit-identical to the corresponding loop of unbatched calls.
    """
    _same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)
    needs = (a._requires, b._requires)

    def grad_fn(g):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) as one taped node; x may carry leading batch axes.

    Also serves as the 1x1 convolution: a per-position linear map over the
    channel axis.
    """
    _same_dtype(x, w)
    if w.data.ndim != 2:
        raise ShapeError("weight must be rank 2")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"feature extent {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        _same_dtype(x, b)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError("bias must be a vector matching the output width")
        out = out + b.data
    needs = (x._requires, w._requires, b._requires if b is not None else False)
    lead = tuple(range(x.data.ndim - 2))

    def grad_fn(g):
        gx = gw = gb = None
        if needs[0]:
            gx = np.matmul(g, w.data.T)
        if needs[1]:
            gw = np.matmul(x.data.swapaxes(-1, -2), g)
            if lead:
                gw = gw.sum(axis=lead)
        if needs[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, grad_fn, "linear")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: shifts by the row max before exponentiating.

    exp() tails below the smallest normal float are flushed to exact zero;
    the discarded mass is < 1e-38 of a row sum that is always >= 1.
    """
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    tiny = _TINY[x.dtype]
    e[e < tiny] = 0.0
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    out = x - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _same_dtype(x, gain, bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("gain/bias must be vectors over the last axis")
    dt = x.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    needs = (x._requires, gain._requires, bias._requires)

    def grad_fn(g):
        gx = ggain = gbias = None
        if needs[0]:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        if needs[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return (gx, ggain, gbias)

    return _record(out, (x, gain, bias), grad_fn, "layer_norm")


def avg_pool2d(x: Tensor, n: int) -> Tensor:
    """Non-overlapping n x n mean pooling over a (h, w, d) grid."""
    if x.data.ndim != 3:
        raise ShapeError("avg_pool2d needs a (h, w, d) input")
    h, w, d = x.data.shape
    if h % n != 0 or w % n != 0:
        raise ShapeError(f"grid {h}x{w} not divisible by window {n}")
    out = x.data.reshape(h // n, n, w // n, n, d).mean(axis=(1, 3))
    inv = x.dtype.type(1.0 / (n * n))

    def grad_fn(g):
        gg = (g * inv)[:, None, :, None, :]
        return (np.broadcast_to(gg, (h // n, n, w // n, n, d)).reshape(h, w, d).copy(),)

    return _record(out, (x,), grad_fn, "avg_pool2d")


def topk_indices(scores, m: int) -> np.ndarray:
    """Per-row indices of the m largest entries, in descending score order.

    Ties resolve to the lower index. The result is a plain integer array:
    selection is a constant under differentiation.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if data.ndim != 2:
        raise ShapeError("topk_indices needs a rank-2 score matrix")
    r, c = data.shape
    if not (1 <= m <= c):
        raise ShapeError(f"m={m} out of range for {c} columns")
    order = np.argsort(-data, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :m])


# ---------------------------------------------------------------------------
# verification


def gradient_check(f, x0: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x0`` and a
    central finite difference, coordinate by coordinate.

    Runs in float64 regardless of the input dtype. The relative error for a
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x = Tensor(np.asarray(x0.data, dtype=F64).copy(), trainable=True)
    with GradientTape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    analytic = tape.gradients(y, params=[x])[x].reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data.copy())).data
        flat[i] = orig - h
        fm = f(Tensor(x.data.copy())).data
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite value during finite-difference probing")
        numeric[i] = (float(fp) - float(fm)) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# randomness


_MASK64 = (1 << 64) - 1


def _stream_key(stream: str) -> int:
    return int.from_bytes(hashlib.blake2s(stream.encode(), digest_size=8).digest(), "little")


def seeded_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Philox generator keyed by (seed, hash(stream label))."""
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, _stream_key(stream)]))


def randn(rng: np.random.Generator, shape, dtype=F32, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(dtype)


def rand_uniform(rng: np.random.Generator, shape, low: float, high: float, dtype=F32) -> np.ndarray:
    return rng.uniform(low, high, size=shape).astype(dtype)
