"""Dense numpy tensors with tape-based reverse-mode gradients.

Every op in this module computes its forward value eagerly with numpy and,
when a :class:`GradTape` is active and some input requires a gradient,
records a closure that maps the output gradient to input gradients.
``GradTape.backward`` replays those records in reverse.

Two precision modes exist: ``"verification"`` (float64, used by tests and
gradient checks) and ``"benchmark"`` (float32, used for latency runs).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

PRECISIONS = {"verification": np.float64, "benchmark": np.float32}

LAYER_NORM_EPS = 1e-12

_local = threading.local()


class DimensionError(ValueError):
    pass


class GradCheckError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.dtype = np.float64
    return _local


def default_dtype():
    return _state().dtype


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(PRECISIONS)}")
    st = _state()
    prev = st.dtype
    st.dtype = PRECISIONS[mode]
    try:
        yield
    finally:
        st.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.replay_order: list[int] = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._ops.append((out, inputs, backward))

    def backward(self, out: Tensor, grad=None):
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if out.data.size != 1:
                raise DimensionError(f"backward from non-scalar output of shape {out.shape} needs an explicit grad")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        produced = {id(o) for o, _, _ in self._ops}
        leaves: dict[int, Tensor] = {}
        self.replay_order = []
        for i in range(len(self._ops) - 1, -1, -1):
            o, inputs, fn = self._ops[i]
            self.replay_order.append(i)
            g = grads.pop(id(o), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
        if id(out) not in produced and out.requires_grad:
            out.grad = grads.get(id(out))


def _active_tape() -> GradTape | None:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.data.ndim == 2:
            ga = g @ b.data.T
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean mask (broadcast against a and b)."""
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def index(x: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].data.ndim
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in xs], axis=axis), tuple(xs), backward)


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, t] = x[b, idx[b, t]]`` for x of shape (B, T, ...)."""
    rows = np.arange(x.shape[0])[:, None]
    inverse = np.argsort(idx, axis=1, kind="stable")
    is_perm = np.array_equal(np.take_along_axis(idx, inverse, axis=1), np.broadcast_to(np.arange(idx.shape[1]), idx.shape))

    def backward(g):
        if is_perm:
            return (g[rows, inverse],)
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mean_pool(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Average ``x`` (B, T, d) over the first ``lengths[b]`` positions of each row."""
    B, T = x.shape[:2]
    mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(x.dtype)
    w = mask / mask.sum(axis=1, keepdims=True)

    def backward(g):
        return (w[:, :, None] * g[:, None, :],)

    return _make(np.einsum("bt,btd->bd", w, x.data), (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. Entries where ``mask`` is False get probability exactly 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    d = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        flat = ids.reshape(-1)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
            shape=(table.shape[0], flat.size),
        )
        return (np.asarray(scatter @ g.reshape(-1, table.shape[-1])),)

    return _make(table.data[ids], (table,), backward)


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_scan(xw: Tensor, w_hh: Tensor, valid: np.ndarray) -> Tensor:
    """Unidirectional LSTM recurrence over time.

    ``xw`` (B, T, 4d) holds the input projections plus bias, gate order
    [input, forget, output, cell]; ``w_hh`` is (d, 4d).  Where ``valid[b, t]``
    is False the state of row b is carried over unchanged.  Returns the hidden
    states (B, T, d); the last column is the final state of each row.
    """
    B, T, _ = xw.shape
    d = w_hh.shape[0]
    dt = xw.dtype
    h = np.zeros((B, d), dtype=dt)
    c = np.zeros((B, d), dtype=dt)
    H = np.empty((B, T, d), dtype=dt)
    cache = []
    W = w_hh.data
    full = valid.all(axis=0)
    for t in range(T):
        z = xw.data[:, t] + h @ W
        s = _sig(z[:, :3 * d])
        i, f, o = s[:, :d], s[:, d:2 * d], s[:, 2 * d:]
        g = np.tanh(z[:, 3 * d:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((h, c, s, g, tc))
        if full[t]:
            h, c = h_new, c_new
        else:
            m = valid[:, t:t + 1]
            h = np.where(m, h_new, h)
            c = np.where(m, c_new, c)
        H[:, t] = h

    def backward(gH):
        dxw = np.zeros_like(xw.data)
        dW = np.zeros_like(W)
        dh = np.zeros((B, d), dtype=dt)
        dc = np.zeros((B, d), dtype=dt)
        dz = np.empty((B, 4 * d), dtype=dt)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, s, g, tc = cache[t]
            i, f, o = s[:, :d], s[:, d:2 * d], s[:, 2 * d:]
            dh = dh + gH[:, t]
            dct = dc + dh * o * (1.0 - tc * tc)
            dz[:, :d] = dct * g
            dz[:, d:2 * d] = dct * c_prev
            dz[:, 2 * d:3 * d] = dh * tc
            dz[:, :3 * d] *= s * (1.0 - s)
            dz[:, 3 * d:] = dct * i * (1.0 - g * g)
            if full[t]:
                dxw[:, t] = dz
                dW += h_prev.T @ dz
                dh = dz @ W.T
                dc = dct * f
            else:
                m = valid[:, t:t + 1]
                dzm = np.where(m, dz, 0.0)
                dxw[:, t] = dzm
                dW += h_prev.T @ dzm
                dh = np.where(m, dzm @ W.T, dh)
                dc = np.where(m, dct * f, dc)
        return dxw, dW

    return _make(H, (xw, w_hh), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _scalar(v) -> float:
    return float(v.data if isinstance(v, Tensor) else v)


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``names`` defaults to every parameter with ``requires_grad``; ``max_entries``
    optionally subsamples entries per parameter (seeded).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = [n for n in params if params[n].requires_grad] if names is None else list(names)
    for n in names:
        params[n].grad = None
    with GradTape() as tape:
        loss = f(params)
    tape.backward(loss)
    analytic = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)) for n in names}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        if not params[n].data.flags.c_contiguous:
            params[n].data = np.ascontiguousarray(params[n].data)
        flat = params[n].data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ag = analytic[n].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(params))
            flat[i] = orig - eps
            fm = _scalar(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite value at perturbed point of {n}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            err = abs(ag[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
