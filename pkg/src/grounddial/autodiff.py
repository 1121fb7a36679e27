"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation records one node onto the active :class:`Tape`; `backward`
replays the tape in reverse recording order exactly once. Only 2-D matrix
products and same-shape elementwise arithmetic exist -- there is no implicit
broadcasting beyond scaling/shifting by a Python scalar, so shape mistakes
fail loudly at the op that caused them. All data is float64.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not fit the operation."""


class DegenerateSliceError(ValueError):
    """A softmax slice has no unmasked entries to normalize over."""


class InvalidDistributionError(ValueError):
    """An input that must lie on the probability simplex does not."""


class ContractError(ValueError):
    """An operation precondition was violated."""


_LOG_FLOOR = 1e-12  # floor inside log(q) for KL; p entries of 0 contribute 0


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut from the tape (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of operations; context manager activates recording."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _record(out: Tensor, inputs: tuple, rule: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(inputs, out, rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad of every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across multiple uses of a tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        for inp, g in zip(node.inputs, node.rule(out_grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = g
            else:
                inp.grad = inp.grad + g


# ---------------------------------------------------------------------------
# constants and constructors

_CONST_CACHE: dict = {}


def const(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros_const(shape) -> Tensor:
    key = ("z", tuple(np.atleast_1d(shape))) if not isinstance(shape, tuple) else ("z", shape)
    t = _CONST_CACHE.get(key)
    if t is None:
        t = Tensor(np.zeros(key[1]))
        _CONST_CACHE[key] = t
    return t


def ones_const(shape: tuple) -> Tensor:
    key = ("o", shape)
    t = _CONST_CACHE.get(key)
    if t is None:
        t = Tensor(np.ones(shape))
        _CONST_CACHE[key] = t
    return t


# ---------------------------------------------------------------------------
# core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. dA = dC Bᵀ, dB = Aᵀ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def rule(g):
        return (g.T.copy(),)

    return _record(out, (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape).copy())
    orig = a.shape

    def rule(g):
        return (g.reshape(orig),)

    return _record(out, (a,), rule)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def rule(g):
        return g, g

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def rule(g):
        return g, -g

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return g * bd, g * ad

    return _record(out, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def rule(g):
        return (g * s,)

    return _record(out, (a,), rule)


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))

    def rule(g):
        return (g,)

    return _record(out, (a,), rule)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p with constant exponent; caller keeps a in the domain."""
    p = float(p)
    out = Tensor(a.data ** p)
    ad = a.data

    def rule(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0  # gradient at exactly 0 is 0

    def rule(g):
        return (g * pos,)

    return _record(out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)

    def rule(g):
        return (g * (1.0 - t * t),)

    return _record(out, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def rule(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), rule)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "scale": scale,
}


def elementwise(kind: str, *inputs):
    """Dispatch by kind name: add, mul, relu, tanh, sigmoid, scale."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.array_split(g, cuts, axis=axis))

    return _record(out, tuple(parts), rule)


def take_rows(a: Tensor, indices) -> Tensor:
    """Rows a[indices]; gradient scatter-adds back (duplicates accumulate)."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_rows needs a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")
    out = Tensor(a.data[idx])
    nrows = a.shape[0]
    ncols = a.shape[1]

    def rule(g):
        acc = np.zeros((nrows, ncols))
        np.add.at(acc, idx, g)
        return (acc,)

    return _record(out, (a,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols needs a matrix, got shape {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())
    shape = a.shape

    def rule(g):
        acc = np.zeros(shape)
        acc[:, start:stop] = g
        return (acc,)

    return _record(out, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.shape

    def rule(g):
        return (np.full(shape, float(g)),)

    return _record(out, (a,), rule)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean())
    shape = a.shape

    def rule(g):
        return (np.full(shape, float(g) / n),)

    return _record(out, (a,), rule)


def tile_rows(row: Tensor, n: int) -> Tensor:
    """Repeat a [1, d] row n times; the explicit stand-in for broadcasting."""
    if row.data.ndim != 2 or row.shape[0] != 1:
        raise DimensionError(f"tile_rows needs a [1, d] row, got {row.shape}")
    return matmul(ones_const((n, 1)), row)


# ---------------------------------------------------------------------------
# probability / loss ops

def masked_softmax(logits: Tensor, axis: int, mask: Optional[Tensor] = None) -> Tensor:
    """Exp-normalize each slice along `axis`, stabilized by max-subtraction.

    Masked positions (mask False) come out exactly 0; a slice with no
    unmasked entry raises DegenerateSliceError rather than producing NaN.
    """
    z = logits.data
    if axis >= z.ndim or axis < -z.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {logits.shape}")
    if mask is None:
        m = z.max(axis=axis, keepdims=True)
        e = np.exp(z - m)
    else:
        mk = mask.data.astype(bool)
        if mk.shape != z.shape:
            raise DimensionError(f"mask shape {mask.shape} != logits shape {logits.shape}")
        if (mk.sum(axis=axis) == 0).any():
            raise DegenerateSliceError("softmax slice with every entry masked")
        m = np.where(mk, z, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mk, np.exp(z - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot), None) if mask is not None else (y * (g - dot),)

    inputs = (logits,) if mask is None else (logits, mask)
    return _record(out, inputs, rule)


def _check_simplex(arr: np.ndarray, name: str) -> None:
    if (arr < 0).any():
        raise InvalidDistributionError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise InvalidDistributionError(f"{name} slices do not sum to 1 (max dev {np.abs(sums - 1.0).max():.3g})")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over slices of sum p log(p/q); 0 log 0 := 0, q floored at 1e-12.

    Rank-1 input is one slice; rank-2 treats rows as slices of a batch.
    """
    _same_shape(p, q, "kl_divergence")
    if p.data.ndim not in (1, 2):
        raise DimensionError(f"kl_divergence expects rank 1 or 2, got shape {p.shape}")
    _check_simplex(p.data, "p")
    _check_simplex(q.data, "q")
    n_slices = 1 if p.data.ndim == 1 else p.shape[0]
    pd = p.data
    qf = np.maximum(q.data, _LOG_FLOOR)
    support = pd > 0
    lp = np.log(np.where(support, pd, 1.0))
    lq = np.log(qf)
    val = float(np.where(support, pd * (lp - lq), 0.0).sum()) / n_slices
    out = Tensor(val)
    q_active = q.data > _LOG_FLOOR

    def rule(g):
        gs = float(g) / n_slices
        dp = np.where(support, (lp - lq + 1.0) * gs, 0.0)
        dq = np.where(q_active, -(pd / qf) * gs, 0.0)
        return dp, dq

    return _record(out, (p, q), rule)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of (a - b)**2."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = a.size
    out = Tensor(float((diff * diff).sum()) / n)

    def rule(g):
        d = (2.0 / n) * float(g) * diff
        return d, -d

    return _record(out, (a, b), rule)


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target_index] for a rank-1 logits vector."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector, got shape {logits.shape}")
    n = logits.shape[0]
    if not (0 <= target_index < n):
        raise IndexError(f"target index {target_index} out of range for {n} logits")
    z = logits.data
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    out = Tensor(math.log(s) + m - z[target_index])
    probs = e / s

    def rule(g):
        d = probs * float(g)
        d[target_index] -= float(g)
        return (d,)

    return _record(out, (logits,), rule)


def add_chain(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of scalar tensors (deterministic order)."""
    terms = list(terms)
    if not terms:
        raise ContractError("add_chain of zero terms")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    terms = list(terms)
    return scale(add_chain(terms), 1.0 / len(terms))


# ---------------------------------------------------------------------------
# fused recurrent cell

def lstm_step(xs: Tensor, row: int, hc: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """One LSTM step, fused into a single tape node.

    xs: [m, d_in] input matrix, consuming row `row`; hc: [1, 2H] packed
    state (h then c); wx: [d_in, 4H]; wh: [H, 4H]; b: [1, 4H] with gate
    order i, f, o, g. Returns the next packed [1, 2H] state.
    """
    H = hc.shape[1] // 2
    if wx.shape != (xs.shape[1], 4 * H) or wh.shape != (H, 4 * H) or b.shape != (1, 4 * H):
        raise DimensionError(
            f"lstm_step shapes: xs {xs.shape}, hc {hc.shape}, wx {wx.shape}, wh {wh.shape}, b {b.shape}"
        )
    x = xs.data[row:row + 1]
    h = hc.data[:, :H]
    c = hc.data[:, H:]
    z = x @ wx.data + h @ wh.data + b.data
    i = 1.0 / (1.0 + np.exp(-z[:, :H]))
    f = 1.0 / (1.0 + np.exp(-z[:, H:2 * H]))
    o = 1.0 / (1.0 + np.exp(-z[:, 2 * H:3 * H]))
    gg = np.tanh(z[:, 3 * H:])
    c2 = f * c + i * gg
    t2 = np.tanh(c2)
    h2 = o * t2
    out = Tensor(np.concatenate([h2, c2], axis=1))
    m_rows = xs.shape[0]
    wxd, whd = wx.data, wh.data

    def rule(g):
        gh = g[:, :H]
        gc_in = g[:, H:]
        do = gh * t2
        dc2 = gc_in + gh * o * (1.0 - t2 * t2)
        df = dc2 * c
        dc = dc2 * f
        di = dc2 * gg
        dgg = dc2 * i
        dz = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dgg * (1.0 - gg * gg),
            ],
            axis=1,
        )
        dx = dz @ wxd.T
        dh = dz @ whd.T
        dxs = np.zeros((m_rows, x.shape[1]))
        dxs[row] = dx[0]
        dhc = np.concatenate([dh, dc], axis=1)
        dwx = x.T @ dz
        dwh = h.T @ dz
        return dxs, dhc, dwx, dwh, dz.copy()

    return _record(out, (xs, hc, wx, wh, b), rule)


# ---------------------------------------------------------------------------
# verification harness

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Optional[Iterable] = None) -> float:
    """Max relative error between tape gradients of f and central differences.

    f must be scalar-valued and built from ops in this module. `coords`
    optionally restricts the check to a subset of flat indices of x; the
    default checks every coordinate.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
        x.grad = None
        flat = x.data.reshape(-1)
        aflat = analytic.reshape(-1)
        if coords is None:
            coords = range(flat.size)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = f(x).item()
            flat[k] = orig - h
            fm = f(x).item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = aflat[k]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
        return worst
    finally:
        x.requires_grad = was
        x.grad = None


# ---------------------------------------------------------------------------
# binary tensor serialization: u32 rank, u32 dims..., f64 data (little-endian)

def write_tensor(fh, t: Tensor) -> None:
    shape = t.shape
    fh.write(struct.pack("<I", len(shape)))
    if shape:
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_tensor(fh) -> Tensor:
    head = fh.read(4)
    if len(head) < 4:
        raise ValueError("truncated tensor stream: missing rank")
    (rank,) = struct.unpack("<I", head)
    dims = ()
    if rank:
        raw = fh.read(4 * rank)
        if len(raw) < 4 * rank:
            raise ValueError("truncated tensor stream: missing dims")
        dims = struct.unpack(f"<{rank}I", raw)
    count = 1
    for d in dims:
        count *= d
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise ValueError("truncated tensor stream: missing data")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(arr)
