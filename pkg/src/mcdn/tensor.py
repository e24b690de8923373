"""Dense tensors with reverse-mode differentiation.

Everything is float64 and row-major.  A computation builds a tape of
``Tensor`` nodes; calling :meth:`Tensor.backward` on a scalar walks the
tape in reverse topological order and accumulates gradients into every
reachable node.  Gradients accumulate across repeated backward calls
until :meth:`Tensor.zero_grad` is used.

The op set is exactly what the model needs: matmul, broadcasting
add/mul, activations, row softmax, layer norm, same-length 1-D
convolution, max-over-time pooling, row gather / embedding lookup,
a fused GRU layer, dropout and a clamp.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Rng",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "pow_const",
    "log",
    "tsum",
    "tmean",
    "sq_sum",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax_rows",
    "layer_norm",
    "conv1d_same",
    "max_over_time",
    "block_max_rows",
    "gather_rows",
    "embedding_lookup",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "transpose",
    "reshape",
    "dropout",
    "gru_layer",
    "gru_layer_batched",
    "clamp",
    "add_l2_penalty",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (fast forward-only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "trainable", "name", "_parents", "_backward_fn")

    def __init__(self, data, trainable: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.trainable = trainable
        self.name = name
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar node."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor, got shape %r" % (self.shape,))
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # Operator sugar; all math lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, trainable={self.trainable})"


class Rng:
    """Counter-tracking deterministic random source (seed ⇒ same sequence)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(0.0, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(-_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(-g)

    return _node(-a.data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors, got %r @ %r" % (a.shape, b.shape))
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError("matmul dimension mismatch: %r @ %r" % (a.shape, b.shape))
    data = a.data @ b.data

    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _node(data, (a, b), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** p

    def bw(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), (a,), bw)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def bw(g):
        a._accum(np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw)


def sq_sum(a: Tensor) -> Tensor:
    """Scalar sum of squares, the L2 building block."""
    a = _as_tensor(a)

    def bw(g):
        a._accum(2.0 * float(g) * a.data)

    return _node(np.asarray((a.data * a.data).sum()), (a,), bw)


def add_l2_penalty(loss: Tensor, params: Iterable[Tensor], lam: float) -> Tensor:
    """loss + lam * sum of squared parameter entries, as one tape node."""
    params = [p for p in params]
    penalty = sum(float((p.data * p.data).sum()) for p in params)
    data = np.asarray(float(loss.data) + lam * penalty)

    def bw(g):
        loss._accum(np.full_like(loss.data, float(g)))
        for p in params:
            p._accum(2.0 * lam * float(g) * p.data)

    return _node(data, (loss, *params), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accum(g * (a.data > 0.0))

    return _node(data, (a,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf-based normal CDF."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        a._accum(g * (cdf + a.data * pdf))

    return _node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * s * (1.0 - s))

    return _node(s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - t * t))

    return _node(t, (a,), bw)


# ---------------------------------------------------------------------------
# normalization and attention pieces
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max-subtraction; masked entries are exactly 0."""
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError("mask shape %r != logits shape %r" % (mask.shape, z.shape))
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: fully masked row")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        x._accum(p * (g - dot))

    return _node(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        n = x.data.shape[1]
        gg = g * gain.data
        gain._accum((g * xhat).sum(axis=0))
        bias._accum(g.sum(axis=0))
        # d xhat/dx collapsed: inv * (gg - mean(gg) - xhat * mean(gg*xhat))
        x._accum(inv * (gg - gg.mean(axis=1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=1, keepdims=True) / n))

    return _node(data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-D convolution over rows.

    x is (T, d_in); kernels is (w, d_in, c); output is (T, c).  Zero
    padding splits left-light/right-heavy: floor((w-1)/2) left rows,
    ceil((w-1)/2) right rows.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    t, d_in = x.data.shape
    w, kd, c = kernels.data.shape
    if kd != d_in:
        raise ValueError("kernel depth %d != input depth %d" % (kd, d_in))
    lpad = (w - 1) // 2
    rpad = w - 1 - lpad
    xp = np.zeros((t + w - 1, d_in))
    xp[lpad:lpad + t] = x.data
    out = np.tile(bias.data, (t, 1))
    for j in range(w):
        out += xp[j:j + t] @ kernels.data[j]

    def bw(g):
        bias._accum(g.sum(axis=0))
        gxp = np.zeros_like(xp)
        if kernels.grad is None:
            kernels.grad = np.zeros_like(kernels.data)
        for j in range(w):
            kernels.grad[j] += xp[j:j + t].T @ g
            gxp[j:j + t] += g @ kernels.data[j].T
        x._accum(gxp[lpad:lpad + t])

    return _node(out, (x, kernels, bias), bw)


def block_max_rows(x: Tensor, ranges) -> Tensor:
    """Column-wise max over each [start, stop) row range; one output row per range.

    Ties route gradient to the first maximal row, matching max_over_time.
    """
    x = _as_tensor(x)
    ranges = [(int(s), int(e)) for s, e in ranges]
    c = x.data.shape[1]
    cols = np.arange(c)
    data = np.empty((len(ranges), c))
    arg = np.empty((len(ranges), c), dtype=np.intp)
    for i, (s, e) in enumerate(ranges):
        block = x.data[s:e]
        a = np.argmax(block, axis=0)
        arg[i] = a + s
        data[i] = block[a, cols]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (arg.reshape(-1), np.tile(cols, len(ranges))), g.reshape(-1))

    return _node(data, (x,), bw)


def max_over_time(x: Tensor) -> Tensor:
    """Column-wise max of a (T, c) tensor; ties route gradient to the first max."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=0)
    data = x.data[idx, np.arange(x.data.shape[1])]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx, np.arange(x.data.shape[1])] = g
        x._accum(gx)

    return _node(data.reshape(1, -1), (x,), bw)


# ---------------------------------------------------------------------------
# indexing / shaping
# ---------------------------------------------------------------------------

def gather_rows(x: Tensor, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    data = x.data[idx]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return _node(data, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return gather_rows(table, ids)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[s:e])

    return _node(data, tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bw(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[:, s:e])

    return _node(data, tuple(parts), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return _node(x.data[start:stop], (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += g

    return _node(x.data[:, start:stop], (x,), bw)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(g.T)

    return _node(x.data.T, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        x._accum(g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where no clipping happened."""
    x = _as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        x._accum(g * inside)

    return _node(data, (x,), bw)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x: Tensor, rate: float, rng: Optional[Rng], training: bool) -> Tensor:
    """Inverted dropout: kept entries scaled by 1/(1-rate) at train time."""
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = rng.uniform(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def bw(g):
        x._accum(g * keep * scale)

    return _node(data, (x,), bw)


# ---------------------------------------------------------------------------
# fused GRU layer
# ---------------------------------------------------------------------------

def _gru_reversal_index(lengths: np.ndarray, t_len: int) -> np.ndarray:
    """Per-sequence index that reverses the valid prefix, PAD rows fixed."""
    idx = np.tile(np.arange(t_len), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


def gru_layer_batched(x: Tensor, w: Tensor, u: Tensor, b: Tensor,
                      lengths, t_len: int, reverse: bool = False) -> Tensor:
    """GRU direction over a padded batch of sequences.

    x is (B*t_len, d_in) sentence-major; ``lengths`` holds each
    sequence's true length.  Returns states (B*t_len, d_h) in traversal
    order per sequence: row b*t_len + i is the state after the i-th
    processed token of sequence b (back-to-front when ``reverse``).
    Updates are masked beyond each sequence's length, so the final state
    sits at row b*t_len + t_len - 1 regardless of padding.

    Gates (columns of w/u/b in order z, r, n):
        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r*h) U_n + b_n)
        h' = (1 - z) * h + z * n
    """
    x, w, u, b = _as_tensor(x), _as_tensor(w), _as_tensor(u), _as_tensor(b)
    lengths = np.asarray(lengths, dtype=np.intp)
    n_seq = lengths.size
    d_in = x.data.shape[1]
    d_h = u.data.shape[0]
    if w.data.shape != (d_in, 3 * d_h) or u.data.shape != (d_h, 3 * d_h) or b.data.shape != (3 * d_h,):
        raise ValueError("gru_layer weight shapes inconsistent")
    if x.data.shape[0] != n_seq * t_len:
        raise ValueError("gru_layer input rows != batch * t_len")

    xs = x.data.reshape(n_seq, t_len, d_in)
    if reverse:
        rev = _gru_reversal_index(lengths, t_len)
        xs = xs[np.arange(n_seq)[:, None], rev]
    xs = np.ascontiguousarray(xs.transpose(1, 0, 2))  # (T, B, d_in)
    ax = xs.reshape(t_len * n_seq, d_in) @ w.data
    ax += b.data
    ax = ax.reshape(t_len, n_seq, 3 * d_h)
    mask = (np.arange(t_len)[:, None] < lengths[None, :]).astype(np.float64)[:, :, None]
    uz, ur, un = u.data[:, :d_h], u.data[:, d_h:2 * d_h], u.data[:, 2 * d_h:]
    uzr = u.data[:, :2 * d_h]

    h = np.zeros((n_seq, d_h))
    hs_prev = np.empty((t_len, n_seq, d_h))
    zs = np.empty_like(hs_prev)
    rs = np.empty_like(hs_prev)
    ns = np.empty_like(hs_prev)
    states = np.empty_like(hs_prev)
    for i in range(t_len):
        hs_prev[i] = h
        zr = 1.0 / (1.0 + np.exp(-(ax[i, :, :2 * d_h] + h @ uzr)))
        z, r = zr[:, :d_h], zr[:, d_h:]
        n = np.tanh(ax[i, :, 2 * d_h:] + (r * h) @ un)
        # h' = (1-z) h + z n, applied only where the sequence is live
        h = h + (mask[i] * z) * (n - h)
        zs[i], rs[i], ns[i] = z, r, n
        states[i] = h

    out = states.transpose(1, 0, 2).reshape(n_seq * t_len, d_h)

    def bw(g):
        gseq = g.reshape(n_seq, t_len, d_h).transpose(1, 0, 2)
        gax = np.zeros((t_len, n_seq, 3 * d_h))
        gu = np.zeros_like(u.data)
        dh = np.zeros((n_seq, d_h))
        for i in range(t_len - 1, -1, -1):
            dh = dh + gseq[i]
            m = mask[i]
            z, r, n, hp = zs[i], rs[i], ns[i], hs_prev[i]
            dhc = m * dh
            dhp = (1.0 - m) * dh
            dz = dhc * (n - hp)
            dn = dhc * z
            dhp = dhp + dhc * (1.0 - z)
            dan = dn * (1.0 - n * n)
            gax[i, :, 2 * d_h:] = dan
            grh = dan @ un.T
            gu[:, 2 * d_h:] += (rs[i] * hp).T @ dan
            dr = grh * hp
            dhp = dhp + grh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            gax[i, :, :d_h] = daz
            gax[i, :, d_h:2 * d_h] = dar
            gu[:, :d_h] += hp.T @ daz
            gu[:, d_h:2 * d_h] += hp.T @ dar
            dhp = dhp + daz @ uz.T + dar @ ur.T
            dh = dhp
        u._accum(gu)
        gax2 = gax.reshape(t_len * n_seq, 3 * d_h)
        w._accum(xs.reshape(t_len * n_seq, d_in).T @ gax2)
        b._accum(gax2.sum(axis=0))
        gx = (gax2 @ w.data.T).reshape(t_len, n_seq, d_in).transpose(1, 0, 2)
        if reverse:
            gx = gx[np.arange(n_seq)[:, None], rev]
        x._accum(gx.reshape(n_seq * t_len, d_in))

    return _node(out, (x, w, u, b), bw)


def gru_layer(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Single-sequence GRU over (T, d_in) rows; see :func:`gru_layer_batched`."""
    t_len = x.data.shape[0] if isinstance(x, Tensor) else np.asarray(x).shape[0]
    return gru_layer_batched(x, w, u, b, lengths=[t_len], t_len=t_len, reverse=reverse)
