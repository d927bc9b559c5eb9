"""Minimal dense tensors with reverse-mode gradients.

Every operation the language models need is implemented here with an exact
hand-written backward rule. A computation record (the implicit graph of
parent links and backward closures) covers one unroll window; state carried
across windows is detached, which gives truncated-BPTT gradient semantics.

Precision is either float32 (training) or float64 (gradient checking).
Mixing the two in one operation is an error.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording of backward closures inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Shape + row-major buffer, with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A constant view of this tensor; gradients stop here."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def parameter(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_dtypes(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one operation: {dt} vs {t.dtype}")
    return dt


def backward(loss):
    """Run reverse-mode accumulation from a scalar tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # Iterative post-order walk; recursion would overflow on long windows.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd)


def add_rowvec(m, v):
    """Add a length-n vector to every row of an (B, n) matrix."""
    _check_dtypes(m, v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"add_rowvec shape mismatch: {m.shape} vs {v.shape}")

    def bwd(g):
        _accum(m, g)
        _accum(v, g.sum(axis=0))

    return _result(m.data + v.data, (m, v), bwd)


def broadcast_add_column(m, v):
    """Add a length-k vector to every column of a (k, L) matrix.

    Realizes the (W h) 1^T construction: out[:, j] = m[:, j] + v.
    """
    _check_dtypes(m, v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ValueError(f"broadcast_add_column shape mismatch: {m.shape} vs {v.shape}")

    def bwd(g):
        _accum(m, g)
        _accum(v, g.sum(axis=1))

    return _result(m.data + v.data[:, None], (m, v), bwd)


def mul(a, b):
    """Elementwise product; b may also be (B, 1) against (B, n)."""
    _check_dtypes(a, b)
    col = a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (a.shape[0], 1)
    if not col and a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        if col:
            _accum(b, (g * a.data).sum(axis=1, keepdims=True))
        else:
            _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a, s):
    """Multiply by a python float."""
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)


def tanh(x):
    y = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _result(y, (x,), bwd)


def _sigmoid_stable(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    y = _sigmoid_stable(x.data)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _result(y, (x,), bwd)


def sum_all(x):
    """Sum of all entries, as a scalar tensor."""

    def bwd(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b, transpose_b=False):
    """Matrix product a @ b (or a @ b.T), with the standard gradient contract:
    dA = dC @ B^T and dB = A^T @ dC."""
    _check_dtypes(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul requires 2-d tensors, got {a.shape} and {b.shape}")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} vs {b.shape}"
                         + (" (transposed)" if transpose_b else ""))

    def bwd(g):
        if transpose_b:
            _accum(a, g @ b.data)
            _accum(b, g.T @ a.data)
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return _result(np.ascontiguousarray(a.data @ bd), (a, b), bwd)


def matvec(a, v):
    """(B, n) @ (n,) -> (B,)."""
    _check_dtypes(a, v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ValueError(f"matvec shape mismatch: {a.shape} vs {v.shape}")

    def bwd(g):
        _accum(a, g[:, None] * v.data[None, :])
        _accum(v, g @ a.data)

    return _result(a.data @ v.data, (a, v), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def slice_cols(x, lo, hi):
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ValueError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            _accum(x, full)

    return _result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), bwd)


def split_cols(x, parts):
    """Split an (B, n) tensor into equal column blocks."""
    if x.shape[1] % parts != 0:
        raise ValueError(f"cannot split {x.shape[1]} columns into {parts} equal parts")
    d = x.shape[1] // parts
    return tuple(slice_cols(x, i * d, (i + 1) * d) for i in range(parts))


def concat_cols(tensors):
    _check_dtypes(*tensors)
    widths = [t.shape[1] for t in tensors]

    def bwd(g):
        lo = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[:, lo:lo + w])
            lo += w

    return _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


def stack_cols(vectors):
    """Stack L tensors of shape (B,) into a (B, L) tensor."""
    _check_dtypes(*vectors)

    def bwd(g):
        for j, v in enumerate(vectors):
            _accum(v, g[:, j])

    return _result(np.stack([v.data for v in vectors], axis=1), tuple(vectors), bwd)


def gather_rows(table, ids):
    """Select rows of a (V, w) tensor by an integer index array (B,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"row index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _result(np.ascontiguousarray(table.data[ids]), (table,), bwd)


# ---------------------------------------------------------------------------
# softmax / loss


def _stable_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    return e, s


def masked_softmax(scores, mask, allow_empty=False):
    """Row softmax of (B, L) scores over entries where mask is True.

    Masked entries get exactly 0. Rows with no valid entry yield all zeros
    when allow_empty, and raise otherwise.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    empty = ~mask.any(axis=-1)
    if empty.any() and not allow_empty:
        raise ValueError("softmax over fully masked row")
    z = np.where(mask, scores.data, -np.inf)
    e, s = _stable_softmax(z)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(scores, y * (g - inner))

    return _result(y.astype(scores.dtype, copy=False), (scores,), bwd)


def softmax_rows(logits):
    """Stable softmax along the last axis of a (B, V) tensor."""
    e, s = _stable_softmax(logits.data)
    y = e / s

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(logits, y * (g - inner))

    return _result(y, (logits,), bwd)


def softmax_row(x, mask=None):
    """Softmax of a single score vector, with optional validity mask.

    Raises if every entry is masked; masked entries come out exactly 0.
    """
    if x.data.ndim != 1:
        raise ValueError(f"softmax_row expects a vector, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    lifted = _result(x.data[None, :], (x,), lambda g: _accum(x, g[0]))
    out = masked_softmax(lifted, np.asarray(mask, dtype=bool)[None, :], allow_empty=False)
    return _result(out.data[0], (out,), lambda g: _accum(out, g[None, :]))


def cross_entropy_rows(logits, targets):
    """Per-row negative log softmax probability of the target ids.

    Computed through log-sum-exp; the gradient is softmax(logits) - onehot.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy_rows shapes: {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError(f"target id out of range for {logits.shape[1]} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, targets]

    def bwd(g):
        if logits.requires_grad:
            p = e / s
            p[rows, targets] -= 1.0
            _accum(logits, p * g[:, None])

    return _result(nll.astype(logits.dtype, copy=False), (logits,), bwd)


def cross_entropy(logits, target):
    """Negative log likelihood of one target id under a logit vector."""
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy expects a logit vector, got {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise ValueError(f"target {target} out of range for {logits.shape[0]} classes")
    lifted = _result(logits.data[None, :], (logits,), lambda g: _accum(logits, g[0]))
    nll = cross_entropy_rows(lifted, np.asarray([target]))
    return _result(np.asarray(nll.data[0], dtype=logits.dtype), (nll,),
                   lambda g: _accum(nll, np.asarray([g], dtype=logits.dtype).reshape(1)))


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """Gate parameters, gate order fixed as (input, forget, cell, output).

    wx: (4k, w) input-to-gates, wh: (4k, k) hidden-to-gates, b: (4k,) biases.
    """
    wx: Tensor
    wh: Tensor
    b: Tensor

    @property
    def hidden_dim(self):
        return self.wh.shape[1]


def lstm_cell(x, h_prev, c_prev, params):
    """One LSTM step; returns (h, c). Handles (B, ·) batches or bare vectors."""
    squeeze = x.data.ndim == 1
    if squeeze:
        x = _lift(x)
        h_prev = _lift(h_prev)
        c_prev = _lift(c_prev)
    _check_dtypes(x, h_prev, c_prev, params.wx, params.wh, params.b)
    k = params.hidden_dim
    if (x.shape[1] != params.wx.shape[1] or h_prev.shape != (x.shape[0], k)
            or c_prev.shape != (x.shape[0], k) or params.wx.shape[0] != 4 * k
            or params.b.shape != (4 * k,)):
        raise ValueError(
            f"lstm_cell dimension mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape} "
            f"wx{params.wx.shape} wh{params.wh.shape} b{params.b.shape}")

    pre = x.data @ params.wx.data.T + h_prev.data @ params.wh.data.T + params.b.data
    i = _sigmoid_stable(pre[:, :k])
    f = _sigmoid_stable(pre[:, k:2 * k])
    g = np.tanh(pre[:, 2 * k:3 * k])
    o = _sigmoid_stable(pre[:, 3 * k:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def bwd(gr):
        # h and c leave the cell as one combined node so the closure fires
        # exactly once, after every consumer of either half has contributed.
        dh = gr[:, :k]
        dc = gr[:, k:]
        dc_total = dc + dh * o * (1.0 - tc * tc)
        d_pre = np.concatenate([
            dc_total * g * i * (1.0 - i),
            dc_total * c_prev.data * f * (1.0 - f),
            dc_total * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        _accum(x, d_pre @ params.wx.data)
        _accum(h_prev, d_pre @ params.wh.data)
        _accum(c_prev, dc_total * f)
        _accum(params.wx, d_pre.T @ x.data)
        _accum(params.wh, d_pre.T @ h_prev.data)
        _accum(params.b, d_pre.sum(axis=0))

    parents = (x, h_prev, c_prev, params.wx, params.wh, params.b)
    combined = _result(np.concatenate([h, c], axis=1), parents, bwd)
    h_out = slice_cols(combined, 0, k)
    c_out = slice_cols(combined, k, 2 * k)
    if squeeze:
        h_out = _squeeze(h_out)
        c_out = _squeeze(c_out)
    return h_out, c_out


def _lift(v):
    return _result(v.data[None, :], (v,), lambda g: _accum(v, g[0]))


def _squeeze(m):
    return _result(m.data[0], (m,), lambda g: _accum(m, g[None, :]))


# ---------------------------------------------------------------------------
# initialization and the finite-difference oracle


def init_uniform(shape, low, high, seed, dtype=np.float32):
    """I.i.d. uniform draws from a Philox counter-based stream.

    Philox is splittable and fully specified, so a (seed, shape) pair gives
    the same buffer on every platform and run.
    """
    if not low < high:
        raise ValueError(f"init_uniform requires low < high, got {low} >= {high}")
    gen = np.random.Generator(np.random.Philox(seed))
    return Tensor(gen.uniform(low, high, size=shape).astype(dtype), requires_grad=True)


def uniform_stream(seed):
    """A named-draw helper: successive draws from one Philox stream."""
    gen = np.random.Generator(np.random.Philox(seed))

    def draw(shape, low=-0.1, high=0.1, dtype=np.float32):
        return Tensor(gen.uniform(low, high, size=shape).astype(dtype), requires_grad=True)

    return draw


def grad_check(f, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f(params) must return a scalar tensor. Requires float64 parameters;
    float32 has too little headroom for central differences at eps=1e-5.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    zero_grads(params)
    loss = f(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                fp = float(f(params).data)
                flat[i] = keep - eps
                fm = float(f(params).data)
                flat[i] = keep
                numeric = (fp - fm) / (2.0 * eps)
                a = gflat[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst = rel
    zero_grads(params)
    return worst
