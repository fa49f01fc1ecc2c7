"""Dense tensors with reverse-mode differentiation.

Values are numpy arrays (binary64 by default). Differentiable ops record a
backward closure on the active :class:`Tape`; ``Tape.backward`` replays the
record once in reverse execution order, accumulating gradients additively.
All reductions use numpy's sequential kernels, so repeated runs of the same
seeded computation are bitwise identical.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

# When True, every op output is checked for NaN/Inf.
CHECKED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in checked mode."""


class DegenerateMaskError(ValueError):
    """A masked softmax was asked to normalize over an empty neighborhood."""


def set_checked(flag):
    global CHECKED
    CHECKED = bool(flag)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.data.shape}{tag}>"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed differentiable ops.

    Single-writer: one forward/backward pair at a time. Backward visits each
    recorded op exactly once, in reverse execution order.
    """

    ACTIVE = None

    def __init__(self):
        self._ops = []
        self._outer = None

    def __enter__(self):
        self._outer = Tape.ACTIVE
        Tape.ACTIVE = self
        return self

    def __exit__(self, *exc):
        Tape.ACTIVE = self._outer
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and propagate through the record."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)


def _record(out, inputs, backward_fn):
    tape = Tape.ACTIVE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, backward_fn))
    return out


def _accum(t, delta):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(delta, dtype=t.data.dtype)
    else:
        t.grad += delta


def _make(data, name=None):
    out = Tensor(data)
    if CHECKED and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values in {name or 'op'} output")
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    out = _make(a.data + b.data, "add")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def sub(a, b):
    out = _make(a.data - b.data, "sub")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward)


def mul(a, b):
    out = _make(a.data * b.data, "mul")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def neg(a):
    out = _make(-a.data, "neg")

    def backward(g):
        _accum(a, -g)

    return _record(out, (a,), backward)


def scale(a, c):
    """Multiply by a python constant (no gradient to the constant)."""
    c = float(c)
    out = _make(a.data * c, "scale")

    def backward(g):
        _accum(a, g * c)

    return _record(out, (a,), backward)


def pow_const(a, p):
    """a ** p for a real constant exponent; a must stay positive when p < 1."""
    p = float(p)
    out = _make(a.data ** p, "pow_const")

    def backward(g):
        if p == 0.0:
            return
        _accum(a, g * p * a.data ** (p - 1.0))

    return _record(out, (a,), backward)


def log(a):
    out = _make(np.log(a.data), "log")

    def backward(g):
        _accum(a, g / a.data)

    return _record(out, (a,), backward)


def exp(a):
    out = _make(np.exp(a.data), "exp")

    def backward(g):
        _accum(a, g * out.data)

    return _record(out, (a,), backward)


def clamp(a, lo, hi):
    """Clip values; gradient passes through the interior, zero at the rails."""
    out = _make(np.clip(a.data, lo, hi), "clamp")
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# activations

def sigmoid(a):
    out = _make(1.0 / (1.0 + np.exp(-a.data)), "sigmoid")

    def backward(g):
        _accum(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), backward)


def tanh(a):
    out = _make(np.tanh(a.data), "tanh")

    def backward(g):
        _accum(a, g * (1.0 - out.data ** 2))

    return _record(out, (a,), backward)


def relu(a):
    out = _make(np.maximum(a.data, 0.0), "relu")

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _record(out, (a,), backward)


def leaky_relu(a, slope=0.2):
    out = _make(np.where(a.data > 0, a.data, slope * a.data), "leaky_relu")

    def backward(g):
        _accum(a, g * np.where(a.data > 0, 1.0, slope))

    return _record(out, (a,), backward)


def elu(a, alpha=1.0):
    ex = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out = _make(np.where(a.data > 0, a.data, ex), "elu")

    def backward(g):
        _accum(a, g * np.where(a.data > 0, 1.0, ex + alpha))

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        out = _make(a.data @ b.data, "matmul")

        def backward(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        out = _make(a.data @ b.data, "matmul")

        def backward(g):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        out = _make(a.data @ b.data, "matmul")

        def backward(g):
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))

    else:
        raise ShapeError(f"matmul supports rank 1-2 operands, got {a.ndim} and {b.ndim}")
    return _record(out, (a, b), backward)


def matmul_t(a, b):
    """a @ b.T for two matrices (attention score blocks)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t {a.shape} @ {b.shape}.T")
    out = _make(a.data @ b.data.T, "matmul_t")

    def backward(g):
        _accum(a, g @ b.data)
        _accum(b, g.T @ a.data)

    return _record(out, (a, b), backward)


def affine(x, w, b):
    """x @ w + b with x of rank 1 or 2, w (d_in, d_out), b (d_out,)."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine {x.shape} @ {w.shape} + {b.shape}")
    out = _make(x.data @ w.data + b.data, "affine")

    def backward(g):
        if x.ndim == 2:
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            _accum(b, g.sum(axis=0))
        else:
            _accum(x, w.data @ g)
            _accum(w, np.outer(x.data, g))
            _accum(b, g)

    return _record(out, (x, w, b), backward)


def linear2(x, wx, h, wh, b):
    """x @ wx + h @ wh + b, the fused gate preactivation of recurrent cells."""
    out = _make(x.data @ wx.data + h.data @ wh.data + b.data, "linear2")

    def backward(g):
        if x.ndim == 2:
            _accum(x, g @ wx.data.T)
            _accum(wx, x.data.T @ g)
            _accum(h, g @ wh.data.T)
            _accum(wh, h.data.T @ g)
            _accum(b, g.sum(axis=0))
        else:
            _accum(x, wx.data @ g)
            _accum(wx, np.outer(x.data, g))
            _accum(h, wh.data @ g)
            _accum(wh, np.outer(h.data, g))
            _accum(b, g)

    return _record(out, (x, wx, h, wh, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation

def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    edges = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, edges, axis=axis)):
            _accum(t, piece)

    return _record(out, tuple(tensors), backward)


def reshape(a, shape):
    out = _make(a.data.reshape(shape), "reshape")

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), backward)


def take_row(a, i):
    """Row i of a matrix as a vector."""
    out = _make(a.data[i], "take_row")

    def backward(g):
        d = np.zeros_like(a.data)
        d[i] = g
        _accum(a, d)

    return _record(out, (a,), backward)


def slice_cols(a, start, stop):
    out = _make(a.data[..., start:stop], "slice_cols")

    def backward(g):
        d = np.zeros_like(a.data)
        d[..., start:stop] = g
        _accum(a, d)

    return _record(out, (a,), backward)


def gather_rows(a, idx):
    """Rows a[idx]; duplicate indices accumulate additively on backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = _make(a.data[idx], "gather_rows")

    def backward(g):
        d = np.zeros_like(a.data)
        np.add.at(d, idx, g)
        _accum(a, d)

    return _record(out, (a,), backward)


def scatter_rows(a, idx, n_rows):
    """Place rows of a at positions idx (unique) in an n_rows zero matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows, a.data.shape[1]), dtype=a.data.dtype)
    data[idx] = a.data
    out = _make(data, "scatter_rows")

    def backward(g):
        _accum(a, g[idx])

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a):
    out = _make(np.asarray(a.data.sum()), "sum_all")

    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), backward)


def mean_all(a):
    n = a.data.size
    out = _make(np.asarray(a.data.sum() / n), "mean_all")

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _record(out, (a,), backward)


def mean_rows(a):
    """Column means of a matrix: (n, d) -> (d,)."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows needs a matrix, got shape {a.shape}")
    n = a.data.shape[0]
    out = _make(a.data.sum(axis=0) / n, "mean_rows")

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _record(out, (a,), backward)


def dot(a, b):
    """Inner product of two vectors -> scalar tensor."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot {a.shape} . {b.shape}")
    out = _make(np.asarray(a.data @ b.data), "dot")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization

def softmax_masked(x, mask):
    """Stable softmax over the kept entries of a vector; masked-out are 0."""
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 1 or mask.shape != x.data.shape:
        raise ShapeError(f"softmax_masked {x.shape} with mask {mask.shape}")
    if not mask.any():
        raise DegenerateMaskError("softmax over an all-false mask")
    z = np.zeros_like(x.data)
    kept = x.data[mask]
    e = np.exp(kept - kept.max())
    z[mask] = e / e.sum()
    out = _make(z, "softmax_masked")

    def backward(g):
        gm = g * mask
        inner = (gm * out.data).sum()
        _accum(x, out.data * (gm - inner))

    return _record(out, (x,), backward)


def row_softmax(x):
    """Softmax along the last axis of a matrix, with max-subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"row_softmax needs a matrix, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    out = _make(s, "row_softmax")

    def backward(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - inner))

    return _record(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """gain * (x - mean) / sqrt(var + eps) + bias over the last axis.

    Uses the population variance. Accepts a vector or a matrix (per-row).
    """
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} vs x {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(gain.data * xhat + bias.data, "layer_norm")
    d = x.shape[-1]

    def backward(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gg - m1 - xhat * m2))
        if x.ndim == 2:
            _accum(gain, (g * xhat).sum(axis=0))
            _accum(bias, g.sum(axis=0))
        else:
            _accum(gain, g * xhat)
            _accum(bias, g.copy())

    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# segment ops (edges sorted and grouped contiguously by destination)

def segment_softmax(scores, starts):
    """Softmax within contiguous segments of a score vector.

    starts are the segment start offsets (first element 0); every segment is
    non-empty.
    """
    s = scores.data
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.diff(np.append(starts, len(s)))
    seg_max = np.maximum.reduceat(s, starts)
    e = np.exp(s - np.repeat(seg_max, counts))
    denom = np.add.reduceat(e, starts)
    alpha = e / np.repeat(denom, counts)
    out = _make(alpha, "segment_softmax")

    def backward(g):
        inner = np.add.reduceat(g * alpha, starts)
        _accum(scores, alpha * (g - np.repeat(inner, counts)))

    return _record(out, (scores,), backward)


def segment_sum_rows(rows, starts):
    """Sum contiguous row segments of a matrix: (E, d) -> (S, d)."""
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.diff(np.append(starts, rows.data.shape[0]))
    out = _make(np.add.reduceat(rows.data, starts, axis=0), "segment_sum_rows")

    def backward(g):
        _accum(rows, np.repeat(g, counts, axis=0))

    return _record(out, (rows,), backward)


def scale_rows(x, s):
    """Multiply row i of a matrix by scalar s[i]."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows {x.shape} by {s.shape}")
    out = _make(x.data * s.data[:, None], "scale_rows")

    def backward(g):
        _accum(x, g * s.data[:, None])
        _accum(s, (g * x.data).sum(axis=1))

    return _record(out, (x, s), backward)


def masked_softmax_cols(w, avail):
    """Broadcast path scores w (P,) down columns and softmax over available
    paths per column: out[p, i] = softmax over {q : avail[q, i]} of w, or 0.

    Every column must have at least one available path.
    """
    avail = np.asarray(avail, dtype=bool)
    if w.ndim != 1 or avail.ndim != 2 or avail.shape[0] != w.shape[0]:
        raise ShapeError(f"masked_softmax_cols {w.shape} with avail {avail.shape}")
    if not avail.any(axis=0).all():
        raise DegenerateMaskError("a column has no available paths")
    logits = np.where(avail, w.data[:, None], -np.inf)
    m = logits.max(axis=0, keepdims=True)
    e = np.where(avail, np.exp(logits - m), 0.0)
    beta = e / e.sum(axis=0, keepdims=True)
    out = _make(beta, "masked_softmax_cols")

    def backward(g):
        inner = (g * beta).sum(axis=0, keepdims=True)
        _accum(w, (beta * (g - inner)).sum(axis=1))

    return _record(out, (w,), backward)


def dropout(x, rate, rng):
    """Inverted dropout driven by the supplied generator."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * keep, "dropout")

    def backward(g):
        _accum(x, g * keep)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# recurrent cell

def gru_cell(x, h_prev, p):
    """One GRU step: h = (1 - z) * h_prev + z * h_tilde.

    p carries wz/uz/bz, wr/ur/br, wh/uh/bh with x @ w and h @ u orientation.
    """
    z = sigmoid(linear2(x, p["wz"], h_prev, p["uz"], p["bz"]))
    r = sigmoid(linear2(x, p["wr"], h_prev, p["ur"], p["br"]))
    h_tilde = tanh(linear2(x, p["wh"], mul(r, h_prev), p["uh"], p["bh"]))
    one = Tensor(np.ones_like(z.data))
    return add(mul(sub(one, z), h_prev), mul(z, h_tilde))


# ---------------------------------------------------------------------------
# finite-difference oracle

class GradCheckReport:
    def __init__(self, max_rel_error, worst_coord, n_coords, passed):
        self.max_rel_error = max_rel_error
        self.worst_coord = worst_coord
        self.n_coords = n_coords
        self.passed = passed

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"<grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"over {self.n_coords} coords (worst at {self.worst_coord})>")


def grad_check(f, x, h=1e-5, tol=1e-4, max_coords=None, rng=None):
    """Compare the tape gradient of scalar f(x) against central differences.

    Checks every coordinate of x unless max_coords limits to a random subset.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    coords = np.arange(x.data.size)
    if max_coords is not None and max_coords < coords.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(coords.size, size=max_coords, replace=False)

    flat = x.data.reshape(-1)
    worst = (0.0, None)
    for k in coords:
        orig = flat[k]
        flat[k] = orig + h
        up = float(f(x).data)
        flat[k] = orig - h
        dn = float(f(x).data)
        flat[k] = orig
        numeric = (up - dn) / (2.0 * h)
        a = analytic.reshape(-1)[k]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        if rel > worst[0]:
            worst = (rel, int(k))
    return GradCheckReport(worst[0], worst[1], len(coords), worst[0] <= tol)
