"""Flat float64 tensors with taped reverse-mode differentiation.

A Tensor is an immutable ``(shape, flat row-major array('d'))`` pair.
Differentiable ops record their parents and a backward closure on the
result; ``backward`` replays the tape. Gradients live in plain arrays, not
Tensors, and never extend the tape (no higher-order derivatives here).

Public ops that can overflow check their output and raise
``NumericRangeError`` instead of letting NaN/inf propagate silently.
Backward passes are unchecked for speed; divergence surfaces at the next
forward or optimizer step.
"""

import math
from array import array
from functools import lru_cache

from .. import kernels
from ..errors import NumericRangeError


def _buf(n):
    return array("d", bytes(8 * n))


def _check(buf, op):
    if not kernels.all_finite(buf):
        raise NumericRangeError(f"non-finite values in output of {op}")


def _prod(shape):
    out = 1
    for s in shape:
        out *= s
    return out


class Tensor:
    """Immutable flat float64 tensor; may carry autodiff tape state."""

    __slots__ = ("shape", "data", "_parents", "_bwd")

    def __init__(self, shape, data, _parents=(), _bwd=None):
        shape = tuple(int(s) for s in shape)
        if isinstance(data, array):
            if data.typecode != "d":
                raise TypeError("tensor data must be array('d')")
        else:
            data = array("d", data)
        if len(data) != _prod(shape):
            raise ValueError(f"data length {len(data)} does not match shape {shape}")
        self.shape = shape
        self.data = data
        self._parents = _parents
        self._bwd = _bwd

    @classmethod
    def zeros(cls, shape):
        return cls(shape, _buf(_prod(shape)))

    @classmethod
    def full(cls, shape, value):
        n = _prod(shape)
        return cls(shape, array("d", [float(value)]) * n if n else _buf(0))

    @classmethod
    def scalar(cls, value):
        return cls((1,), array("d", [float(value)]))

    @property
    def size(self):
        return len(self.data)

    def item(self):
        if self.size != 1:
            raise ValueError(f"item() on tensor of size {self.size}")
        return self.data[0]

    def tolist(self):
        return list(self.data)

    def detach(self):
        """Same values, cut from the tape (shares the underlying buffer)."""
        return Tensor(self.shape, self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    out = _buf(a.size)
    kernels.vadd(a.data, b.data, out)
    _check(out, "add")
    return Tensor(a.shape, out, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    out = _buf(a.size)
    kernels.vsub(a.data, b.data, out)
    _check(out, "sub")

    def bwd(g):
        gb = _buf(len(g))
        kernels.vscale(g, -1.0, gb)
        return g, gb

    return Tensor(a.shape, out, (a, b), bwd)


def mul(a, b):
    _same_shape(a, b, "mul")
    out = _buf(a.size)
    kernels.vmul(a.data, b.data, out)
    _check(out, "mul")

    def bwd(g):
        ga = _buf(len(g))
        gb = _buf(len(g))
        kernels.vmul(g, b.data, ga)
        kernels.vmul(g, a.data, gb)
        return ga, gb

    return Tensor(a.shape, out, (a, b), bwd)


def scale(a, s):
    s = float(s)
    if not math.isfinite(s):
        raise ValueError("scale factor must be finite")
    out = _buf(a.size)
    kernels.vscale(a.data, s, out)
    _check(out, "scale")

    def bwd(g):
        ga = _buf(len(g))
        kernels.vscale(g, s, ga)
        return (ga,)

    return Tensor(a.shape, out, (a,), bwd)


def affine(x, w, b):
    """x[r, k] @ w[k, n] + b (bias broadcast over rows)."""
    if len(x.shape) != 2 or len(w.shape) != 2:
        raise ValueError("affine expects 2-D x and w")
    r, k = x.shape
    k2, n = w.shape
    if k != k2 or b.size != n:
        raise ValueError(f"affine: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = _buf(r * n)
    kernels.matmul(x.data, w.data, out, r, k, n)
    tiled = _buf(r * n)
    for i in range(r):
        tiled[i * n : (i + 1) * n] = b.data
    kernels.vadd(out, tiled, out)
    _check(out, "affine")

    def bwd(g):
        wt = _buf(k * n)
        kernels.transpose(w.data, wt, k, n)
        gx = _buf(r * k)
        kernels.matmul(g, wt, gx, r, n, k)
        xt = _buf(r * k)
        kernels.transpose(x.data, xt, r, k)
        gw = _buf(k * n)
        kernels.matmul(xt, g, gw, k, r, n)
        gb = _buf(n)
        kernels.colsum(g, gb, r, n)
        return gx, gw, gb

    return Tensor((r, n), out, (x, w, b), bwd)


def sigmoid(x):
    out = _buf(x.size)
    kernels.vsigmoid(x.data, out)

    def bwd(g):
        gx = _buf(len(g))
        kernels.vsigmoid_bwd(out, g, gx)
        return (gx,)

    return Tensor(x.shape, out, (x,), bwd)


def relu(x):
    out = _buf(x.size)
    kernels.vrelu(x.data, out)

    def bwd(g):
        gx = _buf(len(g))
        kernels.vrelu_bwd(x.data, g, gx)
        return (gx,)

    return Tensor(x.shape, out, (x,), bwd)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask tensor: entries are 0 or 1/(1-rate)."""
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    n = _prod(shape)
    u = rng.uniforms(n)
    out = _buf(n)
    kernels.dropout_from_uniform(u, rate, out)
    return Tensor(shape, out)


def sum_all(x):
    val = kernels.vsum(x.data)
    if not math.isfinite(val):
        raise NumericRangeError("non-finite values in output of sum_all")
    size = x.size

    def bwd(g):
        return (array("d", [g[0]]) * size,)

    return Tensor((1,), array("d", [val]), (x,), bwd)


def mean_all(x):
    size = x.size
    val = kernels.vsum(x.data) / size
    if not math.isfinite(val):
        raise NumericRangeError("non-finite values in output of mean_all")

    def bwd(g):
        return (array("d", [g[0] / size]) * size,)

    return Tensor((1,), array("d", [val]), (x,), bwd)


def mse(a, b):
    """Mean squared error over all entries, as a scalar tensor."""
    _same_shape(a, b, "mse")
    size = a.size
    d = _buf(size)
    kernels.vsub(a.data, b.data, d)
    sq = _buf(size)
    kernels.vmul(d, d, sq)
    val = kernels.vsum(sq) / size
    if not math.isfinite(val):
        raise NumericRangeError("non-finite values in output of mse")

    def bwd(g):
        ga = _buf(size)
        kernels.vscale(d, 2.0 * g[0] / size, ga)
        gb = _buf(size)
        kernels.vscale(ga, -1.0, gb)
        return ga, gb

    return Tensor((1,), array("d", [val]), (a, b), bwd)


def concat_rows(tensors):
    """Concatenate along axis 0 (1-D tensors concatenate end to end)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat_rows of nothing")
    rest = tensors[0].shape[1:]
    rows = 0
    for t in tensors:
        if t.shape[1:] != rest:
            raise ValueError("concat_rows: trailing dimensions differ")
        rows += t.shape[0]
    out = _buf(rows * _prod(rest))
    offsets = []
    pos = 0
    for t in tensors:
        out[pos : pos + t.size] = t.data
        offsets.append(pos)
        pos += t.size

    def bwd(g):
        return tuple(
            g[ofs : ofs + t.size] for ofs, t in zip(offsets, tensors)
        )

    return Tensor((rows,) + rest, out, tensors, bwd)


def hconcat(tensors):
    """Concatenate 2-D tensors along axis 1."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("hconcat of nothing")
    r = tensors[0].shape[0]
    widths = []
    for t in tensors:
        if len(t.shape) != 2 or t.shape[0] != r:
            raise ValueError("hconcat: all inputs must be 2-D with equal rows")
        widths.append(t.shape[1])
    n = sum(widths)
    out = _buf(r * n)
    for i in range(r):
        pos = i * n
        for t, w in zip(tensors, widths):
            out[pos : pos + w] = t.data[i * w : (i + 1) * w]
            pos += w

    def bwd(g):
        parts = [_buf(r * w) for w in widths]
        for i in range(r):
            pos = i * n
            for part, w in zip(parts, widths):
                part[i * w : (i + 1) * w] = g[pos : pos + w]
                pos += w
        return tuple(parts)

    return Tensor((r, n), out, tensors, bwd)


def slice_rows(x, lo, hi):
    """Rows lo:hi of a 2-D tensor."""
    if len(x.shape) != 2:
        raise ValueError("slice_rows expects a 2-D tensor")
    r, n = x.shape
    if not 0 <= lo < hi <= r:
        raise ValueError(f"slice_rows: bad range [{lo}, {hi}) for {r} rows")
    out = x.data[lo * n : hi * n]

    def bwd(g):
        gx = _buf(r * n)
        gx[lo * n : hi * n] = g
        return (gx,)

    return Tensor((hi - lo, n), out, (x,), bwd)


def tile_rows(v, r):
    """Stack r copies of a row vector (shape (n,) or (1, n)) into [r, n]."""
    n = v.size
    out = _buf(r * n)
    for i in range(r):
        out[i * n : (i + 1) * n] = v.data

    def bwd(g):
        gv = _buf(n)
        kernels.colsum(g, gv, r, n)
        return (gv,)

    return Tensor((r, n), out, (v,), bwd)


def mul_rowmask(x, mask):
    """Scale each row of a 2-D tensor by a constant per-row factor."""
    if len(x.shape) != 2:
        raise ValueError("mul_rowmask expects a 2-D tensor")
    r, n = x.shape
    mask = tuple(float(m) for m in mask)
    if len(mask) != r:
        raise ValueError(f"mul_rowmask: {len(mask)} factors for {r} rows")

    def apply(src):
        out = _buf(r * n)
        for i, s in enumerate(mask):
            if s == 0.0:
                continue
            row = src[i * n : (i + 1) * n]
            if s != 1.0:
                kernels.vscale(row, s, row)
            out[i * n : (i + 1) * n] = row
        return out

    return Tensor((r, n), apply(x.data), (x,), lambda g: (apply(g),))


@lru_cache(maxsize=512)
def _flat_row_idx(rows, n):
    idx = array("q", bytes(8 * len(rows) * n))
    pos = 0
    for i in rows:
        base = i * n
        for j in range(n):
            idx[pos] = base + j
            pos += 1
    return idx


@lru_cache(maxsize=512)
def _flat_col_idx(cols, r, n):
    w = len(cols)
    idx = array("q", bytes(8 * r * w))
    pos = 0
    for i in range(r):
        base = i * n
        for j in cols:
            idx[pos] = base + j
            pos += 1
    return idx


@lru_cache(maxsize=512)
def _block_repeat(b, k):
    return tuple(i for i in range(b) for _ in range(k))


def gather_rows(x, rows):
    """New 2-D tensor whose row i is x[rows[i]] (rows may repeat)."""
    if len(x.shape) != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    r, n = x.shape
    rows = tuple(int(i) for i in rows)
    if not rows:
        raise ValueError("gather_rows of no rows")
    for i in rows:
        if not 0 <= i < r:
            raise ValueError(f"gather_rows: row {i} out of range for {r} rows")
    idx = _flat_row_idx(rows, n)
    out = _buf(len(rows) * n)
    kernels.vgather(x.data, idx, out)

    def bwd(g):
        gx = _buf(r * n)
        kernels.vscatter_add(g, idx, gx)
        return (gx,)

    return Tensor((len(rows), n), out, (x,), bwd)


def select_cols(x, cols):
    """New 2-D tensor whose column j is x[:, cols[j]] (cols may repeat)."""
    if len(x.shape) != 2:
        raise ValueError("select_cols expects a 2-D tensor")
    r, n = x.shape
    cols = tuple(int(j) for j in cols)
    if not cols:
        raise ValueError("select_cols of no columns")
    for j in cols:
        if not 0 <= j < n:
            raise ValueError(f"select_cols: column {j} out of range for {n} columns")
    idx = _flat_col_idx(cols, r, n)
    out = _buf(r * len(cols))
    kernels.vgather(x.data, idx, out)

    def bwd(g):
        gx = _buf(r * n)
        kernels.vscatter_add(g, idx, gx)
        return (gx,)

    return Tensor((r, len(cols)), out, (x,), bwd)


def block_mean_rows(x, k):
    """Mean over consecutive blocks of k rows: [b*k, n] -> [b, n].

    Accumulates exactly like mean_rows (column sums over rows ascending,
    then one scale), so a single block reproduces mean_rows bit for bit.
    """
    if len(x.shape) != 2:
        raise ValueError("block_mean_rows expects a 2-D tensor")
    r, n = x.shape
    k = int(k)
    if k < 1 or r % k:
        raise ValueError(f"block_mean_rows: {r} rows do not split into blocks of {k}")
    b = r // k
    out = _buf(b * n)
    xm = memoryview(x.data)
    om = memoryview(out)
    for i in range(b):
        kernels.colsum(xm[i * k * n : (i + 1) * k * n], om[i * n : (i + 1) * n], k, n)
    kernels.vscale(out, 1.0 / k, out)
    _check(out, "block_mean_rows")

    def bwd(g):
        scaled = _buf(b * n)
        kernels.vscale(g, 1.0 / k, scaled)
        gx = _buf(r * n)
        kernels.vgather(scaled, _flat_row_idx(_block_repeat(b, k), n), gx)
        return (gx,)

    return Tensor((b, n), out, (x,), bwd)


def mean_rows(x):
    """Column means of a 2-D tensor, as shape [1, n]."""
    if len(x.shape) != 2:
        raise ValueError("mean_rows expects a 2-D tensor")
    r, n = x.shape
    out = _buf(n)
    kernels.colsum(x.data, out, r, n)
    kernels.vscale(out, 1.0 / r, out)
    _check(out, "mean_rows")

    def bwd(g):
        row = _buf(n)
        kernels.vscale(g, 1.0 / r, row)
        gx = _buf(r * n)
        for i in range(r):
            gx[i * n : (i + 1) * n] = row
        return (gx,)

    return Tensor((1, n), out, (x,), bwd)


def transpose2d(x):
    if len(x.shape) != 2:
        raise ValueError("transpose2d expects a 2-D tensor")
    m, n = x.shape
    out = _buf(m * n)
    kernels.transpose(x.data, out, m, n)

    def bwd(g):
        gx = _buf(m * n)
        kernels.transpose(g, gx, n, m)
        return (gx,)

    return Tensor((n, m), out, (x,), bwd)


def diff_cols(x):
    """Column-to-column differences of a 2-D tensor: y[i,j] = x[i,j+1] - x[i,j]."""
    if len(x.shape) != 2 or x.shape[1] < 2:
        raise ValueError("diff_cols expects a 2-D tensor with at least 2 columns")
    m, n = x.shape
    w = n - 1
    hi = _buf(m * w)
    lo = _buf(m * w)
    xd = x.data
    for i in range(m):
        hi[i * w : (i + 1) * w] = xd[i * n + 1 : (i + 1) * n]
        lo[i * w : (i + 1) * w] = xd[i * n : (i + 1) * n - 1]
    out = _buf(m * w)
    kernels.vsub(hi, lo, out)
    _check(out, "diff_cols")

    def bwd(g):
        gx = _buf(m * n)
        for i in range(m):
            base = i * n
            gbase = i * w
            gx[base] = -g[gbase]
            for j in range(1, w):
                gx[base + j] = g[gbase + j - 1] - g[gbase + j]
            gx[base + w] = g[gbase + w - 1]
        return (gx,)

    return Tensor((m, w), out, (x,), bwd)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if _prod(shape) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return Tensor(shape, x.data, (x,), lambda g: (g,))


def backward(root, wrt):
    """Gradients of a scalar tensor w.r.t. each tensor in ``wrt``.

    Returns a list of flat arrays aligned with ``wrt``; entries are None for
    tensors the root does not depend on.
    """
    if root.size != 1:
        raise ValueError("backward expects a scalar root")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): array("d", [1.0])}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._bwd is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                kernels.vadd(acc, pg, acc)
    return [grads.get(id(t)) for t in wrt]
