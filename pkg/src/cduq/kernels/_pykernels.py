"""Pure-Python kernel backend.

Reference implementation of the numeric hot loops. The compiled backend in
``_ckernels.pyx`` mirrors every loop here statement by statement; both must
produce bit-identical output, so accumulation order is part of the contract
(matmul sums over k ascending, column sums over rows ascending, vector sums
left to right). Do not "optimize" one side without the other.

All buffers are ``array('d')`` (or any mutable double sequence); shapes are
passed explicitly. Counter-based RNG: draw ``i`` of a stream is a pure
function of ``(seed, counter + i)`` via the SplitMix64 finalizer, so streams
can be replayed or split without shared state.
"""

import math

BACKEND_NAME = "python"

_M64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# 2**-53; multiplying a 53-bit integer by this is exact.
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi
_TINY = 5e-324


def u64_at(seed, counter):
    """Return the raw 64-bit draw at position ``counter`` of stream ``seed``."""
    z = (seed + ((counter + 1) * _GOLDEN & _M64)) & _M64
    z = (z ^ (z >> 30)) * _MIX1 & _M64
    z = (z ^ (z >> 27)) * _MIX2 & _M64
    return z ^ (z >> 31)


def unit_at(seed, counter):
    """Uniform double in [0, 1) at position ``counter`` (53 mantissa bits)."""
    return (u64_at(seed, counter) >> 11) * _INV53


def fill_uniform(out, seed, counter):
    for i in range(len(out)):
        out[i] = (u64_at(seed, counter + i) >> 11) * _INV53


def fill_gaussian(out, seed, counter):
    """Standard normals via Box-Muller; pair j consumes counters 2j, 2j+1."""
    n = len(out)
    pairs = (n + 1) // 2
    for j in range(pairs):
        u1 = (u64_at(seed, counter + 2 * j) >> 11) * _INV53
        if u1 == 0.0:
            u1 = _INV53
        u2 = (u64_at(seed, counter + 2 * j + 1) >> 11) * _INV53
        r = math.sqrt(-2.0 * math.log(u1))
        t = _TWO_PI * u2
        out[2 * j] = r * math.cos(t)
        if 2 * j + 1 < n:
            out[2 * j + 1] = r * math.sin(t)


def matmul(a, b, out, m, k, n):
    """out[m, n] = a[m, k] @ b[k, n]; accumulates over k ascending."""
    for i in range(m):
        ai = i * k
        oi = i * n
        for j in range(n):
            out[oi + j] = 0.0
        for kk in range(k):
            aik = a[ai + kk]
            bk = kk * n
            for j in range(n):
                out[oi + j] += aik * b[bk + j]


def transpose(a, out, m, n):
    """out[n, m] = a[m, n] transposed."""
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] = a[ai + j]


def colsum(a, out, m, n):
    """out[j] = sum_i a[i, j], rows ascending."""
    for j in range(n):
        out[j] = 0.0
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j] += a[ai + j]


def vgather(src, idx, out):
    """out[i] = src[idx[i]]; idx is an int64 buffer (array('q'))."""
    for i in range(len(out)):
        out[i] = src[idx[i]]


def vscatter_add(g, idx, out):
    """out[idx[i]] += g[i], i ascending; duplicate indices accumulate."""
    for i in range(len(g)):
        out[idx[i]] += g[i]


def vadd(a, b, out):
    for i in range(len(out)):
        out[i] = a[i] + b[i]


def vsub(a, b, out):
    for i in range(len(out)):
        out[i] = a[i] - b[i]


def vmul(a, b, out):
    for i in range(len(out)):
        out[i] = a[i] * b[i]


def vscale(a, s, out):
    for i in range(len(out)):
        out[i] = a[i] * s


def vsum(a):
    total = 0.0
    for i in range(len(a)):
        total += a[i]
    return total


def vsigmoid(x, out):
    """Numerically safe logistic; never returns exactly 0 (large positive
    inputs do saturate to 1.0 in double precision)."""
    for i in range(len(out)):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            if e == 0.0:
                e = _TINY
            out[i] = e / (1.0 + e)


def vsigmoid_bwd(y, g, out):
    """Gradient through the logistic given its output y: g * y * (1 - y)."""
    for i in range(len(out)):
        out[i] = g[i] * y[i] * (1.0 - y[i])


def vrelu(x, out):
    for i in range(len(out)):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def vrelu_bwd(x, g, out):
    for i in range(len(out)):
        out[i] = g[i] if x[i] > 0.0 else 0.0


def dropout_from_uniform(u, rate, out):
    """Inverted-dropout mask from uniforms: keep with prob 1-rate, scaled."""
    scale = 1.0 / (1.0 - rate)
    for i in range(len(out)):
        out[i] = scale if u[i] >= rate else 0.0


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay, out):
    """One Adam step with decoupled weight decay; m and v updated in place."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(len(out)):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        step = (mi / bc1) / (math.sqrt(vi / bc2) + eps)
        out[i] = p[i] - lr * (step + weight_decay * p[i])


def all_finite(a):
    for i in range(len(a)):
        if not math.isfinite(a[i]):
            return False
    return True
