# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled kernel backend.

Statement-by-statement mirror of ``_pykernels.py``. Loop structure and
accumulation order are identical on purpose: the two backends must agree
bit for bit (no reassociation, no FMA, same libm). See the module docstring
there for the contract.
"""

from libc.math cimport cos, exp, isfinite, log, pow, sin, sqrt

BACKEND_NAME = "c"

cdef extern from "math.h":
    double M_PI

cdef unsigned long long _GOLDEN = 0x9E3779B97F4A7C15ULL
cdef unsigned long long _MIX1 = 0xBF58476D1CE4E5B9ULL
cdef unsigned long long _MIX2 = 0x94D049BB133111EBULL
cdef double _INV53 = 1.0 / 9007199254740992.0
cdef double _TWO_PI = 2.0 * M_PI
cdef double _TINY = 5e-324


cdef inline unsigned long long _mix(unsigned long long seed, unsigned long long counter):
    cdef unsigned long long z = seed + (counter + 1ULL) * _GOLDEN
    z = (z ^ (z >> 30)) * _MIX1
    z = (z ^ (z >> 27)) * _MIX2
    return z ^ (z >> 31)


def u64_at(seed, counter):
    """Return the raw 64-bit draw at position ``counter`` of stream ``seed``."""
    return _mix(<unsigned long long> seed, <unsigned long long> counter)


def unit_at(seed, counter):
    """Uniform double in [0, 1) at position ``counter`` (53 mantissa bits)."""
    return <double> (_mix(<unsigned long long> seed, <unsigned long long> counter) >> 11) * _INV53


def fill_uniform(double[::1] out, seed, counter):
    cdef unsigned long long s = <unsigned long long> seed
    cdef unsigned long long c = <unsigned long long> counter
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = <double> (_mix(s, c + <unsigned long long> i) >> 11) * _INV53


def fill_gaussian(double[::1] out, seed, counter):
    """Standard normals via Box-Muller; pair j consumes counters 2j, 2j+1."""
    cdef unsigned long long s = <unsigned long long> seed
    cdef unsigned long long c = <unsigned long long> counter
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t pairs = (n + 1) // 2
    cdef Py_ssize_t j
    cdef double u1, u2, r, t
    for j in range(pairs):
        u1 = <double> (_mix(s, c + 2ULL * <unsigned long long> j) >> 11) * _INV53
        if u1 == 0.0:
            u1 = _INV53
        u2 = <double> (_mix(s, c + 2ULL * <unsigned long long> j + 1ULL) >> 11) * _INV53
        r = sqrt(-2.0 * log(u1))
        t = _TWO_PI * u2
        out[2 * j] = r * cos(t)
        if 2 * j + 1 < n:
            out[2 * j + 1] = r * sin(t)


def matmul(double[::1] a, double[::1] b, double[::1] out,
           Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    """out[m, n] = a[m, k] @ b[k, n]; accumulates over k ascending."""
    cdef Py_ssize_t i, j, kk, ai, oi, bk
    cdef double aik
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


def transpose(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    """out[n, m] = a[m, n] transposed."""
    cdef Py_ssize_t i, j, ai
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j * m + i] = a[ai + j]


def colsum(double[::1] a, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    """out[j] = sum_i a[i, j], rows ascending."""
    cdef Py_ssize_t i, j, ai
    for j in range(n):
        out[j] = 0.0
    for i in range(m):
        ai = i * n
        for j in range(n):
            out[j] += a[ai + j]


def vgather(double[::1] src, long long[::1] idx, double[::1] out):
    """out[i] = src[idx[i]]; idx is an int64 buffer (array('q'))."""
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = src[idx[i]]


def vscatter_add(double[::1] g, long long[::1] idx, double[::1] out):
    """out[idx[i]] += g[i], i ascending; duplicate indices accumulate."""
    cdef Py_ssize_t i
    for i in range(g.shape[0]):
        out[idx[i]] += g[i]


def vadd(double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = a[i] + b[i]


def vsub(double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = a[i] - b[i]


def vmul(double[::1] a, double[::1] b, double[::1] out):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = a[i] * b[i]


def vscale(double[::1] a, double s, double[::1] out):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = a[i] * s


def vsum(double[::1] a):
    cdef double total = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        total += a[i]
    return total


def vsigmoid(double[::1] x, double[::1] out):
    """Numerically safe logistic; never returns exactly 0 (large positive
    inputs do saturate to 1.0 in double precision)."""
    cdef Py_ssize_t i
    cdef double v, e
    for i in range(out.shape[0]):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            if e == 0.0:
                e = _TINY
            out[i] = e / (1.0 + e)


def vsigmoid_bwd(double[::1] y, double[::1] g, double[::1] out):
    """Gradient through the logistic given its output y: g * y * (1 - y)."""
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = g[i] * y[i] * (1.0 - y[i])


def vrelu(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    cdef double v
    for i in range(out.shape[0]):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def vrelu_bwd(double[::1] x, double[::1] g, double[::1] out):
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = g[i] if x[i] > 0.0 else 0.0


def dropout_from_uniform(double[::1] u, double rate, double[::1] out):
    """Inverted-dropout mask from uniforms: keep with prob 1-rate, scaled."""
    cdef double scale = 1.0 / (1.0 - rate)
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = scale if u[i] >= rate else 0.0


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                int t, double lr, double beta1, double beta2, double eps,
                double weight_decay, double[::1] out):
    """One Adam step with decoupled weight decay; m and v updated in place."""
    cdef double bc1 = 1.0 - pow(beta1, <double> t)
    cdef double bc2 = 1.0 - pow(beta2, <double> t)
    cdef Py_ssize_t i
    cdef double gi, mi, vi, step
    for i in range(out.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        step = (mi / bc1) / (sqrt(vi / bc2) + eps)
        out[i] = p[i] - lr * (step + weight_decay * p[i])


def all_finite(double[::1] a):
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        if not isfinite(a[i]):
            return False
    return True
