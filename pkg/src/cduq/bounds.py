"""Coverage-gap bounds and their numeric oracles.

Beta distributions here are parameterized as posteriors of ``n`` binary
trials with ``a`` successes: Beta(a, n - a), valid for 0 < a < n. Two
calibration windows that differ in ``k`` of ``n`` observations induce such
a pair with ``|a1 - a2| <= k``, and the coverage gap of a conformal set is
at most the total variation between the windows' score distributions.

Closed forms:

- ``hellinger_beta``: squared Hellinger distance between same-n Betas via
  log-Beta functions, H^2 = 1 - B((a1+a2)/2, n-(a1+a2)/2) / sqrt(B1 B2).
- ``beta_gap_bound(n, k)``: sqrt(2 - 2 ((n-k)/(n+k))^(k/2)), the
  a-independent bound sqrt(2) * H for a k-observation swap.
- ``changepoint_gap_bound(rho, k)``: rho^k, the stale mass that rank-decay
  weights leave on pre-changepoint points k steps after a change.

Numeric oracles integrate with adaptive Simpson under the substitution
x = (1 - cos(pi u)) / 2, whose vanishing endpoint Jacobian tames the Beta
density's edge behavior (exact for shape parameters > 1/2; below that the
integrand is singular and convergence is not guaranteed).
"""

import math
from dataclasses import dataclass

from .errors import QuadratureError

# Lanczos approximation, g = 7, 9 terms. Relative error below 1e-13 for
# positive arguments, comfortably inside the 1e-10 contract.
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


def log_gamma(x):
    """Natural log of the Gamma function for x > 0."""
    if not x > 0.0:
        raise ValueError(f"log_gamma requires x > 0, got {x}")
    z = x - 1.0
    acc = _LANCZOS[0]
    for i in range(1, len(_LANCZOS)):
        acc += _LANCZOS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (z + 0.5) * math.log(t) - t + math.log(acc)


def log_beta_fn(a, b):
    """log B(a, b) for a, b > 0."""
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


@dataclass(frozen=True)
class BetaSpec:
    """Beta(a, n - a): posterior of n binary trials with a successes."""

    n: float
    a: float

    def __post_init__(self):
        if not (self.n > 0 and 0.0 < self.a < self.n):
            raise ValueError(f"need 0 < a < n, got a={self.a}, n={self.n}")

    @property
    def alpha(self):
        return self.a

    @property
    def beta(self):
        return self.n - self.a

    def log_density(self, x):
        """log pdf at interior x in (0, 1)."""
        return (
            (self.alpha - 1.0) * math.log(x)
            + (self.beta - 1.0) * math.log1p(-x)
            - log_beta_fn(self.alpha, self.beta)
        )


def hellinger_beta(n, a1, a2):
    """Closed-form Hellinger distance between Beta(a1, n-a1) and Beta(a2, n-a2)."""
    p = BetaSpec(n, a1)
    q = BetaSpec(n, a2)
    mid = 0.5 * (a1 + a2)
    log_mid = log_beta_fn(mid, n - mid)
    h2 = 1.0 - math.exp(log_mid - 0.5 * (log_beta_fn(p.alpha, p.beta) + log_beta_fn(q.alpha, q.beta)))
    return math.sqrt(max(h2, 0.0))


def _adaptive_simpson(f, a, b, tol, max_depth=48):
    """Adaptive Simpson with Richardson correction; raises on non-convergence."""

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) * (f0 + 4.0 * f1 + f2) / 6.0

    def recurse(x0, x2, f0, f1, f2, whole, tol, depth):
        xm = 0.5 * (x0 + x2)
        xl = 0.5 * (x0 + xm)
        xr = 0.5 * (xm + x2)
        fl = f(xl)
        fr = f(xr)
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        err = left + right - whole
        if abs(err) <= 15.0 * tol:
            return left + right + err / 15.0
        if depth >= max_depth:
            raise QuadratureError(achieved=abs(err) / 15.0, requested=tol)
        half = 0.5 * tol
        return (
            recurse(x0, xm, f0, fl, f1, left, half, depth + 1)
            + recurse(xm, x2, f1, fr, f2, right, half, depth + 1)
        )

    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    return recurse(a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, 0)


def _u_to_x(u):
    return 0.5 * (1.0 - math.cos(math.pi * u))


def _x_to_u(x):
    return math.acos(1.0 - 2.0 * x) / math.pi


def _jacobian(u):
    return 0.5 * math.pi * math.sin(math.pi * u)


def _feature_cuts(spec):
    """u-space cut points bracketing the density's mass.

    Sharp Beta densities concentrate in a few standard deviations around
    the mean; without cuts there, adaptive quadrature over a wide piece can
    sample only the flat tails, agree on zero, and converge to it.
    """
    a, b = spec.alpha, spec.beta
    s = a + b
    mean = a / s
    sd = math.sqrt(a * b / (s * s * (s + 1.0)))
    cuts = []
    for c in (-12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0):
        x = mean + c * sd
        if 0.0 < x < 1.0:
            cuts.append(_x_to_u(x))
    return cuts


def _density_times_jacobian(spec, u):
    if u <= 0.0 or u >= 1.0:
        return 0.0
    x = _u_to_x(u)
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return math.exp(spec.log_density(x)) * _jacobian(u)


def _log_density_ratio_roots(p, q):
    """Interior roots of log p - log q in u-space (at most two: the ratio's
    log is A ln x + B ln(1-x) + C, which has at most one interior extremum)."""
    big_a = p.alpha - q.alpha
    big_b = p.beta - q.beta
    big_c = log_beta_fn(q.alpha, q.beta) - log_beta_fn(p.alpha, p.beta)

    def diff(u):
        x = _u_to_x(u)
        return big_a * math.log(x) + big_b * math.log1p(-x) + big_c

    if big_a == 0.0 and big_b == 0.0:
        return []
    grid = 512
    eps = 1.0 / (grid * 16)
    us = [eps + (1.0 - 2.0 * eps) * i / grid for i in range(grid + 1)]
    vals = [diff(u) for u in us]
    roots = []
    for i in range(grid):
        v0, v1 = vals[i], vals[i + 1]
        if v0 == 0.0:
            roots.append(us[i])
            continue
        if v0 * v1 < 0.0:
            lo, hi = us[i], us[i + 1]
            flo = v0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                fm = diff(mid)
                if fm == 0.0:
                    lo = hi = mid
                    break
                if flo * fm < 0.0:
                    hi = mid
                else:
                    lo, flo = mid, fm
            roots.append(0.5 * (lo + hi))
    return roots


def tv_numeric(p, q, tol=1e-8):
    """Total variation distance between two Beta posteriors by quadrature.

    Splits [0, 1] at the sign changes of p - q so each piece has constant
    sign, integrates p - q per piece, and halves the absolute sum. Absolute
    error is below ``tol`` for shape parameters >= 1/2.
    """
    if p == q:
        return 0.0
    roots = _log_density_ratio_roots(p, q)
    # only roots are piece boundaries; feature cuts subdivide within pieces
    features = sorted(_feature_cuts(p) + _feature_cuts(q))
    total = 0.0
    piece_edges = [0.0] + sorted(roots) + [1.0]
    seg_tol = tol / max(len(piece_edges) - 1, 1)

    def integrand(u):
        return _density_times_jacobian(p, u) - _density_times_jacobian(q, u)

    for lo, hi in zip(piece_edges, piece_edges[1:]):
        if hi - lo < 1e-15:
            continue
        inner = [lo] + [u for u in features if lo < u < hi] + [hi]
        sub_tol = seg_tol / (len(inner) - 1)
        piece = 0.0
        for a, b in zip(inner, inner[1:]):
            if b - a < 1e-15:
                continue
            piece += _adaptive_simpson(integrand, a, b, sub_tol)
        total += abs(piece)
    return min(0.5 * total, 1.0)


def hellinger_numeric(p, q, tol=1e-9):
    """Hellinger distance by quadrature of the Bhattacharyya coefficient."""
    if p == q:
        return 0.0

    def integrand(u):
        if u <= 0.0 or u >= 1.0:
            return 0.0
        x = _u_to_x(u)
        if x <= 0.0 or x >= 1.0:
            return 0.0
        return math.exp(0.5 * (p.log_density(x) + q.log_density(x))) * _jacobian(u)

    cuts = [0.0] + sorted(_feature_cuts(p) + _feature_cuts(q)) + [1.0]
    seg_tol = tol / (len(cuts) - 1)
    bc = 0.0
    for lo, hi in zip(cuts, cuts[1:]):
        if hi - lo < 1e-15:
            continue
        bc += _adaptive_simpson(integrand, lo, hi, seg_tol)
    return math.sqrt(min(max(1.0 - bc, 0.0), 1.0))


def hellinger_to_tv(h):
    """Upper bound TV <= sqrt(2) * H (valid for H in [0, 1])."""
    if not 0.0 <= h <= 1.0 + 1e-12:
        raise ValueError(f"Hellinger distance must be in [0, 1], got {h}")
    return math.sqrt(2.0) * h


def changepoint_gap_bound(rho, k):
    """Stale-mass bound rho^k for rank-decay weights k steps after a change."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    if k < 0:
        raise ValueError("k must be non-negative")
    return rho ** k


def beta_gap_bound(n, k):
    """Distribution-shift bound sqrt(2 - 2 ((n-k)/(n+k))^(k/2)).

    Bounds the TV between Beta posteriors of two n-trial windows that
    disagree on at most k observations, independently of the base rate.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= k < n:
        raise ValueError("need 0 <= k < n")
    if k == 0:
        return 0.0
    return math.sqrt(2.0 - 2.0 * ((n - k) / (n + k)) ** (k / 2.0))


def weight_sum_lemma_check(weights, scores, alpha, tol=1e-12):
    """Check sum_k w_k [sum_i w_i 1(s_i >= s_k) <= alpha] <= alpha.

    Returns (lhs, holds). Weights must be a probability vector; this is the
    selection lemma behind the weighted quantile's validity.
    """
    if len(weights) != len(scores):
        raise ValueError("weights and scores lengths differ")
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    lhs = 0.0
    for k, sk in enumerate(scores):
        tail = math.fsum(w for w, s in zip(weights, scores) if s >= sk)
        if tail <= alpha:
            lhs += weights[k]
    return lhs, lhs <= alpha + tol


def empirical_gap(scores, weights, segment_ids, bins=64):
    """Estimate the weighted coverage gap from segment-labelled scores.

    Builds one ``bins``-bin histogram of scores on [0, 1] per segment
    label, takes the test distribution to be the final segment's (the
    freshest data), and returns sum_i w_i * TV_hist(segment_i, final).
    Scores outside [0, 1] fall into the edge bins. With a single segment
    this is exactly 0.
    """
    n = len(scores)
    if not (n == len(weights) == len(segment_ids)):
        raise ValueError("scores, weights and segment_ids lengths differ")
    if n == 0:
        raise ValueError("need at least one score")
    if bins < 1:
        raise ValueError("need at least one bin")
    hists = {}
    counts = {}
    for s, seg in zip(scores, segment_ids):
        h = hists.get(seg)
        if h is None:
            h = hists[seg] = [0.0] * bins
            counts[seg] = 0
        b = int(s * bins)
        h[min(max(b, 0), bins - 1)] += 1.0
        counts[seg] += 1
    for seg, h in hists.items():
        c = counts[seg]
        for b in range(bins):
            h[b] /= c
    ref = hists[segment_ids[-1]]
    tv = {
        seg: 0.5 * math.fsum(abs(h[b] - ref[b]) for b in range(bins))
        for seg, h in hists.items()
    }
    return math.fsum(w * tv[seg] for w, seg in zip(weights, segment_ids))


def coverage_lower_bound(alpha, gap):
    """max(0, 1 - alpha - gap)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if gap < 0.0:
        raise ValueError("gap must be non-negative")
    return max(0.0, 1.0 - alpha - gap)


def bounds_grid(ns, ks, fracs=(0.25, 0.5, 0.75), tol=1e-8):
    """Sweep the Beta-pair grid; yields one row dict per (n, k, a1, a2) cell.

    For each n, k: a1 in {frac * n} and a2 = a1 +- k (cells whose a2
    leaves (0, n) are skipped). ``holds`` is tv <= bound + 1e-8.
    """
    for frac in fracs:
        if not 0.0 < frac < 1.0:
            raise ValueError("a1 fractions must lie in (0, 1)")
    for n in ns:
        for k in ks:
            bound = beta_gap_bound(n, k)
            for frac in fracs:
                a1 = n * frac
                deltas = (k,) if k == 0 else (-k, k)
                for delta in deltas:
                    a2 = a1 + delta
                    if not 0.0 < a2 < n:
                        continue
                    p = BetaSpec(n, a1)
                    q = BetaSpec(n, a2)
                    tv = tv_numeric(p, q, tol)
                    h = hellinger_beta(n, a1, a2)
                    yield {
                        "n": n,
                        "k": k,
                        "a1": a1,
                        "a2": a2,
                        "tv_numeric": tv,
                        "hellinger": h,
                        "beta_bound": bound,
                        "holds": tv <= bound + 1e-8,
                    }
