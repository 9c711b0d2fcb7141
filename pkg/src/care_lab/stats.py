"""Welch's unequal-variance t-test with a quadrature-based Student-t tail."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
_XK = np.array([
    -0.991455371120812639206854697526329, -0.949107912342758524526189684047851,
    -0.864864423359769072789712788640926, -0.741531185599394439863864773280788,
    -0.586087235467691130294144845693013, -0.405845151377397166906606412076961,
    -0.207784955007898467600689403773245, 0.0,
    0.207784955007898467600689403773245, 0.405845151377397166906606412076961,
    0.586087235467691130294144845693013, 0.741531185599394439863864773280788,
    0.864864423359769072789712788640926, 0.949107912342758524526189684047851,
    0.991455371120812639206854697526329,
])
_WK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
    0.204432940075298892414161999234649, 0.190350578064785409913256402421014,
    0.169004726639267902826583426598550, 0.140653259715525918745189590510238,
    0.104790010322250183839876322541518, 0.063092092629978553290700663189204,
    0.022935322010529224963732008058970,
])
# Gauss weights for the 7 nodes at odd Kronrod positions.
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
    0.381830050505118944950369775488975, 0.279705391489276667901467771423780,
    0.129484966168869693270611432679082,
])


def _gk15(f: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> tuple[float, float]:
    c, h = 0.5 * (a + b), 0.5 * (b - a)
    y = f(c + h * _XK)
    kron = h * float(np.dot(_WK, y))
    gauss = h * float(np.dot(_WG, y[1::2]))
    return kron, abs(kron - gauss)


def adaptive_quad(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                  tol: float = 1e-13, max_intervals: int = 2000) -> tuple[float, float]:
    """Globally adaptive Gauss-Kronrod: bisect the worst interval until the error sum < tol.

    Returns (integral, estimated absolute error). ``f`` must accept an array.
    """
    if a == b:
        return 0.0, 0.0
    intervals = [(a, b, *_gk15(f, a, b))]
    while True:
        total = math.fsum(iv[2] for iv in intervals)
        err = math.fsum(iv[3] for iv in intervals)
        if err <= tol or len(intervals) >= max_intervals:
            return total, err
        worst = max(range(len(intervals)), key=lambda i: intervals[i][3])
        lo, hi, _, _ = intervals.pop(worst)
        mid = 0.5 * (lo + hi)
        intervals.append((lo, mid, *_gk15(f, lo, mid)))
        intervals.append((mid, hi, *_gk15(f, mid, hi)))


def _lbeta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _lower_beta_integral(x: float, a: float, b: float) -> float:
    """int_0^x t^(a-1) (1-t)^(b-1) dt via u = t^a, which removes the endpoint singularity at 0."""
    if x <= 0.0:
        return 0.0
    upper = x ** a

    def integrand(u: np.ndarray) -> np.ndarray:
        t = np.power(u, 1.0 / a)
        return np.power(1.0 - t, b - 1.0)

    val, _ = adaptive_quad(integrand, 0.0, upper)
    return val / a


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) by adaptive numeric integration; uses the reflection for x > 1/2."""
    if not (a > 0.0 and b > 0.0):
        raise ValueError(f"incomplete beta needs a, b > 0, got {a}, {b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    norm = math.exp(-_lbeta(a, b))
    if x <= 0.5:
        return min(1.0, norm * _lower_beta_integral(x, a, b))
    return max(0.0, 1.0 - norm * _lower_beta_integral(1.0 - x, b, a))


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)


@dataclass(frozen=True)
class WelchResult:
    t: float
    p: float
    df: float
    significant: bool
    degenerate: bool = False  # both groups had zero variance


def welch_ttest(a: Sequence[float], b: Sequence[float], p_threshold: float = 0.05) -> WelchResult:
    """Two-tailed Welch t-test for equal-size samples."""
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if xa.ndim != 1 or xb.ndim != 1 or xa.size != xb.size:
        raise ValueError(f"welch_ttest needs equal-size 1-D samples, got {xa.shape} and {xb.shape}")
    n = xa.size
    if n < 2:
        raise ValueError("welch_ttest needs at least 2 samples per group")
    ma, mb = float(xa.mean()), float(xb.mean())
    va, vb = float(xa.var(ddof=1)) / n, float(xb.var(ddof=1)) / n
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return WelchResult(0.0, 1.0, float("nan"), False, degenerate=True)
        t = math.copysign(math.inf, ma - mb)
        return WelchResult(t, 0.0, float("nan"), 0.0 < p_threshold, degenerate=True)
    t = (ma - mb) / math.sqrt(se2)
    # written in variance shares so tiny variances cannot underflow to 0/0
    ra, rb = va / se2, vb / se2
    df = (n - 1) / (ra * ra + rb * rb)
    p = student_t_two_sided_p(t, df)
    return WelchResult(t, p, df, p < p_threshold)
