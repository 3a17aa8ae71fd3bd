"""Student-t distribution functions via the regularized incomplete beta."""

from __future__ import annotations

import math

from .errors import NumericError, UsageError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, xc: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``xc`` may carry an accurately computed ``1 - x`` when x is close to 1.
    """
    if a <= 0 or b <= 0:
        raise UsageError(f"betainc needs a, b > 0, got a={a}, b={b}")
    if xc is None:
        xc = 1.0 - x
    if not 0.0 <= x <= 1.0:
        raise UsageError(f"betainc needs 0 <= x <= 1, got {x}")
    if x == 0.0:
        return 0.0
    if xc == 0.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log(xc) + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise UsageError(f"t distribution needs df >= 1, got {df}")
    if math.isnan(t):
        raise NumericError("t statistic is NaN")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    two_tail = betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))
    return 0.5 * two_tail if t > 0 else 1.0 - 0.5 * two_tail


def t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    return t_sf(-t, df)
