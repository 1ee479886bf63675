"""Closed-form per-sample controllers: upweighting ``u``, selection ``v``,
and the Lambert-W threshold that links ``lambda`` and ``beta`` to
``p_critical``.
"""

from __future__ import annotations

import math

import numpy as np

from sebra.errors import DomainError

INV_E = math.exp(-1.0)
# Slack for inputs that should sit exactly on the branch point but were
# rounded just past it (e.g. x * exp(x) at x = -1).
_BRANCH_SLACK = 4e-16


def lambert_w0(x: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Principal branch of Lambert W on [-1/e, 0], by Halley iteration.

    Returns ``w`` in [-1, 0] with ``w * exp(w) == x``.
    """
    x = float(x)
    if not (-INV_E - _BRANCH_SLACK <= x <= 0.0):
        raise DomainError(f"lambert_w0 is real-valued on [-1/e, 0] only, got {x!r}")
    if x == 0.0:
        return 0.0
    if x <= -INV_E:
        return -1.0
    q = 2.0 * (math.e * x + 1.0)
    if q < 0.25:
        # Branch-point series; Halley from e*x crawls when f'(w) ~ 0.
        p = math.sqrt(q)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    else:
        w = math.e * x
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= dw
        if abs(dw) <= tol * (1.0 + abs(w)):
            break
    return min(0.0, max(-1.0, w))


def p_critical_from(lam: float, beta: float) -> float:
    """Threshold on p_y above which a sample counts as learned."""
    if not beta > 0:
        raise DomainError("beta must be positive")
    if not lam > 0:
        raise DomainError("lambda must be positive")
    if lam > beta * INV_E * (1.0 + 1e-15):
        raise DomainError(f"lambda={lam} exceeds beta/e={beta * INV_E}: no real threshold")
    w = lambert_w0(max(-lam / beta, -INV_E))
    return math.exp(beta * w)


def lambda_from_p_critical(p_c: float, beta: float) -> float:
    if not beta > 0:
        raise DomainError("beta must be positive")
    if not math.exp(-beta) < p_c < 1.0:
        raise DomainError(f"p_critical must lie in (exp(-beta), 1), got {p_c}")
    z = p_c ** (1.0 / beta)
    return -beta * z * math.log(z)


def upweight(p_y, beta: float):
    """Optimal weight u* = p_y ** (1 / beta)."""
    return np.power(p_y, 1.0 / beta)


def conserved_value(u, loss, beta: float):
    u = np.asarray(u, dtype=float)
    return u * loss + beta * (u * np.log(u) - u)


def select(p_y, v_prev, p_critical: float):
    """Optimal selection variable on the domain {0, v_prev}."""
    keep = np.asarray(p_y) <= p_critical
    out = np.where(np.asarray(v_prev, dtype=bool) & keep, 1, 0)
    return int(out) if out.ndim == 0 else out
