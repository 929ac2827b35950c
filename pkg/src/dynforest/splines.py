"""Natural cubic spline basis, linear beyond the boundary knots.

The construction follows the usual B-spline route: a cubic B-spline basis on
the augmented knot sequence is projected onto the null space of the two
second-derivative constraints at the boundary knots.
"""
from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import DataValidationError


def _check_knots(knots, boundary_knots):
    knots = np.asarray(knots if knots is not None else [], dtype=float).ravel()
    lo, hi = (float(b) for b in boundary_knots)
    if not lo < hi:
        raise DataValidationError(f"boundary knots must be increasing, got {boundary_knots}")
    if knots.size and (np.any(np.diff(knots) <= 0) or knots[0] <= lo or knots[-1] >= hi):
        raise DataValidationError("internal knots must be strictly increasing inside the boundary")
    return knots, lo, hi


def natural_spline_basis(x, knots, boundary_knots, intercept=False):
    """Evaluate a natural cubic spline basis at ``x``.

    With ``k`` internal knots the basis has ``k + 1`` columns, or ``k + 2``
    when ``intercept`` is True.  Outside ``boundary_knots`` each column is
    continued linearly from its value and slope at the nearest boundary.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    knots, lo, hi = _check_knots(knots, boundary_knots)
    t = np.concatenate([[lo] * 4, knots, [hi] * 4])
    nb = len(t) - 4
    spl = BSpline(t, np.eye(nb), 3, extrapolate=False)

    basis = np.empty((x.size, nb))
    inside = (x >= lo) & (x <= hi)
    if inside.any():
        basis[inside] = spl(x[inside])
    for side, mask in ((lo, x < lo), (hi, x > hi)):
        if mask.any():
            val = spl(np.array([side]))[0]
            slope = spl(np.array([side]), nu=1)[0]
            basis[mask] = val + np.outer(x[mask] - side, slope)

    const = spl(np.array([lo, hi]), nu=2)
    if not intercept:
        basis = basis[:, 1:]
        const = const[:, 1:]
    q, _ = np.linalg.qr(const.T, mode="complete")
    return basis @ q[:, 2:]


def default_knots(times, n_internal):
    """Quantile internal knots and min/max boundary knots of pooled times."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise DataValidationError("cannot place knots without measurement times")
    lo, hi = float(times.min()), float(times.max())
    if not lo < hi:
        raise DataValidationError("measurement times span a single point; cannot place knots")
    if n_internal <= 0:
        return (), (lo, hi)
    probs = np.arange(1, n_internal + 1) / (n_internal + 1)
    knots = np.quantile(times, probs)
    knots = np.unique(knots[(knots > lo) & (knots < hi)])
    if len(knots) != n_internal:
        raise DataValidationError("pooled measurement times too concentrated for requested knots")
    return tuple(float(k) for k in knots), (lo, hi)
