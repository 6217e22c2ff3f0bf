"""Bjontegaard deltas between two rate-distortion curves.

BD-rate: fit log-rate as a cubic in PSNR for both curves, integrate the
difference over the overlapping PSNR interval, exponentiate the mean to get
an average rate ratio, report it as a percentage.  BD-PSNR swaps the axes.
Curves whose quality ranges do not overlap have no meaningful delta; those
return None ("undefined").

Cubic least squares breaks down when abscissae repeat or the fit is rank
deficient; in that case a monotone piecewise-cubic-Hermite interpolant
replaces the polynomial.
"""

from __future__ import annotations

import math
import warnings
from typing import Optional

import numpy as np
from numpy.exceptions import RankWarning
from scipy.interpolate import PchipInterpolator

MIN_POINTS = 4
_MIN_OVERLAP = 1e-9


def _pairs(curve, metric: str):
    rates, quals = [], []
    for pt in curve:
        if hasattr(pt, "bpp"):
            rate, qual = pt.bpp, getattr(pt, metric)
        else:
            rate, qual = pt
        if qual is None or not math.isfinite(qual):
            continue  # infinite-PSNR (identical) points carry no curve information
        rates.append(float(rate))
        quals.append(float(qual))
    if len(rates) < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} finite points, got {len(rates)}")
    if min(rates) <= 0:
        raise ValueError("bitrates must be positive")
    return np.asarray(rates), np.asarray(quals)


def _integrator(x: np.ndarray, y: np.ndarray):
    """Definite-integral function of a fit of y over x."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    if (np.diff(xs) < _MIN_OVERLAP).any():
        return _pchip_integrator(xs, ys)
    with warnings.catch_warnings():
        warnings.simplefilter("error", RankWarning)
        try:
            poly = np.polynomial.Polynomial.fit(xs, ys, 3)
        except RankWarning:
            return _pchip_integrator(xs, ys)
    anti = poly.integ()
    return lambda a, b: anti(b) - anti(a)


def _pchip_integrator(xs: np.ndarray, ys: np.ndarray):
    keep = np.concatenate([[True], np.diff(xs) >= _MIN_OVERLAP])
    f = PchipInterpolator(xs[keep], ys[keep], extrapolate=True)
    return lambda a, b: f.integrate(a, b)


def _mean_curve_gap(x_a, y_a, x_b, y_b) -> Optional[float]:
    lo = max(x_a.min(), x_b.min())
    hi = min(x_a.max(), x_b.max())
    if hi - lo < _MIN_OVERLAP:
        return None
    int_a = _integrator(x_a, y_a)
    int_b = _integrator(x_b, y_b)
    return (int_b(lo, hi) - int_a(lo, hi)) / (hi - lo)


def compute_bd_rate(curve_a, curve_b, metric: str = "d1_psnr") -> Optional[float]:
    """Average rate change of curve_b relative to curve_a, in percent.

    +100 means curve_b spends twice the rate of curve_a at equal quality.
    None when the quality ranges do not overlap.
    """
    rates_a, quals_a = _pairs(curve_a, metric)
    rates_b, quals_b = _pairs(curve_b, metric)
    gap = _mean_curve_gap(quals_a, np.log(rates_a), quals_b, np.log(rates_b))
    if gap is None:
        return None
    return (math.exp(gap) - 1.0) * 100.0


def compute_bd_psnr(curve_a, curve_b, metric: str = "d1_psnr") -> Optional[float]:
    """Average quality gain (dB) of curve_b over curve_a at equal rate.

    None when the rate ranges do not overlap.
    """
    rates_a, quals_a = _pairs(curve_a, metric)
    rates_b, quals_b = _pairs(curve_b, metric)
    return _mean_curve_gap(np.log(rates_a), quals_a, np.log(rates_b), quals_b)
