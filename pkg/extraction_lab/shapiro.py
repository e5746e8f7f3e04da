"""Shapiro-Wilk W statistic with Royston-approximated coefficients."""

import logging
from collections.abc import Sequence
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial
from scipy.stats import norm

from extraction_lab.exceptions import DegenerateSampleError, TooFewSamplesError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 3
MAX_SAMPLES = 5000

# Correction polynomials in u = 1/sqrt(n), lowest power first.
_LAST_COEFFS = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SECOND_LAST_COEFFS = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)


@lru_cache(maxsize=512)
def royston_coefficients(n: int) -> np.ndarray:
    """
    Antisymmetric weights a_1..a_n for the ordered sample.

    Args:
        n: Sample size (>= 3)

    Returns:
        Read-only array of length n, ascending order statistics
    """
    if n < MIN_SAMPLES:
        raise TooFewSamplesError(f"Shapiro-Wilk needs at least {MIN_SAMPLES} values, got {n}")
    if n == 3:
        coeffs = np.array([-np.sqrt(0.5), 0.0, np.sqrt(0.5)])
        coeffs.setflags(write=False)
        return coeffs

    # Approximate expected normal order statistics
    m = norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    summ2 = float(m @ m)
    root = np.sqrt(summ2)
    u = 1.0 / np.sqrt(n)

    # Polynomial corrections replace the extreme weights; the rest are rescaled m
    a_last = m[-1] / root + polynomial.polyval(u, _LAST_COEFFS)
    if n > 5:
        a_second = m[-2] / root + polynomial.polyval(u, _SECOND_LAST_COEFFS)
        phi = (summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_last**2 - 2 * a_second**2)
        coeffs = m / np.sqrt(phi)
        coeffs[[0, 1, -2, -1]] = (-a_last, -a_second, a_second, a_last)
    else:
        phi = (summ2 - 2 * m[-1] ** 2) / (1 - 2 * a_last**2)
        coeffs = m / np.sqrt(phi)
        coeffs[[0, -1]] = (-a_last, a_last)

    coeffs.setflags(write=False)
    return coeffs


def shapiro_w(values: Sequence[float] | np.ndarray, strict: bool = False) -> float:
    """
    Shapiro-Wilk statistic W of a sample.

    W = (sum a_i x_(i))^2 / sum (x_i - mean)^2, clipped to [0, 1]. Sorting is
    internal, so the result does not depend on input order. Repeated values are
    allowed; only an all-equal sample is rejected.

    Args:
        values: Finite reals
        strict: Reject samples larger than 5000 instead of extrapolating the coefficients

    Returns:
        W in [0, 1]

    Raises:
        TooFewSamplesError: Fewer than three values
        DegenerateSampleError: All values equal
        ValueError: Non-finite values, or more than 5000 values with strict
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(x)
    if n < MIN_SAMPLES:
        raise TooFewSamplesError(f"Shapiro-Wilk needs at least {MIN_SAMPLES} values, got {n}")
    if n > MAX_SAMPLES:
        if strict:
            raise ValueError(f"Shapiro-Wilk is calibrated up to {MAX_SAMPLES} values, got {n}")
        logger.debug(f"Shapiro-Wilk on {n} values exceeds the calibrated range")
    if not np.all(np.isfinite(x)):
        raise ValueError("Shapiro-Wilk values must be finite")
    if x[-1] == x[0]:
        raise DegenerateSampleError(f"All {n} values are equal")

    # The weights sum to zero, so centering leaves the numerator unchanged
    centered = x - x.mean()
    ssq = float(centered @ centered)
    numerator = float(royston_coefficients(n) @ centered) ** 2
    return float(np.clip(numerator / ssq, 0.0, 1.0))
