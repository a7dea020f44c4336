"""Gaussian-quantile codebooks for block-scaled weight coding.

The codebook for ``b`` bits places ``2**(b-1)`` probabilities evenly on
``[delta, 1/2]`` and ``2**(b-1) + 1`` probabilities evenly on
``[1/2, 1 - delta]``, counting the shared midpoint once, then maps them
through the standard normal quantile function and normalizes by the
largest quantile.  The resulting levels span exactly [-1, 1] and contain
an exact zero, so an absmax-scaled block always has a representable
maximum and a representable zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 8)

# Tail probability assigned to the outermost codebook entries: the
# midpoint of 1/30 and 1/32, i.e. 31/960.
TAIL_DELTA = 0.5 * (1.0 / 30.0 + 1.0 / 32.0)

_SQRT2 = math.sqrt(2.0)

# Rational approximation coefficients (central region, |p - 1/2| <= 0.425).
_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
# Intermediate tail region, r = sqrt(-log(min(p, 1-p))) in (1.6, 5].
_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
# Far tail, r > 5.
_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-6,
    1.42151175831644588870e-9,
    2.04426310338993978564e-15,
)


def _poly(coeffs, x: float) -> float:
    acc = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * x + c
    return acc


def _rational_estimate(p: float) -> float:
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if q < 0.0 else x


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / _SQRT2)


def _lower_half_quantile(p: float) -> float:
    """Quantile for 0 < p <= 1/2, where the float forward CDF is precise."""
    x = _rational_estimate(p)
    # Newton refinement; the estimate is already accurate so two steps
    # reach double-precision roundoff.  Skipped in the far tails where
    # the density underflows the correction.
    for _ in range(2):
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf < 1e-280:
            break
        step = (normal_cdf(x) - p) / pdf
        x -= step
        if abs(step) <= 1e-13 * max(1.0, abs(x)):
            break
    return x


def inverse_normal_cdf(p: float) -> float:
    """Quantile function of the standard normal distribution.

    Rational initial estimate polished by Newton steps on the forward
    CDF.  The upper half mirrors the lower half through the exact
    complement 1 - p, keeping full precision where the CDF saturates
    toward 1.  Absolute error stays well below 1e-9 on
    [1e-10, 1 - 1e-10]; exactly zero at p = 1/2.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # 1 - p is exact for p in [1/2, 1)
        return -_lower_half_quantile(1.0 - p)
    return _lower_half_quantile(p)


@dataclass(frozen=True)
class Codebook:
    """Sorted quantization levels for one bit width."""

    bits: int
    probabilities: np.ndarray
    levels: np.ndarray
    midpoints: np.ndarray

    def __len__(self) -> int:
        return self.levels.size

    @property
    def zero_index(self) -> int:
        # The probability grid puts 1/2 here, so the level is exactly 0.
        return (1 << (self.bits - 1)) - 1


@lru_cache(maxsize=None)
def build_codebook(bits: int) -> Codebook:
    """Construct the ``2**bits``-entry codebook for a supported width."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported codebook width {bits!r}, expected one of {SUPPORTED_BITS}")
    half = 1 << (bits - 1)
    lower = np.linspace(TAIL_DELTA, 0.5, half)
    upper = np.linspace(0.5, 1.0 - TAIL_DELTA, half + 1)
    probs = np.concatenate([lower, upper[1:]])
    quantiles = np.array([inverse_normal_cdf(p) for p in probs])
    # The outermost probabilities are exact complements, so their
    # quantiles are exact negatives; realize that identity in floats so
    # normalization lands the endpoints on -1 and +1 exactly.
    quantiles[-1] = -quantiles[0]
    levels = quantiles / quantiles[-1]
    mids = 0.5 * (levels[:-1] + levels[1:])
    for arr in (probs, quantiles, levels, mids):
        arr.flags.writeable = False
    return Codebook(bits=bits, probabilities=probs, levels=levels, midpoints=mids)
