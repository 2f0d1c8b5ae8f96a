"""Elementary symmetric polynomials for nonnegative inputs.

e_k(a) is the sum over all size-k subsets of a of the product of the selected
values. Three routes are provided:

* ``esp_dp`` — the one-element-at-a-time recurrence e_k += a_i * e_{k-1}.
  All additions are nonnegative, so it is numerically benign; this is the
  production path.
* ``esp_newton`` — the power-sum recursion e_k = (1/k) * sum_i (-1)^(i-1)
  e_{k-i} p_i. The alternating signs cancel catastrophically in float64
  (roughly 1.5 digits lost per element), so the recursion runs over exact
  rationals (float inputs are dyadic rationals) and is rounded at the end.
  Kept as an independent cross-check of esp_dp.
* ``esp_leave_one_out`` — e_k of every size-(n-1) subset obtained by dropping
  one element, via prefix/suffix tables merged with the convolution
  e_k(A ∪ B) = sum_m e_m(A) * e_{k-m}(B). Never divides by e-values, which
  is unstable when entries are near zero.

To keep intermediate values in range, inputs are pre-divided by a power of
two no smaller than their maximum; the applied factor is recorded so callers
can recover absolute magnitudes. Scaling by a power of two is exact, so
integer-valued inputs give bit-exact small-case results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "EspTable",
    "esp_dp",
    "esp_newton",
    "esp_leave_one_out",
    "esp_leave_one_out_log",
]


@dataclass(frozen=True)
class EspTable:
    """ESP values e_0..e_kmax of the scaled inputs, plus the scale factor.

    values[k] = e_k(a / 2**exp2), so e_k(a) = values[k] * 2**(k*exp2).
    e_0 is always 1. The scale is a power of two so that scaling and
    unscaling are exact.
    """

    values: tuple[float, ...]
    exp2: int

    @property
    def log_scale(self) -> float:
        """Natural log of the scale factor applied to the inputs."""
        return self.exp2 * math.log(2.0)

    def value(self, k: int) -> float:
        """e_k of the original (unscaled) inputs; may overflow to inf."""
        try:
            return math.ldexp(self.values[k], k * self.exp2)
        except OverflowError:
            return math.inf

    def log_value(self, k: int) -> float:
        """log e_k of the original inputs; -inf when e_k = 0."""
        if self.values[k] == 0.0:
            return -math.inf
        return math.log(self.values[k]) + k * self.log_scale


def _validate(a: np.ndarray, k_max: int, n_required: int) -> None:
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("inputs must be finite and nonnegative")
    if not 0 <= k_max <= n_required:
        raise ValueError(f"k_max must lie in [0, {n_required}], got {k_max}")


def _scale_exponent(a: np.ndarray) -> int:
    """Binary exponent E with 2**E >= max(a), or 0 for all-zero input."""
    m = float(a.max()) if a.size else 0.0
    if m == 0.0:
        return 0
    _, e = math.frexp(m)  # m = mant * 2**e with mant in [0.5, 1)
    return e


def esp_dp(a, k_max: int) -> EspTable:
    """ESPs e_0..e_k_max of nonnegative values via the standard recurrence."""
    a = np.asarray(a, dtype=float)
    _validate(a, k_max, a.size)
    exp2 = _scale_exponent(a)
    scaled = np.ldexp(a, -exp2)
    e = np.zeros(k_max + 1)
    e[0] = 1.0
    for x in scaled:
        # the right-hand side is materialized before assignment, so each
        # e_{k-1} read is the value from before this element was folded in
        e[1:] = e[1:] + x * e[:-1]
    return EspTable(values=tuple(e), exp2=exp2)


def esp_newton(a, k_max: int) -> EspTable:
    """ESPs via Newton's identities over exact rational arithmetic.

    e_k = (1/k) * sum_{i=1..k} (-1)^(i-1) e_{k-i} p_i with p_i the i-th power
    sum. Inputs are scaled exactly (power of two) before the recursion.
    """
    a = np.asarray(a, dtype=float)
    _validate(a, k_max, a.size)
    exp2 = _scale_exponent(a)
    vals = [Fraction(math.ldexp(float(x), -exp2)) for x in a]

    powers = [Fraction(1)] * len(vals)
    p = [Fraction(len(vals))]
    for _ in range(k_max):
        powers = [w * x for w, x in zip(powers, vals)]
        p.append(sum(powers, Fraction(0)))

    e = [Fraction(1)] + [Fraction(0)] * k_max
    for k in range(1, k_max + 1):
        s = Fraction(0)
        for i in range(1, k + 1):
            term = e[k - i] * p[i]
            s = s + term if i % 2 == 1 else s - term
        e[k] = s / k
    return EspTable(values=tuple(float(v) for v in e), exp2=exp2)


def esp_leave_one_out(a, k: int) -> np.ndarray:
    """For each index i, e_k of the input with element i removed.

    Computed from prefix tables e_*(a[:i]) and suffix tables e_*(a[i+1:])
    merged by the convolution identity; O(n*k) time and space, no division.
    Callers working near the floating range should pre-divide the inputs by
    a common factor (the results then carry that factor to the k-th power,
    which cancels in any normalized use).
    """
    a = np.asarray(a, dtype=float)
    n = a.size
    if n == 0:
        raise ValueError("input must be non-empty")
    _validate(a, k, n - 1)
    exp2 = _scale_exponent(a)
    sa = np.ldexp(a, -exp2)

    # prefix[i] = ESPs of sa[:i], suffix[i] = ESPs of sa[i+1:]
    prefix = np.zeros((n + 1, k + 1))
    prefix[0, 0] = 1.0
    for i in range(n):
        prefix[i + 1] = prefix[i]
        prefix[i + 1, 1:] += sa[i] * prefix[i, :-1]
    suffix = np.zeros((n + 1, k + 1))
    suffix[n, 0] = 1.0
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1]
        suffix[i, 1:] += sa[i] * suffix[i + 1, :-1]

    out = np.empty(n)
    for i in range(n):
        out[i] = np.dot(prefix[i, : k + 1], suffix[i + 1, k::-1])
    # exact unscale when representable: out * 2**(k*exp2)
    return np.ldexp(out, k * exp2)


def esp_leave_one_out_log(a, k: int) -> np.ndarray:
    """log of e_k(a with element i removed), for each index i.

    Same prefix/suffix scheme as esp_leave_one_out but carried out on
    logarithms with log-sum-exp accumulation, so the result never leaves
    floating range no matter how many orders of magnitude the inputs span or
    how large k grows. Entries equal to -inf mean the ESP is exactly zero
    (only possible when some input is zero). Costs a few ulps per
    accumulation relative to the linear-domain route.
    """
    a = np.asarray(a, dtype=float)
    n = a.size
    if n == 0:
        raise ValueError("input must be non-empty")
    _validate(a, k, n - 1)
    with np.errstate(divide="ignore"):
        la = np.log(a)

    neg = -np.inf
    lprefix = np.full((n + 1, k + 1), neg)
    lprefix[:, 0] = 0.0
    for i in range(n):
        lprefix[i + 1, 1:] = np.logaddexp(lprefix[i, 1:], la[i] + lprefix[i, :-1])
    lsuffix = np.full((n + 1, k + 1), neg)
    lsuffix[:, 0] = 0.0
    for i in range(n - 1, -1, -1):
        lsuffix[i, 1:] = np.logaddexp(lsuffix[i + 1, 1:], la[i] + lsuffix[i + 1, :-1])

    # merge: e_k(a \ i) = sum_m e_m(a[:i]) * e_{k-m}(a[i+1:])
    terms = lprefix[:n, : k + 1] + lsuffix[1:, k::-1]
    peak = terms.max(axis=1)
    safe = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(terms - safe[:, None]).sum(axis=1))
    return np.where(np.isfinite(peak), out, neg)
