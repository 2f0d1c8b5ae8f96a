"""Per-class calibrated thresholds on posterior scores, with likelihood-ratio
weighting of mixed source/target calibration sets.

The calibration set for class j mixes source points (initial weight 1) and
target points (initial weight w^j(x), the class-conditional likelihood
ratio). Exchangeability of the augmented set then dictates the probability
that each calibration point takes the test point's role; summing products of
ratio values over the matching permutations collapses to

    weight_i  ∝  w^j(x_i) * e_k({w^j(x_c) : c != i}),

where e_k is the elementary symmetric polynomial of order k = number of
labeled target points in the set. Thresholds are weighted quantiles of the
calibration scores with the test point's own mass placed at the conservative
end of the scale. Two baselines are included: source-only covariate-shift
weighting (one weight per point, no symmetric functions) and plain split
calibration on target data alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from shiftconformal.core import (
    Alpha,
    Dataset,
    EmptyCalibrationClassError,
    SplitPlan,
    class_index_sets,
)
from shiftconformal.estimators import ModelKind, fit_model
from shiftconformal.symfun import esp_dp, esp_leave_one_out_log

__all__ = [
    "WeightMode",
    "CalibrationWeights",
    "SetClassifier",
    "compute_weights",
    "exact_weight_matrix",
    "weighted_quantile",
    "calibrate",
    "predict_set",
    "wcp_baseline",
    "cp_baseline",
]

logger = logging.getLogger(__name__)

# absolute slack for >= comparisons against cumulative weights; the weights
# are probabilities, so 1e-12 is far below any real atom yet far above the
# accumulated rounding of a cumsum
_CDF_SLACK = 1e-12


class WeightMode(Enum):
    EXACT_PER_TEST = "exact_per_test"
    SHARED_CALIBRATION = "shared_calibration"


@dataclass(frozen=True)
class CalibrationWeights:
    """Normalized calibration weights for one class.

    point_weights aligns with the calibration-set order; test_weight is the
    mass on the test point itself (zero in shared mode, where the quantile
    simply omits it).
    """

    class_label: int
    point_weights: np.ndarray
    test_weight: float
    mode: WeightMode

    def __post_init__(self) -> None:
        w = self.point_weights
        if np.any(w < 0) or self.test_weight < 0:
            raise ValueError("weights must be nonnegative")
        total = float(w.sum()) + (
            self.test_weight if self.mode is WeightMode.EXACT_PER_TEST else 0.0
        )
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total!r}")
        if self.mode is WeightMode.SHARED_CALIBRATION and self.test_weight != 0.0:
            raise ValueError("shared mode carries no test mass")


def _log_tables(values: np.ndarray, k: int):
    """Log-domain numerator coefficients for the weight kernel.

    Returns (la, lb, le): la[i] = log of a_i * e_k(a \\ i), lb[i] = log of
    a_i * e_{k-1}(a \\ i), le = log e_k(a). Working with logarithms keeps
    everything in range however widely the ratio values spread; the shared
    scale cancels under normalization.
    """
    n = values.size
    log_a = np.log(values)
    la = log_a + (
        esp_leave_one_out_log(values, k) if k <= n - 1 else np.full(n, -np.inf)
    )
    lb = log_a + (
        esp_leave_one_out_log(values, k - 1) if k >= 1 else np.full(n, -np.inf)
    )
    le = esp_dp(values, k).log_value(k)
    return la, lb, le


def _linear_coefficients(values: np.ndarray, k: int):
    """exp of the _log_tables output under one common shift.

    The shift is the largest of the three log magnitudes, so at least one of
    the returned arrays contains an entry of order one and totals cannot
    underflow for any positive test value.
    """
    la, lb, le = _log_tables(values, k)
    shift = max(float(la.max()), float(lb.max()), le)
    return np.exp(la - shift), np.exp(lb - shift), math.exp(le - shift)


def exact_weight_matrix(
    cal_values: np.ndarray, n_target: int, test_values: np.ndarray
) -> np.ndarray:
    """Normalized weight vectors for a batch of test points.

    Row t is the weight vector over (calibration points..., test point t)
    when test point t, with ratio value test_values[t], joins the class
    calibration set. Uses e_k(a ∪ {u} \\ {a_i}) = e_k(a \\ i) + u * e_{k-1}(a \\ i)
    so the leave-one-out tables are built once for the whole batch.
    """
    cal_values = np.asarray(cal_values, dtype=float)
    u = np.asarray(test_values, dtype=float)
    n = cal_values.size
    k = n_target
    if not 0 <= k <= n:
        raise ValueError(f"target count {k} must lie in [0, {n}]")
    for arr in (cal_values, u):
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ValueError("ratio values must be positive and finite")
    A, B, E = _linear_coefficients(cal_values, k)

    # with the test point appended the working set has n+1 members, of which
    # k+1 are target draws; each entry still pairs with e_k of the others
    cal_num = A[None, :] + np.outer(u, B)  # (M, n)
    test_num = u * E  # (M,)
    total = cal_num.sum(axis=1) + test_num
    if not np.all(total > 0):
        raise FloatingPointError(
            "symmetric-function numerators underflowed; the ratio values span "
            "too many orders of magnitude for this calibration size"
        )
    out = np.empty((u.size, n + 1))
    out[:, :n] = cal_num / total[:, None]
    out[:, n] = test_num / total
    return out


def compute_weights(
    ratio_values,
    is_target,
    test_value: float | None = None,
    mode: WeightMode = WeightMode.SHARED_CALIBRATION,
    class_label: int = 0,
) -> CalibrationWeights:
    """Normalized calibration weights for one class.

    ``ratio_values`` are w^j evaluated on the calibration points,
    ``is_target`` flags which of those points are target-domain draws (only
    the count enters; the weight formula is symmetric in position). In exact
    mode the test point's own ratio value joins the working set and receives
    the leftover mass; in shared mode weights are computed over the
    calibration set alone and reused for every test point.
    """
    values = np.asarray(ratio_values, dtype=float)
    flags = np.asarray(is_target, dtype=bool)
    if values.size == 0:
        raise ValueError("calibration set is empty")
    if values.shape != flags.shape:
        raise ValueError("one domain flag per ratio value is required")
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValueError("ratio values must be positive and finite")
    n = values.size
    k = int(flags.sum())

    if mode is WeightMode.EXACT_PER_TEST:
        if test_value is None:
            raise ValueError("exact mode needs the test point's ratio value")
        if test_value <= 0 or not np.isfinite(test_value):
            raise ValueError("ratio values must be positive and finite")
        row = exact_weight_matrix(values, k, np.array([test_value]))[0]
        return CalibrationWeights(
            class_label=class_label,
            point_weights=row[:n],
            test_weight=float(row[n]),
            mode=mode,
        )

    if k >= n:
        # no source points: every permutation product is the same, so the
        # weights degenerate to uniform
        point_weights = np.full(n, 1.0 / n)
    else:
        la = np.log(values) + esp_leave_one_out_log(values, k)
        num = np.exp(la - la.max())
        point_weights = num / num.sum()
    return CalibrationWeights(
        class_label=class_label,
        point_weights=point_weights,
        test_weight=0.0,
        mode=mode,
    )


def weighted_quantile(beta: float, values, weights, tail_mass: float = 0.0) -> float:
    """inf{t in values : F(t) >= beta} for the discrete weighted CDF F.

    ``tail_mass`` is placed below every finite value (think of it as an atom
    at -inf): when beta <= tail_mass the quantile is -inf, meaning any
    threshold comparison succeeds. Weights plus tail must form a probability
    vector.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0,1), got {beta}")
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise ValueError("one weight per value is required")
    if np.any(w < 0) or tail_mass < 0:
        raise ValueError("weights must be nonnegative")
    total = float(w.sum()) + tail_mass
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights plus tail mass must sum to 1, got {total!r}")
    if tail_mass >= beta - _CDF_SLACK:
        return -math.inf
    order = np.argsort(v, kind="stable")
    cdf = tail_mass + np.cumsum(w[order])
    idx = int(np.searchsorted(cdf, beta - _CDF_SLACK, side="left"))
    idx = min(idx, v.size - 1)  # guard rounding at the top of the CDF
    return float(v[order][idx])


# ---------------------------------------------------------------------------
# per-class calibration payloads


@dataclass(frozen=True)
class _FixedState:
    """One threshold shared by every test point."""

    threshold: float


@dataclass(frozen=True)
class _ExactState:
    """Per-test-point thresholds with the test point folded into the weights."""

    scores: np.ndarray  # calibration scores, sorted ascending
    cum_a: np.ndarray  # cumulative a_i * e_k(a\i), score order, common shift
    cum_b: np.ndarray  # cumulative a_i * e_{k-1}(a\i), same shift
    test_coeff: float  # e_k(a), same shift
    alpha: float

    def thresholds(self, scores_unused, test_ratio_values) -> np.ndarray:
        u = np.asarray(test_ratio_values, dtype=float)
        alpha = self.alpha
        tot_a = self.cum_a[-1]
        tot_b = self.cum_b[-1]
        # F(s_(i)) >= alpha, with mass u*test_coeff at the conservative end:
        # u*C + cumA_i + u*cumB_i >= alpha * (totA + u*(totB + C))
        lhs = self.cum_a[None, :] + u[:, None] * self.cum_b[None, :]
        rhs = alpha * (tot_a + u * (tot_b + self.test_coeff)) - u * self.test_coeff
        scale = tot_a + u * (tot_b + self.test_coeff)
        hit = lhs >= (rhs - _CDF_SLACK * scale)[:, None]
        idx = hit.argmax(axis=1)
        out = self.scores[idx]
        # all of the test mass below the smallest score already meets alpha
        all_tail = u * self.test_coeff >= rhs + u * self.test_coeff - _CDF_SLACK * scale
        out = np.where(all_tail, -np.inf, out)
        return out


@dataclass(frozen=True)
class _WcpState:
    """Source-only weighting: one weight per point plus a test-point tail."""

    scores: np.ndarray  # sorted ascending
    cum_w: np.ndarray  # cumulative ratio values, score order
    alpha: float

    def thresholds(self, scores_unused, test_ratio_values) -> np.ndarray:
        u = np.asarray(test_ratio_values, dtype=float)
        total = self.cum_w[-1]
        # tail u plus cumulative weight must reach alpha * (total + u)
        target = self.alpha * (total + u) - u
        scale = total + u
        idx = np.searchsorted(self.cum_w, target - _CDF_SLACK * scale, side="left")
        idx = np.minimum(idx, self.scores.size - 1)
        out = self.scores[idx]
        return np.where(target <= _CDF_SLACK * scale, -np.inf, out)


class SetClassifier:
    """Per-class thresholds over a fitted posterior model.

    Membership uses the inclusive rule: j is predicted when the model's
    class-j probability is >= the class-j threshold (ties keep the class,
    which preserves the coverage direction). Thresholds may be fixed per
    class or, for the exact and source-only weighted methods, functions of
    the test point through its ratio value.
    """

    def __init__(self, model, alpha: Alpha, states, ratio=None, mode=None):
        self.model = model
        self.alpha = alpha
        self.ratio = ratio
        self.mode = mode
        self._states = tuple(states)
        self.n_classes = len(self._states)

    @property
    def thresholds(self) -> np.ndarray:
        """Fixed per-class thresholds; nan for test-point-dependent classes."""
        out = np.full(self.n_classes, np.nan)
        for j, st in enumerate(self._states):
            if isinstance(st, _FixedState):
                out[j] = st.threshold
        return out

    def threshold_matrix(self, X) -> np.ndarray:
        """Thresholds per (test point, class)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((X.shape[0], self.n_classes))
        for j, st in enumerate(self._states):
            if isinstance(st, _FixedState):
                out[:, j] = st.threshold
            else:
                u = self.ratio.evaluate(X, j + 1)
                out[:, j] = st.thresholds(None, u)
        return out

    def predict_sets(self, X) -> np.ndarray:
        """Boolean membership matrix (n_points, n_classes)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        scores = np.atleast_2d(self.model.predict_proba(X))
        return scores >= self.threshold_matrix(X)

    def predict_set(self, x) -> set[int]:
        """Label set for a single feature vector."""
        member = self.predict_sets(np.atleast_2d(np.asarray(x, dtype=float)))[0]
        return {j + 1 for j in range(self.n_classes) if member[j]}


def predict_set(classifier: SetClassifier, x) -> set[int]:
    return classifier.predict_set(x)


def _class_scores_and_values(model, data, ratio, j, indices):
    X = data.feature_matrix(indices)
    scores = np.atleast_2d(model.predict_proba(X))[:, j - 1]
    values = np.asarray(ratio.evaluate(X, j), dtype=float)
    return scores, values


def calibrate(
    model,
    data: Dataset,
    plan: SplitPlan,
    ratio,
    alpha: Alpha,
    mode: WeightMode = WeightMode.SHARED_CALIBRATION,
) -> SetClassifier:
    """Per-class thresholds from the mixed source/target calibration sets.

    ``ratio`` must expose evaluate(X, j) -> positive weights (see the ratio
    module). The model is expected to be fit on the s1 split only. Shared
    mode computes one threshold per class; exact mode defers to prediction
    time, where each test point joins the weight computation.
    """
    states = []
    for j in range(1, data.n_classes + 1):
        try:
            r_j, _, n_t = class_index_sets(data, plan, j)
        except EmptyCalibrationClassError:
            logger.warning(
                "class %d has no calibration points; threshold set to -inf", j
            )
            states.append(_FixedState(threshold=-math.inf))
            continue
        scores, values = _class_scores_and_values(model, data, ratio, j, r_j)

        if mode is WeightMode.SHARED_CALIBRATION:
            flags = np.zeros(len(r_j), dtype=bool)
            flags[len(r_j) - n_t :] = True
            cw = compute_weights(values, flags, mode=mode, class_label=j)
            t = weighted_quantile(alpha.value, scores, cw.point_weights)
            states.append(_FixedState(threshold=t))
        else:
            order = np.argsort(scores, kind="stable")
            s_sorted = scores[order]
            v_sorted = values[order]
            A, B, E = _linear_coefficients(v_sorted, n_t)
            states.append(
                _ExactState(
                    scores=s_sorted,
                    cum_a=np.cumsum(A),
                    cum_b=np.cumsum(B),
                    test_coeff=E,
                    alpha=alpha.value,
                )
            )
    return SetClassifier(model, alpha, states, ratio=ratio, mode=mode)


def wcp_baseline(
    model,
    data: Dataset,
    plan: SplitPlan,
    ratio,
    alpha: Alpha,
) -> SetClassifier:
    """Covariate-shift weighting alone: calibrates on the source calibration
    half only, one ratio weight per point, the test point's share entering
    as tail mass at the conservative end. Ignores labeled target data.
    """
    states = []
    for j in range(1, data.n_classes + 1):
        members = [i for i in plan.s2 if data.points[i].label == j]
        if not members:
            logger.warning(
                "class %d has no source calibration points; threshold set to -inf", j
            )
            states.append(_FixedState(threshold=-math.inf))
            continue
        scores, values = _class_scores_and_values(model, data, ratio, j, members)
        order = np.argsort(scores, kind="stable")
        states.append(
            _WcpState(
                scores=scores[order],
                cum_w=np.cumsum(values[order]),
                alpha=alpha.value,
            )
        )
    return SetClassifier(model, alpha, states, ratio=ratio, mode=None)


def cp_baseline(
    data: Dataset,
    plan: SplitPlan,
    alpha: Alpha,
    estimator_kind: ModelKind = ModelKind.MULTINOMIAL_LOGISTIC,
) -> SetClassifier:
    """Split calibration on the labeled target data alone.

    The target calibration budget is halved into fit/calibration parts; the
    per-class threshold is the ceil(alpha*(n_j+1))-th smallest score. With
    n_j around a hundred points this sits slightly below the level needed
    for 1-alpha coverage, and the small fitting half gives noisy scores, so
    the method under-covers; it is the honest small-data baseline.
    """
    half = len(plan.t) // 2
    fit_idx, cal_idx = plan.t[:half], plan.t[half:]
    try:
        model = fit_model(
            data.feature_matrix(fit_idx),
            data.labels(fit_idx),
            kind=estimator_kind,
            n_classes=data.n_classes,
        )
    except ValueError as exc:
        raise ValueError(f"target-only fit failed: {exc}") from exc

    scores = np.atleast_2d(model.predict_proba(data.feature_matrix(cal_idx)))
    labels = data.labels(cal_idx)
    states = []
    for j in range(1, data.n_classes + 1):
        s_j = np.sort(scores[labels == j, j - 1])
        m = s_j.size
        if m == 0:
            logger.warning(
                "class %d has no target calibration points; threshold set to -inf", j
            )
            states.append(_FixedState(threshold=-math.inf))
            continue
        rank = math.ceil(alpha.value * (m + 1))
        t = s_j[rank - 1] if rank <= m else math.inf
        states.append(_FixedState(threshold=t))
    return SetClassifier(model, alpha, states, ratio=None, mode=None)
