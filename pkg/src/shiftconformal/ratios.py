"""Per-class likelihood-ratio weight functions w^j(x) = dQ_{X|Y=j}/dP_{X|Y=j}.

Three flavors: the constant 1 (no shift), the closed-form oracle for the
Gaussian simulation, and a classifier-based estimate that trains one binary
probability model per class on pooled source/target covariates and reads the
ratio off its odds. Evaluations are clipped to [eps, 1/eps]; any constant
factor (class priors, pooling imbalance) is irrelevant downstream because
calibration weights are normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from shiftconformal.conformal import exact_weight_matrix
from shiftconformal.core import Dataset, SplitPlan, class_index_sets
from shiftconformal.datagen import (
    DEFAULT_CLASS_MEANS,
    PhiSpec,
    drifted_posterior,
    source_posterior,
    target_priors,
)
from shiftconformal.estimators import ModelKind, ProbabilityModel, fit_model

__all__ = [
    "RatioKind",
    "RatioFunction",
    "constant_ratio",
    "oracle_ratio_simulation",
    "fit_estimated_ratio",
    "estimated_ratio_from_split",
    "delta_w_diagnostic",
]


class RatioKind(Enum):
    ORACLE = "oracle"
    ESTIMATED = "estimated"
    CONSTANT = "constant"


@dataclass(frozen=True)
class RatioFunction:
    """Weight function w^j(x) for every class j in 1..n_classes.

    payload depends on kind: oracle carries (class_means, r, pi_P, pi_Q),
    estimated carries one fitted binary model per class, constant carries
    nothing.
    """

    kind: RatioKind
    n_classes: int
    payload: tuple
    clip_epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0,1)")
        if self.n_classes < 1:
            raise ValueError("need at least one class")

    def evaluate(self, features, j: int) -> np.ndarray:
        """w^j on a feature matrix, clipped to [eps, 1/eps]."""
        if not 1 <= j <= self.n_classes:
            raise ValueError(f"class {j} outside 1..{self.n_classes}")
        X = np.atleast_2d(np.asarray(features, dtype=float))
        if self.kind is RatioKind.CONSTANT:
            raw = np.ones(X.shape[0])
        elif self.kind is RatioKind.ORACLE:
            class_means, r, pi_p, pi_q = self.payload
            eta_p = source_posterior(X, class_means)
            eta_q = drifted_posterior(eta_p, PhiSpec.power(r))
            with np.errstate(divide="ignore", invalid="ignore"):
                raw = (pi_p[j - 1] / pi_q[j - 1]) * eta_q[:, j - 1] / eta_p[:, j - 1]
            raw = np.where(np.isfinite(raw), raw, 1.0 / self.clip_epsilon)
        else:
            model: ProbabilityModel = self.payload[j - 1]
            proba = np.atleast_2d(model.predict_proba(X))
            with np.errstate(divide="ignore"):
                raw = proba[:, 1] / proba[:, 0]
            raw = np.where(np.isfinite(raw), raw, 1.0 / self.clip_epsilon)
        return np.clip(raw, self.clip_epsilon, 1.0 / self.clip_epsilon)


def constant_ratio(n_classes: int, clip_epsilon: float = 1e-3) -> RatioFunction:
    return RatioFunction(RatioKind.CONSTANT, n_classes, (), clip_epsilon)


def oracle_ratio_simulation(
    class_means=DEFAULT_CLASS_MEANS,
    r: float = 1.0,
    pi_q=None,
    clip_epsilon: float = 1e-3,
) -> RatioFunction:
    """Closed-form w^j for the Gaussian simulation.

    The relabeling construction keeps the covariate marginal fixed, so
    dQ_{X|j}/dP_{X|j} = (pi_P_j / pi_Q_j) * eta_Q_j / eta_P_j by Bayes' rule.
    pi_Q defaults to the Monte-Carlo estimate; the prior factor only rescales
    and cannot change normalized calibration weights, but keeping it makes
    the function an actual density ratio (mean 1 under P_{X|j}).
    """
    if r < 1:
        raise ValueError("shift exponent must be >= 1")
    k = len(class_means)
    if pi_q is None:
        pi_q = target_priors(r, tuple(class_means))
    pi_q = tuple(float(p) for p in pi_q)
    if len(pi_q) != k or any(p <= 0 for p in pi_q):
        raise ValueError("target priors must be positive, one per class")
    pi_p = tuple(1.0 / k for _ in range(k))
    payload = (tuple(float(m) for m in class_means), float(r), pi_p, pi_q)
    return RatioFunction(RatioKind.ORACLE, k, payload, clip_epsilon)


def fit_estimated_ratio(
    source_by_class,
    target_by_class,
    kind: ModelKind = ModelKind.MULTINOMIAL_LOGISTIC,
    clip_epsilon: float = 1e-3,
) -> RatioFunction:
    """Classifier-based ratio estimate from per-class feature matrices.

    For each class j a binary model is fit on the pooled covariates with
    domain labels (1 = source, 2 = target); the evaluated ratio is the
    target/source odds P(C=2|x)/P(C=1|x), proportional to dQ/dP up to the
    pooling imbalance constant.
    """
    if len(source_by_class) != len(target_by_class):
        raise ValueError("need one source and one target matrix per class")
    models = []
    for j, (src, tgt) in enumerate(zip(source_by_class, target_by_class), start=1):
        src = np.atleast_2d(np.asarray(src, dtype=float))
        tgt = np.atleast_2d(np.asarray(tgt, dtype=float))
        if src.shape[0] == 0 or tgt.shape[0] == 0:
            raise ValueError(f"class {j} has no data in one domain")
        X = np.vstack([src, tgt])
        c = np.concatenate([np.ones(src.shape[0]), np.full(tgt.shape[0], 2)])
        models.append(fit_model(X, c.astype(int), kind=kind, n_classes=2))
    return RatioFunction(
        RatioKind.ESTIMATED, len(models), tuple(models), clip_epsilon
    )


def estimated_ratio_from_split(
    data: Dataset,
    plan: SplitPlan,
    kind: ModelKind = ModelKind.MULTINOMIAL_LOGISTIC,
    clip_epsilon: float = 1e-3,
) -> RatioFunction:
    """Ratio estimate using the model-fitting source half against the labeled
    target points, class by class. The calibration half s2 is held out so the
    weights it receives are out-of-sample for the ratio model.
    """
    source_by_class, target_by_class = [], []
    for j in range(1, data.n_classes + 1):
        s_idx = [i for i in plan.s1 if data.points[i].label == j]
        t_idx = [i for i in plan.t if data.points[i].label == j]
        if not s_idx or not t_idx:
            raise ValueError(f"class {j} has no data in one domain")
        source_by_class.append(data.feature_matrix(s_idx))
        target_by_class.append(data.feature_matrix(t_idx))
    return fit_estimated_ratio(source_by_class, target_by_class, kind, clip_epsilon)


def delta_w_diagnostic(
    estimated: RatioFunction,
    oracle: RatioFunction,
    data: Dataset,
    plan: SplitPlan,
    sample_features,
) -> np.ndarray:
    """Per-class half mean total-variation between normalized calibration
    weights under the estimated and oracle ratios.

    For each sample point x the full weight vector (calibration points plus
    the test atom) is computed under both ratios on the same calibration set;
    the statistic is 0.5 * E_x sum_i |w_est_i(x) - w_orc_i(x)|. Coverage
    degrades by at most max over classes of this quantity.
    """
    X = np.atleast_2d(np.asarray(sample_features, dtype=float))
    out = np.empty(data.n_classes)
    for j in range(1, data.n_classes + 1):
        r_j, _, n_t = class_index_sets(data, plan, j)
        cal = data.feature_matrix(r_j)
        w_est = exact_weight_matrix(
            estimated.evaluate(cal, j), n_t, estimated.evaluate(X, j)
        )
        w_orc = exact_weight_matrix(
            oracle.evaluate(cal, j), n_t, oracle.evaluate(X, j)
        )
        out[j - 1] = 0.5 * np.abs(w_est - w_orc).sum(axis=1).mean()
    return out
