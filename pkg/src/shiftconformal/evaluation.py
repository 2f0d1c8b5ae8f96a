"""Prediction-set metrics, trial aggregation, and the oracle-set diagnostic.

evaluate() reduces one calibrated classifier against a labeled test set to
per-class and marginal coverage plus set-size statistics. aggregate() groups
trial results into a summary table with Monte-Carlo standard errors.
symdiff_estimate() measures how much the fitted per-class confidence regions
disagree with the oracle ones under the target class-conditional law.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .conformal import SetClassifier
from .datagen import DEFAULT_CLASS_MEANS, PhiSpec, drifted_posterior, source_posterior

__all__ = [
    "Method",
    "TrialResult",
    "evaluate",
    "aggregate",
    "sample_target_class_features",
    "oracle_thresholds",
    "symdiff_estimate",
]


class Method(Enum):
    """The five evaluated pipelines. Values are the reporting identifiers."""

    WCC_CSPD_ORACLE = "WCC_CSPD_Oracle"
    WCC_CSPD_ESTIMATED = "WCC_CSPD_Estimated"
    WCP_ORACLE = "WCP_Oracle"
    WCP_ESTIMATED = "WCP_Estimated"
    CP = "CP"


@dataclass(frozen=True)
class TrialResult:
    """Metrics of one classifier on one test set.

    Per-class entries are None when the test set contains no point of that
    class (absent, not an error). Besides the per-class coverage vector the
    result carries per-class set sizes and empty rates, which the per-class
    result rows report.
    """

    method: Method
    r: float
    class_coverage: tuple
    marginal_coverage: float
    avg_set_size: float
    empty_rate: float
    seed: int
    class_avg_size: tuple
    class_empty_rate: tuple

    def __post_init__(self) -> None:
        k = len(self.class_coverage)
        if len(self.class_avg_size) != k or len(self.class_empty_rate) != k:
            raise ValueError("per-class vectors must share one length")
        for v in (self.marginal_coverage, self.empty_rate, *self.class_coverage):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"rate {v} outside [0, 1]")
        if not 0.0 <= self.avg_set_size <= k:
            raise ValueError(f"avg_set_size {self.avg_set_size} outside [0, {k}]")

    @property
    def n_classes(self) -> int:
        return len(self.class_coverage)


def evaluate(
    classifier: SetClassifier,
    features,
    labels,
    method: Method,
    r: float,
    seed: int,
) -> TrialResult:
    """Score a classifier on a labeled test set.

    coverage_j is the fraction of class-j points whose prediction set
    contains j; the marginal is the same fraction over all points. Set sizes
    count empty sets as zero-length members of the average.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=int)
    if X.shape[0] != y.size or y.size == 0:
        raise ValueError("test set must be non-empty with one label per row")
    k = classifier.n_classes
    sets = classifier.predict_sets(X)
    covered = sets[np.arange(y.size), y - 1]
    sizes = sets.sum(axis=1)

    cov, avg, emp = [], [], []
    for j in range(1, k + 1):
        mask = y == j
        if not mask.any():
            cov.append(None)
            avg.append(None)
            emp.append(None)
        else:
            cov.append(float(covered[mask].mean()))
            avg.append(float(sizes[mask].mean()))
            emp.append(float((sizes[mask] == 0).mean()))
    return TrialResult(
        method=method,
        r=float(r),
        class_coverage=tuple(cov),
        marginal_coverage=float(covered.mean()),
        avg_set_size=float(sizes.mean()),
        empty_rate=float((sizes == 0).mean()),
        seed=int(seed),
        class_avg_size=tuple(avg),
        class_empty_rate=tuple(emp),
    )


def _mean_se(values: list) -> tuple:
    # single observation: SE defined as the 0.0 sentinel
    arr = np.asarray(values, dtype=float)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def aggregate(results) -> list:
    """Group trial results into summary rows (mean and Monte-Carlo SE).

    One row per (method, r, class) with class "marginal" appended after the
    numbered classes; rows ordered by method (enum order), then r ascending,
    then class. Per-class statistics average over the trials where the class
    was present.
    """
    results = list(results)
    if not results:
        raise ValueError("aggregate requires at least one trial result")
    k = results[0].n_classes
    if any(t.n_classes != k for t in results):
        raise ValueError("trial results disagree on the number of classes")

    groups: dict = {}
    for t in results:
        groups.setdefault((t.method, t.r), []).append(t)

    rows = []
    methods = [m for m in Method if any(key[0] is m for key in groups)]
    for method in methods:
        r_values = sorted({key[1] for key in groups if key[0] is method})
        for r in r_values:
            trials = groups[(method, r)]
            for j in range(1, k + 1):
                triples = [
                    (t.class_coverage[j - 1], t.class_avg_size[j - 1], t.class_empty_rate[j - 1])
                    for t in trials
                    if t.class_coverage[j - 1] is not None
                ]
                if not triples:
                    continue
                cov_m, cov_se = _mean_se([x[0] for x in triples])
                size_m, size_se = _mean_se([x[1] for x in triples])
                emp_m, emp_se = _mean_se([x[2] for x in triples])
                rows.append(
                    {
                        "method": method.value,
                        "r": r,
                        "class": str(j),
                        "n_trials": len(triples),
                        "coverage_mean": cov_m,
                        "coverage_se": cov_se,
                        "set_size_mean": size_m,
                        "set_size_se": size_se,
                        "empty_rate_mean": emp_m,
                        "empty_rate_se": emp_se,
                    }
                )
            cov_m, cov_se = _mean_se([t.marginal_coverage for t in trials])
            size_m, size_se = _mean_se([t.avg_set_size for t in trials])
            emp_m, emp_se = _mean_se([t.empty_rate for t in trials])
            rows.append(
                {
                    "method": method.value,
                    "r": r,
                    "class": "marginal",
                    "n_trials": len(trials),
                    "coverage_mean": cov_m,
                    "coverage_se": cov_se,
                    "set_size_mean": size_m,
                    "set_size_se": size_se,
                    "empty_rate_mean": emp_m,
                    "empty_rate_se": emp_se,
                }
            )
    return rows


def sample_target_class_features(
    class_label: int,
    r: float,
    n_samples: int,
    class_means=DEFAULT_CLASS_MEANS,
    dim: int = 5,
    seed: int = 0,
) -> np.ndarray:
    """Draw feature vectors from the target class-conditional distribution.

    The target construction keeps the covariate marginal and redraws labels
    from the drifted posterior, so X | Y=j under the target has density
    proportional to eta_Q_j(x) times the source mixture. Rejection sampling
    with acceptance probability eta_Q_j(x) is exact here since eta is in
    [0, 1].
    """
    means = np.asarray(class_means, dtype=float)
    k = means.size
    if not 1 <= class_label <= k:
        raise ValueError(f"class {class_label} outside 1..{k}")
    rng = np.random.default_rng(seed)
    phi = PhiSpec.power(r)
    out = np.empty((n_samples, dim))
    filled = 0
    while filled < n_samples:
        batch = max(2 * (n_samples - filled), 1024)
        comp = rng.integers(0, k, size=batch)
        x = rng.standard_normal((batch, dim))
        x[:, 0] += means[comp]
        eta_q = drifted_posterior(source_posterior(x, class_means), phi)
        keep = rng.random(batch) < eta_q[:, class_label - 1]
        take = x[keep][: n_samples - filled]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def oracle_thresholds(
    r: float,
    alpha: float,
    class_means=DEFAULT_CLASS_MEANS,
    n_draws: int = 1_000_000,
    seed: int = 0,
) -> np.ndarray:
    """Oracle confidence-region cutoffs t_j: the alpha-quantile of the true
    class-j source posterior under the target class-conditional law, so that
    {x: eta_P_j(x) >= t_j} carries target-class mass 1 - alpha.
    """
    means = np.asarray(class_means, dtype=float)
    k = means.size
    out = np.empty(k)
    for j in range(1, k + 1):
        # the posterior depends on the first coordinate only, so dim=1 suffices
        x = sample_target_class_features(
            j, r, n_draws, class_means=class_means, dim=1, seed=(seed, j)
        )
        eta = source_posterior(x, class_means)
        out[j - 1] = float(np.quantile(eta[:, j - 1], alpha))
    return out


def symdiff_estimate(
    classifier: SetClassifier,
    oracle_t,
    features_by_class,
    class_means=DEFAULT_CLASS_MEANS,
) -> np.ndarray:
    """Per-class Monte-Carlo mass of the symmetric difference between the
    fitted confidence region {x: eta_hat_j(x) >= t_hat_j} and the oracle one
    {x: eta_P_j(x) >= t_j}, each evaluated on a sample from the target
    class-conditional law (one array per class).
    """
    oracle_t = np.asarray(oracle_t, dtype=float)
    k = classifier.n_classes
    if oracle_t.size != k or len(features_by_class) != k:
        raise ValueError("need one oracle threshold and one sample per class")
    out = np.empty(k)
    for j in range(1, k + 1):
        X = np.atleast_2d(np.asarray(features_by_class[j - 1], dtype=float))
        scores = np.atleast_2d(classifier.model.predict_proba(X))[:, j - 1]
        fitted = scores >= classifier.threshold_matrix(X)[:, j - 1]
        oracle = source_posterior(X, class_means)[:, j - 1] >= oracle_t[j - 1]
        out[j - 1] = float(np.mean(fitted != oracle))
    return out
