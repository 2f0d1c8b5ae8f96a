"""End-to-end acceptance checks.

Nine checks run in order, each printing one PASS/FAIL line (bypassing
capture, so the lines show up in any pytest invocation). The heavy ones
re-run the full experiment sweeps at their production scale, so this file
takes a few minutes; everything is seeded and deterministic.

Known failure: in check 2/9 the oracle-weight sweep averages ~0.899
marginal coverage, below the asserted [0.91, 0.95] window. With continuous
scores the exact-weight method is calibrated at the nominal level, and
nothing in this pipeline reproduces the inflation that window presumes; see
the window-by-window figures printed by the check. The other three windows
in that check pass.
"""

import itertools
import math
import time

import numpy as np
import pytest

from shiftconformal.conformal import (
    WeightMode,
    calibrate,
    compute_weights,
    exact_weight_matrix,
    weighted_quantile,
)
from shiftconformal.core import (
    Alpha,
    Dataset,
    Domain,
    LabeledPoint,
    SplitPlan,
    split_dataset,
)
from shiftconformal.datagen import (
    DEFAULT_CLASS_MEANS,
    PhiSpec,
    SimulationConfig,
    check_gcspd_at_alpha,
    generate_health_standin,
    semi_synthetic_pipeline,
    simulate_dataset,
    source_posterior,
)
from shiftconformal.estimators import fit_model
from shiftconformal.evaluation import (
    Method,
    evaluate,
    oracle_thresholds,
    sample_target_class_features,
    symdiff_estimate,
)
from shiftconformal.experiments import ExperimentConfig, run_experiment
from shiftconformal.ratios import (
    constant_ratio,
    delta_w_diagnostic,
    estimated_ratio_from_split,
    oracle_ratio_simulation,
)
from shiftconformal.symfun import esp_dp, esp_newton

ALPHA = 0.1


def seed_of(*parts) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def announce(capsys, line: str) -> None:
    with capsys.disabled():
        print(line, flush=True)


class _PosteriorModel:
    """Closed-form source posterior as a fitted-model stand-in."""

    n_classes = 3

    def predict_proba(self, X):
        return source_posterior(np.asarray(X, dtype=float))


# --------------------------------------------------------------------------
# 1/9: under exchangeability (constant ratio, shared feature law) the
# weighted machinery must reduce to plain split conformal and keep the
# class-conditional coverage floor.


def _exchangeable_trial(seed: int):
    rng = np.random.default_rng([seed, 11])
    n_cal, n_test = 300, 300
    n = n_cal + n_test
    labels = rng.integers(1, 4, size=n)
    x = rng.standard_normal(n) + np.asarray(DEFAULT_CLASS_MEANS)[labels - 1]
    half = n_cal // 2
    points = tuple(
        LabeledPoint(
            features=(float(x[i]),),
            label=int(labels[i]),
            domain=Domain.SOURCE if i < half else Domain.TARGET,
        )
        for i in range(n)
    )
    data = Dataset(points=points, n_classes=3, dim=1)
    plan = SplitPlan(
        s1=(),
        s2=tuple(range(half)),
        t=tuple(range(half, n_cal)),
        test=tuple(range(n_cal, n)),
        seed=seed,
    )
    clf = calibrate(
        _PosteriorModel(), data, plan, constant_ratio(3), Alpha(ALPHA),
        mode=WeightMode.EXACT_PER_TEST,
    )
    res = evaluate(
        clf,
        data.feature_matrix(plan.test),
        data.labels(plan.test),
        Method.WCC_CSPD_ORACLE,
        r=1.0,
        seed=seed,
    )
    return res.class_coverage


def test_exchangeable_sanity(capsys):
    t0 = time.monotonic()
    n_trials = 2000
    coverages = [[], [], []]
    for t in range(n_trials):
        cc = _exchangeable_trial(seed_of(101, t))
        for j in range(3):
            if cc[j] is not None:
                coverages[j].append(cc[j])
    elapsed = time.monotonic() - t0

    means, floors = [], []
    for j in range(3):
        arr = np.asarray(coverages[j])
        se = arr.std(ddof=1) / math.sqrt(arr.size)
        means.append(float(arr.mean()))
        floors.append(0.9 - 3.0 * se)
    ok = all(m >= f for m, f in zip(means, floors)) and elapsed < 120.0
    announce(
        capsys,
        f"[1/9 exchangeable-sanity] {'PASS' if ok else 'FAIL'}: "
        f"class coverage {np.round(means, 4).tolist()} vs floors "
        f"{np.round(floors, 4).tolist()} over {n_trials} trials, {elapsed:.0f}s",
    )
    assert elapsed < 120.0, f"sanity sweep took {elapsed:.0f}s, budget is 120s"
    for j in range(3):
        assert means[j] >= floors[j], (
            f"class {j + 1} coverage {means[j]:.4f} below {floors[j]:.4f}"
        )


# --------------------------------------------------------------------------
# 2/9: the full simulated sweep, 200 trials per drift power, checked against
# coverage windows for each method.


def test_simulated_sweep_windows(capsys, tmp_path):
    t0 = time.monotonic()
    config = ExperimentConfig(
        n_trials=200,
        r_grid=(1.0, 1.4, 2.0),
        n_per_class=1000,
        alpha=ALPHA,
        seed=20240501,
        csv_path=str(tmp_path / "sweep.csv"),
        json_path=str(tmp_path / "sweep.json"),
    )
    results = run_experiment(config)
    elapsed = time.monotonic() - t0

    def marginal(method, r=None):
        vals = [
            res.marginal_coverage
            for res in results
            if res.method is method and (r is None or res.r == r)
        ]
        return float(np.mean(vals))

    wcc_oracle = marginal(Method.WCC_CSPD_ORACLE)
    wcc_estimated = marginal(Method.WCC_CSPD_ESTIMATED)
    wcp_estimated_r2 = marginal(Method.WCP_ESTIMATED, 2.0)
    cp = marginal(Method.CP)

    checks = [
        ("oracle-weights avg", wcc_oracle, 0.91 <= wcc_oracle <= 0.95, "[0.91,0.95]"),
        ("estimated-weights avg", wcc_estimated, 0.88 <= wcc_estimated <= 0.93, "[0.88,0.93]"),
        ("covariate-only est r=2", wcp_estimated_r2, wcp_estimated_r2 < 0.87, "<0.87"),
        ("unweighted avg", cp, cp < 0.9, "<0.9"),
    ]
    ok = all(c[2] for c in checks) and elapsed < 1800.0
    detail = "; ".join(
        f"{name} {value:.4f} {window} {'ok' if passed else 'FAIL'}"
        for name, value, passed, window in checks
    )
    announce(
        capsys,
        f"[2/9 simulated-sweep] {'PASS' if ok else 'FAIL'}: {detail}; "
        f"{elapsed:.0f}s",
    )
    assert elapsed < 1800.0, f"sweep took {elapsed:.0f}s, budget is 1800s"
    assert 0.88 <= wcc_estimated <= 0.93, (
        f"estimated-weight marginal coverage {wcc_estimated:.4f} outside [0.88,0.93]"
    )
    assert wcp_estimated_r2 < 0.87, (
        f"covariate-only estimated coverage at r=2 is {wcp_estimated_r2:.4f}, expected <0.87"
    )
    assert cp < 0.9, f"unweighted baseline coverage {cp:.4f}, expected <0.9"
    assert 0.91 <= wcc_oracle <= 0.95, (
        f"oracle-weight marginal coverage {wcc_oracle:.4f} outside [0.91,0.95]; "
        "with continuous scores the exact-weight method sits at the nominal "
        "level (~0.90), and this window is not attainable by this pipeline"
    )


# --------------------------------------------------------------------------
# 3/9: weight kernel against brute-force enumeration.


def _esp_enum(values, k: int) -> float:
    return math.fsum(math.prod(c) for c in itertools.combinations(values, k))


def test_weight_kernel_against_enumeration(capsys):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 8))  # working set size n + 1 <= 8
        k = int(rng.integers(0, n + 1))
        cal = 10.0 ** rng.uniform(-2.0, 2.0, size=n)
        u = float(10.0 ** rng.uniform(-2.0, 2.0))

        numerators = [
            cal[i] * _esp_enum([*cal[:i], *cal[i + 1 :], u], k) for i in range(n)
        ]
        numerators.append(u * _esp_enum(cal, k))
        oracle = np.asarray(numerators) / math.fsum(numerators)

        mine = exact_weight_matrix(cal, k, np.array([u]))[0]
        worst = max(worst, float(np.max(np.abs(mine - oracle) / oracle)))
    ok_weights = worst < 1e-9

    worst_dp = 0.0
    for _ in range(60):
        n = int(rng.integers(1, 13))
        a = 10.0 ** rng.uniform(-2.0, 2.0, size=n)
        table = esp_dp(a, n)
        for k in range(n + 1):
            ref = _esp_enum(a, k)
            worst_dp = max(worst_dp, abs(table.value(k) - ref) / ref)
    ok_dp = worst_dp < 1e-9

    worst_newton = 0.0
    for _ in range(10):
        n = int(rng.integers(40, 65))
        a = 10.0 ** rng.uniform(-2.0, 2.0, size=n)
        dp = esp_dp(a, n)
        newton = esp_newton(a, n)
        for k in range(n + 1):
            worst_newton = max(
                worst_newton, abs(newton.value(k) - dp.value(k)) / dp.value(k)
            )
    ok_newton = worst_newton < 1e-8

    ok = ok_weights and ok_dp and ok_newton
    announce(
        capsys,
        f"[3/9 weight-kernel] {'PASS' if ok else 'FAIL'}: "
        f"500 weight vectors rel err {worst:.2e} (<1e-9); "
        f"symmetric sums vs enumeration rel {worst_dp:.2e}; "
        f"two pipelines rel {worst_newton:.2e} (<1e-8)",
    )
    assert ok_weights, f"weight vectors off by {worst:.3e} relative"
    assert ok_dp, f"symmetric-sum recursion off by {worst_dp:.3e}"
    assert ok_newton, f"power-sum route off by {worst_newton:.3e}"


# --------------------------------------------------------------------------
# 4/9: calibration weights must be invariant to rescaling every ratio value,
# since only ratios of products matter.


def test_weight_scale_invariance(capsys):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 41))
        k = int(rng.integers(0, n + 1))
        a = 10.0 ** rng.uniform(-2.0, 2.0, size=n)
        u = 10.0 ** rng.uniform(-2.0, 2.0, size=3)
        base = exact_weight_matrix(a, k, u)
        for scale in (1e4, 1e-4):
            scaled = exact_weight_matrix(a * scale, k, u * scale)
            worst = max(worst, float(np.max(np.abs(scaled - base) / base)))

        flags = np.zeros(n, dtype=bool)
        flags[:k] = True
        if 0 < k < n:
            shared = compute_weights(a, flags).point_weights
            for scale in (1e4, 1e-4):
                scaled = compute_weights(a * scale, flags).point_weights
                worst = max(worst, float(np.max(np.abs(scaled - shared) / shared)))
    ok = worst < 1e-10
    announce(
        capsys,
        f"[4/9 scale-invariance] {'PASS' if ok else 'FAIL'}: "
        f"worst relative drift {worst:.2e} under 1e+/-4 rescaling (<1e-10)",
    )
    assert ok, f"weights drifted by {worst:.3e} under rescaling"


# --------------------------------------------------------------------------
# 5/9: the weighted quantile against a direct CDF scan, plus threshold
# monotonicity and prediction-set nesting across levels on fitted models.


def _quantile_by_scan(beta, values, weights, tail):
    if tail >= beta - 1e-12:
        return -math.inf
    order = np.argsort(values, kind="stable")
    total = tail
    for idx in order:
        total += weights[idx]
        if total >= beta - 1e-12:
            return float(values[idx])
    return float(values[order[-1]])


def test_weighted_quantile_and_nesting(capsys):
    rng = np.random.default_rng(505)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        values = rng.normal(size=n)
        if rng.random() < 0.3:
            values[rng.integers(0, n)] = values[int(rng.integers(0, n))]  # ties
        parts = rng.dirichlet(np.ones(n + 1))
        weights, tail = parts[:n], float(parts[n])
        if rng.random() < 0.5:
            weights = parts[:n] / parts[:n].sum()
            tail = 0.0
        beta = float(rng.uniform(0.01, 0.99))
        got = weighted_quantile(beta, values, weights, tail_mass=tail)
        want = _quantile_by_scan(beta, values, weights, tail)
        if got != want and not (math.isinf(got) and math.isinf(want)):
            mismatches += 1
    ok_quantile = mismatches == 0

    alphas = (0.05, 0.1, 0.2)
    violations = 0
    for t in range(100):
        seed = seed_of(505, t)
        data = simulate_dataset(SimulationConfig(n_per_class=80, r=1.4, seed=seed))
        plan = split_dataset(data, (0.5, 0.1, 0.4), seed)
        model = fit_model(
            data.feature_matrix(plan.s1), data.labels(plan.s1), n_classes=3
        )
        ratio = oracle_ratio_simulation(r=1.4)
        x_test = data.feature_matrix(plan.test)
        level_sets = []
        prev_thresholds = None
        for alpha in alphas:
            clf = calibrate(model, data, plan, ratio, Alpha(alpha))
            thresholds = clf.thresholds
            if prev_thresholds is not None and np.any(
                thresholds < prev_thresholds - 1e-12
            ):
                violations += 1
            prev_thresholds = thresholds
            level_sets.append(clf.predict_sets(x_test))
        for tighter, looser in zip(level_sets[1:], level_sets[:-1]):
            if np.any(tighter & ~looser):  # higher alpha must give subsets
                violations += 1
    ok_nesting = violations == 0

    ok = ok_quantile and ok_nesting
    announce(
        capsys,
        f"[5/9 weighted-quantile] {'PASS' if ok else 'FAIL'}: "
        f"{mismatches}/1000 scan mismatches; "
        f"{violations} monotonicity/nesting violations over 100 fits",
    )
    assert ok_quantile, f"{mismatches} quantile values differ from the CDF scan"
    assert ok_nesting, f"{violations} threshold or set-nesting violations"


# --------------------------------------------------------------------------
# 6/9: the weight-estimation coverage bound. Class-conditional coverage may
# fall below 1 - alpha by at most the weight-vector total-variation gap.


def test_estimation_error_coverage_bound(capsys):
    t0 = time.monotonic()
    n_trials = 200
    oracle = oracle_ratio_simulation(r=2.0)
    held = 0
    for t in range(n_trials):
        seed = seed_of(606, t)
        data = simulate_dataset(SimulationConfig(n_per_class=1000, r=2.0, seed=seed))
        plan = split_dataset(data, (0.5, 0.1, 0.4), seed)
        model = fit_model(
            data.feature_matrix(plan.s1), data.labels(plan.s1), n_classes=3
        )
        estimated = estimated_ratio_from_split(data, plan)
        x_test = data.feature_matrix(plan.test)
        delta = delta_w_diagnostic(estimated, oracle, data, plan, x_test)
        clf = calibrate(
            model, data, plan, estimated, Alpha(ALPHA),
            mode=WeightMode.EXACT_PER_TEST,
        )
        res = evaluate(
            clf, x_test, data.labels(plan.test),
            Method.WCC_CSPD_ESTIMATED, r=2.0, seed=seed,
        )
        held += all(
            cov is None or cov >= 1.0 - ALPHA - delta[j]
            for j, cov in enumerate(res.class_coverage)
        )
    fraction = held / n_trials
    elapsed = time.monotonic() - t0
    ok = fraction >= 0.95
    announce(
        capsys,
        f"[6/9 estimation-bound] {'PASS' if ok else 'FAIL'}: bound held in "
        f"{held}/{n_trials} trials ({fraction:.1%}, need >=95%), {elapsed:.0f}s",
    )
    assert ok, f"coverage bound held in only {fraction:.1%} of trials"


# --------------------------------------------------------------------------
# 7/9: the drift-transform ordering check. The power family must pass at
# every level; a transform that dips after the threshold must be rejected;
# and the semi-synthetic pipeline's own transform must pass on its data.


def test_ordering_condition_checker(capsys):
    rng = np.random.default_rng(707)
    n = 20_000
    labels = rng.integers(0, 3, size=n)
    x1 = rng.standard_normal(n) + np.asarray(DEFAULT_CLASS_MEANS)[labels]
    eta = source_posterior(x1[:, None])

    alphas = (0.05, 0.1, 0.15, 0.2, 0.3, 0.5)
    power_ok = True
    for r in (1.0, 1.2, 1.4, 2.0):
        phi = PhiSpec.power(r)
        for alpha in alphas:
            for j in range(3):
                res = check_gcspd_at_alpha(phi, eta[:, j], alpha)
                power_ok = power_ok and res.passed

    s = eta[:, 0]
    t_alpha = float(np.quantile(s, 0.9))
    lo, hi = t_alpha * 0.5, min(1.0, t_alpha + 0.3)
    violator = PhiSpec.tabulated(
        [
            (0.0, 0.0),
            (lo, lo),
            (t_alpha, t_alpha),
            ((t_alpha + hi) / 2.0, t_alpha - 0.05),
            (hi, t_alpha - 0.01),
        ]
    )
    vres = check_gcspd_at_alpha(violator, s, 0.1)
    violator_ok = (not vres.passed) and vres.margin < 0

    features, table_labels = generate_health_standin(n=1013, seed=707)
    data, model = semi_synthetic_pipeline(features, table_labels, seed=707)
    # pipeline output groups source rows before target rows, so take the
    # target features from the dataset rather than masking the input table
    target_feats = np.asarray(
        [p.features for p in data.points if p.domain is Domain.TARGET]
    )
    eta_semi = model.predict_proba(target_feats)
    semi_ok = True
    for alpha in alphas:
        for j in range(3):
            res = check_gcspd_at_alpha(PhiSpec.power(1.2), eta_semi[:, j], alpha)
            semi_ok = semi_ok and res.passed

    ok = power_ok and violator_ok and semi_ok
    announce(
        capsys,
        f"[7/9 ordering-check] {'PASS' if ok else 'FAIL'}: power family "
        f"{'ok' if power_ok else 'FAIL'} on {len(alphas)} levels x 4 powers; "
        f"violator rejected {'ok' if violator_ok else 'FAIL'} "
        f"(margin {vres.margin:.3f}); semi transform "
        f"{'ok' if semi_ok else 'FAIL'}",
    )
    assert power_ok, "a power transform failed the ordering check"
    assert violator_ok, "the constructed violator was not rejected"
    assert semi_ok, "the semi-synthetic transform failed the ordering check"


# --------------------------------------------------------------------------
# 8/9: consistency of the fitted decision regions. Doubling the per-class
# sample must not increase the median disagreement with the oracle regions.


def test_region_consistency_under_doubling(capsys):
    t0 = time.monotonic()
    r, n_pairs = 1.4, 50
    thresholds = oracle_thresholds(r, ALPHA)
    small, large = [], []
    for t in range(n_pairs):
        feats = [
            sample_target_class_features(j, r, 2000, seed=seed_of(818, t, j))
            for j in (1, 2, 3)
        ]
        per_size = {}
        for idx, n_per_class in enumerate((250, 500)):
            seed = seed_of(808, t, idx)
            data = simulate_dataset(
                SimulationConfig(n_per_class=n_per_class, r=r, seed=seed)
            )
            plan = split_dataset(data, (0.5, 0.1, 0.4), seed)
            model = fit_model(
                data.feature_matrix(plan.s1), data.labels(plan.s1), n_classes=3
            )
            estimated = estimated_ratio_from_split(data, plan)
            clf = calibrate(model, data, plan, estimated, Alpha(ALPHA))
            per_size[n_per_class] = symdiff_estimate(clf, thresholds, feats)
        small.append(per_size[250])
        large.append(per_size[500])
    small = np.asarray(small)
    large = np.asarray(large)
    med_small = np.median(small, axis=0)
    med_large = np.median(large, axis=0)
    pooled_ok = float(np.median(large)) <= float(np.median(small))
    per_class_ok = bool(np.all(med_large <= med_small))
    elapsed = time.monotonic() - t0
    ok = pooled_ok and per_class_ok
    announce(
        capsys,
        f"[8/9 region-consistency] {'PASS' if ok else 'FAIL'}: median "
        f"disagreement {np.round(med_small, 4).tolist()} -> "
        f"{np.round(med_large, 4).tolist()} per class over {n_pairs} pairs, "
        f"{elapsed:.0f}s",
    )
    assert per_class_ok, (
        f"median disagreement grew for some class: {med_small} -> {med_large}"
    )
    assert pooled_ok, "pooled median disagreement grew when the sample doubled"


# --------------------------------------------------------------------------
# 9/9: the semi-synthetic experiment on the 1013-row stand-in table.


def test_semi_synthetic_standin(capsys, tmp_path):
    t0 = time.monotonic()
    config = ExperimentConfig(
        mode="semi",
        methods=("WCC_CSPD_Estimated",),
        n_trials=100,
        alpha=ALPHA,
        seed=909,
        csv_path=str(tmp_path / "semi.csv"),
        json_path=str(tmp_path / "semi.json"),
    )
    results = run_experiment(config)
    elapsed = time.monotonic() - t0
    marginal = float(np.mean([res.marginal_coverage for res in results]))
    ok = 0.86 <= marginal <= 0.93 and elapsed < 900.0
    announce(
        capsys,
        f"[9/9 semi-synthetic] {'PASS' if ok else 'FAIL'}: marginal coverage "
        f"{marginal:.4f} in [0.86,0.93] over {config.n_trials} trials, "
        f"{elapsed:.0f}s (<900s)",
    )
    assert elapsed < 900.0, f"semi-synthetic run took {elapsed:.0f}s, budget 900s"
    assert 0.86 <= marginal <= 0.93, (
        f"semi-synthetic marginal coverage {marginal:.4f} outside [0.86,0.93]"
    )
