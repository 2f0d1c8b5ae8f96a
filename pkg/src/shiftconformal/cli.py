"""Command-line interface.

Subcommands: simulate and semi run the two experiment sweeps; check-gcspd
probes the drift-transform ordering condition; export-data writes a generated
table; report renders figures from an emitted results table. Exit codes:
0 on success, 2 for configuration problems (including bad flags), 1 for
runtime failures. check-gcspd additionally exits 1 when the check fails.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .core import Domain, Dataset, LabeledPoint
from .datagen import (
    DEFAULT_CLASS_MEANS,
    HEALTH_STANDIN_COLUMNS,
    PhiSpec,
    SimulationConfig,
    check_gcspd_at_alpha,
    generate_health_standin,
    simulate_dataset,
    source_posterior,
)
from .estimators import ModelKind
from .experiments import (
    ConfigError,
    ExperimentConfig,
    ExperimentMode,
    export_csv,
    read_config_mapping,
    run_experiment,
    sidecar_path,
)
from .report import gcspd_margin_figure, render_report

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_GCSPD_ALPHA_GRID = (0.05, 0.1, 0.15, 0.2)


def _add_run_flags(sub) -> None:
    sub.add_argument(
        "--config", help="flat JSON config file; explicit flags override its fields"
    )
    sub.add_argument(
        "--mode",
        choices=[m.value for m in ExperimentMode],
        help="experiment mode (default: the subcommand's own)",
    )
    sub.add_argument("--trials", type=int, help="number of repeated trials")
    sub.add_argument("--alpha", type=float, help="miscoverage level in (0,1)")
    sub.add_argument("--seed", type=int, help="root seed of the sweep")
    sub.add_argument(
        "--out", help="results CSV path; the JSON summary lands next to it"
    )
    sub.add_argument(
        "--r",
        action="append",
        type=float,
        metavar="R",
        help="drift power; repeat the flag for a grid",
    )
    sub.add_argument("--jobs", type=int, help="worker processes (default 1)")
    sub.add_argument(
        "--estimator",
        choices=[k.value for k in ModelKind],
        help="score and weight model family",
    )
    sub.add_argument(
        "--n-per-class", type=int, dest="n_per_class", help="simulated class size"
    )
    sub.add_argument(
        "--data",
        dest="data_path",
        help="input table for mode semi (default: the built-in stand-in)",
    )
    sub.add_argument(
        "--report",
        action="store_true",
        help="render figures next to the CSV after the run",
    )


def _merged_config(args, fallback_mode: ExperimentMode) -> ExperimentConfig:
    mapping = read_config_mapping(args.config) if args.config else {}
    mapping.setdefault("mode", fallback_mode.value)
    overrides = {
        "mode": args.mode,
        "n_trials": args.trials,
        "alpha": args.alpha,
        "seed": args.seed,
        "r_grid": args.r,
        "jobs": args.jobs,
        "estimator": args.estimator,
        "n_per_class": args.n_per_class,
        "data_path": args.data_path,
    }
    for key, value in overrides.items():
        if value is not None:
            mapping[key] = value
    if args.out:
        mapping["csv_path"] = args.out
        mapping["json_path"] = os.path.splitext(args.out)[0] + ".json"
    return ExperimentConfig.from_mapping(mapping)


def _cmd_run(args, fallback_mode: ExperimentMode) -> int:
    config = _merged_config(args, fallback_mode)
    results = run_experiment(config)
    print(f"wrote {config.csv_path} and {config.json_path} ({len(results)} results)")
    if args.report:
        for path in render_report(config.csv_path, alpha=config.alpha):
            print(f"wrote {path}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    return _cmd_run(args, ExperimentMode.SIMULATE)


def _cmd_semi(args) -> int:
    return _cmd_run(args, ExperimentMode.SEMI_SYNTHETIC)


def _eta_samples(n: int, seed: int) -> np.ndarray:
    """Source-posterior values on a stratified draw from the feature mixture."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(DEFAULT_CLASS_MEANS), size=n)
    x1 = rng.standard_normal(n) + np.asarray(DEFAULT_CLASS_MEANS)[labels]
    return source_posterior(x1[:, None])


def _cmd_check_gcspd(args) -> int:
    rs = args.r or [1.2]
    alphas = args.alpha or list(_GCSPD_ALPHA_GRID)
    eta = _eta_samples(args.samples, args.seed)
    n_classes = eta.shape[1]
    all_ok = True
    for r_index, r in enumerate(rs):
        phi = PhiSpec.power(r)
        margins = []
        for alpha in alphas:
            checks = [
                check_gcspd_at_alpha(phi, eta[:, j], alpha) for j in range(n_classes)
            ]
            margin = min(c.margin for c in checks)
            ok = all(c.passed for c in checks)
            all_ok = all_ok and ok
            margins.append(margin)
            print(
                f"r={r:g} alpha={alpha:g} margin={margin:.4f} "
                f"{'PASS' if ok else 'FAIL'}"
            )
        if args.out:
            stem, ext = os.path.splitext(args.out)
            path = args.out if len(rs) == 1 else f"{stem}_r{r:g}{ext or '.png'}"
            gcspd_margin_figure(alphas, margins, path)
            print(f"wrote {path}")
    return EXIT_OK if all_ok else EXIT_RUNTIME


def _cmd_export_data(args) -> int:
    if args.kind == "simulate":
        rs = args.r or [1.0]
        if len(rs) != 1:
            raise ConfigError("r_grid: export-data takes exactly one --r")
        data = simulate_dataset(
            SimulationConfig(
                n_per_class=args.n_per_class, r=rs[0], seed=args.seed
            )
        )
        export_csv(data, args.out)
    else:
        features, labels = generate_health_standin(n=args.n, seed=args.seed)
        points = tuple(
            LabeledPoint(
                features=tuple(float(v) for v in row),
                label=int(lab),
                domain=Domain.SOURCE,
            )
            for row, lab in zip(features, labels)
        )
        data = Dataset(points=points, n_classes=int(labels.max()), dim=features.shape[1])
        export_csv(data, args.out, feature_names=list(HEALTH_STANDIN_COLUMNS))
    print(f"wrote {args.out} and {sidecar_path(args.out)} ({len(data)} rows)")
    return EXIT_OK


def _cmd_report(args) -> int:
    for path in render_report(args.csv, out_dir=args.out_dir, alpha=args.alpha):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftconformal",
        description="Conformal prediction sets under covariate shift with label drift",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="run the synthetic sweep")
    _add_run_flags(sim)
    sim.set_defaults(func=_cmd_simulate)

    semi = subs.add_parser("semi", help="run the semi-synthetic experiment")
    _add_run_flags(semi)
    semi.set_defaults(func=_cmd_semi)

    chk = subs.add_parser(
        "check-gcspd", help="probe the drift-transform ordering condition"
    )
    chk.add_argument("--r", action="append", type=float, help="drift power (repeatable)")
    chk.add_argument(
        "--alpha", action="append", type=float, help="level to probe (repeatable)"
    )
    chk.add_argument("--samples", type=int, default=20_000)
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--out", help="optional margin-curve PNG")
    chk.set_defaults(func=_cmd_check_gcspd)

    exp = subs.add_parser("export-data", help="write a generated table as CSV")
    exp.add_argument(
        "--kind", choices=["simulate", "semi-standin"], default="simulate"
    )
    exp.add_argument("--out", required=True, help="CSV path")
    exp.add_argument("--r", action="append", type=float, help="drift power")
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--n-per-class", type=int, dest="n_per_class", default=1000)
    exp.add_argument("--n", type=int, default=1013, help="stand-in row count")
    exp.set_defaults(func=_cmd_export_data)

    rep = subs.add_parser("report", help="render figures from a results table")
    rep.add_argument("csv", help="emitted results CSV")
    rep.add_argument("--alpha", type=float, default=0.1)
    rep.add_argument("--out-dir", help="figure directory (default: next to the CSV)")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
