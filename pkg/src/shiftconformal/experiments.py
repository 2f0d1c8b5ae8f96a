"""Experiment driver and table exchange.

The run loop draws one dataset per (trial, r) cell, fits one score model on
the source training half, and calibrates every requested method on the same
split, so method comparisons never see different data. Per-trial rows go to
a flat CSV; grouped means with standard errors go to a JSON summary next to
it. Reruns under the same config are byte-identical, with or without worker
processes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .conformal import calibrate, cp_baseline, wcp_baseline
from .core import Alpha, Dataset, Domain, LabeledPoint, split_dataset
from .datagen import (
    PhiSpec,
    SimulationConfig,
    generate_health_standin,
    semi_synthetic_pipeline,
    simulate_dataset,
)
from .estimators import ModelKind, fit_model
from .evaluation import Method, TrialResult, aggregate, evaluate
from .ratios import RatioKind, estimated_ratio_from_split, oracle_ratio_simulation

__all__ = [
    "CSV_HEADER",
    "ConfigError",
    "ExperimentMode",
    "ExperimentConfig",
    "ratio_kind_for",
    "read_config_mapping",
    "load_config",
    "run_experiment",
    "export_csv",
    "import_csv",
    "sidecar_path",
]

CSV_HEADER = "trial,method,r,class,coverage,avg_set_size,empty_rate,seed"

SPLIT_RATIOS = (0.5, 0.1, 0.4)


class ConfigError(ValueError):
    """Bad configuration value; the message names the offending field."""


class ExperimentMode(Enum):
    SIMULATE = "simulate"
    SEMI_SYNTHETIC = "semi"


_SIM_DEFAULT_METHODS = (
    Method.WCC_CSPD_ORACLE,
    Method.WCC_CSPD_ESTIMATED,
    Method.WCP_ORACLE,
    Method.WCP_ESTIMATED,
    Method.CP,
)
_SEMI_DEFAULT_METHODS = (
    Method.WCC_CSPD_ESTIMATED,
    Method.WCP_ESTIMATED,
    Method.CP,
)
_ORACLE_METHODS = frozenset({Method.WCC_CSPD_ORACLE, Method.WCP_ORACLE})


def ratio_kind_for(method: Method) -> RatioKind | None:
    """Which weight function a method calibrates with (None: unweighted)."""
    if method in _ORACLE_METHODS:
        return RatioKind.ORACLE
    if method is Method.CP:
        return None
    return RatioKind.ESTIMATED


def _parse_enum(enum_cls, value, fieldname: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        options = ", ".join(repr(m.value) for m in enum_cls)
        raise ConfigError(
            f"{fieldname}: unknown value {value!r} (choose from {options})"
        ) from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs. Unset r_grid/methods pick mode defaults:
    the simulated sweep runs all five methods over r in {1, 1.4, 2}; the
    semi-synthetic run uses the estimated-weight methods plus the unweighted
    baseline at drift power 1.2.
    """

    mode: ExperimentMode = ExperimentMode.SIMULATE
    r_grid: tuple[float, ...] | None = None
    n_trials: int = 200
    alpha: float = 0.1
    methods: tuple[Method, ...] | None = None
    estimator: ModelKind = ModelKind.MULTINOMIAL_LOGISTIC
    seed: int = 0
    csv_path: str = "results.csv"
    json_path: str = "results.json"
    n_per_class: int = 1000
    data_path: str | None = None
    jobs: int = 1

    def __post_init__(self) -> None:
        mode = _parse_enum(ExperimentMode, self.mode, "mode")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(
            self, "estimator", _parse_enum(ModelKind, self.estimator, "estimator")
        )

        if self.r_grid is None:
            grid = (1.0, 1.4, 2.0) if mode is ExperimentMode.SIMULATE else (1.2,)
        else:
            try:
                grid = tuple(float(r) for r in np.atleast_1d(self.r_grid))
            except (TypeError, ValueError):
                raise ConfigError(f"r_grid: expected numbers, got {self.r_grid!r}") from None
        if not grid:
            raise ConfigError("r_grid: must not be empty")
        for r in grid:
            if not np.isfinite(r) or r < 1.0:
                raise ConfigError(f"r_grid: entries must be finite and >= 1, got {r}")
        object.__setattr__(self, "r_grid", grid)

        if self.methods is None:
            methods = (
                _SIM_DEFAULT_METHODS
                if mode is ExperimentMode.SIMULATE
                else _SEMI_DEFAULT_METHODS
            )
        else:
            methods = tuple(_parse_enum(Method, m, "methods") for m in self.methods)
        if not methods:
            raise ConfigError("methods: must not be empty")
        if len(set(methods)) != len(methods):
            raise ConfigError("methods: duplicates not allowed")
        if mode is ExperimentMode.SEMI_SYNTHETIC:
            bad = [m.value for m in methods if m in _ORACLE_METHODS]
            if bad:
                raise ConfigError(
                    f"methods: {bad[0]} needs mode 'simulate'; the exact covariate "
                    "ratio is only available for generated data"
                )
        object.__setattr__(self, "methods", methods)

        if not isinstance(self.n_trials, int) or self.n_trials < 1:
            raise ConfigError(f"n_trials: must be an integer >= 1, got {self.n_trials!r}")
        if not 0.0 < float(self.alpha) < 1.0:
            raise ConfigError(f"alpha: must lie strictly in (0, 1), got {self.alpha!r}")
        object.__setattr__(self, "alpha", float(self.alpha))
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.n_per_class, int) or self.n_per_class < 10:
            raise ConfigError(
                f"n_per_class: must be an integer >= 10, got {self.n_per_class!r}"
            )
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError(f"jobs: must be an integer >= 1, got {self.jobs!r}")
        for name in ("csv_path", "json_path"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise ConfigError(f"{name}: must be a non-empty path")
        if self.data_path is not None and mode is not ExperimentMode.SEMI_SYNTHETIC:
            raise ConfigError("data_path: only applies to mode 'semi'")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        """Build from a flat key/value mapping, rejecting unknown keys."""
        if not isinstance(mapping, dict):
            raise ConfigError("config must be a flat JSON object of key/value pairs")
        fields = set(cls.__dataclass_fields__)
        kwargs = {}
        for key, value in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config field '{key}'")
            if key in ("n_trials", "seed", "n_per_class", "jobs"):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key}: must be an integer, got {value!r}")
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {
            "mode": self.mode.value,
            "r_grid": list(self.r_grid),
            "n_trials": self.n_trials,
            "alpha": self.alpha,
            "methods": [m.value for m in self.methods],
            "estimator": self.estimator.value,
            "seed": self.seed,
            "csv_path": self.csv_path,
            "json_path": self.json_path,
            "n_per_class": self.n_per_class,
            "data_path": self.data_path,
            "jobs": self.jobs,
        }


def read_config_mapping(path: str) -> dict:
    """Raw key/value mapping from a flat JSON config file. Parse problems
    raise ConfigError naming the path.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return raw


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a flat JSON config file."""
    return ExperimentConfig.from_mapping(read_config_mapping(path))


def _trial_seed(root: int, trial: int, r_index: int) -> int:
    return int(np.random.SeedSequence((root, trial, r_index)).generate_state(1)[0])


def _trial_results(config, trial, table) -> list[TrialResult]:
    """All results of one trial: every r in the grid, every method, one
    shared dataset and score model per r.
    """
    out = []
    alpha = Alpha(config.alpha)
    needed = {ratio_kind_for(m) for m in config.methods}
    for ri, r in enumerate(config.r_grid):
        seed = _trial_seed(config.seed, trial, ri)
        if config.mode is ExperimentMode.SIMULATE:
            data = simulate_dataset(
                SimulationConfig(
                    n_per_class=config.n_per_class,
                    r=r,
                    alpha=config.alpha,
                    seed=seed,
                    split_ratios=SPLIT_RATIOS,
                )
            )
        else:
            features, labels = table
            data, _ = semi_synthetic_pipeline(
                features,
                labels,
                phi=PhiSpec.power(r),
                ratios=SPLIT_RATIOS,
                seed=seed,
                estimator_kind=config.estimator,
            )
        plan = split_dataset(data, SPLIT_RATIOS, seed)
        model = fit_model(
            data.feature_matrix(plan.s1),
            data.labels(plan.s1),
            kind=config.estimator,
            n_classes=data.n_classes,
        )
        ratios = {}
        if RatioKind.ORACLE in needed:
            ratios[RatioKind.ORACLE] = oracle_ratio_simulation(r=r)
        if RatioKind.ESTIMATED in needed:
            ratios[RatioKind.ESTIMATED] = estimated_ratio_from_split(
                data, plan, kind=config.estimator
            )
        x_test = data.feature_matrix(plan.test)
        y_test = data.labels(plan.test)
        for method in config.methods:
            if method is Method.CP:
                clf = cp_baseline(data, plan, alpha, estimator_kind=config.estimator)
            elif method in (Method.WCC_CSPD_ORACLE, Method.WCC_CSPD_ESTIMATED):
                clf = calibrate(model, data, plan, ratios[ratio_kind_for(method)], alpha)
            else:
                clf = wcp_baseline(model, data, plan, ratios[ratio_kind_for(method)], alpha)
            out.append(evaluate(clf, x_test, y_test, method, r=r, seed=seed))
    return out


def _run_single_trial(payload):
    config, trial, table = payload
    return trial, _trial_results(config, trial, table)


def _format_cell(value) -> str:
    if value is None:
        return "nan"
    return f"{float(value):.6g}"


def _csv_text(pairs) -> str:
    lines = [CSV_HEADER]
    for trial, results in pairs:
        for res in results:
            k = res.n_classes
            per_class = zip(res.class_coverage, res.class_avg_size, res.class_empty_rate)
            rows = [(str(j + 1), c, s, e) for j, (c, s, e) in enumerate(per_class)]
            rows.append(("marginal", res.marginal_coverage, res.avg_set_size, res.empty_rate))
            for cls, cov, size, empty in rows:
                lines.append(
                    ",".join(
                        (
                            str(trial),
                            res.method.value,
                            _format_cell(res.r),
                            cls,
                            _format_cell(cov),
                            _format_cell(size),
                            _format_cell(empty),
                            str(res.seed),
                        )
                    )
                )
    return "\n".join(lines) + "\n"


def _json_fallback(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _write_text(path: str, text: str) -> None:
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load_table(config):
    if config.mode is ExperimentMode.SIMULATE:
        return None
    if config.data_path is None:
        return generate_health_standin(seed=config.seed)
    data = import_csv(config.data_path)
    return data.feature_matrix(), data.labels()


def run_experiment(config: ExperimentConfig) -> list[TrialResult]:
    """Run the configured sweep and write the CSV and JSON outputs.

    The CSV holds one row per (trial, r, method, class) plus a marginal row
    per (trial, r, method); metric cells use 6 significant digits, and a
    class absent from a trial's test set yields nan cells rather than a
    missing row. The JSON file holds the config echo and the grouped
    mean/standard-error summary. Returns the flat result list in row order.
    """
    table = _load_table(config)
    payloads = [(config, trial, table) for trial in range(config.n_trials)]
    if config.jobs > 1 and config.n_trials > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            pairs = list(pool.map(_run_single_trial, payloads))
    else:
        pairs = [_run_single_trial(p) for p in payloads]
    # completion order is scheduler-dependent; row order must not be
    pairs.sort(key=lambda item: item[0])
    results = [res for _, trial_results in pairs for res in trial_results]

    _write_text(config.csv_path, _csv_text(pairs))
    summary = {
        "config": config.to_mapping(),
        "n_results": len(results),
        "summary": aggregate(results),
    }
    _write_text(
        config.json_path,
        json.dumps(summary, indent=2, sort_keys=True, default=_json_fallback) + "\n",
    )
    return results


# ---------------------------------------------------------------------------
# delimited table exchange


def sidecar_path(path: str) -> str:
    """Label-mapping JSON written next to an exported table."""
    base, _ = os.path.splitext(path)
    return base + ".labels.json"


def export_csv(data: Dataset, path: str, feature_names=None, class_names=None) -> None:
    """Write a dataset as a delimited table.

    Layout: one header row, one decimal column per feature (default names
    x1..xd), a "label" column, and a "domain" column with source/target
    tags. Floats use shortest round-trip repr, so importing the file
    reproduces the dataset exactly. The class list goes to a sidecar JSON
    (see sidecar_path); with class_names given, label cells carry the name
    instead of the integer.
    """
    if feature_names is None:
        feature_names = [f"x{i + 1}" for i in range(data.dim)]
    if len(feature_names) != data.dim:
        raise ValueError(
            f"need {data.dim} feature names, got {len(feature_names)}"
        )
    if class_names is None:
        classes = [str(j) for j in range(1, data.n_classes + 1)]
    else:
        classes = [str(c) for c in class_names]
        if len(classes) != data.n_classes:
            raise ValueError(
                f"need {data.n_classes} class names, got {len(classes)}"
            )
    if len(set(classes)) != len(classes):
        raise ValueError("class names must be distinct")

    rows = [list(feature_names) + ["label", "domain"]]
    for p in data.points:
        rows.append(
            [repr(float(v)) for v in p.features]
            + [classes[p.label - 1], p.domain.value]
        )
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write_text(path, buf.getvalue())
    _write_text(
        sidecar_path(path),
        json.dumps({"classes": classes}, indent=2) + "\n",
    )


def _cell_error(line: int, column: str, detail: str) -> ValueError:
    return ValueError(f"row {line}, column '{column}': {detail}")


def import_csv(path: str) -> Dataset:
    """Read a delimited table back into a dataset.

    Expects a header row with a "label" column; every other column except an
    optional "domain" column is parsed as a decimal feature. Labels may be
    positive integers or strings; string labels (and integer labels below 1)
    are mapped through the sidecar JSON when present, else through the sorted
    distinct values. Rows without a domain column import as source-tagged.
    Malformed cells raise with the file line number and column name.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            table = list(reader)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not table:
        raise ValueError(f"{path} is empty")
    header, *body = table
    if "label" not in header:
        raise ValueError(f"{path} has no 'label' column (header: {header})")
    if len(set(header)) != len(header):
        raise ValueError(f"{path} has duplicate column names")
    if not body:
        raise ValueError(f"{path} has no data rows")

    label_col = header.index("label")
    domain_col = header.index("domain") if "domain" in header else None
    feature_cols = [
        i for i in range(len(header)) if i != label_col and i != domain_col
    ]
    if not feature_cols:
        raise ValueError(f"{path} has no feature columns")

    parsed = []
    for offset, row in enumerate(body):
        line = offset + 2  # header is file line 1
        if len(row) != len(header):
            raise ValueError(
                f"row {line}: expected {len(header)} cells, got {len(row)}"
            )
        feats = []
        for i in feature_cols:
            try:
                feats.append(float(row[i]))
            except ValueError:
                raise _cell_error(
                    line, header[i], f"could not parse {row[i]!r} as a number"
                ) from None
        domain = Domain.SOURCE
        if domain_col is not None:
            tag = row[domain_col].strip().lower()
            try:
                domain = Domain(tag)
            except ValueError:
                raise _cell_error(
                    line, "domain", f"expected source or target, got {row[domain_col]!r}"
                ) from None
        parsed.append((line, tuple(feats), row[label_col].strip(), domain))

    raw_labels = [lab for _, _, lab, _ in parsed]
    classes = None
    side = sidecar_path(path)
    if os.path.exists(side):
        with open(side, "r", encoding="utf-8") as fh:
            classes = [str(c) for c in json.load(fh)["classes"]]
    if classes is None and all(_is_canonical_positive_int(lab) for lab in raw_labels):
        to_index = None
        n_classes = max(int(lab) for lab in raw_labels)
    else:
        if classes is None:
            classes = sorted(set(raw_labels))
        to_index = {c: j + 1 for j, c in enumerate(classes)}
        n_classes = len(classes)

    points = []
    for line, feats, lab, domain in parsed:
        if to_index is None:
            label = int(lab)
        elif lab in to_index:
            label = to_index[lab]
        else:
            raise _cell_error(line, "label", f"unknown class {lab!r}")
        points.append(LabeledPoint(features=feats, label=label, domain=domain))
    return Dataset(points=tuple(points), n_classes=n_classes, dim=len(feature_cols))


def _is_canonical_positive_int(text: str) -> bool:
    try:
        value = int(text)
    except ValueError:
        return False
    return value >= 1 and str(value) == text
