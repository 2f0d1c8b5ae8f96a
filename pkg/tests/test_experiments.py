"""Experiment driver and table-exchange tests."""

import json
import os

import numpy as np
import pytest

from shiftconformal.datagen import SimulationConfig, simulate_dataset
from shiftconformal.estimators import ModelKind
from shiftconformal.evaluation import Method, TrialResult, aggregate
from shiftconformal.experiments import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    ExperimentMode,
    _csv_text,
    export_csv,
    import_csv,
    load_config,
    ratio_kind_for,
    run_experiment,
    sidecar_path,
)
from shiftconformal.ratios import RatioKind


def small_config(tmp_path, name="run", **overrides):
    kwargs = dict(
        n_trials=2,
        r_grid=(1.0, 2.0),
        n_per_class=120,
        seed=7,
        csv_path=str(tmp_path / f"{name}.csv"),
        json_path=str(tmp_path / f"{name}.json"),
    )
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


class TestConfig:
    def test_mode_defaults(self):
        sim = ExperimentConfig()
        assert sim.r_grid == (1.0, 1.4, 2.0)
        assert len(sim.methods) == 5
        semi = ExperimentConfig(mode=ExperimentMode.SEMI_SYNTHETIC)
        assert semi.r_grid == (1.2,)
        assert semi.methods == (
            Method.WCC_CSPD_ESTIMATED,
            Method.WCP_ESTIMATED,
            Method.CP,
        )

    def test_string_values_are_coerced(self):
        cfg = ExperimentConfig(
            mode="simulate", estimator="k_nearest_neighbor", methods=("CP",)
        )
        assert cfg.mode is ExperimentMode.SIMULATE
        assert cfg.estimator is ModelKind.K_NEAREST_NEIGHBOR
        assert cfg.methods == (Method.CP,)

    @pytest.mark.parametrize(
        "kwargs, fragment",
        [
            (dict(n_trials=0), "n_trials"),
            (dict(alpha=0.0), "alpha"),
            (dict(alpha=1.0), "alpha"),
            (dict(r_grid=(0.5,)), "r_grid"),
            (dict(r_grid=()), "r_grid"),
            (dict(seed=-1), "seed"),
            (dict(jobs=0), "jobs"),
            (dict(n_per_class=5), "n_per_class"),
            (dict(methods=()), "methods"),
            (dict(methods=("CP", "CP")), "methods"),
            (dict(mode="bogus"), "mode"),
            (dict(estimator="bogus"), "estimator"),
            (dict(csv_path=""), "csv_path"),
            (dict(data_path="x.csv"), "data_path"),
        ],
    )
    def test_invalid_field_named_in_error(self, kwargs, fragment):
        with pytest.raises(ConfigError, match=fragment):
            ExperimentConfig(**kwargs)

    def test_oracle_methods_rejected_in_semi_mode(self):
        with pytest.raises(ConfigError, match="WCC_CSPD_Oracle"):
            ExperimentConfig(
                mode="semi", methods=("WCC_CSPD_Oracle", "CP")
            )

    def test_mapping_round_trip(self):
        cfg = ExperimentConfig(n_trials=3, r_grid=(1.0, 1.4), seed=9, jobs=2)
        assert ExperimentConfig.from_mapping(cfg.to_mapping()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config field 'trials'"):
            ExperimentConfig.from_mapping({"trials": 5})

    def test_integer_fields_reject_strings(self):
        with pytest.raises(ConfigError, match="n_trials"):
            ExperimentConfig.from_mapping({"n_trials": "5"})
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_mapping({"seed": 1.5})

    def test_ratio_kind_for(self):
        assert ratio_kind_for(Method.WCC_CSPD_ORACLE) is RatioKind.ORACLE
        assert ratio_kind_for(Method.WCP_ORACLE) is RatioKind.ORACLE
        assert ratio_kind_for(Method.WCC_CSPD_ESTIMATED) is RatioKind.ESTIMATED
        assert ratio_kind_for(Method.WCP_ESTIMATED) is RatioKind.ESTIMATED
        assert ratio_kind_for(Method.CP) is None


class TestLoadConfig:
    def test_reads_flat_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"n_trials": 3, "r_grid": [1.0, 2.0], "seed": 4}))
        cfg = load_config(str(p))
        assert cfg.n_trials == 3
        assert cfg.r_grid == (1.0, 2.0)

    def test_invalid_json_names_path(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="cfg.json"):
            load_config(str(p))

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="missing.json"):
            load_config(str(tmp_path / "missing.json"))


class TestRunExperiment:
    def test_row_count_and_header(self, tmp_path):
        cfg = small_config(tmp_path)
        results = run_experiment(cfg)
        lines = (tmp_path / "run.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        k = 3
        expected = cfg.n_trials * len(cfg.r_grid) * len(cfg.methods) * (k + 1)
        assert len(lines) - 1 == expected
        assert len(results) == cfg.n_trials * len(cfg.r_grid) * len(cfg.methods)

    def test_row_ordering(self, tmp_path):
        cfg = small_config(tmp_path, methods=("CP", "WCC_CSPD_Oracle"))
        run_experiment(cfg)
        rows = [
            line.split(",")
            for line in (tmp_path / "run.csv").read_text().splitlines()[1:]
        ]
        keys = [(r[0], r[2], r[1], r[3]) for r in rows]
        # trials ascending, r in grid order, methods in config order,
        # classes 1..K then the marginal row
        expected = [
            (str(t), rv, m, c)
            for t in range(2)
            for rv in ("1", "2")
            for m in ("CP", "WCC_CSPD_Oracle")
            for c in ("1", "2", "3", "marginal")
        ]
        assert keys == expected

    def test_reruns_are_byte_identical(self, tmp_path):
        a = small_config(tmp_path, name="a")
        b = small_config(tmp_path, name="b")
        run_experiment(a)
        run_experiment(b)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_worker_pool_preserves_output(self, tmp_path):
        seq = small_config(tmp_path, name="seq", n_trials=3, r_grid=(1.4,))
        par = small_config(tmp_path, name="par", n_trials=3, r_grid=(1.4,), jobs=3)
        run_experiment(seq)
        run_experiment(par)
        assert (tmp_path / "seq.csv").read_bytes() == (tmp_path / "par.csv").read_bytes()
        a = json.loads((tmp_path / "seq.json").read_text())
        b = json.loads((tmp_path / "par.json").read_text())
        assert a["summary"] == b["summary"]

    def test_json_summary_matches_aggregate(self, tmp_path):
        cfg = small_config(tmp_path, methods=("CP",), r_grid=(1.4,))
        results = run_experiment(cfg)
        payload = json.loads((tmp_path / "run.json").read_text())
        assert payload["config"]["seed"] == 7
        assert payload["n_results"] == len(results)
        agg = aggregate(results)
        assert len(payload["summary"]) == len(agg)
        for got, want in zip(payload["summary"], agg):
            assert got["method"] == want["method"]
            assert got["class"] == want["class"]
            assert got["coverage_mean"] == pytest.approx(want["coverage_mean"])

    def test_semi_mode_runs_on_standin(self, tmp_path):
        cfg = ExperimentConfig(
            mode="semi",
            n_trials=1,
            seed=3,
            csv_path=str(tmp_path / "semi.csv"),
            json_path=str(tmp_path / "semi.json"),
        )
        results = run_experiment(cfg)
        assert {res.method for res in results} == {
            Method.WCC_CSPD_ESTIMATED,
            Method.WCP_ESTIMATED,
            Method.CP,
        }
        assert all(res.r == 1.2 for res in results)

    def test_semi_mode_reads_data_path(self, tmp_path):
        data = simulate_dataset(SimulationConfig(n_per_class=100, r=1.0, seed=5))
        table = tmp_path / "table.csv"
        export_csv(data, str(table))
        cfg = ExperimentConfig(
            mode="semi",
            n_trials=1,
            methods=("CP",),
            data_path=str(table),
            seed=2,
            csv_path=str(tmp_path / "out.csv"),
            json_path=str(tmp_path / "out.json"),
        )
        results = run_experiment(cfg)
        assert len(results) == 1
        assert results[0].n_classes == 3

    def test_write_failure_names_path(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not a directory")
        cfg = small_config(
            tmp_path,
            n_trials=1,
            r_grid=(1.0,),
            methods=("CP",),
            csv_path=str(blocker / "out.csv"),
        )
        with pytest.raises(OSError, match="out.csv"):
            run_experiment(cfg)

    def test_absent_class_yields_nan_cells(self):
        res = TrialResult(
            method=Method.CP,
            r=1.0,
            class_coverage=(0.9, None, 0.8),
            marginal_coverage=0.85,
            avg_set_size=1.5,
            empty_rate=0.0,
            seed=4,
            class_avg_size=(1.4, None, 1.6),
            class_empty_rate=(0.0, None, 0.0),
        )
        lines = _csv_text([(0, [res])]).splitlines()
        absent = lines[2].split(",")
        assert absent[3] == "2"
        assert absent[4:7] == ["nan", "nan", "nan"]
        marginal = lines[4].split(",")
        assert marginal[3] == "marginal"
        assert marginal[4] == "0.85"

    def test_six_significant_digits(self):
        res = TrialResult(
            method=Method.CP,
            r=1.0,
            class_coverage=(1.0 / 3.0,),
            marginal_coverage=1.0 / 3.0,
            avg_set_size=2.0 / 3.0,
            empty_rate=0.0,
            seed=1,
            class_avg_size=(2.0 / 3.0,),
            class_empty_rate=(0.125,),
        )
        line = _csv_text([(0, [res])]).splitlines()[1]
        assert line.split(",")[4] == "0.333333"
        assert line.split(",")[5] == "0.666667"


class TestTableExchange:
    def test_round_trip_is_lossless(self, tmp_path):
        data = simulate_dataset(SimulationConfig(n_per_class=40, r=1.4, seed=5))
        p = tmp_path / "table.csv"
        export_csv(data, str(p))
        assert import_csv(str(p)) == data

    def test_sidecar_records_classes(self, tmp_path):
        data = simulate_dataset(SimulationConfig(n_per_class=15, seed=1))
        p = tmp_path / "t.csv"
        export_csv(data, str(p), class_names=["low", "mid", "high"])
        side = json.loads((tmp_path / "t.labels.json").read_text())
        assert side["classes"] == ["low", "mid", "high"]
        text = p.read_text()
        assert "low" in text and "3" not in text.splitlines()[1].split(",")[-2]
        assert import_csv(str(p)) == data

    def test_sidecar_path(self):
        assert sidecar_path("out/data.csv") == "out/data.labels.json"

    def test_export_validates_names(self, tmp_path):
        data = simulate_dataset(SimulationConfig(n_per_class=12, seed=1))
        with pytest.raises(ValueError, match="feature names"):
            export_csv(data, str(tmp_path / "x.csv"), feature_names=["a"])
        with pytest.raises(ValueError, match="class names"):
            export_csv(data, str(tmp_path / "x.csv"), class_names=["a"])
        with pytest.raises(ValueError, match="distinct"):
            export_csv(data, str(tmp_path / "x.csv"), class_names=["a", "a", "b"])

    def test_header_and_float_repr(self, tmp_path):
        data = simulate_dataset(SimulationConfig(n_per_class=12, dim=2, seed=1))
        p = tmp_path / "t.csv"
        export_csv(data, str(p))
        lines = p.read_text().splitlines()
        assert lines[0] == "x1,x2,label,domain"
        cell = lines[1].split(",")[0]
        assert float(cell) == data.points[0].features[0]

    @pytest.mark.parametrize(
        "text, fragment",
        [
            ("x1,label\n0.5,1\nabc,2\n", r"row 3, column 'x1'"),
            ("x1,label\n0.5,1\n0.2\n", r"row 3: expected 2 cells"),
            ("x1,label,domain\n0.5,1,source\n0.2,1,mars\n", r"column 'domain'"),
            ("x1,y\n0.5,1\n", "label"),
            ("x1,x1,label\n0.5,0.5,1\n", "duplicate"),
            ("x1,label\n", "no data rows"),
            ("", "empty"),
            ("label\n1\n", "no feature columns"),
        ],
    )
    def test_malformed_tables(self, tmp_path, text, fragment):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(ValueError, match=fragment):
            import_csv(str(p))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nothere.csv"):
            import_csv(str(tmp_path / "nothere.csv"))

    def test_no_domain_column_defaults_to_source(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("x1,label\n0.5,1\n0.2,2\n")
        data = import_csv(str(p))
        assert all(point.domain.value == "source" for point in data.points)
        assert data.n_classes == 2

    def test_string_labels_map_by_sorted_order(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("x1,label\n0.5,low\n0.2,high\n0.9,low\n")
        data = import_csv(str(p))
        # sorted distinct: high -> 1, low -> 2
        assert [point.label for point in data.points] == [2, 1, 2]

    def test_sidecar_rejects_unknown_class(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("x1,label\n0.5,low\n0.2,unknown\n")
        (tmp_path / "t.labels.json").write_text(json.dumps({"classes": ["low", "high"]}))
        with pytest.raises(ValueError, match="row 3, column 'label'"):
            import_csv(str(p))

    def test_noncanonical_integer_labels_use_string_route(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("x1,label\n0.5,01\n0.2,02\n")
        data = import_csv(str(p))
        assert [point.label for point in data.points] == [1, 2]
        assert data.n_classes == 2

    def test_zero_based_integer_labels_remapped(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("x1,label\n0.5,0\n0.2,1\n0.7,0\n")
        data = import_csv(str(p))
        assert [point.label for point in data.points] == [1, 2, 1]
        assert data.n_classes == 2
