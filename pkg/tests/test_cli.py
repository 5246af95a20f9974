import csv
import json
import sys

import pytest

from camera.cli import apply_override, main
from camera.errors import ConfigError
from camera.report import AGGREGATE_COLUMNS, CONTOUR_COLUMNS, config_from_artifact, read_record_csv, record_columns

FAST = ["--pool-size", "3000", "--n-is", "50", "--components", "2", "--restarts", "1", "--n-seed", "5",
        "--max-fit", "1000", "--no-figures",
        "--set", "acquisition.n_fantasies=2", "--set", "acquisition.inner_grid_size=32",
        "--set", "acquisition.outer_candidates=32", "--set", "acquisition.polish=false", "--set", "truth_n=10000"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def error_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestOverrides:
    def test_nested(self):
        tree = {"a": {"b": 1}}
        apply_override(tree, "a.c.d", 2)
        assert tree == {"a": {"b": 1, "c": {"d": 2}}}

    def test_scalar_in_the_way(self):
        with pytest.raises(ConfigError) as info:
            apply_override({"a": 1}, "a.b", 2)
        assert info.value.field == "a"


class TestTruth:
    def test_prints_interval(self, capsys):
        assert main(["truth", "--problem", "multimodal", "--n", "10", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("multimodal: p_F = ") and "N=10" in out

    def test_same_seed_same_text(self, capsys):
        main(["truth", "--problem", "ishigami", "--n", "5000", "--seed", "1"])
        first = capsys.readouterr().out
        main(["truth", "--problem", "ishigami", "--n", "5000", "--seed", "1"])
        assert capsys.readouterr().out == first

    def test_unknown_problem(self, capsys):
        assert main(["truth", "--problem", "nope", "--n", "10"]) == 1
        assert error_json(capsys)["error"] == "KeyError"


class TestRun:
    def test_artifacts(self, tmp_path, capsys):
        code = main(["run", "--problem", "multimodal", "--budget", "1500", "--reps", "2", "--seed", "7",
                     "--out", str(tmp_path), *FAST])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2 and all("p_hat=" in ln and "cumulative_cost=" in ln for ln in lines)
        for r in range(2):
            rows = read_csv(tmp_path / f"multimodal_multifidelity_rep{r}.csv")
            assert rows[0] == record_columns(2)
            cfg = config_from_artifact(tmp_path / f"multimodal_multifidelity_rep{r}.json")
            assert cfg.master_seed == 7 + r and cfg.budget == 1500.0
        assert read_csv(tmp_path / "multimodal_multifidelity_aggregate.csv")[0] == list(AGGREGATE_COLUMNS)
        contour = read_csv(tmp_path / "multimodal_multifidelity_contour.csv")
        assert contour[0] == list(CONTOUR_COLUMNS) and len(contour) == 200 * 200 + 1

    def test_single_fidelity_histogram(self, tmp_path):
        main(["run", "--problem", "multimodal", "--mode", "single_fidelity", "--budget", "4500",
              "--out", str(tmp_path), *FAST])
        rows = read_csv(tmp_path / "multimodal_single_fidelity_histogram.csv")[1:]
        counts = [int(r[4]) for r in rows]
        assert sum(counts) > 0 and counts[-1] == sum(counts)
        recs = read_record_csv(tmp_path / "multimodal_single_fidelity_rep0.csv")
        assert all(float(r["s"]) == 1.0 for r in recs)

    def test_config_file_and_figures(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"problem": "four-branches", "budget": 1200, "reps": 1, "max_iterations": 2}))
        flags = [f for f in FAST if f != "--no-figures"]
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), *flags]) == 0
        assert (tmp_path / "o" / "four-branches_multifidelity_error_vs_cost.png").stat().st_size > 0
        assert (tmp_path / "o" / "four-branches_multifidelity_contour.png").exists()

    def test_invalid_table_fidelity(self, tmp_path, capsys):
        code = main(["run", "--problem", "multimodal", "--out", str(tmp_path),
                     "--set", 'cost={"kind": "table", "table": {"0.0": 1, "1.5": 2}}'])
        assert code == 2
        err = error_json(capsys)
        assert err["error"] == "ConfigError" and err["field"] == "cost.table"

    def test_bad_override_field(self, tmp_path, capsys):
        assert main(["run", "--problem", "multimodal", "--set", "acquisition.bogus=1", "--out", str(tmp_path)]) == 2
        assert error_json(capsys)["field"] == "acquisition.bogus"

    def test_external_failure_reported(self, tmp_path, capsys):
        script = tmp_path / "sim.py"
        script.write_text("import sys\nsys.exit(3)\n")
        ext = {"command": [sys.executable, str(script), "{x0}", "{s}"], "lower": [0], "upper": [1]}
        code = main(["run", "--problem", "external", "--set", f"external={json.dumps(ext)}", "--budget", "5000",
                     "--out", str(tmp_path), *FAST])
        assert code == 1
        err = error_json(capsys)
        assert err["error"] == "RunError" and err["cause"] == "NonZeroExit"


class TestOtherCommands:
    def test_validate(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"problem": "ishigami", "reps": 3, "acquisition": {"n_fantasies": 8}}))
        assert main(["validate-config", str(cfg)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["valid"] and out["reps"] == 3 and out["config"]["acquisition"]["n_fantasies"] == 8

    def test_validate_rejects(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert main(["validate-config", str(cfg)]) == 2
        assert error_json(capsys)["field"] == "config"

    def test_contour(self, tmp_path):
        out = tmp_path / "grid.csv"
        assert main(["contour", "--problem", "multimodal", "--max-iterations", "1", "--n", "20",
                     "--out", str(out), *FAST]) == 0
        rows = read_csv(out)
        assert rows[0] == list(CONTOUR_COLUMNS) and len(rows) == 401

    def test_contour_needs_2d(self, tmp_path, capsys):
        assert main(["contour", "--problem", "ishigami", "--max-iterations", "0", "--out", str(tmp_path / "g.csv"),
                     *FAST]) == 2

    def test_cost_sweep(self, tmp_path, capsys):
        assert main(["cost-sweep", "--problem", "multimodal", "--budget", "5000", "--c1", "10", "1",
                     "--reps", "1", "--out", str(tmp_path), *FAST]) == 0
        rows = read_csv(tmp_path / "multimodal_cost_sweep.csv")
        assert rows[0] == ["c1", *AGGREGATE_COLUMNS]
        assert {r[0] for r in rows[1:]} == {"10.0", "1.0"}

    @pytest.mark.parametrize("c1", [[], ["-1"]])
    def test_cost_sweep_rejects(self, tmp_path, capsys, c1):
        assert main(["cost-sweep", "--problem", "multimodal", "--c1", *c1, "--out", str(tmp_path)]) == 2
        assert error_json(capsys)["field"] == "c1"
