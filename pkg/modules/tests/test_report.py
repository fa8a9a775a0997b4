import csv

import pytest

from niwt.config import RunConfig
from niwt.errors import NumericalError
from niwt.report import (
    REFERENCE_ROWS,
    check_results,
    emit_report,
    format_table,
    run_meta,
    write_trace_csv,
)
from niwt.types import GzslResult, LossRecord


def _results():
    return [GzslResult(0.5, 0.25, 1.0 / 3.0, "niwt"), GzslResult(0.0, 0.9, 0.0, "baseline")]


class TestTable:
    """Test console tables."""

    def test_percentages(self):
        table = format_table(_results(), title="GZSL")
        lines = table.splitlines()
        assert lines[0] == "GZSL"
        assert lines[1].split() == ["Method", "Acc_U", "Acc_S", "H"]
        assert lines[3].split() == ["niwt", "50.0", "25.0", "33.3"]
        assert lines[4].split() == ["baseline", "0.0", "90.0", "0.0"]


class TestEmitReport:
    """Test metric CSV output."""

    def test_csv_and_reference_rows(self, tmp_path):
        table = emit_report(_results(), str(tmp_path), name="gzsl", with_reference=True)
        with open(tmp_path / "gzsl.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["label", "acc_u", "acc_s", "h"]
        assert [r[0] for r in rows[1:]] == ["niwt", "baseline"]
        assert float(rows[1][3]) == 1.0 / 3.0
        assert REFERENCE_ROWS[0].label in table

    def test_reference_rows_are_opt_in(self, tmp_path):
        table = emit_report(_results(), str(tmp_path))
        assert all(r.label not in table for r in REFERENCE_ROWS)
        assert (tmp_path / "metrics.csv").exists()

    def test_identical_runs_identical_bytes(self, tmp_path):
        emit_report(_results(), str(tmp_path / "a"))
        emit_report(_results(), str(tmp_path / "b"))
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_rejects_bad_metrics(self):
        with pytest.raises(NumericalError):
            check_results([GzslResult(float("nan"), 0.5, 0.5, "x")])
        with pytest.raises(NumericalError):
            check_results([GzslResult(0.5, 0.5, 0.4, "x")])


class TestTrace:
    """Test the per-iteration loss trace file."""

    def test_columns(self, tmp_path):
        path = write_trace_csv(str(tmp_path / "trace.csv"), [LossRecord(0, 4, 0.5, 1.5, 0.50015)])
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows == [["iteration", "class_id", "cos_term", "reg_term", "total"], ["0", "4", "0.5", "1.5", "0.50015"]]


class TestRunMeta:
    """Test run metadata."""

    def test_reproducible(self):
        config = RunConfig()
        first, second = run_meta(config, "transfer"), run_meta(config, "transfer")
        assert first == second
        assert first["seed"] == 7
        assert first["config_hash"] == config.config_hash()
        assert "numpy" in first["versions"]
