"""Command-line surface: ingestion, typed CSV round trips, the analyze/fit
pipelines, grid reruns from manifests, and report generation."""
import csv
import math
from pathlib import Path

import numpy as np
import pytest

from confrd.channels import BlockKey, ConfusionCounts
from confrd.cli import (ANALYZE_FIELDS, DEFAULT_VOCABULARY, SCHEMA, SIM_FIELDS,
                        _fmt, _parse_cell, analyze_blocks, ingest_confusions,
                        main, read_csv, report, serialize_confusions, write_csv)
from confrd.errors import (ConfigInvalid, EmptyBlock, SchemaMismatch,
                           UnknownAnalysis, UnknownClass)

VOCAB2 = ("c00", "c01")
# flip rate exactly 1/4 at a count mass where the gradient tolerance is
# attainable (the absolute tolerance scales poorly with very large N)
BSC_COUNTS = np.array([[900, 300], [300, 900]], dtype=np.int64)


def write_rows(path, rows, header=SCHEMA):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def bsc_rows(key=("g", "e", "c", "m")):
    rows = []
    for i in range(2):
        for j in range(2):
            rows.append(list(key) + [VOCAB2[i], VOCAB2[j], int(BSC_COUNTS[i, j])])
    return rows


class TestIngest:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        blocks = []
        for tag in ("x", "y"):
            counts = rng.integers(0, 40, size=(16, 16))
            counts[counts < 10] = 0  # keep it sparse
            counts[0, 0] += 1  # never empty
            blocks.append(ConfusionCounts(counts.astype(np.int64),
                                          BlockKey("grp", "exp", tag, "inst0")))
        path = tmp_path / "long.csv"
        serialize_confusions(blocks, path)
        back = ingest_confusions(path)
        assert len(back) == 2
        for orig, rebuilt in zip(blocks, back):
            np.testing.assert_array_equal(rebuilt.counts, orig.counts)
            assert rebuilt.block == orig.block

    def test_duplicate_rows_accumulate(self, tmp_path):
        path = tmp_path / "dup.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c01", "3"],
                          ["g", "e", "c", "m", "c00", "c01", "4"],
                          ["g", "e", "c", "m", "c01", "c00", "1"]])
        blocks = ingest_confusions(path, VOCAB2)
        assert blocks[0].counts[0, 1] == 7
        assert blocks[0].counts[1, 0] == 1

    def test_block_order_is_first_seen(self, tmp_path):
        path = tmp_path / "order.csv"
        write_rows(path, [["g", "e", "b", "m", "c00", "c00", "1"],
                          ["g", "e", "a", "m", "c00", "c00", "1"],
                          ["g", "e", "b", "m", "c01", "c01", "1"]])
        blocks = ingest_confusions(path, VOCAB2)
        assert [b.block.condition for b in blocks] == ["b", "a"]

    def test_comment_lines_skipped(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("# manifest: manifest.json\n"
                        + ",".join(SCHEMA) + "\n"
                        + "g,e,c,m,c00,c01,5\n")
        blocks = ingest_confusions(path, VOCAB2)
        assert blocks[0].counts[0, 1] == 5

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c01", "5"]],
                   header=("a", "b", "c", "d", "e", "f", "g"))
        with pytest.raises(SchemaMismatch):
            ingest_confusions(path, VOCAB2)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(SchemaMismatch):
            ingest_confusions(path, VOCAB2)

    def test_negative_count(self, tmp_path):
        path = tmp_path / "neg.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c01", "-1"]])
        with pytest.raises(SchemaMismatch):
            ingest_confusions(path, VOCAB2)

    def test_non_integer_count(self, tmp_path):
        path = tmp_path / "float.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c01", "2.5"]])
        with pytest.raises(SchemaMismatch):
            ingest_confusions(path, VOCAB2)

    def test_short_row(self, tmp_path):
        path = tmp_path / "short.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "3"]])
        with pytest.raises(SchemaMismatch):
            ingest_confusions(path, VOCAB2)

    def test_unknown_class(self, tmp_path):
        path = tmp_path / "unk.csv"
        write_rows(path, [["g", "e", "c", "m", "dog", "c01", "3"]])
        with pytest.raises(UnknownClass):
            ingest_confusions(path, VOCAB2)

    def test_all_zero_block(self, tmp_path):
        path = tmp_path / "zero.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c01", "0"]])
        with pytest.raises(EmptyBlock):
            ingest_confusions(path, VOCAB2)

    def test_vocabulary_too_small(self, tmp_path):
        path = tmp_path / "v.csv"
        write_rows(path, [["g", "e", "c", "m", "c00", "c00", "1"]])
        with pytest.raises(ConfigInvalid):
            ingest_confusions(path, ("c00",))

    def test_default_vocabulary_is_sixteen_classes(self):
        assert len(DEFAULT_VOCABULARY) == 16


class TestTypedCSV:
    CASES = [None, True, False, 0, -7, 3.5, 1.0, float("inf"), float("-inf"),
             "hello", "broad_weak", ""]

    def test_cell_round_trip(self):
        for v in self.CASES:
            assert _parse_cell(_fmt(v)) == v

    def test_nan_becomes_missing(self):
        assert _fmt(float("nan")) == "NA"
        assert _parse_cell("NA") is None

    def test_float_precision_survives(self):
        x = 0.1 + 0.2  # not representable in short decimal
        assert _parse_cell(_fmt(x)) == x

    def test_file_round_trip_and_manifest_pointer(self, tmp_path):
        rows = [{"a": 1, "b": 2.5, "c": None, "d": "s", "e": True},
                {"a": -2, "b": float("inf"), "c": 0.0, "d": "", "e": False}]
        path = tmp_path / "t.csv"
        write_csv(path, ("a", "b", "c", "d", "e"), rows)
        assert path.read_text().startswith("# manifest: manifest.json\n")
        assert read_csv(path) == rows


class TestAnalyzeBlocks:
    def test_identity_block_is_collapsed_and_skips_fit(self):
        cc = ConfusionCounts(np.eye(16, dtype=np.int64) * 500,
                             BlockKey("g", "e", "c", "m"))
        rec = analyze_blocks([cc])[0]
        assert rec["collapse"] is True
        assert "collapsed" in rec["flags"]
        assert rec["fit_converged"] is None
        assert rec["auc_hat"] is None
        assert rec["accuracy"] == pytest.approx(1.0)

    def test_bsc_block_end_to_end(self):
        # exact 2-class counts at flip rate 1/4: every empirical quantity has
        # a closed form and the MAP fit recovers the log-odds scale ln 3
        cc = ConfusionCounts(BSC_COUNTS, BlockKey("g", "e", "c", "m"))
        rec = analyze_blocks([cc])[0]
        assert rec["collapse"] is False
        assert rec["accuracy"] == pytest.approx(0.75, abs=1e-12)
        h = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        assert rec["empirical_rate"] == pytest.approx(math.log(2) - h, abs=1e-9)
        assert rec["a_f"] == pytest.approx(0.0, abs=1e-12)
        assert rec["fit_converged"] is True
        assert rec["beta_hat"] < 0
        assert rec["auc_hat"] > 0
        assert rec["n_segments_hat"] >= 1

    def test_block_set_must_be_nonempty(self):
        with pytest.raises(EmptyBlock):
            analyze_blocks([])

    def test_zero_row_dropped_when_policy_allows(self):
        counts = np.array([[50, 10, 5], [8, 60, 2], [0, 0, 0]], dtype=np.int64)
        cc = ConfusionCounts(counts, BlockKey("g", "e", "c", "m"))
        rec = analyze_blocks([cc], zero_row_policy="drop_class")[0]
        assert rec["k_retained"] == 2
        assert "classes_dropped" in rec["flags"]

    def test_fields_cover_every_record_key(self):
        cc = ConfusionCounts(BSC_COUNTS, BlockKey("g", "e", "c", "m"))
        rec = analyze_blocks([cc])[0]
        assert set(rec.keys()) == set(ANALYZE_FIELDS)


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestAnalyzeCommand:
    def test_writes_blocks_table_and_manifest(self, tmp_path):
        data = tmp_path / "in.csv"
        write_rows(data, bsc_rows())
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[data]\nk = 2\n")
        out = tmp_path / "out"
        assert run_cli("analyze", data, "--config", cfg, "--out", out) == 0
        rows = read_csv(out / "blocks.csv")
        assert len(rows) == 1
        assert rows[0]["accuracy"] == pytest.approx(0.75)
        assert (out / "manifest.json").exists()

    def test_unknown_class_exits_3(self, tmp_path, capsys):
        data = tmp_path / "in.csv"
        write_rows(data, [["g", "e", "c", "m", "zebra", "c01", "3"]])
        assert run_cli("analyze", data) == 3
        assert "zebra" in capsys.readouterr().err

    def test_missing_input_exits_3(self, tmp_path):
        assert run_cli("analyze", tmp_path / "nope.csv") == 3

    def test_missing_config_exits_2(self, tmp_path):
        data = tmp_path / "in.csv"
        write_rows(data, bsc_rows())
        assert run_cli("analyze", data, "--config", tmp_path / "nope.ini") == 2


class TestFitCommand:
    def test_fit_recovers_bsc_log_odds(self, tmp_path):
        data = tmp_path / "in.csv"
        write_rows(data, bsc_rows())
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[data]\nk = 2\n")
        out = tmp_path / "fit"
        assert run_cli("fit", data, "--config", cfg, "--out", out) == 0
        rho = read_csv(out / "rho_hat.csv")
        assert rho[0]["rho_0"] == 0.0 and rho[1]["rho_1"] == 0.0
        assert rho[0]["rho_1"] == pytest.approx(math.log(3), abs=1e-3)
        assert rho[1]["rho_0"] == pytest.approx(math.log(3), abs=1e-3)
        summary = read_csv(out / "fit_summary.csv")[0]
        assert summary["converged"] is True
        assert summary["log_posterior"] < 0

    def test_ambiguous_block_needs_selector(self, tmp_path):
        data = tmp_path / "two.csv"
        write_rows(data, bsc_rows(("g", "e", "c1", "m")) + bsc_rows(("g", "e", "c2", "m")))
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[data]\nk = 2\n")
        assert run_cli("fit", data, "--config", cfg, "--out", tmp_path) == 2
        assert run_cli("fit", data, "--config", cfg, "--out", tmp_path / "f2",
                       "--block", "g/e/c2/m") == 0

    def test_unmatched_selector_exits_3(self, tmp_path):
        data = tmp_path / "in.csv"
        write_rows(data, bsc_rows())
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[data]\nk = 2\n")
        assert run_cli("fit", data, "--config", cfg, "--out", tmp_path,
                       "--block", "g/e/c/other") == 3


SMALL_GRID = """\
[simulate]
structures = broad_weak, sink
a_grid = 0, 2
lambda_gens = 1.0, 2.0
n_per_rows = 200, 1000
n_seeds = 2
k = 8
n_sinks = 2
"""


@pytest.fixture(scope="module")
def small_grid(tmp_path_factory):
    """One shared tiny grid: every factor at 2 levels, 32 replicates, so all
    report tables (including the four-factor ANOVA) are estimable."""
    root = tmp_path_factory.mktemp("smallgrid")
    cfg = root / "grid.ini"
    cfg.write_text(SMALL_GRID)
    out = root / "run1"
    assert run_cli("simulate", "--config", cfg, "--out", out) == 0
    return root, cfg, out


class TestSimulateCommand:
    def test_row_count_and_schema(self, small_grid):
        _, _, out = small_grid
        rows = read_csv(out / "results.csv")
        assert len(rows) == 32
        assert {r["structure"] for r in rows} == {"broad_weak", "sink"}
        assert {r["a"] for r in rows} == {0.0, 2.0}
        assert {r["n_per_row"] for r in rows} == {200, 1000}
        assert all(r["K"] == 8 for r in rows)

    def test_rerun_is_byte_identical(self, small_grid):
        root, cfg, out = small_grid
        out2 = root / "run2"
        assert run_cli("simulate", "--config", cfg, "--out", out2) == 0
        assert (out / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()

    def test_from_manifest_reproduces_run(self, small_grid):
        root, _, out = small_grid
        out3 = root / "run3"
        assert run_cli("simulate", "--from-manifest", out / "manifest.json",
                       "--out", out3) == 0
        assert (out / "results.csv").read_bytes() == (out3 / "results.csv").read_bytes()

    def test_seed_override_recorded_and_replayed(self, small_grid, tmp_path):
        root, cfg, out = small_grid
        seeded = tmp_path / "seeded"
        assert run_cli("simulate", "--config", cfg, "--out", seeded,
                       "--seed", "999") == 0
        assert (seeded / "results.csv").read_bytes() != (out / "results.csv").read_bytes()
        replay = tmp_path / "replay"
        assert run_cli("simulate", "--from-manifest", seeded / "manifest.json",
                       "--out", replay) == 0
        assert (replay / "results.csv").read_bytes() == (seeded / "results.csv").read_bytes()

    def test_bad_config_value_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[simulate]\nn_seeds = frog\n")
        assert run_cli("simulate", "--config", cfg, "--out", tmp_path / "o") == 2

    def test_malformed_ini_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("not an ini file at all\n")
        assert run_cli("simulate", "--config", cfg, "--out", tmp_path / "o") == 2


class TestReportCommand:
    def test_all_tables_written(self, small_grid, tmp_path):
        _, _, out = small_grid
        rep = tmp_path / "rep"
        assert run_cli("report", out / "results.csv", "--out", rep) == 0
        expected = ["recovery_table.csv", "group_tests.csv", "correlations.csv",
                    "mechanism_slopes.csv", "component_regressions.csv",
                    "component_regressions_slices.csv", "magnitude_regressions.csv",
                    "magnitude_regressions_slices.csv", "anova.csv",
                    "knee_points.csv", "manifest.json"]
        for name in expected:
            assert (rep / name).exists(), name
        series = list(rep.glob("series_*.csv"))
        assert len(series) == 6

    def test_recovery_table_contents(self, small_grid, tmp_path):
        _, _, out = small_grid
        rep = tmp_path / "rep"
        assert run_cli("report", out / "results.csv", "--out", rep) == 0
        rows = read_csv(rep / "recovery_table.csv")
        assert len(rows) == 4  # (lambda_gen, N) slices
        for row in rows:
            for tag in ("bw", "sink"):
                assert 0 < row[f"{tag}_total"] <= 4
                assert 0 <= row[f"{tag}_pass"] <= row[f"{tag}_total"]
                frac = row[f"{tag}_frac"]
                assert frac is None or 0.0 <= frac <= 1.0

    def test_single_level_factor_fails_anova_informatively(self, small_grid,
                                                           tmp_path, capsys):
        # a grid with one lambda level cannot estimate the lambda_gen terms;
        # the report exits with a data error naming the offending term
        _, _, out = small_grid
        rows = [r for r in read_csv(out / "results.csv") if r["lambda_gen"] == 1.0]
        sub = tmp_path / "sub.csv"
        write_csv(sub, SIM_FIELDS, rows)
        cfg = tmp_path / "r.ini"
        cfg.write_text("[report]\nanalyses = anova\n")
        assert run_cli("report", sub, "--config", cfg, "--out", tmp_path / "o") == 3
        assert "lambda_gen" in capsys.readouterr().err

    def test_knee_column_empty_for_short_a_grid(self, small_grid, tmp_path):
        _, _, out = small_grid
        rep = tmp_path / "rep2"
        assert run_cli("report", out / "results.csv", "--out", rep) == 0
        for row in read_csv(rep / "knee_points.csv"):
            assert row["n_points"] == 2 and row["a_knee"] is None

    def test_unknown_analysis_exits_3(self, small_grid, tmp_path):
        _, _, out = small_grid
        cfg = tmp_path / "r.ini"
        cfg.write_text("[report]\nanalyses = recovery, seances\n")
        assert run_cli("report", out / "results.csv", "--config", cfg,
                       "--out", tmp_path / "o") == 3

    def test_empty_group_names_the_label(self, small_grid, tmp_path):
        _, _, out = small_grid
        rows = [r for r in read_csv(out / "results.csv")
                if r["structure"] == "broad_weak"]
        with pytest.raises(UnknownAnalysis, match="sink"):
            report(rows, tmp_path / "o", analyses=("groups",))

    def test_empty_results_exit_3(self, tmp_path):
        empty = tmp_path / "empty.csv"
        write_csv(empty, ("structure",), [])
        assert run_cli("report", empty, "--out", tmp_path / "o") == 3


class TestVersionFlag:
    def test_version_prints_and_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip()
