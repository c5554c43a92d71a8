import dataclasses
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase

from netsd.bench import (
    BLOCK_SIZES, CALIBRATION_PARAMS, CSV_HEADER, BenchConfig, ThroughputSample, analytic_matrix,
    calibrate, cell_seed, check_anchors, format_report, read_csv, run_cell, run_matrix, write_csv,
)
from netsd.bus import CALIBRATED_MODEL, Direction
from netsd.exceptions import CalibrationInfeasible, ConfigError

KIB = 1024
MIB = 1024 * KIB

R, W = Direction.READ, Direction.WRITE
BASE, NOP, WITHP = BenchConfig.BASELINE, BenchConfig.SWITCH_NO_PULLUPS, BenchConfig.SWITCH_WITH_PULLUPS


class AnalyticTests(SimpleTestCase):

    def test_calibrated_model_meets_every_anchor(self):
        report = check_anchors(analytic_matrix())
        self.assertEqual(report.failures(), [])
        self.assertTrue(report.feasible)
        self.assertAlmostEqual(report["write_withp_over_nop"].value, 2.0, delta=0.1)
        with self.assertRaises(KeyError):
            report["no_such_anchor"]

    def test_grid_shape(self):
        samples = analytic_matrix()
        self.assertEqual(len(samples), 2 * 3 * len(BLOCK_SIZES))
        self.assertEqual(BLOCK_SIZES[0], 4 * KIB)
        self.assertEqual(BLOCK_SIZES[-1], 1 * MIB)

    def test_baseline_leads_everywhere(self):
        samples = analytic_matrix()
        by_cell = {(s.direction, s.block_size, s.config): s.mbytes_per_s for s in samples}
        for direction in Direction:
            for size in BLOCK_SIZES:
                self.assertGreater(by_cell[direction, size, BASE], by_cell[direction, size, NOP])
                self.assertGreater(by_cell[direction, size, BASE], by_cell[direction, size, WITHP])

    def test_noise_free_model_misses_the_write_peak(self):
        quiet = dataclasses.replace(CALIBRATED_MODEL, p_bit_uhs=0.0)
        report = check_anchors(analytic_matrix(quiet))
        self.assertFalse(report["write_nop_peak_at_32k"].ok)


class CalibrationTests(SimpleTestCase):

    def test_grid_search_finds_a_feasible_model(self):
        with tempfile.TemporaryDirectory() as tmp:
            report_path = Path(tmp) / "calibration.txt"
            result = calibrate(report_path=report_path)
            text = report_path.read_text()
        self.assertEqual(result.candidates, 7 ** len(CALIBRATION_PARAMS))
        self.assertGreaterEqual(result.feasible, 1)
        self.assertTrue(result.report.feasible)
        self.assertTrue(check_anchors(analytic_matrix(result.model)).feasible)
        self.assertLessEqual(result.report.loss, check_anchors(analytic_matrix()).loss)
        self.assertIn("anchors:", text)
        self.assertIn("* p_bit_uhs", text)

    def test_zero_error_rate_is_infeasible(self):
        quiet = dataclasses.replace(CALIBRATED_MODEL, p_bit_uhs=0.0)
        with self.assertRaises(CalibrationInfeasible):
            calibrate(quiet, factors=(0.5, 1.0, 1.5))

    def test_committed_report_matches_shipped_constants(self):
        committed = (Path(settings.BASE_DIR) / "calibration.txt").read_text()
        result = calibrate(factors=(1.0,))
        self.assertEqual(result.model, CALIBRATED_MODEL)
        self.assertEqual(committed, format_report(result))


class MatrixTests(SimpleTestCase):
    grid = dict(seed=3, volume_bytes=256 * KIB, block_sizes=(4 * KIB, 64 * KIB))

    def test_cell_seed(self):
        self.assertEqual(cell_seed(1, "read", "baseline", 4096), cell_seed(1, R, BASE, 4096))
        self.assertNotEqual(cell_seed(1, R, BASE, 4096), cell_seed(1, W, BASE, 4096))
        self.assertNotEqual(cell_seed(1, R, BASE, 4096), cell_seed(2, R, BASE, 4096))

    def test_grid_order_and_determinism(self):
        first = run_matrix(**self.grid)
        self.assertEqual(len(first), 12)
        self.assertEqual((first[0].direction, first[0].config, first[0].block_size), (R, BASE, 4 * KIB))
        self.assertEqual((first[-1].direction, first[-1].config, first[-1].block_size), (W, WITHP, 64 * KIB))
        self.assertEqual(first, run_matrix(**self.grid))

    def test_parallel_matches_sequential(self):
        self.assertEqual(run_matrix(parallel=True, workers=2, **self.grid), run_matrix(**self.grid))

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "out" / "results.csv"
            samples = run_matrix(out=path, **self.grid)
            lines = path.read_text().splitlines()
            loaded = read_csv(path)
        self.assertEqual(lines[0], ",".join(CSV_HEADER))
        self.assertEqual(len(lines), len(samples) + 1)
        self.assertEqual(
            [(s.direction, s.block_size, s.config, round(s.mbytes_per_s, 4), s.retries) for s in samples],
            [(s.direction, s.block_size, s.config, s.mbytes_per_s, s.retries) for s in loaded],
        )

    def test_csv_rejects_foreign_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "other.csv"
            path.write_text("a,b\n1,2\n")
            with self.assertRaises(ConfigError):
                read_csv(path)

    def test_volume_validation(self):
        with self.assertRaises(ConfigError):
            run_matrix(volume_bytes=1000)
        with self.assertRaises(ConfigError):
            run_matrix(volume_bytes=0)

    def test_write_csv_row(self):
        sample = ThroughputSample(W, 32 * KIB, NOP, 2.74999, retries=7)
        self.assertEqual(sample.csv_row(), ("write", 32 * KIB, "switch_no_pullups", "2.7500", 7))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv([sample], Path(tmp) / "one.csv")
            self.assertEqual(read_csv(path)[0].retries, 7)


class SimulatedThroughputTests(SimpleTestCase):

    def test_exhausted_cell_records_zero(self):
        sample = run_cell(W, 1 * MIB, NOP, volume_bytes=1 * MIB, retry_limit=2)
        self.assertTrue(sample.exhausted)
        self.assertEqual(sample.mbytes_per_s, 0.0)

    def test_pullups_trade_read_speed_for_write_reliability(self):
        cells = {
            (direction, config): run_cell(direction, 64 * KIB, config, seed=1, volume_bytes=8 * MIB)
            for direction in Direction for config in BenchConfig
        }
        mbps = {key: sample.mbytes_per_s for key, sample in cells.items()}
        self.assertEqual(cells[R, WITHP].retries, 0)
        self.assertEqual(cells[W, BASE].retries, 0)
        self.assertGreater(cells[W, NOP].retries, 0)
        self.assertTrue(2.5 <= mbps[R, NOP] / mbps[R, WITHP] <= 3.5)
        self.assertGreater(mbps[W, WITHP], mbps[W, NOP])
        self.assertGreater(mbps[R, BASE], 20.0)
        self.assertGreater(mbps[W, BASE], 12.0)

    def test_write_without_pullups_peaks_at_32k(self):
        rates = {
            size: run_cell(W, size, NOP, seed=5, volume_bytes=32 * MIB).mbytes_per_s
            for size in (16 * KIB, 32 * KIB, 64 * KIB)
        }
        self.assertGreater(rates[32 * KIB], rates[16 * KIB])
        self.assertGreater(rates[32 * KIB], rates[64 * KIB])


class MeasuredAnchorTests(SimpleTestCase):

    def test_full_simulated_sweep_meets_every_anchor(self):
        report = check_anchors(run_matrix(seed=0))
        self.assertEqual([a.name for a in report.failures()], [])
        self.assertTrue(report.feasible)
        self.assertEqual(len(report.anchors), 11)
