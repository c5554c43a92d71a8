import itertools
import random

from django.test import SimpleTestCase

from netsd.bus import (
    CALIBRATED_MODEL, DEFAULT_3V3, HIGH_SPEED_3V3, UHS_1V8, ActiveFaults, BusConfig, CardCaps,
    Direction, HostCaps, LineSet, LineState, ModeName, TransferMode, TransferStatus,
    block_error_probability, expected_throughput, negotiate_mode, simulated_transfer_time,
    transfer,
)
from netsd.exceptions import ConfigError, NoPower
from netsd.sd_core import Power


def live_lines():
    lines = LineSet()
    lines.connect_all()
    lines.power = Power.ON
    return lines


class ModeNegotiationTests(SimpleTestCase):

    def test_truth_table(self):
        for pullups, host_uhs, card_uhs in itertools.product((False, True), repeat=3):
            cfg = BusConfig(explicit_pullups=pullups, host_supports_uhs=host_uhs)
            mode = negotiate_mode(cfg, CardCaps(supports_uhs=card_uhs), HostCaps(supports_uhs=host_uhs))
            with self.subTest(pullups=pullups, host_uhs=host_uhs, card_uhs=card_uhs):
                if pullups:
                    self.assertEqual(mode.signal_voltage, 3.3)
                self.assertEqual(mode.is_uhs, not pullups and host_uhs and card_uhs)
                if not mode.is_uhs:
                    self.assertIs(mode, HIGH_SPEED_3V3)

    def test_defaults_follow_config(self):
        self.assertIs(negotiate_mode(BusConfig()), UHS_1V8)
        self.assertIs(negotiate_mode(BusConfig(explicit_pullups=True)), HIGH_SPEED_3V3)
        self.assertIs(negotiate_mode(BusConfig(host_supports_uhs=False)), HIGH_SPEED_3V3)

    def test_no_high_speed_falls_back_to_default(self):
        mode = negotiate_mode(BusConfig(explicit_pullups=True), CardCaps(high_speed=False))
        self.assertIs(mode, DEFAULT_3V3)

    def test_mode_voltage_invariant(self):
        with self.assertRaises(ConfigError):
            TransferMode(ModeName.UHS_1V8, 3.3, 100.0)
        with self.assertRaises(ConfigError):
            TransferMode(ModeName.HIGH_SPEED_3V3, 3.3, 50.0, bus_width_bits=8)

    def test_negative_cable(self):
        with self.assertRaises(ConfigError):
            BusConfig(cable_length_cm=-1)


class ErrorProbabilityTests(SimpleTestCase):

    def test_empty_transfer_cannot_fail(self):
        self.assertEqual(block_error_probability(BusConfig(), UHS_1V8, 0, Direction.WRITE), 0.0)

    def test_uhs_without_pullups_is_noisy(self):
        p = block_error_probability(BusConfig(), UHS_1V8, 64 * 1024, Direction.WRITE)
        self.assertGreater(p, 0.5)

    def test_pullups_are_clean(self):
        cfg = BusConfig(explicit_pullups=True)
        self.assertEqual(block_error_probability(cfg, HIGH_SPEED_3V3, 1 << 20, Direction.WRITE), 0.0)

    def test_baseline_is_clean(self):
        cfg = BusConfig(switched=False)
        self.assertEqual(block_error_probability(cfg, UHS_1V8, 1 << 20, Direction.WRITE), 0.0)

    def test_composition_law(self):
        cfg = BusConfig()
        for n in (512, 4096, 65536):
            p = block_error_probability(cfg, UHS_1V8, n, Direction.WRITE)
            p2 = block_error_probability(cfg, UHS_1V8, 2 * n, Direction.WRITE)
            self.assertAlmostEqual(p2, 1 - (1 - p) ** 2, places=12)

    def test_monotone_in_size_and_cable(self):
        rng = random.Random(1)
        for _ in range(200):
            cfg = BusConfig(cable_length_cm=rng.uniform(0, 200), crosstalk_safe_layout=rng.random() < 0.5)
            longer = BusConfig(cable_length_cm=cfg.cable_length_cm + rng.uniform(1, 50),
                               crosstalk_safe_layout=cfg.crosstalk_safe_layout)
            n = rng.randrange(1, 1 << 20)
            for direction in Direction:
                p = block_error_probability(cfg, UHS_1V8, n, direction)
                self.assertLessEqual(p, block_error_probability(cfg, UHS_1V8, n + 512, direction))
                self.assertLessEqual(p, block_error_probability(longer, UHS_1V8, n, direction))

    def test_unsafe_layout_is_worse(self):
        safe = block_error_probability(BusConfig(), UHS_1V8, 4096, Direction.READ)
        unsafe = block_error_probability(BusConfig(crosstalk_safe_layout=False), UHS_1V8, 4096, Direction.READ)
        self.assertGreater(unsafe, safe)


class TimingTests(SimpleTestCase):

    def test_zero_overhead_runs_at_line_rate(self):
        for mode in (DEFAULT_3V3, HIGH_SPEED_3V3, UHS_1V8):
            for n in (512, 65536):
                self.assertAlmostEqual(n / simulated_transfer_time(mode, n, 0), mode.line_rate_mbps)

    def test_throughput_grows_with_size(self):
        sizes = [512 << i for i in range(12)]
        rates = [n / simulated_transfer_time(UHS_1V8, n, 1900.0) for n in sizes]
        self.assertEqual(rates, sorted(rates))
        self.assertLess(rates[-1], UHS_1V8.line_rate_mbps)

    def test_expected_throughput_without_errors(self):
        cfg = BusConfig(switched=False)
        overhead = CALIBRATED_MODEL.command_overhead_us(cfg, UHS_1V8, Direction.READ)
        expected = 65536 / simulated_transfer_time(UHS_1V8, 65536, overhead)
        self.assertAlmostEqual(expected_throughput(cfg, UHS_1V8, 65536, Direction.READ), expected)


class TransferTests(SimpleTestCase):

    def setUp(self):
        self.data = random.Random(9).randbytes(4096)

    def test_noiseless_identity(self):
        cfg = BusConfig(explicit_pullups=True)
        outcome = transfer(cfg, HIGH_SPEED_3V3, live_lines(), self.data, Direction.READ)
        self.assertEqual(outcome.status, TransferStatus.OK)
        self.assertEqual(outcome.data, self.data)
        self.assertGreater(outcome.elapsed_us, 0)

    def test_power_off(self):
        lines = live_lines()
        lines.power = Power.OFF
        with self.assertRaises(NoPower):
            transfer(BusConfig(), UHS_1V8, lines, self.data, Direction.READ)

    def test_clock_or_dat0_loss_times_out(self):
        for line in ("CLK", "CMD", "DAT0"):
            lines = live_lines()
            lines.lines[line] = LineState.DISCONNECTED
            outcome = transfer(BusConfig(explicit_pullups=True), HIGH_SPEED_3V3, lines, self.data, Direction.READ)
            self.assertEqual(outcome.status, TransferStatus.TIMEOUT, line)
            self.assertEqual(outcome.elapsed_us, CALIBRATED_MODEL.read_timeout_us)

    def test_upper_data_line_loss_is_detected(self):
        lines = live_lines()
        lines.lines["DAT2"] = LineState.DISCONNECTED
        outcome = transfer(BusConfig(explicit_pullups=True), HIGH_SPEED_3V3, lines, self.data, Direction.READ)
        self.assertEqual(outcome.status, TransferStatus.CRC_DETECTED_ERROR)
        self.assertTrue(all(b & 0x44 == 0x44 for b in outcome.data))

    def test_delay_is_added(self):
        cfg = BusConfig(explicit_pullups=True)
        plain = transfer(cfg, HIGH_SPEED_3V3, live_lines(), self.data, Direction.WRITE)
        slow = transfer(cfg, HIGH_SPEED_3V3, live_lines(), self.data, Direction.WRITE,
                        ActiveFaults(delay_us=500.0))
        self.assertAlmostEqual(slow.elapsed_us - plain.elapsed_us, 500.0)

    def test_omit_times_out(self):
        outcome = transfer(BusConfig(), UHS_1V8, live_lines(), self.data, Direction.WRITE,
                           ActiveFaults(omit=True))
        self.assertEqual(outcome.status, TransferStatus.TIMEOUT)

    def test_forced_corruption_detected_or_silent(self):
        cfg = BusConfig(explicit_pullups=True)
        faults = ActiveFaults(corrupt_rate=1.0, corrupt_burst_bits=16)
        detected = transfer(cfg, HIGH_SPEED_3V3, live_lines(), self.data, Direction.READ, faults,
                            random.Random(1), crc_checking=True)
        silent = transfer(cfg, HIGH_SPEED_3V3, live_lines(), self.data, Direction.READ, faults,
                          random.Random(1), crc_checking=False)
        self.assertEqual(detected.status, TransferStatus.CRC_DETECTED_ERROR)
        self.assertEqual(silent.status, TransferStatus.SILENT_CORRUPTION)
        self.assertEqual(detected.data, silent.data)
        self.assertNotEqual(silent.data, self.data)

    def test_seeded_determinism(self):
        cfg = BusConfig()
        data = random.Random(2).randbytes(64 * 1024)
        runs = [
            [transfer(cfg, UHS_1V8, live_lines(), data, Direction.WRITE, rng=rng, crc_checking=False)
             for _ in range(20)]
            for rng in (random.Random(42), random.Random(42))
        ]
        self.assertEqual(runs[0], runs[1])
        self.assertTrue(any(o.status is TransferStatus.SILENT_CORRUPTION for o in runs[0]))
