import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import requests
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from netsd.fatfs import FatVolume, ImageDevice
from netsd.sd_core import FileImage

MIB = 1024 * 1024


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def call(self, *args, **kwargs):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO(), **kwargs)
        return out.getvalue()


class FormatCommandTests(CommandTestCase):

    def test_creates_a_mountable_image(self):
        image = self.tmp / "sd.img"
        out = self.call("format", image=str(image), capacity="4MiB", label="lab")
        self.assertIn("FAT16", out)
        self.assertEqual(image.stat().st_size, 4 * MIB)
        backing = FileImage(image, 4 * MIB)
        try:
            self.assertEqual(FatVolume(ImageDevice(backing)).label, "LAB")
        finally:
            backing.close()

    def test_refuses_to_overwrite(self):
        image = self.tmp / "sd.img"
        self.call("format", image=str(image), capacity="4MiB")
        with self.assertRaisesMessage(CommandError, "--force"):
            self.call("format", image=str(image), capacity="4MiB")
        self.assertIn("FAT32", self.call("format", image=str(image), capacity="64MiB", force=True))

    def test_bad_arguments(self):
        image = str(self.tmp / "sd.img")
        for kwargs in (
            dict(capacity="4 parsecs"),
            dict(capacity="1000"),
            dict(capacity="1MiB"),
            dict(capacity="4MiB", label="much too long"),
            dict(capacity="4MiB", image=str(self.tmp / "missing" / "sd.img")),
        ):
            with self.subTest(kwargs=kwargs), self.assertRaises(CommandError):
                self.call("format", **{"image": image, **kwargs})


class DutCommandTests(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.image = self.tmp / "card.img"
        self.image.write_bytes(bytes(1 * MIB))

    def test_write_then_read(self):
        source = self.tmp / "payload.bin"
        source.write_bytes(b"\x5A" * 600)
        out = self.call("dut", "--image", str(self.image), "write", "8", str(source))
        self.assertIn("wrote 1024 bytes at block 8", out)

        dump = self.tmp / "dump.bin"
        self.call("dut", "--image", str(self.image), "read", "8", "2", "--out", str(dump))
        self.assertEqual(dump.read_bytes(), b"\x5A" * 600 + bytes(424))
        self.assertEqual(self.image.read_bytes()[8 * 512:8 * 512 + 600], b"\x5A" * 600)

    def test_bench(self):
        out = self.call("dut", "--image", str(self.image), "--chunk-size", "16KiB",
                        "bench", "read", "--volume", "256KiB")
        self.assertIn("MByte/s", out)

    def test_errors(self):
        with self.assertRaises(CommandError):
            self.call("dut", "--image", str(self.tmp / "nope.img"), "read", "0", "1")
        with self.assertRaisesMessage(CommandError, "AddressError"):
            self.call("dut", "--image", str(self.image), "read", "2048", "1", "--out", str(self.tmp / "x"))
        with self.assertRaises(CommandError):
            self.call("dut", "--image", str(self.image), "--chunk-size", "1000", "read", "0", "1")


class BenchCommandTests(CommandTestCase):

    def test_analytic(self):
        path = self.tmp / "analytic.csv"
        out = self.call("bench", "--analytic", "--out", str(path))
        self.assertIn("Wrote 54 samples", out)
        self.assertNotIn("FAIL", out)
        self.assertEqual(len(path.read_text().splitlines()), 55)

    def test_small_simulated_grid(self):
        path = self.tmp / "sim.csv"
        out = self.call("bench", "--out", str(path), "--volume", "128KiB",
                        "--block-sizes", "4KiB,64KiB", "--verbosity", "0")
        self.assertIn("Wrote 12 samples", out)
        self.assertTrue(path.exists())

    def test_calibrate(self):
        report = self.tmp / "calibration.txt"
        out = self.call("bench", "--calibrate", "--report", str(report))
        self.assertIn("grid points feasible", out)
        self.assertIn("anchors:", report.read_text())

    def test_calibrate_current_constants_only(self):
        report = self.tmp / "check.txt"
        out = self.call("bench", "--calibrate", "--factors", "1.0", "--report", str(report))
        self.assertIn("1 of 1 grid points feasible", out)
        self.assertIn("grid points: 1, feasible: 1", report.read_text())
        for factors in ("1.0,lots", "0", "-1"):
            with self.subTest(factors=factors), self.assertRaises(CommandError):
                self.call("bench", "--calibrate", "--factors", factors, "--report", str(report))

    def test_bad_sizes(self):
        with self.assertRaises(CommandError):
            self.call("bench", "--block-sizes", "4KiB,lots", "--analytic", "--out", str(self.tmp / "x.csv"))
        with self.assertRaises(CommandError):
            self.call("bench", "--volume", "1000", "--out", str(self.tmp / "x.csv"))


def fake_response(body, status=200):
    response = mock.Mock(status_code=status, ok=status < 400)
    response.json.return_value = body
    return response


@mock.patch("netsd.management.commands.fault.requests.request")
class FaultCommandTests(CommandTestCase):

    def test_add(self, request):
        request.return_value = fake_response({
            "success": True, "fault": {"id": 3, "kind": "omit", "status": "armed"},
        }, status=201)
        out = self.call("fault", "--url", "http://gw:8080/", "add", "omit",
                        "--params", '{"match": 17}', "--trigger", "at_transaction", "--at", "40")
        self.assertIn("fault 3 omit: armed", out)
        method, url = request.call_args.args
        self.assertEqual((method, url), ("POST", "http://gw:8080/api/v1/faults"))
        self.assertEqual(request.call_args.kwargs["json"], {
            "kind": "omit", "params": {"match": 17}, "trigger": {"type": "at_transaction", "n": 40},
        })

    def test_list_and_cancel(self, request):
        request.return_value = fake_response({"success": True, "faults": [{
            "id": 1, "kind": "delay", "fault_class": "timing", "status": "active",
            "params": {"added_us": 5.0},
        }]})
        self.assertIn("delay", self.call("fault", "list"))
        request.return_value = fake_response({"success": True, "id": 1, "status": "cancelled"})
        self.assertIn("fault 1: cancelled", self.call("fault", "cancel", "1"))
        self.assertEqual(request.call_args.args, ("DELETE", "http://127.0.0.1:8080/api/v1/faults/1"))

    def test_gateway_errors(self, request):
        request.return_value = fake_response(
            {"success": False, "error": "no fault with id 9", "code": "UnknownFaultId"}, status=404)
        with self.assertRaisesMessage(CommandError, "no fault with id 9"):
            self.call("fault", "cancel", "9")
        request.side_effect = requests.ConnectionError("refused")
        with self.assertRaisesMessage(CommandError, "unreachable"):
            self.call("fault", "list")

    def test_argument_errors(self, request):
        with self.assertRaises(CommandError):
            self.call("fault", "add", "delay", "--params", "{oops")
        with self.assertRaises(CommandError):
            self.call("fault", "add", "delay", "--trigger", "at_sim_time")
        request.assert_not_called()

    def test_non_json_reply(self, request):
        response = fake_response(None, status=502)
        response.json.side_effect = json.JSONDecodeError("bad", "", 0)
        request.return_value = response
        with self.assertRaisesMessage(CommandError, "HTTP 502"):
            self.call("fault", "list")


class ServeCommandTests(CommandTestCase):

    def test_config_errors_stop_before_listening(self):
        with self.assertRaisesMessage(CommandError, "ports must differ"):
            self.call("serve", "--in-memory", "--nbd-port", "9000", "--http-port", "9000")
        with self.assertRaisesMessage(CommandError, "not found"):
            self.call("serve", "--config", str(self.tmp / "missing.env"))
        with self.assertRaisesMessage(CommandError, "invalid size"):
            self.call("serve", "--in-memory", "--capacity", "big")
