import random
import tempfile
import threading
import time
from pathlib import Path

from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase, override_settings

from netsd.exceptions import NetSdError, NotFound
from netsd.gateway import get_gateway, install_gateway, load_config, parse_size, reset_gateway

from .base import MIB, make_gateway, make_host


class ParseSizeTests(SimpleTestCase):

    def test_units(self):
        self.assertEqual(parse_size("64MiB"), 64 * MIB)
        self.assertEqual(parse_size("4k"), 4096)
        self.assertEqual(parse_size(" 8 M "), 8 * MIB)
        self.assertEqual(parse_size("1GiB"), 1024 * MIB)
        self.assertEqual(parse_size("512"), 512)
        self.assertEqual(parse_size(1000), 1000)

    def test_invalid(self):
        for value in ("", "1.5M", "12 parsecs", "-4k"):
            with self.subTest(value=value), self.assertRaises(ValueError):
                parse_size(value)


@override_settings(NETSD={})
class LoadConfigTests(SimpleTestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def write_config(self, text):
        path = self.tmp / "gateway.env"
        path.write_text(text)
        return path

    def test_defaults(self):
        config = load_config(in_memory=True)
        self.assertEqual(config.capacity_bytes, 64 * MIB)
        self.assertEqual((config.nbd_port, config.http_port), (10809, 8080))
        self.assertEqual(config.ports, ("dut", "rag"))
        self.assertEqual(config.export_name, "netsd")

    def test_settings_then_file_then_overrides(self):
        path = self.write_config(
            "capacity = 16MiB\nseed = 9\npullups = true\nports = dut, rag, bench\nchunk_size = 16KiB\n"
        )
        with self.settings(NETSD={"SEED": 7, "CAPACITY": "8MiB", "HTTP_PORT": 9090, "IN_MEMORY": True}):
            from_settings = load_config()
            config = load_config(path, seed=3)
        self.assertEqual((from_settings.seed, from_settings.capacity_bytes), (7, 8 * MIB))
        self.assertEqual(config.capacity_bytes, 16 * MIB)
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.http_port, 9090)
        self.assertTrue(config.pullups)
        self.assertEqual(config.ports, ("dut", "rag", "bench"))
        self.assertEqual(config.chunk_size, 16 * 1024)
        self.assertEqual(config.as_dict()["ports"], ["dut", "rag", "bench"])

    def test_bus_config(self):
        bus = load_config(in_memory=True, pullups=True, cable_cm=20.0, seed=4).bus_config()
        self.assertTrue(bus.explicit_pullups)
        self.assertEqual((bus.cable_length_cm, bus.seed), (20.0, 4))

    def test_file_errors(self):
        with self.assertRaisesMessage(ImproperlyConfigured, "not found"):
            load_config(self.tmp / "missing.env")
        with self.assertRaisesMessage(ImproperlyConfigured, "bad value for seed"):
            load_config(self.write_config("seed = many\n"), in_memory=True)

    def test_validation(self):
        for overrides, message in (
            ({"colour": "red"}, "unknown gateway options"),
            ({"nbd_port": 8080}, "ports must differ"),
            ({"capacity": "1000"}, "capacity"),
            ({"capacity": "huge"}, "invalid size"),
            ({"ports": ["dut"]}, "two distinct ports"),
            ({"rag_port": "dut"}, "must differ"),
            ({"default_port": "jtag"}, "must be switch ports"),
            ({"retry_limit": 0}, "retry_limit"),
            ({"chunk_size": "1000"}, "chunk size"),
            ({"hold_timeout": 0}, "must be positive"),
            ({"in_memory": False, "image": str(self.tmp / "no" / "sd.img")}, "image directory"),
            ({"event_log": str(self.tmp / "no" / "events.log")}, "event log directory"),
        ):
            overrides = {"in_memory": True, **overrides}
            with self.subTest(overrides=overrides), self.assertRaisesMessage(ImproperlyConfigured, message):
                load_config(**overrides)


class GatewayTests(SimpleTestCase):

    def setUp(self):
        self.gateway = make_gateway(capacity="4MiB")
        self.addCleanup(self.gateway.shutdown)

    def test_rag_session_returns_the_card(self):
        self.assertEqual(self.gateway.switch.holder, "dut")
        with self.gateway.rag_session() as rag:
            self.assertEqual(self.gateway.switch.holder, "rag")
            rag.device.write_at(0, b"boot")
        self.assertEqual(self.gateway.switch.holder, "dut")
        self.assertEqual(self.gateway.backing.read(0, 4), b"boot")

        with self.assertRaises(RuntimeError):
            with self.gateway.rag_session():
                raise RuntimeError("boom")
        self.assertEqual(self.gateway.switch.holder, "dut")

    def test_mounted_session(self):
        self.gateway.format_card(label="gw")
        with self.gateway.rag_session(mount=True) as rag:
            self.assertEqual(rag.volume.label, "GW")
            rag.volume.write_file("/a.txt", b"abc")
        with self.gateway.rag_session(mount=True) as rag:
            self.assertEqual(rag.volume.read_file("/a.txt"), b"abc")
            with self.assertRaises(NotFound):
                rag.volume.read_file("/b.txt")

    def test_status(self):
        self.assertIsNone(self.gateway.status()["mode"])
        self.gateway.format_card()
        status = self.gateway.status()
        self.assertEqual(status["holder"], "dut")
        self.assertIsNotNone(status["mode"])
        self.assertEqual(status["card"]["capacity"], 4 * MIB)
        self.assertGreater(status["rag_stats"]["bytes_ok"], 0)
        self.assertEqual(status["events"], self.gateway.events.last_seq)


class WatchdogTests(SimpleTestCase):

    def test_idle_grant_is_revoked(self):
        gateway = make_gateway(capacity="4MiB", hold_timeout=0.05)
        self.addCleanup(gateway.shutdown)
        gateway.switch.grant("rag")
        gateway.start_watchdog(interval=0.02)
        deadline = time.monotonic() + 5
        while gateway.switch.holder != "dut":
            self.assertLess(time.monotonic(), deadline, "grant was never revoked")
            time.sleep(0.01)
        self.assertTrue(gateway.events.events(kind="hold_timeout"))


class EventLogFileTests(SimpleTestCase):

    def test_events_written_to_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "events.log"
            gateway = make_gateway(capacity="4MiB", event_log=str(path))
            try:
                gateway.switch.grant("rag")
            finally:
                gateway.shutdown()
            text = path.read_text()
        self.assertIn("event=make port=rag", text)


@override_settings(NETSD={"IN_MEMORY": True, "CAPACITY": "4MiB"})
class ProcessGatewayTests(SimpleTestCase):

    def test_lazy_build_install_and_reset(self):
        self.addCleanup(reset_gateway)
        reset_gateway()
        built = get_gateway()
        self.assertIs(get_gateway(), built)
        self.assertEqual(built.config.capacity_bytes, 4 * MIB)

        replacement = make_gateway(capacity="4MiB")
        self.assertIs(install_gateway(replacement), built)
        built.shutdown()
        self.assertIs(get_gateway(), replacement)


class ConcurrentAccessTests(SimpleTestCase):

    def test_dut_traffic_during_rag_sessions(self):
        gateway = make_gateway(capacity="4MiB")
        self.addCleanup(gateway.shutdown)
        switch = gateway.switch
        switch.audit_transactions = True
        switch.events.clear()
        dut = make_host(switch, "dut", init=False)
        started, stop = threading.Event(), threading.Event()

        def dut_loop():
            rng = random.Random(5)
            for _ in range(1000):
                if stop.is_set():
                    break
                try:
                    dut.reinit_if_needed()
                    lba = 100 + rng.randrange(64)
                    if rng.random() < 0.5:
                        dut.write(lba, rng.randbytes(512))
                    else:
                        dut.read(lba, 1)
                except NetSdError:
                    dut.negotiated_mode = None
                started.set()
            started.set()

        worker = threading.Thread(target=dut_loop)
        worker.start()
        try:
            started.wait(5)
            payloads = {}
            for i in range(8):
                payload = random.Random(i).randbytes(3000)
                offset = MIB + i * 4096
                with gateway.rag_session() as rag:
                    rag.device.write_at(offset, payload)
                with gateway.rag_session() as rag:
                    self.assertEqual(rag.device.read_at(offset, len(payload)), payload)
                payloads[offset] = payload
        finally:
            stop.set()
            worker.join(30)
        self.assertFalse(worker.is_alive())

        events = switch.events.events()
        self.assertLess(len(events), 100_000)
        holder, open_txn, rag_txns = "dut", None, 0
        for event in events:
            if event.kind == "make":
                self.assertIsNone(open_txn)
                holder = event.port
            elif event.kind == "break":
                self.assertIsNone(open_txn)
            elif event.kind == "txn_begin":
                self.assertIsNone(open_txn)
                open_txn = event
            elif event.kind == "txn_end":
                self.assertEqual(event.detail["txn"], open_txn.detail["txn"])
                self.assertEqual(event.port, open_txn.port)
                if event.detail["status"] == "ok":
                    self.assertEqual(event.port, holder)
                if event.port == "rag":
                    self.assertEqual(holder, "rag")
                    rag_txns += 1
                open_txn = None
        self.assertIsNone(open_txn)
        self.assertGreater(rag_txns, 0)
        for offset, payload in payloads.items():
            self.assertEqual(gateway.backing.read(offset, len(payload)), payload)
