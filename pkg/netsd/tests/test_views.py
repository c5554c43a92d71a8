import json

from django.core.cache import cache
from django.test import SimpleTestCase

from netsd.faults import LineDisconnect

from .base import GatewayMixin


class ApiTestCase(GatewayMixin, SimpleTestCase):
    gateway_options = {"capacity": "4MiB"}

    def setUp(self):
        super().setUp()
        cache.clear()
        self.gateway.format_card(label="test")

    def post_json(self, url, data):
        return self.client.post(url, json.dumps(data), content_type="application/json")

    def assertError(self, response, status, code):
        self.assertEqual(response.status_code, status, response.content)
        body = response.json()
        self.assertFalse(body["success"])
        self.assertEqual(body["code"], code)


class StatusTests(ApiTestCase):

    def test_status_reports_default_holder(self):
        response = self.client.get("/api/v1/status")
        self.assertEqual(response.status_code, 200)
        body = response.json()
        self.assertEqual(body["holder"], "dut")
        self.assertEqual(body["switch"]["ports"]["dut"]["CLK"], "conductive")
        self.assertEqual(body["switch"]["ports"]["rag"]["CLK"], "disconnected")
        self.assertEqual(body["card"]["capacity"], 4 * 1024 * 1024)

    def test_wrong_method(self):
        self.assertEqual(self.client.post("/api/v1/status").status_code, 405)

    def test_events_filter_and_cursor(self):
        body = self.client.get("/api/v1/events", {"kind": "make"}).json()
        self.assertTrue(body["events"])
        self.assertTrue(all(e["event"] == "make" for e in body["events"]))
        later = self.client.get("/api/v1/events", {"since": body["last_seq"], "kind": "make"}).json()
        self.assertEqual(later["events"], [])
        self.assertEqual(later["last_seq"], body["last_seq"])
        self.assertEqual(self.client.get("/api/v1/events", {"since": "soon"}).status_code, 400)


class FileApiTests(ApiTestCase):

    def test_put_get_replace(self):
        response = self.client.put("/api/v1/files/hello.txt", b"hello card",
                                   content_type="application/octet-stream")
        self.assertEqual(response.status_code, 201)
        self.assertTrue(response.json()["created"])
        self.assertEqual(self.gateway.switch.holder, "dut")

        response = self.client.get("/api/v1/files/hello.txt")
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.content, b"hello card")

        response = self.client.put("/api/v1/files/hello.txt", b"v2", content_type="application/octet-stream")
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json()["entry"]["size"], 2)

    def test_listing_and_dirs(self):
        self.assertEqual(self.client.put("/api/v1/dirs/logs/run1").status_code, 201)
        self.assertEqual(self.client.put("/api/v1/dirs/logs/run1").status_code, 200)
        self.client.put("/api/v1/files/logs/run1/out.txt", b"x", content_type="application/octet-stream")
        body = self.client.get("/api/v1/files", {"path": "/logs/run1"}).json()
        self.assertEqual(body["count"], 1)
        self.assertEqual(body["entries"][0]["name"], "OUT.TXT")
        root = self.client.get("/api/v1/files").json()
        self.assertEqual([e["type"] for e in root["entries"]], ["dir"])

    def test_delete(self):
        self.client.put("/api/v1/files/gone.bin", b"bye", content_type="application/octet-stream")
        self.assertEqual(self.client.delete("/api/v1/files/gone.bin").status_code, 200)
        self.assertError(self.client.get("/api/v1/files/gone.bin"), 404, "NotFound")
        self.assertError(self.client.delete("/api/v1/files/missing.txt"), 404, "NotFound")

    def test_filesystem_errors(self):
        self.client.put("/api/v1/dirs/data")
        self.assertError(self.client.get("/api/v1/files/data"), 422, "IsADirectory")
        self.assertError(
            self.client.put("/api/v1/files/not-a-short-name.text", b"x", content_type="text/plain"),
            422, "NameInvalid")

    def test_unformatted_card(self):
        self.gateway.backing.write(0, bytes(512))
        self.assertError(self.client.get("/api/v1/files"), 500, "IoError")
        self.assertEqual(self.gateway.switch.holder, "dut")


class BlockApiTests(ApiTestCase):

    def test_write_then_read(self):
        payload = bytes(range(256)) * 4
        response = self.client.put("/api/v1/blocks/100", payload, content_type="application/octet-stream")
        self.assertEqual(response.json(), {"success": True, "lba": 100, "count": 2})
        response = self.client.get("/api/v1/blocks/100", {"count": 2})
        self.assertEqual(response.content, payload)
        self.assertEqual(len(self.client.get("/api/v1/blocks/100").content), 512)

    def test_bad_requests(self):
        self.assertError(self.client.put("/api/v1/blocks/0", b"short", content_type="application/octet-stream"),
                         400, "BadRequest")
        self.assertError(self.client.get("/api/v1/blocks/0", {"count": 0}), 400, "BadRequest")
        self.assertError(self.client.get("/api/v1/blocks/8192"), 416, "AddressError")


class SwitchApiTests(ApiTestCase):

    def test_manual_grant(self):
        response = self.post_json("/api/v1/switch", {"port": "rag"})
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json()["grant"]["holder"], "rag")
        self.assertEqual(self.gateway.switch.holder, "rag")

    def test_invalid_requests(self):
        self.assertError(self.post_json("/api/v1/switch", {"port": "jtag"}), 400, "UnknownPort")
        self.assertError(self.post_json("/api/v1/switch", {}), 400, "BadRequest")
        response = self.client.post("/api/v1/switch", "{not json", content_type="application/json")
        self.assertError(response, 400, "BadRequest")
        self.assertError(self.post_json("/api/v1/switch", ["rag"]), 400, "BadRequest")

    def test_refused_during_session(self):
        with self.gateway.switch.session("rag", timeout=1):
            self.assertError(self.post_json("/api/v1/switch", {"port": "dut"}), 409, "GrantTimeout")
        self.assertEqual(self.gateway.switch.holder, "dut")


class PowerCycleApiTests(ApiTestCase):
    gateway_options = {"capacity": "4MiB", "power_cycle_rate": "2/m"}

    def test_cycle_and_rate_limit(self):
        cycles = self.gateway.switch.power_cycles
        for _ in range(2):
            response = self.client.post("/api/v1/power/cycle")
            self.assertEqual(response.status_code, 200)
            self.assertTrue(response.json()["grant"]["repower_pending"])
        self.assertEqual(self.gateway.switch.power_cycles, cycles + 2)
        self.assertEqual(self.client.post("/api/v1/power/cycle").status_code, 403)
        self.assertEqual(self.gateway.switch.power_cycles, cycles + 2)


class FaultApiTests(ApiTestCase):

    def test_schedule_list_cancel(self):
        response = self.post_json("/api/v1/faults", {
            "kind": "omit", "params": {"match": 17},
            "trigger": {"type": "at_transaction", "n": 1_000_000},
        })
        self.assertEqual(response.status_code, 201)
        fault = response.json()["fault"]
        self.assertEqual((fault["kind"], fault["status"]), ("omit", "armed"))

        listed = self.client.get("/api/v1/faults").json()["faults"]
        self.assertEqual([f["id"] for f in listed], [fault["id"]])

        response = self.client.delete(f"/api/v1/faults/{fault['id']}")
        self.assertEqual(response.json()["status"], "cancelled")
        self.assertError(self.client.delete("/api/v1/faults/999"), 404, "UnknownFaultId")

    def test_invalid_faults(self):
        for body in (
            {"kind": "melt"},
            {"kind": "omit", "params": {"match": 99}},
            {"kind": "omit", "params": [17]},
            {"kind": "delay", "params": {"added_us": 1}, "trigger": {"type": "later"}},
            {"kind": "line_disconnect", "params": {"port": "jtag", "line": "CLK"}},
        ):
            with self.subTest(body=body):
                self.assertError(self.post_json("/api/v1/faults", body), 400,
                                 "InvalidSpec" if body["kind"] == "line_disconnect" else "BadRequest")

    def test_fault_reaches_rest_traffic(self):
        self.client.put("/api/v1/files/a.txt", b"data", content_type="application/octet-stream")
        self.post_json("/api/v1/faults", {"kind": "omit", "params": {"match": "read", "count": 2}})
        response = self.client.get("/api/v1/files/a.txt")
        self.assertEqual(response.content, b"data")
        self.assertGreaterEqual(self.gateway.rag_host.stats.timeouts, 2)
        self.assertEqual(self.client.get("/api/v1/faults").json()["faults"][0]["status"], "expired")

    def test_sustained_power_loss_on_rag(self):
        self.gateway.faults.schedule(LineDisconnect("rag", "POWER"))
        self.assertError(self.client.get("/api/v1/files"), 500, "RetriesExhausted")
        self.assertEqual(self.gateway.switch.holder, "dut")


class FormatApiTests(ApiTestCase):

    def test_format(self):
        self.client.put("/api/v1/files/old.txt", b"x", content_type="application/octet-stream")
        response = self.post_json("/api/v1/format", {"label": "fresh"})
        self.assertEqual(response.status_code, 201)
        volume = response.json()["volume"]
        self.assertEqual((volume["fat_type"], volume["label"]), ("FAT16", "FRESH"))
        self.assertEqual(self.client.get("/api/v1/files").json()["count"], 0)

    def test_label_validation(self):
        self.assertError(self.post_json("/api/v1/format", {"label": "x" * 12}), 400, "BadRequest")


class LargeCardApiTests(ApiTestCase):
    gateway_options = {"capacity": "32MiB"}

    def test_32mib_card_is_fat16(self):
        info = self.gateway.format_card()
        self.assertEqual(info["fat_type"], "FAT16")
        response = self.client.put("/api/v1/files/big.bin", bytes(300_000), content_type="application/octet-stream")
        self.assertEqual(response.status_code, 201)
        self.assertEqual(len(self.client.get("/api/v1/files/big.bin").content), 300_000)
