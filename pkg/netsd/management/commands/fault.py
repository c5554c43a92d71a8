import json

import requests
from django.core.management.base import BaseCommand, CommandError

from netsd.faults import KINDS, TRIGGERS


class Command(BaseCommand):
    help = "Schedule, list or cancel faults on a running gateway."

    def add_arguments(self, parser):
        parser.add_argument("--url", default="http://127.0.0.1:8080", help="gateway base URL")
        parser.add_argument("--timeout", type=float, default=10.0)
        actions = parser.add_subparsers(dest="action", required=True)

        add = actions.add_parser("add", help="schedule a fault")
        add.add_argument("kind", choices=sorted(KINDS))
        add.add_argument("--params", default="{}", help='JSON object, e.g. \'{"match": 17}\'')
        add.add_argument("--trigger", choices=sorted(TRIGGERS), default="immediate")
        add.add_argument("--at", type=float,
                         help="transaction count or simulated microseconds for the trigger")

        actions.add_parser("list", help="list scheduled faults")

        cancel = actions.add_parser("cancel", help="cancel a fault by id")
        cancel.add_argument("fault_id", type=int)

    def handle(self, *args, **options):
        self.base = options["url"].rstrip("/") + "/api/v1"
        self.timeout = options["timeout"]
        getattr(self, f"_{options['action']}")(options)

    def _request(self, method, path, **kwargs):
        try:
            response = requests.request(method, self.base + path, timeout=self.timeout, **kwargs)
        except requests.RequestException as exc:
            raise CommandError(f"gateway unreachable: {exc}") from exc
        try:
            body = response.json()
        except ValueError:
            raise CommandError(f"HTTP {response.status_code} from {path}") from None
        if not response.ok or not body.get("success"):
            raise CommandError(f"HTTP {response.status_code}: {body.get('error')}")
        return body

    def _add(self, options):
        try:
            params = json.loads(options["params"])
        except ValueError as exc:
            raise CommandError(f"--params is not valid JSON: {exc}") from exc
        trigger = {"type": options["trigger"]}
        if options["trigger"] == "at_transaction":
            if options["at"] is None:
                raise CommandError("--at is required for the at_transaction trigger")
            trigger["n"] = int(options["at"])
        elif options["trigger"] == "at_sim_time":
            if options["at"] is None:
                raise CommandError("--at is required for the at_sim_time trigger")
            trigger["t_us"] = options["at"]

        body = self._request("POST", "/faults", json={
            "kind": options["kind"], "params": params, "trigger": trigger,
        })
        fault = body["fault"]
        self.stdout.write(self.style.SUCCESS(f"fault {fault['id']} {fault['kind']}: {fault['status']}"))

    def _list(self, options):
        faults = self._request("GET", "/faults")["faults"]
        if not faults:
            self.stdout.write("no faults scheduled")
        for fault in faults:
            self.stdout.write(
                f"{fault['id']:>4}  {fault['kind']:16} {fault['fault_class']:12} "
                f"{fault['status']:10} {json.dumps(fault['params'])}"
            )

    def _cancel(self, options):
        body = self._request("DELETE", f"/faults/{options['fault_id']}")
        self.stdout.write(self.style.SUCCESS(f"fault {body['id']}: {body['status']}"))
