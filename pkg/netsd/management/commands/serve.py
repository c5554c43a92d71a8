import argparse
import logging
import signal
import threading

from django.core.exceptions import ImproperlyConfigured
from django.core.management.base import BaseCommand, CommandError
from django.core.servers.basehttp import WSGIServer, get_internal_wsgi_application, run

from netsd.gateway import Gateway, install_gateway, load_config
from netsd.nbd import NbdServer

logger = logging.getLogger(__name__)


def _interrupt(signum, frame):
    raise KeyboardInterrupt


class Command(BaseCommand):
    help = "Run the gateway: NBD listener and REST API over one emulated card."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="key = value file; flags override it")
        parser.add_argument("--image", help="raw image path (created sparse if missing)")
        parser.add_argument("--capacity", help="card capacity, e.g. 64MiB")
        parser.add_argument("--in-memory", action="store_true", default=None,
                            help="keep the card in RAM instead of an image file")
        parser.add_argument("--listen", dest="listen_addr", help="address for both listeners")
        parser.add_argument("--nbd-port", type=int)
        parser.add_argument("--http-port", type=int)
        parser.add_argument("--pullups", action=argparse.BooleanOptionalAction, default=None,
                            help="explicit 3.3 V pull-ups on the data lines")
        parser.add_argument("--cable-cm", type=float)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--hold-timeout", type=float, help="seconds an idle grant may be held")
        parser.add_argument("--export-name")
        parser.add_argument("--read-only", action="store_true", default=None)

    def handle(self, *args, **options):
        overrides = {
            key: options[key]
            for key in ("image", "capacity", "in_memory", "listen_addr", "nbd_port", "http_port",
                        "pullups", "cable_cm", "seed", "hold_timeout", "export_name", "read_only")
        }
        try:
            config = load_config(options["config"], **overrides)
        except ImproperlyConfigured as exc:
            raise CommandError(str(exc)) from exc

        gateway = Gateway(config)
        install_gateway(gateway)
        try:
            nbd = NbdServer((config.listen_addr, config.nbd_port), gateway,
                            export_name=config.export_name, read_only=config.read_only)
        except OSError as exc:
            gateway.shutdown()
            raise CommandError(f"cannot listen on {config.listen_addr}:{config.nbd_port}: {exc}") from exc
        nbd.start()
        gateway.start_watchdog()

        if threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGTERM, _interrupt)

        self.stdout.write(self.style.SUCCESS(
            f"NBD on {config.listen_addr}:{config.nbd_port} (export {config.export_name!r}), "
            f"REST on http://{config.listen_addr}:{config.http_port}/api/v1/"
        ))
        try:
            run(config.listen_addr, config.http_port, get_internal_wsgi_application(),
                ipv6=":" in config.listen_addr, threading=True, server_cls=WSGIServer)
        except KeyboardInterrupt:
            pass
        except OSError as exc:
            raise CommandError(f"cannot listen on {config.listen_addr}:{config.http_port}: {exc}") from exc
        finally:
            nbd.shutdown()
            nbd.server_close()
            gateway.shutdown()
            install_gateway(None)
            self.stdout.write("Gateway stopped.")
