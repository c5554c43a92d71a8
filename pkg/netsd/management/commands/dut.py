import sys
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from netsd.bus import BusConfig, Direction
from netsd.dut_host import DEFAULT_CHUNK, HostSession
from netsd.exceptions import NetSdError
from netsd.gateway import parse_size
from netsd.sd_core import BLOCK_SIZE, FileImage, SdCard
from netsd.switch import SdSwitch


class Command(BaseCommand):
    help = "Scripted DUT host actions (read, write, bench) against a local card image."

    def add_arguments(self, parser):
        parser.add_argument("--image", default="sd.img", help="raw card image")
        parser.add_argument("--pullups", action="store_true", help="explicit 3.3 V pull-ups")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--retry-limit", type=int, default=8)
        parser.add_argument("--chunk-size", default=str(DEFAULT_CHUNK))
        actions = parser.add_subparsers(dest="action", required=True)

        read = actions.add_parser("read", help="read blocks to a file or stdout")
        read.add_argument("lba", type=int)
        read.add_argument("count", type=int)
        read.add_argument("--out", help="output file (default: stdout)")

        write = actions.add_parser("write", help="write a file at a block address")
        write.add_argument("lba", type=int)
        write.add_argument("source", help="input file, zero-padded to whole blocks")

        sweep = actions.add_parser("bench", help="measure simulated throughput")
        sweep.add_argument("direction", choices=[d.value for d in Direction])
        sweep.add_argument("--volume", default="8MiB")
        sweep.add_argument("--lba", type=int, default=0)

    def handle(self, *args, **options):
        path = Path(options["image"])
        if not path.is_file():
            raise CommandError(f"image {path} not found (create it with `format`)")
        try:
            chunk_size = parse_size(options["chunk_size"])
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        if options["retry_limit"] < 1:
            raise CommandError("--retry-limit must be >= 1")

        capacity = path.stat().st_size // BLOCK_SIZE * BLOCK_SIZE
        backing = FileImage(path, capacity)
        try:
            card = SdCard(backing, capacity, serial=options["seed"])
            switch = SdSwitch(card, BusConfig(explicit_pullups=options["pullups"], seed=options["seed"]))
            switch.grant("dut")
            host = HostSession(switch, "dut", retry_limit=options["retry_limit"])
            mode = host.init()
            if options["verbosity"] > 1:
                self.stderr.write(f"card: {host.capacity_bytes} bytes, mode {mode.name.value}")
            action = getattr(self, f"_{options['action']}")
            action(host, chunk_size, options)
            backing.flush()
        except NetSdError as exc:
            raise CommandError(f"{exc.code}: {exc}") from exc
        finally:
            backing.close()

    def _read(self, host, chunk_size, options):
        data = host.read(options["lba"], options["count"], chunk_size)
        if options["out"]:
            Path(options["out"]).write_bytes(data)
            self.stdout.write(f"read {len(data)} bytes to {options['out']}")
        else:
            sys.stdout.buffer.write(data)

    def _write(self, host, chunk_size, options):
        source = Path(options["source"])
        if not source.is_file():
            raise CommandError(f"{source} not found")
        data = source.read_bytes()
        if not data:
            raise CommandError(f"{source} is empty")
        data += bytes(-len(data) % BLOCK_SIZE)
        stats = host.write(options["lba"], data, chunk_size)
        host.flush()
        self.stdout.write(f"wrote {len(data)} bytes at block {options['lba']} "
                          f"({stats.retries} retries)")

    def _bench(self, host, chunk_size, options):
        try:
            volume = parse_size(options["volume"])
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        mbps = host.throughput(options["direction"], volume, chunk_size, options["lba"], options["seed"])
        delta = host.last_delta
        self.stdout.write(f"{options['direction']} {chunk_size} B chunks: {mbps:.3f} MByte/s, "
                          f"{delta.retries} retries, {delta.crc_errors} CRC errors")
