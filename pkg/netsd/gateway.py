"""
The remote access gateway: one card, one switch, and the RAG-side host
controller shared by the NBD server and the REST API.

Configuration comes from `settings.NETSD` (python-decouple reads the
environment there), optionally overlaid by a `key = value` file and then by
explicit overrides such as command-line flags.
"""
import logging
import re
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

from decouple import Config, Csv, RepositoryEnv
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

from .bus import BusConfig
from .dut_host import MAX_CHUNK, HostSession
from .events import EventLog, attach_file, detach_file
from .fatfs import FatVolume
from .faults import FaultInjector
from .sd_core import BLOCK_SIZE, FileImage, MemoryImage, SdCard
from .switch import SdSwitch

logger = logging.getLogger(__name__)

SIZE_UNITS = {
    "": 1, "b": 1,
    "k": 1024, "kib": 1024, "kb": 1024,
    "m": 1024 ** 2, "mib": 1024 ** 2, "mb": 1024 ** 2,
    "g": 1024 ** 3, "gib": 1024 ** 3, "gb": 1024 ** 3,
}
SIZE_RE = re.compile(r"^\s*(\d+)\s*([a-z]*)\s*$", re.IGNORECASE)


def parse_size(value):
    """'64MiB' -> 67108864. Units are binary."""
    if isinstance(value, int):
        return value
    match = SIZE_RE.match(str(value))
    if not match or match.group(2).lower() not in SIZE_UNITS:
        raise ValueError(f"invalid size {value!r}")
    return int(match.group(1)) * SIZE_UNITS[match.group(2).lower()]


@dataclass(frozen=True)
class GatewayConfig:
    image: str
    capacity_bytes: int
    in_memory: bool = False
    listen_addr: str = "127.0.0.1"
    nbd_port: int = 10809
    http_port: int = 8080
    pullups: bool = False
    cable_cm: float = 48.0
    safe_layout: bool = True
    host_uhs: bool = True
    seed: int = 0
    ports: tuple = ("dut", "rag")
    default_port: str = "dut"
    rag_port: str = "rag"
    hold_timeout: float = 30.0
    grant_wait: float = 10.0
    repower_on_switch: bool = True
    retry_limit: int = 16
    chunk_size: int = 8 * 1024
    export_name: str = "netsd"
    read_only: bool = False
    event_log: str = ""
    power_cycle_rate: str = "30/m"

    def validate(self):
        problems = []
        if self.nbd_port == self.http_port:
            problems.append("NBD and HTTP ports must differ")
        if self.capacity_bytes <= 0 or self.capacity_bytes % BLOCK_SIZE:
            problems.append(f"capacity must be a positive multiple of {BLOCK_SIZE} bytes")
        if not self.in_memory and not Path(self.image).parent.is_dir():
            problems.append(f"image directory {Path(self.image).parent} does not exist")
        if self.event_log and not Path(self.event_log).parent.is_dir():
            problems.append(f"event log directory {Path(self.event_log).parent} does not exist")
        if len(self.ports) < 2 or len(set(self.ports)) != len(self.ports):
            problems.append("the switch needs at least two distinct ports")
        if self.default_port not in self.ports or self.rag_port not in self.ports:
            problems.append("default and RAG ports must be switch ports")
        if self.default_port == self.rag_port:
            problems.append("default and RAG ports must differ")
        if self.retry_limit < 1:
            problems.append("retry_limit must be >= 1")
        if self.chunk_size % BLOCK_SIZE or not BLOCK_SIZE <= self.chunk_size <= MAX_CHUNK:
            problems.append(f"chunk size must be a multiple of {BLOCK_SIZE} up to {MAX_CHUNK}")
        if self.hold_timeout <= 0 or self.grant_wait <= 0:
            problems.append("hold_timeout and grant_wait must be positive")
        if self.cable_cm < 0:
            problems.append("cable_cm must be >= 0")
        if problems:
            raise ImproperlyConfigured("; ".join(problems))
        return self

    def bus_config(self):
        return BusConfig(
            explicit_pullups=self.pullups,
            cable_length_cm=self.cable_cm,
            crosstalk_safe_layout=self.safe_layout,
            host_supports_uhs=self.host_uhs,
            seed=self.seed,
        )

    def as_dict(self):
        return {**asdict(self), "ports": list(self.ports)}


# short key -> cast for values read from a config file
CONFIG_KEYS = {
    "image": str,
    "capacity": str,
    "in_memory": bool,
    "listen_addr": str,
    "nbd_port": int,
    "http_port": int,
    "pullups": bool,
    "cable_cm": float,
    "safe_layout": bool,
    "host_uhs": bool,
    "seed": int,
    "ports": Csv(),
    "default_port": str,
    "rag_port": str,
    "hold_timeout": float,
    "grant_wait": float,
    "repower_on_switch": bool,
    "retry_limit": int,
    "chunk_size": str,
    "export_name": str,
    "read_only": bool,
    "event_log": str,
    "power_cycle_rate": str,
}


def load_config(config_file=None, **overrides):
    """
    Build a GatewayConfig. Precedence: overrides (non-None) > config file >
    settings.NETSD > dataclass defaults.
    """
    unknown = set(overrides) - set(CONFIG_KEYS)
    if unknown:
        raise ImproperlyConfigured(f"unknown gateway options: {', '.join(sorted(unknown))}")
    file_config = None
    if config_file:
        if not Path(config_file).is_file():
            raise ImproperlyConfigured(f"config file {config_file} not found")
        file_config = Config(RepositoryEnv(str(config_file)))
    base = getattr(settings, "NETSD", {})

    values = {}
    for key, cast in CONFIG_KEYS.items():
        if overrides.get(key) is not None:
            values[key] = overrides[key]
        elif file_config is not None and key in file_config.repository:
            try:
                values[key] = file_config(key, cast=cast)
            except ValueError as exc:
                raise ImproperlyConfigured(f"{config_file}: bad value for {key}: {exc}") from exc
        elif key.upper() in base:
            values[key] = base[key.upper()]

    try:
        if "capacity" in values:
            values["capacity_bytes"] = parse_size(values.pop("capacity"))
        if "chunk_size" in values:
            values["chunk_size"] = parse_size(values["chunk_size"])
    except ValueError as exc:
        raise ImproperlyConfigured(str(exc)) from exc
    if "ports" in values:
        values["ports"] = tuple(values["ports"])
    values.setdefault("image", "sd.img")
    values.setdefault("capacity_bytes", 64 * 1024 * 1024)
    return GatewayConfig(**values).validate()


@dataclass
class RagSession:
    token: object
    host: HostSession
    device: object
    volume: FatVolume = None


class Gateway:

    def __init__(self, config):
        self.config = config
        self.events = EventLog()
        self._event_file = attach_file(config.event_log) if config.event_log else None
        capacity = config.capacity_bytes
        if config.in_memory:
            self.backing = MemoryImage(capacity)
        else:
            self.backing = FileImage(config.image, capacity)
        self.card = SdCard(self.backing, capacity, serial=config.seed)
        self.faults = FaultInjector()
        self.switch = SdSwitch(
            self.card,
            config.bus_config(),
            ports=config.ports,
            default_port=config.default_port,
            faults=self.faults,
            events=self.events,
            max_hold_s=config.hold_timeout,
            repower_on_switch=config.repower_on_switch,
        )
        self.rag_host = HostSession(self.switch, config.rag_port,
                                    retry_limit=config.retry_limit, auto_reinit=True)
        self._stop = threading.Event()
        self._watchdog = None
        self.switch.release()
        logger.info("Gateway ready: %d byte card, %s", capacity,
                    "in memory" if config.in_memory else config.image)

    @contextmanager
    def rag_session(self, mount=False, timeout=None):
        """
        Grant the card to the RAG port, initialize it, and hand back a block
        device (and a mounted FAT volume when asked). The card goes back to
        the default port when the block exits, on success or failure.
        """
        timeout = self.config.grant_wait if timeout is None else timeout
        with self.switch.session(self.config.rag_port, timeout) as token:
            self.rag_host.init()
            device = self.rag_host.block_device(self.config.chunk_size)
            volume = FatVolume(device) if mount else None
            yield RagSession(token, self.rag_host, device, volume)
            device.flush()

    def format_card(self, label="NO NAME"):
        with self.rag_session() as rag:
            volume = FatVolume.format(rag.device, label=label)
            return volume.info()

    def status(self):
        mode = self.rag_host.negotiated_mode
        return {
            "holder": self.switch.holder,
            "mode": mode.name.value if mode else None,
            "switch": self.switch.status(),
            "rag_stats": self.rag_host.stats.as_dict(),
            "faults": len(self.faults.list()),
            "card": {
                "capacity": self.card.capacity_bytes,
                "phase": self.card.state.phase.value,
                "backing_reads": self.backing.reads,
                "backing_writes": self.backing.writes,
            },
            "events": self.events.last_seq,
        }

    def start_watchdog(self, interval=1.0):
        def run():
            while not self._stop.wait(interval):
                self.switch.enforce_hold_limit()

        self._watchdog = threading.Thread(target=run, name="grant-watchdog", daemon=True)
        self._watchdog.start()
        return self._watchdog

    def shutdown(self):
        self._stop.set()
        if self._watchdog is not None:
            self._watchdog.join(timeout=5)
        with self.switch.lock:
            self.backing.flush()
            self.backing.close()
        detach_file(self._event_file)
        self._event_file = None
        logger.info("Gateway stopped")


_gateway = None
_gateway_lock = threading.Lock()


def get_gateway():
    """The process-wide gateway, built from settings on first use."""
    global _gateway
    with _gateway_lock:
        if _gateway is None:
            _gateway = Gateway(load_config())
        return _gateway


def install_gateway(gateway):
    global _gateway
    with _gateway_lock:
        previous, _gateway = _gateway, gateway
    return previous


def reset_gateway():
    previous = install_gateway(None)
    if previous is not None:
        previous.shutdown()
