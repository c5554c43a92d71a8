"""
Hardware-level fault injection over the switch and bus.

Faults are scheduled with a trigger and evaluated at every arbitrated
transaction boundary, in simulated time, while the switch lock is held.
Fault kinds map onto the crash/omission/timing/computation taxonomy:

    LineDisconnect   crash (sustained) or transient line loss
    Omit             omission
    Delay            timing
    Corrupt, Replay  computation
"""
import dataclasses
import enum
import itertools
import logging
import threading
from dataclasses import dataclass, field

from .bus import LINE_NAMES, NO_FAULTS, POWER_LINE, ActiveFaults, Direction, LineState
from .exceptions import InvalidSpec, UnknownFaultId
from .sd_core import Power

logger = logging.getLogger(__name__)

MAX_BURST_BITS = 16


class FaultStatus(str, enum.Enum):
    ARMED = "armed"
    ACTIVE = "active"
    EXPIRED = "expired"
    CANCELLED = "cancelled"


def _window_ok(value):
    return value is None or value >= 0


def _direction(value):
    if value is None or isinstance(value, Direction):
        return value
    try:
        return Direction(value)
    except ValueError:
        raise InvalidSpec(f"unknown direction {value!r}") from None


# ── fault kinds ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class LineDisconnect:
    port: str
    line: str
    duration_us: float = None

    name = "line_disconnect"
    fault_class = "crash"

    def validate(self):
        if self.line not in LINE_NAMES:
            raise InvalidSpec(f"unknown line {self.line!r}")
        if not _window_ok(self.duration_us):
            raise InvalidSpec("duration_us must be >= 0")


@dataclass(frozen=True)
class Corrupt:
    direction: Direction = None
    bit_flip_rate: float = 0.0
    window_us: float = None
    burst_bits: int = 8
    port: str = None

    name = "corrupt"
    fault_class = "computation"

    def validate(self):
        if not 0.0 <= self.bit_flip_rate <= 1.0:
            raise InvalidSpec("bit_flip_rate must be within [0, 1]")
        if not 1 <= self.burst_bits <= MAX_BURST_BITS:
            raise InvalidSpec(f"burst_bits must be within [1, {MAX_BURST_BITS}]")
        if not _window_ok(self.window_us):
            raise InvalidSpec("window_us must be >= 0")


@dataclass(frozen=True)
class Delay:
    added_us: float
    window_us: float = None
    direction: Direction = None
    port: str = None

    name = "delay"
    fault_class = "timing"

    def validate(self):
        if self.added_us < 0:
            raise InvalidSpec("added_us must be >= 0")
        if not _window_ok(self.window_us):
            raise InvalidSpec("window_us must be >= 0")


@dataclass(frozen=True)
class Omit:
    """Suppress the next `count` transactions matching a command index or direction."""
    match: object
    count: int = 1
    port: str = None

    name = "omit"
    fault_class = "omission"

    def validate(self):
        if self.count < 1:
            raise InvalidSpec("count must be >= 1")
        if isinstance(self.match, Direction):
            return
        if isinstance(self.match, bool) or not isinstance(self.match, int) or not 0 <= self.match <= 63:
            raise InvalidSpec("match is a command index 0..63 or a direction")

    def matches(self, direction, index):
        if isinstance(self.match, Direction):
            return direction is self.match
        return index == self.match


@dataclass(frozen=True)
class Replay:
    """
    Capture the payloads of reads number `capture_window[0]` up to (not
    including) `capture_window[1]`, counted from activation, and hand them
    back in order starting at read number `inject_at`.
    """
    capture_window: tuple
    inject_at: int
    port: str = None

    name = "replay"
    fault_class = "computation"

    def validate(self):
        try:
            start, end = self.capture_window
        except (TypeError, ValueError):
            raise InvalidSpec("capture_window is a (start, end) pair") from None
        if not 0 <= start < end:
            raise InvalidSpec("capture_window must satisfy 0 <= start < end")
        if self.inject_at < end:
            raise InvalidSpec("capture_window must end before inject_at")


KINDS = {kind.name: kind for kind in (LineDisconnect, Corrupt, Delay, Omit, Replay)}


# ── triggers ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Immediate:
    name = "immediate"

    def fires(self, sim_us, txn):
        return True


@dataclass(frozen=True)
class AtTransactionCount:
    n: int

    name = "at_transaction"

    def fires(self, sim_us, txn):
        return txn >= self.n


@dataclass(frozen=True)
class AtSimTime:
    t_us: float

    name = "at_sim_time"

    def fires(self, sim_us, txn):
        return sim_us >= self.t_us


TRIGGERS = {trigger.name: trigger for trigger in (Immediate, AtTransactionCount, AtSimTime)}


@dataclass
class FaultSpec:
    id: int
    kind: object
    trigger: object = field(default_factory=Immediate)
    status: FaultStatus = FaultStatus.ARMED
    activated_us: float = None
    ended_us: float = None
    remaining: int = 0
    reads_seen: int = 0
    captured: list = field(default_factory=list, repr=False)
    window_token: int = None

    @property
    def fault_class(self):
        return self.kind.fault_class

    def as_dict(self):
        params = {}
        for f in dataclasses.fields(self.kind):
            value = getattr(self.kind, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            params[f.name] = value
        trigger = {"type": self.trigger.name, **dataclasses.asdict(self.trigger)}
        return {
            "id": self.id,
            "kind": self.kind.name,
            "fault_class": self.fault_class,
            "params": params,
            "trigger": trigger,
            "status": self.status.value,
            "activated_us": self.activated_us,
            "ended_us": self.ended_us,
        }


def parse_fault(data):
    """(kind, trigger) from a JSON-shaped dict; raises InvalidSpec."""
    if not isinstance(data, dict):
        raise InvalidSpec("fault must be an object")
    params = dict(data.get("params") or {})
    kind_cls = KINDS.get(data.get("kind"))
    if kind_cls is None:
        raise InvalidSpec(f"unknown fault kind {data.get('kind')!r}; expected one of {sorted(KINDS)}")
    if "direction" in params:
        params["direction"] = _direction(params["direction"])
    if kind_cls is Omit and isinstance(params.get("match"), str):
        params["match"] = _direction(params["match"])
    if kind_cls is Replay and "capture_window" in params:
        params["capture_window"] = tuple(params["capture_window"])
    try:
        kind = kind_cls(**params)
    except TypeError as exc:
        raise InvalidSpec(f"bad {kind_cls.name} parameters: {exc}") from None
    kind.validate()

    raw_trigger = dict(data.get("trigger") or {"type": Immediate.name})
    trigger_cls = TRIGGERS.get(raw_trigger.pop("type", Immediate.name))
    if trigger_cls is None:
        raise InvalidSpec(f"unknown trigger; expected one of {sorted(TRIGGERS)}")
    try:
        trigger = trigger_cls(**raw_trigger)
    except TypeError as exc:
        raise InvalidSpec(f"bad trigger parameters: {exc}") from None
    return kind, trigger


class FaultInjector:
    """
    Scheduled faults for one switch. `tick`, `effects` and `replay` are
    called by the switch inside its transaction loop; `schedule`, `cancel`
    and `list` may be called from any thread.
    """

    def __init__(self, events=None):
        self._faults = {}
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        self._switch = None
        self._sim_us = 0.0
        self.events = events

    def attach(self, switch):
        self._switch = switch
        self._lock = switch.lock
        if self.events is None:
            self.events = switch.events

    def _emit(self, kind, spec, **detail):
        if self.events is not None:
            self.events.emit(kind, sim_us=self._sim_us, port=getattr(spec.kind, "port", None),
                             fault=spec.id, fault_kind=spec.kind.name, **detail)

    # ── public API ──────────────────────────────────────────────────

    def schedule(self, kind, trigger=None):
        trigger = trigger or Immediate()
        if not dataclasses.is_dataclass(kind) or type(kind) not in KINDS.values():
            raise InvalidSpec(f"unknown fault kind {kind!r}")
        if type(trigger) not in TRIGGERS.values():
            raise InvalidSpec(f"unknown trigger {trigger!r}")
        kind.validate()
        if getattr(trigger, "n", 0) < 0 or getattr(trigger, "t_us", 0) < 0:
            raise InvalidSpec("trigger values must be >= 0")
        with self._lock:
            port = getattr(kind, "port", None)
            if port is not None and self._switch is not None and port not in self._switch.ports:
                raise InvalidSpec(f"unknown port {port!r}")
            spec = FaultSpec(next(self._ids), kind, trigger)
            if isinstance(kind, Omit):
                spec.remaining = kind.count
            self._faults[spec.id] = spec
            logger.info("Scheduled fault %d: %s", spec.id, kind)
            if isinstance(trigger, Immediate) and self._switch is not None:
                self._sim_us = self._switch.sim_us
                self._activate(spec)
            return spec.id

    def cancel(self, fault_id):
        with self._lock:
            spec = self._faults.get(fault_id)
            if spec is None:
                raise UnknownFaultId(f"no fault with id {fault_id}")
            if spec.status is FaultStatus.ARMED:
                spec.status = FaultStatus.CANCELLED
            elif spec.status is FaultStatus.ACTIVE:
                if self._switch is not None:
                    self._sim_us = self._switch.sim_us
                self._end(spec, FaultStatus.CANCELLED)
            return spec.status

    def list(self):
        with self._lock:
            return [dataclasses.replace(self._faults[i]) for i in sorted(self._faults)]

    def get(self, fault_id):
        with self._lock:
            try:
                return dataclasses.replace(self._faults[fault_id])
            except KeyError:
                raise UnknownFaultId(f"no fault with id {fault_id}") from None

    def active(self):
        return [spec for spec in self._faults.values() if spec.status is FaultStatus.ACTIVE]

    # ── transaction hooks ───────────────────────────────────────────

    def tick(self, sim_us, txn):
        with self._lock:
            self._sim_us = sim_us
            for spec in list(self._faults.values()):
                if spec.status is FaultStatus.ARMED and spec.trigger.fires(sim_us, txn):
                    self._activate(spec)
                if spec.status is FaultStatus.ACTIVE and self._window_elapsed(spec, sim_us):
                    self._end(spec, FaultStatus.EXPIRED)

    def effects(self, port_id, direction, index):
        if not self._faults:
            return NO_FAULTS
        delay = 0.0
        rate = 0.0
        burst = 1
        omit = False
        for spec in self.active():
            kind = spec.kind
            if getattr(kind, "port", None) not in (None, port_id):
                continue
            if isinstance(kind, Delay):
                if kind.direction is None or kind.direction is direction:
                    delay += kind.added_us
            elif isinstance(kind, Corrupt):
                if direction is not None and kind.direction in (None, direction):
                    rate = max(rate, kind.bit_flip_rate)
                    burst = max(burst, kind.burst_bits)
            elif isinstance(kind, Omit) and kind.matches(direction, index):
                omit = True
                spec.remaining -= 1
                self._emit("fault_omit", spec, index=index, remaining=spec.remaining)
                if spec.remaining <= 0:
                    self._end(spec, FaultStatus.EXPIRED)
        if not (delay or rate or omit):
            return NO_FAULTS
        return ActiveFaults(delay_us=delay, corrupt_rate=rate, corrupt_burst_bits=burst, omit=omit)

    def replay(self, port_id, payload):
        """Capture or substitute a read payload for active Replay faults."""
        if not self._faults:
            return payload
        for spec in self.active():
            kind = spec.kind
            if not isinstance(kind, Replay) or kind.port not in (None, port_id):
                continue
            n = spec.reads_seen
            spec.reads_seen += 1
            start, end = kind.capture_window
            if start <= n < end:
                spec.captured.append(bytes(payload))
            elif n >= kind.inject_at and spec.captured:
                stale = spec.captured.pop(0)
                payload = stale[:len(payload)].ljust(len(payload), b"\x00")
                self._emit("fault_replay", spec, read=n)
                if not spec.captured:
                    self._end(spec, FaultStatus.EXPIRED)
        return payload

    # ── lifecycle ───────────────────────────────────────────────────

    def _window_elapsed(self, spec, sim_us):
        kind = spec.kind
        window = getattr(kind, "duration_us", None) if isinstance(kind, LineDisconnect) \
            else getattr(kind, "window_us", None)
        return window is not None and sim_us - spec.activated_us >= window

    def _activate(self, spec):
        spec.status = FaultStatus.ACTIVE
        spec.activated_us = self._sim_us
        kind = spec.kind
        if isinstance(kind, LineDisconnect) and self._switch is not None:
            spec.window_token = self._switch.open_fault_window(f"fault {spec.id}")
            state = Power.OFF if kind.line == POWER_LINE else LineState.DISCONNECTED
            self._switch.set_line(kind.port, kind.line, state, sticky=True)
        self._emit("fault_activate", spec, fault_class=spec.fault_class)
        logger.info("Fault %d active: %s", spec.id, kind)

    def _end(self, spec, status):
        spec.status = status
        spec.ended_us = self._sim_us
        kind = spec.kind
        if isinstance(kind, LineDisconnect) and self._switch is not None:
            self._switch.clear_line(kind.port, kind.line)
            self._switch.close_fault_window(spec.window_token)
            spec.window_token = None
        self._emit("fault_expire", spec, status=status.value)
        logger.info("Fault %d %s", spec.id, status.value)
