"""
Transition log shared by the switch and the fault injector.

Every event is kept in memory for audits and the status API, and written
to the `netsd.events` logger as one key=value line.
"""
import itertools
import logging
import os
import threading
from collections import deque
from dataclasses import dataclass, field

logger = logging.getLogger("netsd.events")


@dataclass(frozen=True)
class Event:
    seq: int
    sim_us: float
    kind: str
    port: str = None
    detail: dict = field(default_factory=dict)

    def as_line(self):
        parts = [f"seq={self.seq}", f"sim_us={self.sim_us:.1f}", f"event={self.kind}"]
        if self.port is not None:
            parts.append(f"port={self.port}")
        parts.extend(f"{key}={value}" for key, value in self.detail.items())
        return " ".join(parts)

    def as_dict(self):
        return {
            "seq": self.seq,
            "sim_us": self.sim_us,
            "event": self.kind,
            "port": self.port,
            **self.detail,
        }


class EventLog:

    def __init__(self, maxlen=100_000):
        self._events = deque(maxlen=maxlen)
        self._seq = itertools.count(1)
        self._lock = threading.Lock()

    def emit(self, kind, sim_us=0.0, port=None, **detail):
        with self._lock:
            event = Event(next(self._seq), sim_us, kind, port, detail)
            self._events.append(event)
        if logger.isEnabledFor(logging.INFO):
            logger.info(event.as_line())
        return event

    def events(self, kind=None, since=0):
        with self._lock:
            snapshot = list(self._events)
        return [e for e in snapshot if e.seq > since and (kind is None or e.kind == kind)]

    @property
    def last_seq(self):
        with self._lock:
            return self._events[-1].seq if self._events else 0

    def clear(self):
        with self._lock:
            self._events.clear()

    def __len__(self):
        return len(self._events)


def attach_file(path):
    """
    Send event lines to `path` as well. Returns the new handler, or None when
    a handler already writes there (e.g. the one LOGGING sets up from
    NETSD_EVENT_LOG).
    """
    path = os.path.abspath(path)
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == path:
            return None
    handler = logging.FileHandler(path)
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter("{asctime} {message}", style="{"))
    handler.previous_level = logger.level
    if logger.getEffectiveLevel() > logging.INFO:
        logger.setLevel(logging.INFO)
    logger.addHandler(handler)
    return handler


def detach_file(handler):
    if handler is None:
        return
    logger.removeHandler(handler)
    logger.setLevel(handler.previous_level)
    handler.close()
