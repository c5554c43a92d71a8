"""
The SD switch: exclusive, line-level access to one card for one port at a
time.

Every holder change disconnects all ports first (break), power-cycles the
card, then connects the new holder (make). All grant changes, line changes
and bus transactions go through one re-entrant lock, so their order is
total. RAG work queues FIFO through `session()`.
"""
import itertools
import logging
import random
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass

from .bus import (
    CALIBRATED_MODEL, LINE_NAMES, NO_FAULTS, POWER_LINE, BusConfig, Direction,
    LineSet, LineState, TransferStatus, transfer,
)
from .crc import crc16
from .events import EventLog
from .exceptions import ExclusivityViolation, GrantTimeout, UnknownLine, UnknownPort
from .sd_core import (
    BLOCK_SIZE, CMD_READ_MULTIPLE_BLOCK, CMD_READ_SINGLE_BLOCK, CMD_STOP_TRANSMISSION,
    CMD_WRITE_BLOCK, CMD_WRITE_MULTIPLE_BLOCK, DATA_ACCEPTED, DATA_CRC_ERROR, Power,
    ResponseKind, SdCommand,
)

logger = logging.getLogger(__name__)

DEFAULT_PORTS = ("dut", "rag")


@dataclass
class Port:
    id: str
    lines: LineSet


@dataclass(frozen=True)
class SwitchGrant:
    holder: str
    granted_at: float
    repower_pending: bool

    def as_dict(self):
        return {
            "holder": self.holder,
            "granted_at": self.granted_at,
            "repower_pending": self.repower_pending,
        }


@dataclass
class GrantToken:
    port_id: str
    ticket: int
    revoked: bool = False


@dataclass(frozen=True)
class BlockResult:
    """
    One arbitrated block transfer. `response` is set when the card refused
    the command or the data (R1 error bits, error token, write error).
    """
    status: TransferStatus
    data: bytes = b""
    elapsed_us: float = 0.0
    response: object = None
    flipped_bits: int = 0


class SdSwitch:

    def __init__(self, card, bus_config=None, ports=DEFAULT_PORTS, default_port="dut",
                 model=CALIBRATED_MODEL, faults=None, events=None, max_hold_s=30.0,
                 repower_on_switch=True, audit_transactions=False, clock=time.monotonic):
        ports = tuple(ports)
        if not ports or len(set(ports)) != len(ports):
            raise UnknownPort("switch ports must be unique and non-empty")
        if default_port not in ports:
            raise UnknownPort(f"default port {default_port!r} is not one of {ports}")
        self.card = card
        self.bus_config = bus_config or BusConfig()
        self.model = model
        self.default_port = default_port
        self.events = events if events is not None else EventLog()
        self.max_hold_s = max_hold_s
        self.repower_on_switch = repower_on_switch
        self.audit_transactions = audit_transactions
        self.rng = random.Random(self.bus_config.seed)
        self.sim_us = 0.0
        self.transactions = 0
        self.power_cycles = 0

        self._clock = clock
        self._ports = {port_id: Port(port_id, LineSet()) for port_id in ports}
        self._lock = threading.RLock()
        self._queue_cond = threading.Condition(self._lock)
        self._queue = deque()
        self._tickets = itertools.count(1)
        self._session = None
        self._holder = None
        self._granted_at = 0.0
        self._last_activity = 0.0
        self._windows = {}
        self._window_ids = itertools.count(1)
        self._sticky = {}

        self.faults = faults
        if faults is not None:
            faults.attach(self)

    @property
    def lock(self):
        return self._lock

    @property
    def ports(self):
        return tuple(self._ports)

    @property
    def holder(self):
        return self._holder

    @property
    def in_fault_window(self):
        return bool(self._windows)

    @property
    def busy(self):
        """A queued session currently owns the card."""
        return self._session is not None

    def _port(self, port_id):
        try:
            return self._ports[port_id]
        except KeyError:
            raise UnknownPort(f"unknown port {port_id!r}") from None

    def _emit(self, kind, port=None, **detail):
        return self.events.emit(kind, sim_us=self.sim_us, port=port, **detail)

    def port_lines(self, port_id):
        with self._lock:
            return self._port(port_id).lines.copy()

    def conductive_ports(self):
        with self._lock:
            return [pid for pid, port in self._ports.items() if port.lines.is_conductive()]

    def _check_exclusivity(self):
        conductive = [pid for pid, port in self._ports.items() if port.lines.is_conductive()]
        if len(conductive) > 1 and not self._windows:
            raise ExclusivityViolation(f"ports {conductive} are conductive at once")

    # ── grants ──────────────────────────────────────────────────────

    def grant(self, port_id):
        with self._lock:
            new = self._port(port_id)
            if self._holder == port_id:
                self._last_activity = self._clock()
                return self.current_grant()
            previous = self._holder

            for port in self._ports.values():
                port.lines.disconnect_all()
                port.lines.power = Power.OFF
            self._emit("break", port=previous, next=port_id,
                       conductive=len(self.conductive_ports()))

            if self.repower_on_switch or not self.card.powered:
                self._power_cycle("switch")

            new.lines.connect_all()
            new.lines.power = Power.ON
            self._holder = port_id
            self._apply_sticky()
            self._granted_at = self._last_activity = self._clock()
            self._emit("make", port=port_id, previous=previous)
            self._check_exclusivity()
            logger.info("Card granted to %s (was %s)", port_id, previous)
            return self.current_grant()

    def release(self):
        return self.grant(self.default_port)

    def current_grant(self):
        with self._lock:
            pending = self._holder is not None and not self.card.initialized
            return SwitchGrant(self._holder, self._granted_at, pending)

    def _power_cycle(self, reason):
        self.card.power_set(False)
        self.card.power_set(True)
        self.power_cycles += 1
        self._emit("power_cycle", port=self._holder, reason=reason)

    def power_cycle(self):
        """Hard reset for whoever holds the card."""
        with self._lock:
            if self._holder is None:
                return self.release()
            self._power_cycle("request")
            return self.current_grant()

    # ── lines and fault windows ─────────────────────────────────────

    def set_line(self, port_id, line, state, sticky=False):
        with self._lock:
            port = self._port(port_id)
            if line not in LINE_NAMES:
                raise UnknownLine(f"unknown line {line!r}")
            if line == POWER_LINE:
                state = Power(state)
                port.lines.power = state
                if port_id == self._holder:
                    self.card.power_set(state is Power.ON)
            else:
                state = LineState(state)
                previous = port.lines.lines[line]
                port.lines.lines[line] = state
                try:
                    self._check_exclusivity()
                except ExclusivityViolation:
                    port.lines.lines[line] = previous
                    raise
            if sticky:
                self._sticky[(port_id, line)] = state
            self._emit("line", port=port_id, line=line, state=state.value)
            return port.lines.copy()

    def clear_line(self, port_id, line):
        """Drop a sticky override and put the line back to what the grant says."""
        with self._lock:
            self._sticky.pop((port_id, line), None)
            holding = port_id == self._holder
            if line == POWER_LINE:
                state = Power.ON if holding else Power.OFF
            else:
                state = LineState.CONDUCTIVE if holding else LineState.DISCONNECTED
            return self.set_line(port_id, line, state)

    def _apply_sticky(self):
        for (port_id, line), state in self._sticky.items():
            port = self._ports[port_id]
            if line == POWER_LINE:
                port.lines.power = state
                if port_id == self._holder and state is Power.OFF:
                    self.card.power_set(False)
            else:
                port.lines.lines[line] = state

    def open_fault_window(self, reason=""):
        with self._lock:
            token = next(self._window_ids)
            self._windows[token] = reason
            self._emit("window_open", token=token, reason=reason)
            return token

    def close_fault_window(self, token):
        with self._lock:
            if self._windows.pop(token, None) is None:
                return
            self._emit("window_close", token=token)
            self._check_exclusivity()

    # ── queued sessions and hold limit ──────────────────────────────

    @contextmanager
    def session(self, port_id, timeout=None):
        """FIFO-queued exclusive use of the card; releases to the default port on exit."""
        self._port(port_id)
        with self._queue_cond:
            ticket = next(self._tickets)
            self._queue.append(ticket)
            ready = self._queue_cond.wait_for(
                lambda: self._queue[0] == ticket and self._session is None, timeout)
            if not ready:
                self._queue.remove(ticket)
                self._queue_cond.notify_all()
                raise GrantTimeout(f"port {port_id} waited {timeout}s for the card")
            self._queue.popleft()
            token = GrantToken(port_id, ticket)
            self._session = token
            try:
                self.grant(port_id)
            except Exception:
                self._session = None
                self._queue_cond.notify_all()
                raise
        try:
            yield token
        finally:
            with self._queue_cond:
                self._session = None
                self.release()
                self._queue_cond.notify_all()

    def enforce_hold_limit(self, now=None):
        with self._lock:
            if self.max_hold_s is None or self._holder in (None, self.default_port):
                return False
            now = self._clock() if now is None else now
            idle = now - self._last_activity
            if idle <= self.max_hold_s:
                return False
            holder = self._holder
            logger.warning("Revoking grant of %s after %.1fs idle", holder, idle)
            self._emit("hold_timeout", port=holder, idle_s=round(idle, 3))
            if self._session is not None:
                self._session.revoked = True
            self.release()
            return True

    # ── arbitrated transactions ─────────────────────────────────────

    def _begin(self, port_id, op):
        self._port(port_id)
        self.transactions += 1
        if self.faults is not None:
            self.faults.tick(self.sim_us, self.transactions)
        if port_id == self._holder:
            self._last_activity = self._clock()
        if self.audit_transactions:
            self._emit("txn_begin", port=port_id, txn=self.transactions, op=op)

    def _finish(self, port_id, result):
        self.sim_us += result.elapsed_us
        if self.audit_transactions:
            self._emit("txn_end", port=port_id, txn=self.transactions, status=result.status.value)
        return result

    def _effects(self, port_id, direction, index):
        if self.faults is None:
            return NO_FAULTS
        return self.faults.effects(port_id, direction, index)

    def _link_up(self, port_id, lines):
        """Whether a command from this port reaches a powered card."""
        return (port_id == self._holder
                and lines.power is Power.ON
                and self.card.powered
                and lines.lines["CLK"] is LineState.CONDUCTIVE
                and lines.lines["CMD"] is LineState.CONDUCTIVE)

    def command(self, port_id, cmd):
        """One command/response exchange; None means no response (timeout)."""
        with self._lock:
            self._begin(port_id, str(cmd))
            effects = self._effects(port_id, None, cmd.index)
            lines = self._ports[port_id].lines
            response = None
            if self._link_up(port_id, lines) and not effects.omit:
                response = self.card.handle_command(cmd)
                elapsed = self.model.command_time_us
                status = TransferStatus.OK
            else:
                elapsed = self.model.command_timeout_us
                status = TransferStatus.TIMEOUT
            self._finish(port_id, BlockResult(status, elapsed_us=elapsed + effects.delay_us))
            return response

    def read_blocks(self, port_id, lba, count, mode, verify_crc=True):
        with self._lock:
            index = CMD_READ_SINGLE_BLOCK if count == 1 else CMD_READ_MULTIPLE_BLOCK
            self._begin(port_id, f"read {lba}+{count}")
            effects = self._effects(port_id, Direction.READ, index)
            lines = self._ports[port_id].lines
            if not self._link_up(port_id, lines) or effects.omit:
                return self._finish(port_id, BlockResult(
                    TransferStatus.TIMEOUT, elapsed_us=self.model.read_timeout_us + effects.delay_us))

            response = self.card.handle_command(SdCommand.build(index, lba))
            refused = None
            blocks = []
            if index == CMD_READ_SINGLE_BLOCK:
                if response.kind is ResponseKind.DATA_BLOCK:
                    blocks.append(response.data)
                else:
                    refused = response
            elif response.r1:
                refused = response
            else:
                for _ in range(count):
                    block = self.card.data_out()
                    if block.kind is not ResponseKind.DATA_BLOCK:
                        refused = block
                        break
                    blocks.append(block.data)
                self.card.handle_command(SdCommand.build(CMD_STOP_TRANSMISSION))
            if refused is not None:
                return self._finish(port_id, BlockResult(
                    TransferStatus.OK, elapsed_us=self.model.command_time_us, response=refused))

            raw = b"".join(blocks)
            if self.faults is not None:
                raw = self.faults.replay(port_id, raw)
            outcome = transfer(self.bus_config, mode, lines, raw, Direction.READ, effects,
                               self.rng, crc_checking=verify_crc, model=self.model)
            return self._finish(port_id, BlockResult(
                outcome.status, outcome.data, outcome.elapsed_us, flipped_bits=outcome.flipped_bits))

    def write_blocks(self, port_id, lba, data, mode):
        if not data or len(data) % BLOCK_SIZE:
            raise ValueError(f"write payload must be a non-empty multiple of {BLOCK_SIZE} bytes")
        count = len(data) // BLOCK_SIZE
        with self._lock:
            index = CMD_WRITE_BLOCK if count == 1 else CMD_WRITE_MULTIPLE_BLOCK
            self._begin(port_id, f"write {lba}+{count}")
            effects = self._effects(port_id, Direction.WRITE, index)
            lines = self._ports[port_id].lines
            if not self._link_up(port_id, lines) or effects.omit:
                return self._finish(port_id, BlockResult(
                    TransferStatus.TIMEOUT, elapsed_us=self.model.write_timeout_us + effects.delay_us))

            response = self.card.handle_command(SdCommand.build(index, lba))
            if response.r1:
                return self._finish(port_id, BlockResult(
                    TransferStatus.OK, elapsed_us=self.model.command_time_us, response=response))

            outcome = transfer(self.bus_config, mode, lines, data, Direction.WRITE, effects,
                               self.rng, crc_checking=self.card.state.crc_checking, model=self.model)
            if outcome.status is TransferStatus.TIMEOUT:
                self.card.end_transfer()
                return self._finish(port_id, BlockResult(TransferStatus.TIMEOUT, elapsed_us=outcome.elapsed_us))

            status = outcome.status
            refused = None
            for i in range(count):
                lo = i * BLOCK_SIZE
                token = self.card.data_in(outcome.data[lo:lo + BLOCK_SIZE], crc16(data[lo:lo + BLOCK_SIZE]))
                if token.token == DATA_ACCEPTED:
                    continue
                if token.token == DATA_CRC_ERROR:
                    status = TransferStatus.CRC_DETECTED_ERROR
                else:
                    refused = token
                break
            if index == CMD_WRITE_MULTIPLE_BLOCK:
                self.card.stop_token()
            return self._finish(port_id, BlockResult(
                status, elapsed_us=outcome.elapsed_us, response=refused, flipped_bits=outcome.flipped_bits))

    def flush(self, port_id):
        with self._lock:
            self._begin(port_id, "flush")
            lines = self._ports[port_id].lines
            if not self._link_up(port_id, lines):
                return self._finish(port_id, BlockResult(
                    TransferStatus.TIMEOUT, elapsed_us=self.model.command_timeout_us))
            self.card.flush()
            return self._finish(port_id, BlockResult(TransferStatus.OK, elapsed_us=self.model.command_time_us))

    def status(self):
        with self._lock:
            return {
                **self.current_grant().as_dict(),
                "ports": {pid: port.lines.as_dict() for pid, port in self._ports.items()},
                "sim_us": self.sim_us,
                "transactions": self.transactions,
                "power_cycles": self.power_cycles,
                "fault_windows": len(self._windows),
                "card_phase": self.card.state.phase.value,
            }
