"""
Signal path between a host port and the card.

Covers pull-up configuration, transfer-mode negotiation, cable quality and
the resulting per-transfer error probability and simulated transfer time.
Errors are modelled as a per-bit rate turned into a per-transfer Bernoulli
draw; there is no waveform simulation. Everything here is a pure function
of its inputs plus the caller's seeded generator.
"""
import enum
import math
from dataclasses import dataclass, field

from .crc import crc16
from .exceptions import ConfigError, NoPower
from .sd_core import BLOCK_SIZE, Power


class Direction(str, enum.Enum):
    READ = "read"
    WRITE = "write"


class ModeName(str, enum.Enum):
    DEFAULT_3V3 = "Default3V3"
    HIGH_SPEED_3V3 = "HighSpeed3V3"
    UHS_1V8 = "UHS1V8"


@dataclass(frozen=True)
class TransferMode:
    name: ModeName
    signal_voltage: float
    bus_clock_mhz: float
    bus_width_bits: int = 4

    def __post_init__(self):
        if self.bus_width_bits not in (1, 4):
            raise ConfigError("bus width is 1 or 4 bits")
        expected = 1.8 if self.name is ModeName.UHS_1V8 else 3.3
        if self.signal_voltage != expected:
            raise ConfigError(f"{self.name.value} signals at {expected} V")

    @property
    def is_uhs(self):
        return self.name is ModeName.UHS_1V8

    @property
    def line_rate_mbps(self):
        return self.bus_clock_mhz * self.bus_width_bits / 8


DEFAULT_3V3 = TransferMode(ModeName.DEFAULT_3V3, 3.3, 25.0, 4)
HIGH_SPEED_3V3 = TransferMode(ModeName.HIGH_SPEED_3V3, 3.3, 50.0, 4)
UHS_1V8 = TransferMode(ModeName.UHS_1V8, 1.8, 100.0, 4)
MODES = {mode.name: mode for mode in (DEFAULT_3V3, HIGH_SPEED_3V3, UHS_1V8)}


@dataclass(frozen=True)
class BusConfig:
    """
    explicit_pullups: pull-ups to 3.3 V on the switch side of the data lines.
    switched: False models the card plugged straight into the host, with
    no switch and no extension cable.
    """
    explicit_pullups: bool = False
    cable_length_cm: float = 48.0
    crosstalk_safe_layout: bool = True
    host_supports_uhs: bool = True
    seed: int = 0
    switched: bool = True

    def __post_init__(self):
        if self.cable_length_cm < 0:
            raise ConfigError("cable_length_cm must be >= 0")


@dataclass(frozen=True)
class CardCaps:
    supports_uhs: bool = True
    high_speed: bool = True


@dataclass(frozen=True)
class HostCaps:
    supports_uhs: bool = True
    high_speed: bool = True


class LineState(str, enum.Enum):
    CONDUCTIVE = "conductive"
    DISCONNECTED = "disconnected"


DATA_LINES = ("CLK", "CMD", "DAT0", "DAT1", "DAT2", "DAT3")
POWER_LINE = "POWER"
LINE_NAMES = DATA_LINES + (POWER_LINE,)


def _all_lines(state):
    return {name: state for name in DATA_LINES}


@dataclass
class LineSet:
    lines: dict = field(default_factory=lambda: _all_lines(LineState.DISCONNECTED))
    power: Power = Power.OFF

    def state(self, line):
        if line == POWER_LINE:
            return self.power
        return self.lines[line]

    def is_conductive(self):
        return all(state is LineState.CONDUCTIVE for state in self.lines.values())

    def is_disconnected(self):
        return all(state is LineState.DISCONNECTED for state in self.lines.values())

    def connect_all(self):
        self.lines = _all_lines(LineState.CONDUCTIVE)

    def disconnect_all(self):
        self.lines = _all_lines(LineState.DISCONNECTED)

    def copy(self):
        return LineSet(dict(self.lines), self.power)

    def as_dict(self):
        result = {name: state.value for name, state in self.lines.items()}
        result[POWER_LINE] = self.power.value
        return result


class TransferStatus(str, enum.Enum):
    OK = "ok"
    CRC_DETECTED_ERROR = "crc_detected_error"
    TIMEOUT = "timeout"
    SILENT_CORRUPTION = "silent_corruption"


@dataclass(frozen=True)
class TransferOutcome:
    status: TransferStatus
    data: bytes
    elapsed_us: float
    flipped_bits: int = 0


@dataclass(frozen=True)
class ActiveFaults:
    """Fault parameters applied to one transfer."""
    delay_us: float = 0.0
    corrupt_rate: float = 0.0
    corrupt_burst_bits: int = 8
    omit: bool = False


NO_FAULTS = ActiveFaults()


@dataclass(frozen=True)
class BusModel:
    """
    Calibrated timing and error constants; `bench.calibrate` refits them.

    legacy_mode_overhead_us is paid per command on the switched path in
    3.3 V modes. Without it the read gap between the two pull-up setups
    cannot exceed the 2x clock ratio.
    """
    per_command_overhead_us: float = 1900.0
    write_busy_us: float = 2000.0
    switch_insertion_overhead_us: float = 1250.0
    legacy_mode_overhead_us: float = 5850.0
    p_bit_uhs: float = 2.7448e-6
    read_error_scale: float = 1 / 256
    reference_cable_cm: float = 48.0
    unsafe_layout_factor: float = 4.0
    host_pullup_3v3_factor: float = 0.01
    command_time_us: float = 2.0
    command_timeout_us: float = 1_000.0
    read_timeout_us: float = 100_000.0
    write_timeout_us: float = 250_000.0

    def p_bit(self, cfg, mode, direction):
        if not cfg.switched:
            return 0.0
        if mode.is_uhs:
            base = self.p_bit_uhs
        elif cfg.explicit_pullups:
            return 0.0
        else:
            base = self.p_bit_uhs * self.host_pullup_3v3_factor
        p = base * cfg.cable_length_cm / self.reference_cable_cm
        if not cfg.crosstalk_safe_layout:
            p *= self.unsafe_layout_factor
        if direction is Direction.READ:
            p *= self.read_error_scale
        return min(p, 0.5)

    def command_overhead_us(self, cfg, mode, direction):
        overhead = self.per_command_overhead_us
        if cfg.switched:
            overhead += self.switch_insertion_overhead_us
            if not mode.is_uhs:
                overhead += self.legacy_mode_overhead_us
        if direction is Direction.WRITE:
            overhead += self.write_busy_us
        return overhead

    def timeout_us(self, direction):
        return self.write_timeout_us if direction is Direction.WRITE else self.read_timeout_us


CALIBRATED_MODEL = BusModel()


def negotiate_mode(cfg, card_caps=None, host_caps=None):
    card_caps = card_caps or CardCaps()
    host_caps = host_caps or HostCaps(supports_uhs=cfg.host_supports_uhs)
    # 3.3 V pull-ups hold the lines above the 1.8 V signalling level
    if not cfg.explicit_pullups and host_caps.supports_uhs and card_caps.supports_uhs:
        return UHS_1V8
    if host_caps.high_speed and card_caps.high_speed:
        return HIGH_SPEED_3V3
    return DEFAULT_3V3


def block_error_probability(cfg, mode, n_bytes, direction, model=CALIBRATED_MODEL):
    if n_bytes <= 0:
        return 0.0
    p = model.p_bit(cfg, mode, direction)
    if p <= 0.0:
        return 0.0
    return -math.expm1(8 * n_bytes * math.log1p(-p))


def simulated_transfer_time(mode, n_bytes, per_command_overhead_us):
    return per_command_overhead_us + (8 * n_bytes) / (mode.bus_clock_mhz * mode.bus_width_bits)


def expected_throughput(cfg, mode, n_bytes, direction, model=CALIBRATED_MODEL):
    """MByte/s a retrying host sees on average: n(1 - P) / t."""
    elapsed = simulated_transfer_time(mode, n_bytes, model.command_overhead_us(cfg, mode, direction))
    return n_bytes * (1.0 - block_error_probability(cfg, mode, n_bytes, direction, model)) / elapsed


def stuck_high_mask(lines, mode):
    """Bits pulled high by disconnected DAT1..DAT3; DATk carries bits k and k+4."""
    if mode.bus_width_bits == 1:
        return 0
    mask = 0
    for k in (1, 2, 3):
        if lines.lines[f"DAT{k}"] is LineState.DISCONNECTED:
            mask |= (1 << k) | (1 << (4 + k))
    return mask


def _flip(payload, bit):
    payload[bit >> 3] ^= 0x80 >> (bit & 7)


def transfer(cfg, mode, lines, data, direction, active_faults=NO_FAULTS, rng=None,
             crc_checking=True, model=CALIBRATED_MODEL):
    if lines.power is Power.OFF:
        raise NoPower()
    faults = active_faults or NO_FAULTS
    if (faults.omit
            or lines.lines["CLK"] is LineState.DISCONNECTED
            or lines.lines["CMD"] is LineState.DISCONNECTED
            or lines.lines["DAT0"] is LineState.DISCONNECTED):
        return TransferOutcome(TransferStatus.TIMEOUT, b"", model.timeout_us(direction) + faults.delay_us)

    n_bytes = len(data)
    elapsed = simulated_transfer_time(mode, n_bytes, model.command_overhead_us(cfg, mode, direction))
    elapsed += faults.delay_us
    payload = bytearray(data)
    n_blocks = -(-n_bytes // BLOCK_SIZE)
    touched = set()
    flipped = 0

    mask = stuck_high_mask(lines, mode)
    if mask:
        payload = bytearray(payload.translate(bytes(b | mask for b in range(256))))
        for block in range(n_blocks):
            lo = block * BLOCK_SIZE
            if payload[lo:lo + BLOCK_SIZE] != data[lo:lo + BLOCK_SIZE]:
                touched.add(block)

    p_error = block_error_probability(cfg, mode, n_bytes, direction, model)
    if p_error > 0.0 and rng.random() < p_error:
        count = 1
        while rng.random() < 0.5:
            count += 1
        for _ in range(count):
            bit = rng.randrange(8 * n_bytes)
            _flip(payload, bit)
            touched.add(bit // (8 * BLOCK_SIZE))
        flipped += count

    if faults.corrupt_rate > 0.0 and n_bytes:
        rate = min(faults.corrupt_rate, 1.0)
        p_block = 1.0 if rate >= 1.0 else -math.expm1(8 * BLOCK_SIZE * math.log1p(-rate))
        for block in range(n_blocks):
            if rng.random() >= p_block:
                continue
            block_bits = 8 * min(BLOCK_SIZE, n_bytes - block * BLOCK_SIZE)
            span = rng.randint(1, min(faults.corrupt_burst_bits, block_bits))
            start = block * BLOCK_SIZE * 8 + rng.randrange(block_bits - span + 1)
            for bit in range(start, start + span):
                _flip(payload, bit)
            touched.add(block)
            flipped += span

    status = TransferStatus.OK
    detected = False
    for block in sorted(touched):
        lo = block * BLOCK_SIZE
        sent, received = data[lo:lo + BLOCK_SIZE], payload[lo:lo + BLOCK_SIZE]
        if sent == received:
            continue
        status = TransferStatus.SILENT_CORRUPTION
        if crc16(sent) != crc16(received):
            detected = True
    if detected and crc_checking:
        status = TransferStatus.CRC_DETECTED_ERROR
    return TransferOutcome(status, bytes(payload), elapsed, flipped)
