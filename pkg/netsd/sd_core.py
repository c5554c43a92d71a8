"""
SPI-mode SD card emulation.

The card answers command frames with R1/R3/R7 responses and moves 512-byte
data blocks with CRC-16 trailers, following the SPI-mode state machine of
the SD simplified specification: power-up, CMD0, CMD8, the CMD55/ACMD41
polling loop, then data transfer. Addressing is high-capacity (block
numbers, not byte offsets).

The card is a plain state machine. It is never shared between threads; the
switch serializes every call into it.
"""
import enum
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from .crc import crc7 as compute_crc7, crc16
from .exceptions import AddressError, ConfigError, IllegalCommand, NotInitialized, NotPowered

logger = logging.getLogger(__name__)

BLOCK_SIZE = 512
DEFAULT_CAPACITY = 64 * 1024 * 1024
CSD_CAPACITY_UNIT = 512 * 1024

# R1 response bits (bit 7 is always zero)
R1_IDLE = 1 << 0
R1_ERASE_RESET = 1 << 1
R1_ILLEGAL_COMMAND = 1 << 2
R1_CRC_ERROR = 1 << 3
R1_ERASE_SEQUENCE_ERROR = 1 << 4
R1_ADDRESS_ERROR = 1 << 5
R1_PARAMETER_ERROR = 1 << 6

# Data tokens
TOKEN_START_BLOCK = 0xFE
TOKEN_START_MULTI_WRITE = 0xFC
TOKEN_STOP_TRAN = 0xFD
DATA_ACCEPTED = 0x05
DATA_CRC_ERROR = 0x0B
DATA_WRITE_ERROR = 0x0D
ERROR_TOKEN_ERROR = 0x01
ERROR_TOKEN_OUT_OF_RANGE = 0x08

# OCR / ACMD41 argument bits
OCR_POWER_UP = 1 << 31
OCR_CCS = 1 << 30
OCR_S18A = 1 << 24
OCR_VDD_32_34 = (1 << 20) | (1 << 21)
ACMD41_HCS = 1 << 30
ACMD41_S18R = 1 << 24

CMD_GO_IDLE_STATE = 0
CMD_SEND_IF_COND = 8
CMD_SEND_CSD = 9
CMD_SEND_CID = 10
CMD_STOP_TRANSMISSION = 12
CMD_SET_BLOCKLEN = 16
CMD_READ_SINGLE_BLOCK = 17
CMD_READ_MULTIPLE_BLOCK = 18
CMD_WRITE_BLOCK = 24
CMD_WRITE_MULTIPLE_BLOCK = 25
CMD_APP_CMD = 55
CMD_READ_OCR = 58
CMD_CRC_ON_OFF = 59
ACMD_SD_SEND_OP_COND = 41

CMD8_VOLTAGE_27_36 = 0x1
CMD8_CHECK_PATTERN = 0xAA

DATA_COMMANDS = frozenset({
    CMD_SEND_CSD, CMD_SEND_CID, CMD_READ_SINGLE_BLOCK, CMD_READ_MULTIPLE_BLOCK,
    CMD_WRITE_BLOCK, CMD_WRITE_MULTIPLE_BLOCK,
})


class Power(enum.Enum):
    OFF = "off"
    ON = "on"


class Phase(enum.Enum):
    UNINITIALIZED = "uninitialized"
    IDLE = "idle"
    READY = "ready"
    TRANSFER_READY = "transfer_ready"
    READING_MULTI = "reading_multi"
    WRITING_MULTI = "writing_multi"


INITIALIZED_PHASES = frozenset({
    Phase.READY, Phase.TRANSFER_READY, Phase.READING_MULTI, Phase.WRITING_MULTI,
})


class ResponseKind(enum.Enum):
    R1 = "R1"
    R1B = "R1b"
    R3 = "R3"
    R7 = "R7"
    DATA_TOKEN = "DataToken"
    DATA_BLOCK = "DataBlock"
    ERROR_TOKEN = "ErrorToken"


# ── backing storage ─────────────────────────────────────────────────

class ImageBacking:
    """Raw image behind the card. Counts accesses so callers can prove
    an operation never reached storage."""

    def __init__(self, capacity_bytes):
        self.capacity_bytes = capacity_bytes
        self.reads = 0
        self.writes = 0

    @property
    def accesses(self):
        return self.reads + self.writes

    def read(self, offset, length):
        self.reads += 1
        return self._read(offset, length)

    def write(self, offset, data):
        self.writes += 1
        self._write(offset, data)

    def flush(self):
        pass

    def close(self):
        pass

    def snapshot(self):
        return self._read(0, self.capacity_bytes)


class MemoryImage(ImageBacking):

    def __init__(self, capacity_bytes=DEFAULT_CAPACITY, data=None):
        super().__init__(capacity_bytes)
        self._buf = bytearray(capacity_bytes)
        if data is not None:
            self._buf[:len(data)] = data

    def _read(self, offset, length):
        return bytes(self._buf[offset:offset + length])

    def _write(self, offset, data):
        self._buf[offset:offset + len(data)] = data


class FileImage(ImageBacking):
    """Sparse raw image file, zero-filled on first use."""

    def __init__(self, path, capacity_bytes=DEFAULT_CAPACITY):
        super().__init__(capacity_bytes)
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        if os.fstat(self._fd).st_size < capacity_bytes:
            os.ftruncate(self._fd, capacity_bytes)
            logger.info("Created sparse image %s (%d bytes)", self.path, capacity_bytes)

    def _read(self, offset, length):
        data = os.pread(self._fd, length, offset)
        if len(data) < length:
            data += bytes(length - len(data))
        return data

    def _write(self, offset, data):
        os.pwrite(self._fd, data, offset)

    def flush(self):
        os.fsync(self._fd)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


# ── registers ───────────────────────────────────────────────────────

def make_csd(capacity_bytes):
    """CSD version 2.0; C_SIZE counts 512 KiB units minus one."""
    c_size = max(capacity_bytes // CSD_CAPACITY_UNIT - 1, 0)
    csd = bytearray(16)
    csd[0] = 0x40                      # CSD_STRUCTURE = 1
    csd[1] = 0x0E                      # TAAC
    csd[2] = 0x00                      # NSAC
    csd[3] = 0x5A                      # TRAN_SPEED 50 MHz
    csd[4] = 0x5B                      # CCC high bits
    csd[5] = 0x59                      # CCC low nibble, READ_BL_LEN = 9
    csd[6] = 0x00
    csd[7] = (c_size >> 16) & 0x3F
    csd[8] = (c_size >> 8) & 0xFF
    csd[9] = c_size & 0xFF
    csd[10] = 0x7F                     # ERASE_BLK_EN, SECTOR_SIZE
    csd[11] = 0x80
    csd[12] = 0x0A                     # R2W_FACTOR, WRITE_BL_LEN = 9
    csd[13] = 0x40
    csd[14] = 0x00
    csd[15] = (compute_crc7(csd[:15]) << 1) | 0x01
    return bytes(csd)


def csd_capacity(csd):
    if csd[0] >> 6 != 1:
        raise ValueError("only CSD version 2.0 is supported")
    c_size = ((csd[7] & 0x3F) << 16) | (csd[8] << 8) | csd[9]
    return (c_size + 1) * CSD_CAPACITY_UNIT


def make_cid(serial, year=2024, month=1):
    cid = bytearray(16)
    cid[0] = 0x4E                      # MID
    cid[1:3] = b"NS"                   # OID
    cid[3:8] = b"NETSD"                # PNM
    cid[8] = 0x10                      # PRV 1.0
    cid[9:13] = (serial & 0xFFFFFFFF).to_bytes(4, "big")
    mdt = ((year - 2000) << 4) | month
    cid[13] = (mdt >> 8) & 0x0F
    cid[14] = mdt & 0xFF
    cid[15] = (compute_crc7(cid[:15]) << 1) | 0x01
    return bytes(cid)


def parse_cid(cid):
    mdt = ((cid[13] & 0x0F) << 8) | cid[14]
    return {
        "manufacturer_id": cid[0],
        "oem_id": cid[1:3].decode("ascii"),
        "product_name": cid[3:8].decode("ascii"),
        "revision": "{}.{}".format(cid[8] >> 4, cid[8] & 0x0F),
        "serial": int.from_bytes(cid[9:13], "big"),
        "year": 2000 + (mdt >> 4),
        "month": mdt & 0x0F,
    }


# ── protocol types ──────────────────────────────────────────────────

@dataclass(frozen=True)
class SdCommand:
    index: int
    argument: int = 0
    crc7: int = 0
    is_app_cmd: bool = False

    def __post_init__(self):
        if not 0 <= self.index <= 63:
            raise ValueError(f"command index {self.index} out of range")
        if not 0 <= self.argument <= 0xFFFFFFFF:
            raise ValueError("command argument must be a 32-bit unsigned value")
        if not 0 <= self.crc7 <= 0x7F:
            raise ValueError("crc7 must fit in 7 bits")

    @staticmethod
    def _head(index, argument):
        return bytes([0x40 | index]) + argument.to_bytes(4, "big")

    @classmethod
    def build(cls, index, argument=0, app=False):
        return cls(index, argument, compute_crc7(cls._head(index, argument)), app)

    @classmethod
    def parse(cls, frame, app=False):
        if len(frame) != 6 or frame[0] & 0xC0 != 0x40 or not frame[5] & 0x01:
            raise IllegalCommand("malformed command frame")
        return cls(frame[0] & 0x3F, int.from_bytes(frame[1:5], "big"), frame[5] >> 1, app)

    def frame(self):
        return self._head(self.index, self.argument) + bytes([(self.crc7 << 1) | 0x01])

    @property
    def crc_ok(self):
        return self.crc7 == compute_crc7(self._head(self.index, self.argument))

    def __str__(self):
        prefix = "ACMD" if self.is_app_cmd else "CMD"
        return f"{prefix}{self.index}(0x{self.argument:08X})"


@dataclass(frozen=True)
class SdResponse:
    kind: ResponseKind
    payload: bytes

    @property
    def r1(self):
        """R1 status; data blocks imply a clean R1."""
        if self.kind in (ResponseKind.R1, ResponseKind.R1B, ResponseKind.R3, ResponseKind.R7):
            return self.payload[0]
        return 0

    @property
    def value(self):
        """32-bit trailer of R3/R7."""
        return int.from_bytes(self.payload[1:5], "big")

    @property
    def token(self):
        return self.payload[0]

    @property
    def data(self):
        return self.payload[:-2]

    @property
    def crc(self):
        return int.from_bytes(self.payload[-2:], "big")

    @classmethod
    def data_block(cls, data):
        return cls(ResponseKind.DATA_BLOCK, bytes(data) + crc16(data).to_bytes(2, "big"))


@dataclass
class SdCardState:
    power: Power = Power.OFF
    phase: Phase = Phase.UNINITIALIZED
    capacity_bytes: int = DEFAULT_CAPACITY
    block_len: int = BLOCK_SIZE
    cid: bytes = b""
    csd: bytes = b""
    ocr: int = OCR_VDD_32_34
    crc_checking: bool = False
    backing: ImageBacking = field(default=None, repr=False)
    app_pending: bool = False
    init_polls_left: int = 0
    high_capacity_host: bool = False
    cursor: int = None
    single_write: bool = False


class SdCard:
    """
    The emulated card. `handle_command` takes one command frame and returns
    the response the card would clock out; `data_out`, `data_in` and
    `stop_token` carry the data phase of CMD18/CMD24/CMD25.
    """

    def __init__(self, backing, capacity_bytes=None, supports_uhs=True, init_polls=1, serial=None):
        capacity = backing.capacity_bytes if capacity_bytes is None else capacity_bytes
        if capacity <= 0 or capacity % BLOCK_SIZE:
            raise ConfigError(f"capacity must be a positive multiple of {BLOCK_SIZE} bytes")
        if capacity > backing.capacity_bytes:
            raise ConfigError("capacity exceeds the backing image")
        if serial is None:
            serial = random.Random(capacity).getrandbits(32)
        self.supports_uhs = supports_uhs
        self.init_polls = init_polls
        self.state = SdCardState(
            capacity_bytes=capacity,
            cid=make_cid(serial),
            csd=make_csd(capacity),
            backing=backing,
        )
        self._handlers = {
            CMD_GO_IDLE_STATE: self._go_idle,
            CMD_SEND_IF_COND: self._send_if_cond,
            CMD_SEND_CSD: self._send_csd,
            CMD_SEND_CID: self._send_cid,
            CMD_STOP_TRANSMISSION: self._stop_transmission,
            CMD_SET_BLOCKLEN: self._set_blocklen,
            CMD_READ_SINGLE_BLOCK: self._read_single,
            CMD_READ_MULTIPLE_BLOCK: self._read_multiple,
            CMD_WRITE_BLOCK: self._write_single,
            CMD_WRITE_MULTIPLE_BLOCK: self._write_multiple,
            CMD_APP_CMD: self._app_cmd,
            CMD_READ_OCR: self._read_ocr,
            CMD_CRC_ON_OFF: self._crc_on_off,
        }
        self._app_handlers = {
            ACMD_SD_SEND_OP_COND: self._send_op_cond,
        }

    @property
    def capacity_bytes(self):
        return self.state.capacity_bytes

    @property
    def block_count(self):
        return self.state.capacity_bytes // BLOCK_SIZE

    @property
    def backing(self):
        return self.state.backing

    @property
    def powered(self):
        return self.state.power is Power.ON

    @property
    def initialized(self):
        return self.state.phase in INITIALIZED_PHASES

    # ── power ───────────────────────────────────────────────────────

    def power_set(self, on):
        st = self.state
        if on:
            if st.power is Power.OFF:
                st.power = Power.ON
                st.phase = Phase.UNINITIALIZED
                self._reset_protocol()
            return st
        if st.phase in (Phase.READING_MULTI, Phase.WRITING_MULTI) or st.single_write:
            logger.debug("Power off abandons %s", st.phase.value)
        st.power = Power.OFF
        st.phase = Phase.UNINITIALIZED
        self._reset_protocol()
        return st

    def _reset_protocol(self):
        st = self.state
        st.crc_checking = False
        st.app_pending = False
        st.cursor = None
        st.single_write = False
        st.high_capacity_host = False
        st.ocr = OCR_VDD_32_34
        st.init_polls_left = self.init_polls

    # ── command phase ───────────────────────────────────────────────

    def handle_command(self, cmd):
        st = self.state
        if st.power is Power.OFF:
            raise NotPowered()
        app = st.app_pending
        st.app_pending = False

        # CMD0 and CMD8 are CRC-checked even while checking is off
        if (st.crc_checking or cmd.index in (CMD_GO_IDLE_STATE, CMD_SEND_IF_COND)) and not cmd.crc_ok:
            return self._r1(R1_CRC_ERROR)
        if cmd.is_app_cmd and not app:
            return self._r1(R1_ILLEGAL_COMMAND)
        if cmd.index == CMD_GO_IDLE_STATE:
            return self._go_idle(cmd)
        if st.phase is Phase.UNINITIALIZED:
            return self._r1(R1_ILLEGAL_COMMAND)
        if st.phase in (Phase.READING_MULTI, Phase.WRITING_MULTI) and cmd.index != CMD_STOP_TRANSMISSION:
            # the host moved on without closing the transfer
            self.end_transfer()

        handler = self._app_handlers.get(cmd.index) if app else None
        if handler is None and not cmd.is_app_cmd:
            handler = self._handlers.get(cmd.index)
        if handler is None:
            return self._r1(R1_ILLEGAL_COMMAND)
        return handler(cmd)

    def _r1(self, bits=0, kind=ResponseKind.R1):
        if self.state.phase is Phase.IDLE:
            bits |= R1_IDLE
        return SdResponse(kind, bytes([bits & 0x7F]))

    def _with_value(self, kind, value, bits=0):
        head = self._r1(bits).payload
        return SdResponse(kind, head + value.to_bytes(4, "big"))

    def _require_transfer_state(self):
        """R1 error for data commands issued before init completes, else None."""
        if self.state.phase not in INITIALIZED_PHASES:
            return self._r1(R1_ILLEGAL_COMMAND)
        if self.state.phase is Phase.READY:
            self.state.phase = Phase.TRANSFER_READY
        return None

    def _go_idle(self, cmd):
        self.end_transfer()
        self._reset_protocol()
        self.state.phase = Phase.IDLE
        return self._r1()

    def _send_if_cond(self, cmd):
        if self.state.phase is not Phase.IDLE:
            return self._r1(R1_ILLEGAL_COMMAND)
        voltage = (cmd.argument >> 8) & 0x0F
        accepted = voltage if voltage == CMD8_VOLTAGE_27_36 else 0
        return self._with_value(ResponseKind.R7, (accepted << 8) | (cmd.argument & 0xFF))

    def _app_cmd(self, cmd):
        self.state.app_pending = True
        return self._r1()

    def _send_op_cond(self, cmd):
        st = self.state
        if st.phase is not Phase.IDLE:
            return self._r1()
        if not cmd.argument & ACMD41_HCS:
            # a high-capacity card never leaves idle for a host without HCS
            return self._r1()
        if st.init_polls_left > 0:
            st.init_polls_left -= 1
            return self._r1()
        st.high_capacity_host = True
        st.ocr = OCR_POWER_UP | OCR_CCS | OCR_VDD_32_34
        if self.supports_uhs and cmd.argument & ACMD41_S18R:
            st.ocr |= OCR_S18A
        st.phase = Phase.READY
        logger.debug("Card ready, OCR=0x%08X", st.ocr)
        return self._r1()

    def _read_ocr(self, cmd):
        if self.state.phase is Phase.READY:
            self.state.phase = Phase.TRANSFER_READY
        return self._with_value(ResponseKind.R3, self.state.ocr)

    def _crc_on_off(self, cmd):
        self.state.crc_checking = bool(cmd.argument & 0x01)
        return self._r1()

    def _set_blocklen(self, cmd):
        if cmd.argument != BLOCK_SIZE:
            return self._r1(R1_PARAMETER_ERROR)
        return self._r1()

    def _send_csd(self, cmd):
        return self._require_transfer_state() or SdResponse.data_block(self.state.csd)

    def _send_cid(self, cmd):
        return self._require_transfer_state() or SdResponse.data_block(self.state.cid)

    def _read_single(self, cmd):
        refused = self._require_transfer_state()
        if refused:
            return refused
        if cmd.argument >= self.block_count:
            return SdResponse(ResponseKind.ERROR_TOKEN, bytes([ERROR_TOKEN_OUT_OF_RANGE]))
        data, _ = self.read_block(cmd.argument)
        return SdResponse.data_block(data)

    def _read_multiple(self, cmd):
        refused = self._require_transfer_state()
        if refused:
            return refused
        if cmd.argument >= self.block_count:
            return self._r1(R1_PARAMETER_ERROR)
        self.state.phase = Phase.READING_MULTI
        self.state.cursor = cmd.argument
        return self._r1()

    def _write_single(self, cmd):
        refused = self._require_transfer_state()
        if refused:
            return refused
        if cmd.argument >= self.block_count:
            return self._r1(R1_PARAMETER_ERROR)
        self.state.cursor = cmd.argument
        self.state.single_write = True
        return self._r1()

    def _write_multiple(self, cmd):
        refused = self._require_transfer_state()
        if refused:
            return refused
        if cmd.argument >= self.block_count:
            return self._r1(R1_PARAMETER_ERROR)
        self.state.phase = Phase.WRITING_MULTI
        self.state.cursor = cmd.argument
        return self._r1()

    def _stop_transmission(self, cmd):
        self.end_transfer()
        return self._r1(kind=ResponseKind.R1B)

    # ── data phase ──────────────────────────────────────────────────

    def data_out(self):
        """Next block of a CMD18 stream."""
        st = self.state
        if st.power is Power.OFF:
            raise NotPowered()
        if st.phase is not Phase.READING_MULTI:
            return SdResponse(ResponseKind.ERROR_TOKEN, bytes([ERROR_TOKEN_ERROR]))
        if st.cursor >= self.block_count:
            return SdResponse(ResponseKind.ERROR_TOKEN, bytes([ERROR_TOKEN_OUT_OF_RANGE]))
        data, _ = self.read_block(st.cursor)
        st.cursor += 1
        return SdResponse.data_block(data)

    def data_in(self, data, crc):
        """One data packet after CMD24/CMD25; returns the data response token."""
        st = self.state
        if st.power is Power.OFF:
            raise NotPowered()
        if not (st.single_write or st.phase is Phase.WRITING_MULTI):
            return SdResponse(ResponseKind.DATA_TOKEN, bytes([DATA_WRITE_ERROR]))
        if st.cursor >= self.block_count or len(data) != BLOCK_SIZE:
            token = DATA_WRITE_ERROR
        else:
            token = self.write_block(st.cursor, data, crc)
            if token == DATA_ACCEPTED:
                st.cursor += 1
        if st.single_write:
            st.single_write = False
            st.cursor = None
        return SdResponse(ResponseKind.DATA_TOKEN, bytes([token]))

    def stop_token(self):
        """Stop-tran token closing a CMD25 stream."""
        if self.state.phase is Phase.WRITING_MULTI:
            self.end_transfer()

    def end_transfer(self):
        st = self.state
        if st.phase in (Phase.READING_MULTI, Phase.WRITING_MULTI):
            st.phase = Phase.TRANSFER_READY
        st.cursor = None
        st.single_write = False

    # ── block transport ─────────────────────────────────────────────

    def _check_block_access(self, lba):
        if self.state.power is Power.OFF:
            raise NotPowered()
        if self.state.phase not in INITIALIZED_PHASES:
            raise NotInitialized()
        if not 0 <= lba < self.block_count:
            raise AddressError(f"block {lba} beyond {self.block_count} blocks")

    def read_block(self, lba):
        self._check_block_access(lba)
        data = self.state.backing.read(lba * BLOCK_SIZE, BLOCK_SIZE)
        return data, crc16(data)

    def write_block(self, lba, data, crc):
        self._check_block_access(lba)
        if len(data) != BLOCK_SIZE:
            raise ValueError(f"blocks are {BLOCK_SIZE} bytes")
        if self.state.crc_checking and crc16(data) != crc:
            return DATA_CRC_ERROR
        self.state.backing.write(lba * BLOCK_SIZE, bytes(data))
        return DATA_ACCEPTED

    def flush(self):
        self.state.backing.flush()
