"""
A simulated host controller attached to one switch port.

It initializes the card, negotiates the transfer mode and moves data in
multi-block chunks, retrying a chunk on CRC errors and timeouts. The same
class drives the DUT side in tests and benchmarks and the gateway side
behind NBD and REST.
"""
import dataclasses
import logging
import random
from collections import deque
from dataclasses import dataclass

from .bus import CardCaps, Direction, HostCaps, TransferStatus, negotiate_mode
from .exceptions import (
    AddressError, CardError, ConfigError, NoGrant, NotInitialized, RetriesExhausted,
)
from .sd_core import (
    ACMD41_HCS, ACMD41_S18R, ACMD_SD_SEND_OP_COND, BLOCK_SIZE, CMD8_CHECK_PATTERN,
    CMD8_VOLTAGE_27_36, CMD_APP_CMD, CMD_CRC_ON_OFF, CMD_GO_IDLE_STATE, CMD_READ_OCR,
    CMD_SEND_CID, CMD_SEND_CSD, CMD_SEND_IF_COND, DATA_WRITE_ERROR, ERROR_TOKEN_OUT_OF_RANGE,
    OCR_CCS, OCR_POWER_UP, OCR_S18A, R1_ADDRESS_ERROR, R1_CRC_ERROR, R1_IDLE, R1_ILLEGAL_COMMAND,
    R1_PARAMETER_ERROR, ResponseKind, SdCommand, csd_capacity, parse_cid,
)

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 64 * 1024
MAX_CHUNK = 1024 * 1024
ACMD41_POLL_LIMIT = 1000


@dataclass
class HostStats:
    attempts: int = 0
    crc_errors: int = 0
    timeouts: int = 0
    retries: int = 0
    silent_corruptions: int = 0
    bytes_ok: int = 0
    elapsed_us: float = 0.0

    def copy(self):
        return dataclasses.replace(self)

    def __sub__(self, other):
        return HostStats(**{
            f.name: getattr(self, f.name) - getattr(other, f.name) for f in dataclasses.fields(self)
        })

    @property
    def throughput_mbps(self):
        """MByte/s (10^6 bytes) over simulated time."""
        if self.elapsed_us <= 0:
            return 0.0
        return self.bytes_ok / self.elapsed_us

    def as_dict(self):
        return {**dataclasses.asdict(self), "mbps": self.throughput_mbps}


@dataclass(frozen=True)
class Outcome:
    op: str
    lba: int
    count: int
    status: str


def check_chunk_size(chunk_size):
    if chunk_size % BLOCK_SIZE or not BLOCK_SIZE <= chunk_size <= MAX_CHUNK:
        raise ConfigError(f"chunk size must be a multiple of {BLOCK_SIZE} up to {MAX_CHUNK} bytes")


class HostSession:

    def __init__(self, switch, port_id, bus_config=None, retry_limit=8, crc_checking=True,
                 auto_reinit=False):
        if retry_limit < 1:
            raise ConfigError("retry_limit must be >= 1")
        self.switch = switch
        self.port_id = port_id
        self.bus_config = bus_config or switch.bus_config
        self.retry_limit = retry_limit
        self.crc_checking = crc_checking
        self.auto_reinit = auto_reinit
        self.negotiated_mode = None
        self.capacity_bytes = None
        self.ocr = None
        self.cid = None
        self.stats = HostStats()
        self.last_delta = HostStats()
        self.outcomes = deque(maxlen=10_000)

    @property
    def block_count(self):
        return self.capacity_bytes // BLOCK_SIZE if self.capacity_bytes else 0

    def _unreachable(self, message):
        if self.switch.holder != self.port_id:
            return NoGrant(f"{self.port_id}: {message}")
        return RetriesExhausted(f"{self.port_id}: {message}")

    # ── initialization ──────────────────────────────────────────────

    def _command(self, index, argument=0, app=False):
        """One command with timeout retries; app commands get their CMD55 prefix."""
        cmd = SdCommand.build(index, argument, app)
        for _ in range(self.retry_limit):
            if app and self.switch.command(self.port_id, SdCommand.build(CMD_APP_CMD)) is None:
                self.stats.timeouts += 1
                continue
            response = self.switch.command(self.port_id, cmd)
            if response is not None:
                return response
            self.stats.timeouts += 1
        raise self._unreachable(f"{cmd} got no response")

    def init(self):
        self.negotiated_mode = None
        response = self._command(CMD_GO_IDLE_STATE)
        if response.r1 != R1_IDLE:
            raise CardError(f"CMD0 answered R1=0x{response.r1:02X}")

        pattern = (CMD8_VOLTAGE_27_36 << 8) | CMD8_CHECK_PATTERN
        response = self._command(CMD_SEND_IF_COND, pattern)
        if response.kind is not ResponseKind.R7 or response.value & 0xFFF != pattern:
            raise CardError("card rejected the 2.7-3.6 V interface condition")

        if self.crc_checking:
            self._command(CMD_CRC_ON_OFF, 1)

        argument = ACMD41_HCS | (ACMD41_S18R if self.bus_config.host_supports_uhs else 0)
        for _ in range(ACMD41_POLL_LIMIT):
            response = self._command(ACMD_SD_SEND_OP_COND, argument, app=True)
            if response.r1 & ~R1_IDLE:
                raise CardError(f"ACMD41 answered R1=0x{response.r1:02X}")
            if not response.r1 & R1_IDLE:
                break
        else:
            raise CardError("card stayed busy through ACMD41 polling")

        self.ocr = self._command(CMD_READ_OCR).value
        if not self.ocr & OCR_POWER_UP or not self.ocr & OCR_CCS:
            raise CardError(f"unsupported card, OCR=0x{self.ocr:08X}")

        csd = self._command(CMD_SEND_CSD)
        cid = self._command(CMD_SEND_CID)
        if csd.kind is not ResponseKind.DATA_BLOCK or cid.kind is not ResponseKind.DATA_BLOCK:
            raise CardError("card did not return its registers")
        self.capacity_bytes = csd_capacity(csd.data)
        self.cid = parse_cid(cid.data)

        card_caps = CardCaps(supports_uhs=bool(self.ocr & OCR_S18A))
        host_caps = HostCaps(supports_uhs=self.bus_config.host_supports_uhs)
        self.negotiated_mode = negotiate_mode(self.bus_config, card_caps, host_caps)
        logger.info("%s: card ready, %d bytes, mode %s", self.port_id, self.capacity_bytes,
                    self.negotiated_mode.name.value)
        return self.negotiated_mode

    def reinit_if_needed(self):
        if self.negotiated_mode is None:
            return self.init()
        return self.negotiated_mode

    def _require_init(self):
        if self.negotiated_mode is None:
            raise NotInitialized(f"{self.port_id}: card not initialized")

    def _check_range(self, lba, n_blocks):
        if lba < 0 or n_blocks < 0 or lba + n_blocks > self.block_count:
            raise AddressError(f"blocks {lba}..{lba + n_blocks - 1} beyond {self.block_count}")

    # ── data transfer ───────────────────────────────────────────────

    def _refused(self, response):
        """Map a card refusal to an exception; returns True if a reinit retry is due."""
        if response.kind is ResponseKind.ERROR_TOKEN:
            if response.token & ERROR_TOKEN_OUT_OF_RANGE:
                raise AddressError(f"card error token 0x{response.token:02X}")
            raise CardError(f"card error token 0x{response.token:02X}")
        if response.kind is ResponseKind.DATA_TOKEN:
            if response.token & 0x1F == DATA_WRITE_ERROR:
                raise CardError("card reported a write error")
            raise CardError(f"unexpected data response 0x{response.token:02X}")
        r1 = response.r1
        if r1 & (R1_ILLEGAL_COMMAND | R1_IDLE):
            self.negotiated_mode = None
            if self.auto_reinit:
                return True
            raise NotInitialized(f"{self.port_id}: card needs reinitialization (R1=0x{r1:02X})")
        if r1 & (R1_PARAMETER_ERROR | R1_ADDRESS_ERROR):
            raise AddressError(f"card refused the address (R1=0x{r1:02X})")
        if r1 & R1_CRC_ERROR:
            self.stats.crc_errors += 1
            return False
        raise CardError(f"card answered R1=0x{r1:02X}")

    def _transfer_chunk(self, op, lba, count, data=None):
        for attempt in range(self.retry_limit):
            if attempt:
                self.stats.retries += 1
            if self.negotiated_mode is None:
                self.init()
            self.stats.attempts += 1
            if op is Direction.READ:
                result = self.switch.read_blocks(self.port_id, lba, count, self.negotiated_mode,
                                                 verify_crc=self.crc_checking)
            else:
                result = self.switch.write_blocks(self.port_id, lba, data, self.negotiated_mode)
            self.stats.elapsed_us += result.elapsed_us
            self.outcomes.append(Outcome(op.value, lba, count, result.status.value))

            if result.response is not None:
                self._refused(result.response)
                continue
            if result.status is TransferStatus.CRC_DETECTED_ERROR:
                self.stats.crc_errors += 1
                continue
            if result.status is TransferStatus.TIMEOUT:
                self.stats.timeouts += 1
                continue
            if result.status is TransferStatus.SILENT_CORRUPTION:
                self.stats.silent_corruptions += 1
            self.stats.bytes_ok += count * BLOCK_SIZE
            return result.data
        raise self._unreachable(f"{op.value} of blocks {lba}+{count} failed {self.retry_limit} times")

    def read(self, lba, n_blocks, chunk_size=DEFAULT_CHUNK):
        self._require_init()
        check_chunk_size(chunk_size)
        self._check_range(lba, n_blocks)
        before = self.stats.copy()
        per_chunk = chunk_size // BLOCK_SIZE
        out = bytearray()
        for start in range(lba, lba + n_blocks, per_chunk):
            count = min(per_chunk, lba + n_blocks - start)
            out += self._transfer_chunk(Direction.READ, start, count)
        self.last_delta = self.stats - before
        return bytes(out)

    def write(self, lba, data, chunk_size=DEFAULT_CHUNK):
        self._require_init()
        check_chunk_size(chunk_size)
        if len(data) % BLOCK_SIZE:
            raise AddressError(f"write length must be a multiple of {BLOCK_SIZE}")
        n_blocks = len(data) // BLOCK_SIZE
        self._check_range(lba, n_blocks)
        before = self.stats.copy()
        view = memoryview(data)
        for offset in range(0, len(data), chunk_size):
            chunk = bytes(view[offset:offset + chunk_size])
            self._transfer_chunk(Direction.WRITE, lba + offset // BLOCK_SIZE, len(chunk) // BLOCK_SIZE, chunk)
        self.last_delta = self.stats - before
        return self.last_delta

    def flush(self):
        result = self.switch.flush(self.port_id)
        if result.status is TransferStatus.TIMEOUT:
            raise self._unreachable("flush got no response")

    def throughput(self, direction, total_bytes, chunk_size=DEFAULT_CHUNK, lba=0, seed=0):
        """Simulated MByte/s for one sweep, retries included."""
        direction = Direction(direction)
        if total_bytes % BLOCK_SIZE:
            raise ConfigError(f"total_bytes must be a multiple of {BLOCK_SIZE}")
        if direction is Direction.READ:
            self.read(lba, total_bytes // BLOCK_SIZE, chunk_size)
        else:
            self.write(lba, random.Random(seed).randbytes(total_bytes), chunk_size)
        return self.last_delta.throughput_mbps

    def block_device(self, chunk_size=DEFAULT_CHUNK):
        return HostBlockDevice(self, chunk_size)


class HostBlockDevice:
    """Byte- and block-addressed view of a host session, used by FAT and NBD."""

    sector_size = BLOCK_SIZE

    def __init__(self, host, chunk_size=DEFAULT_CHUNK):
        check_chunk_size(chunk_size)
        self.host = host
        self.chunk_size = chunk_size

    @property
    def capacity(self):
        return self.host.capacity_bytes

    @property
    def total_sectors(self):
        return self.host.block_count

    def read_blocks(self, lba, count):
        return self.host.read(lba, count, self.chunk_size)

    def write_blocks(self, lba, count, data):
        if len(data) != count * BLOCK_SIZE:
            raise ValueError(f"expected {count * BLOCK_SIZE} bytes, got {len(data)}")
        self.host.write(lba, data, self.chunk_size)

    def read_at(self, offset, length):
        if length == 0:
            return b""
        ss = self.sector_size
        first_lba = offset // ss
        last_lba = (offset + length - 1) // ss
        raw = self.read_blocks(first_lba, last_lba - first_lba + 1)
        start = offset - first_lba * ss
        return raw[start:start + length]

    def write_at(self, offset, data):
        length = len(data)
        if length == 0:
            return
        ss = self.sector_size
        first_lba = offset // ss
        last_lba = (offset + length - 1) // ss
        count = last_lba - first_lba + 1
        start = offset - first_lba * ss
        if start == 0 and length % ss == 0:
            self.write_blocks(first_lba, count, data)
            return
        buf = bytearray(self.read_blocks(first_lba, count))
        buf[start:start + length] = data
        self.write_blocks(first_lba, count, bytes(buf))

    def flush(self):
        self.host.flush()
