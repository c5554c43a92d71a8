"""
NBD server, fixed-newstyle handshake with simple replies.

One export backed by the card through the RAG port. A client that reaches
the transmission phase holds the card grant until it disconnects; a second
client is refused during option haggling.

    sudo nbd-client -N netsd 127.0.0.1 10809 /dev/nbd0
"""
import contextlib
import enum
import itertools
import logging
import socketserver
import struct
import threading
from dataclasses import dataclass

from .exceptions import GrantTimeout, NbdProtocolError, NetSdError

logger = logging.getLogger(__name__)

NBD_PORT = 10809

NBD_MAGIC = 0x4E42444D41474943          # "NBDMAGIC"
NBD_OPTS_MAGIC = 0x49484156454F5054     # "IHAVEOPT"
NBD_REP_MAGIC = 0x3E889045565A9
NBD_REQUEST_MAGIC = 0x25609513
NBD_SIMPLE_REPLY_MAGIC = 0x67446698

# handshake flags (server) / client flags
NBD_FLAG_FIXED_NEWSTYLE = 1 << 0
NBD_FLAG_NO_ZEROES = 1 << 1
NBD_FLAG_C_FIXED_NEWSTYLE = 1 << 0
NBD_FLAG_C_NO_ZEROES = 1 << 1

# transmission flags
NBD_FLAG_HAS_FLAGS = 1 << 0
NBD_FLAG_READ_ONLY = 1 << 1
NBD_FLAG_SEND_FLUSH = 1 << 2
NBD_FLAG_SEND_FUA = 1 << 3

NBD_OPT_EXPORT_NAME = 1
NBD_OPT_ABORT = 2
NBD_OPT_LIST = 3
NBD_OPT_INFO = 6
NBD_OPT_GO = 7

NBD_REP_ACK = 1
NBD_REP_SERVER = 2
NBD_REP_INFO = 3
NBD_REP_FLAG_ERROR = 1 << 31
NBD_REP_ERR_UNSUP = NBD_REP_FLAG_ERROR | 1
NBD_REP_ERR_POLICY = NBD_REP_FLAG_ERROR | 2
NBD_REP_ERR_INVALID = NBD_REP_FLAG_ERROR | 3
NBD_REP_ERR_UNKNOWN = NBD_REP_FLAG_ERROR | 6

NBD_INFO_EXPORT = 0
NBD_INFO_BLOCK_SIZE = 3

NBD_CMD_READ = 0
NBD_CMD_WRITE = 1
NBD_CMD_DISC = 2
NBD_CMD_FLUSH = 3
NBD_CMD_FLAG_FUA = 1 << 0

NBD_EPERM = 1
NBD_EIO = 5
NBD_EINVAL = 22

MIN_BLOCK = 1
PREFERRED_BLOCK = 512
MAX_PAYLOAD = 32 * 1024 * 1024
MAX_OPTION_LENGTH = 4096

OPTION_HEADER = struct.Struct(">QII")
OPTION_REPLY = struct.Struct(">QIII")
REQUEST = struct.Struct(">IHHQQI")
SIMPLE_REPLY = struct.Struct(">IIQ")


class NbdPhase(str, enum.Enum):
    GREETING = "greeting"
    OPTIONS = "options"
    TRANSMISSION = "transmission"
    CLOSED = "closed"


@dataclass
class NbdSession:
    conn_id: int
    phase: NbdPhase = NbdPhase.GREETING
    export_size: int = 0
    token: object = None
    no_zeroes: bool = False


class _Refused(Exception):
    """The export cannot be opened right now."""


class NbdHandler(socketserver.StreamRequestHandler):

    def setup(self):
        super().setup()
        self.session = NbdSession(next(self.server.conn_ids))

    # ── socket helpers ──────────────────────────────────────────────

    def _recv(self, size):
        data = self.rfile.read(size)
        if len(data) < size:
            raise ConnectionError("client closed the connection")
        return data

    def _send(self, data):
        self.wfile.write(data)

    def _reply(self, option, reply_type, payload=b""):
        self._send(OPTION_REPLY.pack(NBD_REP_MAGIC, option, reply_type, len(payload)) + payload)

    def _simple_reply(self, handle, error=0, payload=b""):
        self._send(SIMPLE_REPLY.pack(NBD_SIMPLE_REPLY_MAGIC, error, handle) + payload)

    # ── handshake ───────────────────────────────────────────────────

    @property
    def _transmission_flags(self):
        flags = NBD_FLAG_HAS_FLAGS | NBD_FLAG_SEND_FLUSH | NBD_FLAG_SEND_FUA
        if self.server.read_only:
            flags |= NBD_FLAG_READ_ONLY
        return flags

    def _name_ok(self, name):
        return name in ("", self.server.export_name)

    def _open_export(self, stack):
        """Take the transmission slot and the RAG grant, or raise _Refused."""
        with contextlib.ExitStack() as attempt:
            if not self.server.transmission_slot.acquire(blocking=False):
                raise _Refused("another client holds the export")
            attempt.callback(self.server.transmission_slot.release)
            try:
                rag = attempt.enter_context(self.server.gateway.rag_session())
            except GrantTimeout as exc:
                raise _Refused(str(exc)) from exc
            except NetSdError as exc:
                raise _Refused(f"card unavailable: {exc}") from exc
            stack.enter_context(attempt.pop_all())
        self.session.token = rag.token
        self.session.export_size = rag.host.capacity_bytes
        return rag

    @staticmethod
    def _parse_info_request(data):
        if len(data) < 6:
            return None
        (name_len,) = struct.unpack_from(">I", data)
        if 4 + name_len + 2 > len(data):
            return None
        name = data[4:4 + name_len].decode("utf-8", errors="replace")
        (count,) = struct.unpack_from(">H", data, 4 + name_len)
        if len(data) != 4 + name_len + 2 + 2 * count:
            return None
        requests = struct.unpack_from(f">{count}H", data, 4 + name_len + 2)
        return name, requests

    def _send_info(self, option, requests, size):
        self._reply(option, NBD_REP_INFO, struct.pack(">HQH", NBD_INFO_EXPORT, size, self._transmission_flags))
        if NBD_INFO_BLOCK_SIZE in requests:
            self._reply(option, NBD_REP_INFO,
                        struct.pack(">HIII", NBD_INFO_BLOCK_SIZE, MIN_BLOCK, PREFERRED_BLOCK, MAX_PAYLOAD))
        self._reply(option, NBD_REP_ACK)

    def _handshake(self, stack):
        self._send(struct.pack(">QQH", NBD_MAGIC, NBD_OPTS_MAGIC,
                               NBD_FLAG_FIXED_NEWSTYLE | NBD_FLAG_NO_ZEROES))
        (client_flags,) = struct.unpack(">I", self._recv(4))
        if client_flags & ~(NBD_FLAG_C_FIXED_NEWSTYLE | NBD_FLAG_C_NO_ZEROES):
            raise NbdProtocolError(f"unknown client flags 0x{client_flags:x}")
        self.session.no_zeroes = bool(client_flags & NBD_FLAG_C_NO_ZEROES)
        self.session.phase = NbdPhase.OPTIONS

        while True:
            magic, option, length = OPTION_HEADER.unpack(self._recv(OPTION_HEADER.size))
            if magic != NBD_OPTS_MAGIC:
                raise NbdProtocolError(f"bad option magic 0x{magic:x}")
            if length > MAX_OPTION_LENGTH:
                raise NbdProtocolError(f"option {option} too long ({length} bytes)")
            data = self._recv(length)

            if option == NBD_OPT_EXPORT_NAME:
                # no error reply exists for this option: refusal closes the connection
                name = data.decode("utf-8", errors="replace")
                if not self._name_ok(name):
                    logger.info("NBD %d: unknown export %r", self.session.conn_id, name)
                    return None
                try:
                    rag = self._open_export(stack)
                except _Refused as exc:
                    logger.info("NBD %d: refused: %s", self.session.conn_id, exc)
                    return None
                reply = struct.pack(">QH", self.session.export_size, self._transmission_flags)
                if not self.session.no_zeroes:
                    reply += bytes(124)
                self._send(reply)
                return rag

            if option in (NBD_OPT_INFO, NBD_OPT_GO):
                parsed = self._parse_info_request(data)
                if parsed is None:
                    self._reply(option, NBD_REP_ERR_INVALID, b"malformed info request")
                    continue
                name, requests = parsed
                if not self._name_ok(name):
                    self._reply(option, NBD_REP_ERR_UNKNOWN, f"no export named {name!r}".encode())
                    continue
                if option == NBD_OPT_INFO:
                    self._send_info(option, requests, self.server.gateway.card.capacity_bytes)
                    continue
                try:
                    rag = self._open_export(stack)
                except _Refused as exc:
                    self._reply(option, NBD_REP_ERR_POLICY, str(exc).encode())
                    continue
                self._send_info(option, requests, self.session.export_size)
                return rag

            if option == NBD_OPT_LIST:
                if data:
                    self._reply(option, NBD_REP_ERR_INVALID, b"LIST takes no data")
                    continue
                name = self.server.export_name.encode()
                self._reply(option, NBD_REP_SERVER, struct.pack(">I", len(name)) + name)
                self._reply(option, NBD_REP_ACK)
            elif option == NBD_OPT_ABORT:
                self._reply(option, NBD_REP_ACK)
                return None
            else:
                logger.debug("NBD %d: unsupported option %d", self.session.conn_id, option)
                self._reply(option, NBD_REP_ERR_UNSUP)

    # ── transmission ────────────────────────────────────────────────

    def _serve_request(self, rag):
        magic, flags, cmd, handle, offset, length = REQUEST.unpack(self._recv(REQUEST.size))
        if magic != NBD_REQUEST_MAGIC:
            raise NbdProtocolError(f"bad request magic 0x{magic:x}")
        if rag.token.revoked:
            logger.warning("NBD %d: grant revoked, closing", self.session.conn_id)
            return False

        size = self.session.export_size
        in_range = offset < size and offset + length <= size

        if cmd == NBD_CMD_DISC:
            return False

        if cmd == NBD_CMD_WRITE:
            if length > MAX_PAYLOAD:
                raise NbdProtocolError(f"write of {length} bytes exceeds {MAX_PAYLOAD}")
            data = self._recv(length)
            if self.server.read_only:
                self._simple_reply(handle, NBD_EPERM)
            elif not in_range:
                self._simple_reply(handle, NBD_EINVAL)
            else:
                try:
                    rag.device.write_at(offset, data)
                    if flags & NBD_CMD_FLAG_FUA:
                        rag.device.flush()
                except NetSdError as exc:
                    logger.error("NBD write at %d+%d failed: %s", offset, length, exc)
                    self._simple_reply(handle, NBD_EIO)
                else:
                    self._simple_reply(handle)

        elif cmd == NBD_CMD_READ:
            if not in_range or length > MAX_PAYLOAD:
                self._simple_reply(handle, NBD_EINVAL)
                return True
            try:
                data = rag.device.read_at(offset, length)
            except NetSdError as exc:
                logger.error("NBD read at %d+%d failed: %s", offset, length, exc)
                self._simple_reply(handle, NBD_EIO)
            else:
                self._simple_reply(handle, 0, data)

        elif cmd == NBD_CMD_FLUSH:
            try:
                rag.device.flush()
            except NetSdError as exc:
                logger.error("NBD flush failed: %s", exc)
                self._simple_reply(handle, NBD_EIO)
            else:
                self._simple_reply(handle)

        else:
            self._simple_reply(handle, NBD_EINVAL)
        return True

    def handle(self):
        conn_id = self.session.conn_id
        logger.info("NBD %d: client %s connected", conn_id, self.client_address)
        try:
            with contextlib.ExitStack() as stack:
                rag = self._handshake(stack)
                if rag is None:
                    return
                self.session.phase = NbdPhase.TRANSMISSION
                logger.info("NBD %d: transmission, %d bytes", conn_id, self.session.export_size)
                while self._serve_request(rag):
                    pass
        except ConnectionError:
            logger.info("NBD %d: connection lost", conn_id)
        except NbdProtocolError as exc:
            logger.warning("NBD %d: %s", conn_id, exc)
        finally:
            self.session.phase = NbdPhase.CLOSED
            logger.info("NBD %d: session ended", conn_id)


class NbdServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, gateway, export_name="netsd", read_only=False):
        self.gateway = gateway
        self.export_name = export_name
        self.read_only = read_only
        self.transmission_slot = threading.Lock()
        self.conn_ids = itertools.count(1)
        super().__init__(address, NbdHandler)

    def start(self):
        """serve_forever on a daemon thread; returns the thread."""
        thread = threading.Thread(target=self.serve_forever, name="nbd-server", daemon=True)
        thread.start()
        logger.info("NBD listening on %s:%d", *self.server_address[:2])
        return thread
