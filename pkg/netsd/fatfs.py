"""
FAT16/FAT32 with 8.3 names over a 512-byte block device.

The device needs `read_blocks(lba, count)`, `write_blocks(lba, count, data)`,
`total_sectors` and `flush()`; both `HostBlockDevice` (through the switch)
and `ImageDevice` (straight onto an image) qualify.

Every mutation writes data clusters first, then both FAT copies, then the
directory entry. Replaced chains are freed last.
"""
import array
import enum
import logging
import string
import struct
import sys
from dataclasses import dataclass, field

from .exceptions import (
    AddressError, IoError, IsADirectory, NameInvalid, NetSdError, NoSpace, NotADirectory, NotFound,
)
from .sd_core import BLOCK_SIZE

logger = logging.getLogger(__name__)

SECTOR = BLOCK_SIZE
FAT_COPIES = 2
FAT16_MIN_CLUSTERS = 4085
FAT32_MIN_CLUSTERS = 65525
FAT32_MIN_CAPACITY = 32 * 1024 * 1024
FAT16_ROOT_ENTRIES = 512
FAT16_RESERVED = 1
FAT32_RESERVED = 32
FAT32_ROOT_CLUSTER = 2
FAT32_FSINFO_SECTOR = 1
FAT32_BACKUP_BOOT = 6
FIXED_DATE = 0x0021                    # 1980-01-01
FIXED_TIME = 0
MEDIA_FIXED = 0xF8

ATTR_READ_ONLY = 0x01
ATTR_HIDDEN = 0x02
ATTR_SYSTEM = 0x04
ATTR_VOLUME_ID = 0x08
ATTR_DIRECTORY = 0x10
ATTR_ARCHIVE = 0x20
ATTR_LONG_NAME = 0x0F

DELETED = 0xE5
DOT = b".          "
DOTDOT = b"..         "

BPB = struct.Struct("<3s8sHBHBHHBHHHII")
BPB16 = struct.Struct("<BBBI11s8s")
BPB32 = struct.Struct("<IHHIHH12sBBBI11s8s")
DIR_ENTRY = struct.Struct("<11sBBBHHHHHHHI")
FSINFO_LEAD = 0x41615252
FSINFO_STRUCT = 0x61417272
FSINFO_TRAIL = 0xAA550000

SHORT_NAME_CHARS = frozenset(string.ascii_uppercase + string.digits + "!#$%&'()-@^_`{}~")


class FatType(str, enum.Enum):
    FAT16 = "FAT16"
    FAT32 = "FAT32"


# ── 8.3 names ───────────────────────────────────────────────────────

def encode_83(name):
    """'hello.txt' -> b'HELLO   TXT'; raises NameInvalid."""
    if not name or name in (".", "..") or name.count(".") > 1:
        raise NameInvalid(f"{name!r} is not an 8.3 name")
    base, _, ext = name.upper().partition(".")
    if not 1 <= len(base) <= 8 or len(ext) > 3 or (_ and not ext):
        raise NameInvalid(f"{name!r} is not an 8.3 name")
    if not set(base + ext) <= SHORT_NAME_CHARS:
        raise NameInvalid(f"{name!r} has characters outside the 8.3 set")
    return base.ljust(8).encode("ascii") + ext.ljust(3).encode("ascii")


def decode_83(raw):
    raw = bytes(raw)
    if raw[0] == 0x05:
        raw = bytes([DELETED]) + raw[1:]
    base = raw[:8].rstrip(b" ").decode("latin-1")
    ext = raw[8:11].rstrip(b" ").decode("latin-1")
    return f"{base}.{ext}" if ext else base


# ── layout ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Layout:
    fat_type: FatType
    total_sectors: int
    sectors_per_cluster: int
    reserved_sectors: int
    fat_sectors: int
    root_entries: int
    clusters: int
    fat_count: int = FAT_COPIES
    root_cluster: int = 0

    @property
    def cluster_bytes(self):
        return self.sectors_per_cluster * SECTOR

    @property
    def fat_start(self):
        return self.reserved_sectors

    @property
    def root_start(self):
        return self.reserved_sectors + self.fat_count * self.fat_sectors

    @property
    def root_dir_sectors(self):
        return -(-self.root_entries * DIR_ENTRY.size // SECTOR)

    @property
    def data_start(self):
        return self.root_start + self.root_dir_sectors

    @property
    def entry_bytes(self):
        return 2 if self.fat_type is FatType.FAT16 else 4


def _fit_clusters(sectors, reserved, root_sectors, spc, entry_bytes):
    """
    Largest cluster count whose FATs and data area fit, FATtools-style.
    Returns (clusters, fat_sectors, reserved); leftover sectors go to the
    reserved area so a driver recomputing the count from the BPB gets the
    same number.
    """
    available = sectors - reserved - root_sectors
    if available <= 0:
        return 0, 0, reserved
    clusters = available * SECTOR // (spc * SECTOR + FAT_COPIES * entry_bytes)
    while clusters > 0:
        fat_sectors = -(-(clusters + 2) * entry_bytes // SECTOR)
        spare = sectors - (reserved + FAT_COPIES * fat_sectors + root_sectors + clusters * spc)
        if spare >= 0:
            return clusters, fat_sectors, reserved + spare
        clusters -= 1
    return 0, 0, reserved


def _fat32_cluster_sectors(capacity_bytes):
    if capacity_bytes <= 260 * 1024 * 1024:
        return 1
    if capacity_bytes <= 8 * 1024 ** 3:
        return 8
    if capacity_bytes <= 16 * 1024 ** 3:
        return 16
    return 32


def plan_layout(capacity_bytes):
    sectors = capacity_bytes // SECTOR
    if capacity_bytes >= FAT32_MIN_CAPACITY:
        spc = _fat32_cluster_sectors(capacity_bytes)
        clusters, fat_sectors, reserved = _fit_clusters(sectors, FAT32_RESERVED, 0, spc, 4)
        if clusters >= FAT32_MIN_CLUSTERS:
            return Layout(FatType.FAT32, sectors, spc, reserved, fat_sectors, 0, clusters,
                          root_cluster=FAT32_ROOT_CLUSTER)

    root_sectors = FAT16_ROOT_ENTRIES * DIR_ENTRY.size // SECTOR
    spc = 1
    while True:
        clusters, fat_sectors, reserved = _fit_clusters(sectors, FAT16_RESERVED, root_sectors, spc, 2)
        if clusters < FAT32_MIN_CLUSTERS or spc == 128:
            break
        spc *= 2
    if not FAT16_MIN_CLUSTERS <= clusters < FAT32_MIN_CLUSTERS:
        raise NoSpace(f"{capacity_bytes} bytes is too small for FAT16")
    return Layout(FatType.FAT16, sectors, spc, reserved, fat_sectors, FAT16_ROOT_ENTRIES, clusters)


def _boot_sector(layout, label, volume_id):
    boot = bytearray(SECTOR)
    fat16 = layout.fat_type is FatType.FAT16
    total16 = layout.total_sectors if fat16 and layout.total_sectors < 0x10000 else 0
    BPB.pack_into(
        boot, 0,
        b"\xEB\x3C\x90" if fat16 else b"\xEB\x58\x90",
        b"NETSD   ",
        SECTOR,
        layout.sectors_per_cluster,
        layout.reserved_sectors,
        layout.fat_count,
        layout.root_entries,
        total16,
        MEDIA_FIXED,
        layout.fat_sectors if fat16 else 0,
        63,
        255,
        0,
        0 if total16 else layout.total_sectors,
    )
    label = label.upper().encode("ascii")[:11].ljust(11)
    if fat16:
        BPB16.pack_into(boot, BPB.size, 0x80, 0, 0x29, volume_id, label, b"FAT16   ")
    else:
        BPB32.pack_into(boot, BPB.size, layout.fat_sectors, 0, 0, layout.root_cluster,
                        FAT32_FSINFO_SECTOR, FAT32_BACKUP_BOOT, bytes(12),
                        0x80, 0, 0x29, volume_id, label, b"FAT32   ")
    boot[510:512] = b"\x55\xAA"
    return bytes(boot)


def _fsinfo_sector():
    # free count and next-free hint left as "unknown"
    info = bytearray(SECTOR)
    struct.pack_into("<I", info, 0, FSINFO_LEAD)
    struct.pack_into("<III", info, 484, FSINFO_STRUCT, 0xFFFFFFFF, 0xFFFFFFFF)
    struct.pack_into("<I", info, 508, FSINFO_TRAIL)
    return bytes(info)


# ── directory entries ───────────────────────────────────────────────

@dataclass
class DirEntry:
    name: str
    attributes: int
    first_cluster: int
    size_bytes: int
    raw_name: bytes = b""
    write_date: int = FIXED_DATE
    write_time: int = FIXED_TIME
    slot: tuple = field(default=None, compare=False, repr=False)

    @property
    def is_dir(self):
        return bool(self.attributes & ATTR_DIRECTORY)

    @classmethod
    def unpack(cls, raw, slot=None):
        (name, attr, _nt, _tenth, _ctime, _cdate, _adate, hi, wtime, wdate, lo, size) = DIR_ENTRY.unpack(raw)
        return cls(decode_83(name), attr, (hi << 16) | lo, size, name, wdate, wtime, slot)

    def pack(self):
        return DIR_ENTRY.pack(
            self.raw_name, self.attributes, 0, 0,
            FIXED_TIME, FIXED_DATE, FIXED_DATE,
            self.first_cluster >> 16, self.write_time, self.write_date,
            self.first_cluster & 0xFFFF, self.size_bytes,
        )

    def as_dict(self):
        return {
            "name": self.name,
            "type": "dir" if self.is_dir else "file",
            "size": self.size_bytes,
            "first_cluster": self.first_cluster,
            "attributes": self.attributes,
        }


class ImageDevice:
    """Block device straight onto an image backing, without the bus."""

    sector_size = SECTOR

    def __init__(self, backing):
        self.backing = backing

    @property
    def total_sectors(self):
        return self.backing.capacity_bytes // SECTOR

    def _check(self, lba, count):
        if lba < 0 or lba + count > self.total_sectors:
            raise AddressError(f"blocks {lba}+{count} beyond {self.total_sectors}")

    def read_blocks(self, lba, count):
        self._check(lba, count)
        return self.backing.read(lba * SECTOR, count * SECTOR)

    def write_blocks(self, lba, count, data):
        self._check(lba, count)
        self.backing.write(lba * SECTOR, data)

    def flush(self):
        self.backing.flush()


def _runs(clusters):
    """Split a cluster list into (first, length) runs of consecutive clusters."""
    runs = []
    for cluster in clusters:
        if runs and runs[-1][0] + runs[-1][1] == cluster:
            runs[-1][1] += 1
        else:
            runs.append([cluster, 1])
    return runs


class FatVolume:

    def __init__(self, device):
        self.device = device
        self._mount()

    # ── format / mount ──────────────────────────────────────────────

    @classmethod
    def format(cls, device, capacity_bytes=None, label="NO NAME", volume_id=0x4E455453):
        if capacity_bytes is None:
            capacity_bytes = device.total_sectors * SECTOR
        if capacity_bytes > device.total_sectors * SECTOR:
            raise NoSpace("capacity exceeds the device")
        layout = plan_layout(capacity_bytes)
        logger.info("Formatting %d bytes as %s, %d clusters of %d bytes", capacity_bytes,
                    layout.fat_type.value, layout.clusters, layout.cluster_bytes)

        boot = _boot_sector(layout, label, volume_id)
        reserved = bytearray(layout.reserved_sectors * SECTOR)
        reserved[:SECTOR] = boot
        if layout.fat_type is FatType.FAT32:
            fsinfo = _fsinfo_sector()
            for base in (0, FAT32_BACKUP_BOOT):
                reserved[base * SECTOR:(base + 1) * SECTOR] = boot
                reserved[(base + 1) * SECTOR:(base + 2) * SECTOR] = fsinfo

        fat = bytearray(layout.fat_sectors * SECTOR)
        if layout.fat_type is FatType.FAT16:
            struct.pack_into("<HH", fat, 0, 0xFF00 | MEDIA_FIXED, 0xFFFF)
        else:
            struct.pack_into("<III", fat, 0, 0x0FFFFF00 | MEDIA_FIXED, 0x0FFFFFFF, 0x0FFFFFFF)

        cls._write_to(device, 0, reserved)
        for copy in range(layout.fat_count):
            cls._write_to(device, layout.fat_start + copy * layout.fat_sectors, fat)
        if layout.fat_type is FatType.FAT16:
            cls._write_to(device, layout.root_start, bytes(layout.root_dir_sectors * SECTOR))
        else:
            cls._write_to(device, layout.data_start, bytes(layout.cluster_bytes))
        try:
            device.flush()
        except NetSdError as exc:
            raise IoError(f"flush failed: {exc}") from exc
        return cls(device)

    @staticmethod
    def _write_to(device, lba, data):
        try:
            device.write_blocks(lba, len(data) // SECTOR, bytes(data))
        except IoError:
            raise
        except NetSdError as exc:
            raise IoError(f"write at block {lba} failed: {exc}") from exc

    def _mount(self):
        boot = self._read(0, 1)
        if boot[510:512] != b"\x55\xAA":
            raise IoError("no FAT boot signature")
        (_jmp, _oem, bps, spc, reserved, nfats, root_entries, total16, _media,
         fat16_sectors, _spt, _heads, _hidden, total32) = BPB.unpack_from(boot)
        if bps != SECTOR:
            raise IoError(f"unsupported sector size {bps}")
        if not spc or spc & (spc - 1) or not nfats:
            raise IoError("corrupt BIOS parameter block")
        fat_sectors = fat16_sectors or BPB32.unpack_from(boot, BPB.size)[0]
        total = total16 or total32
        root_dir_sectors = -(-root_entries * DIR_ENTRY.size // SECTOR)
        data_start = reserved + nfats * fat_sectors + root_dir_sectors
        clusters = (total - data_start) // spc
        if clusters < FAT16_MIN_CLUSTERS:
            raise IoError("FAT12 volumes are not supported")
        if clusters < FAT32_MIN_CLUSTERS:
            fat_type, root_cluster = FatType.FAT16, 0
        else:
            fat_type, root_cluster = FatType.FAT32, BPB32.unpack_from(boot, BPB.size)[3]
        # data clusters the FAT cannot address are unusable
        entry_bytes = 2 if fat_type is FatType.FAT16 else 4
        clusters = min(clusters, fat_sectors * SECTOR // entry_bytes - 2)
        self.layout = Layout(fat_type, total, spc, reserved, fat_sectors, root_entries, clusters,
                             nfats, root_cluster)
        self.label = (boot[43:54] if fat_type is FatType.FAT16 else boot[71:82]).decode("latin-1").rstrip()

        self._fat = array.array("H" if fat_type is FatType.FAT16 else "I")
        self._fat.frombytes(self._read(self.layout.fat_start, fat_sectors))
        if sys.byteorder == "big":
            self._fat.byteswap()
        self._dirty = set()
        logger.debug("Mounted %s: %d clusters of %d bytes", fat_type.value, clusters,
                     self.layout.cluster_bytes)

    @property
    def fat_type(self):
        return self.layout.fat_type

    # ── block access ────────────────────────────────────────────────

    def _read(self, lba, count):
        try:
            return self.device.read_blocks(lba, count)
        except NetSdError as exc:
            raise IoError(f"read at block {lba} failed: {exc}") from exc

    def _write(self, lba, data):
        self._write_to(self.device, lba, data)

    def _cluster_lba(self, cluster):
        return self.layout.data_start + (cluster - 2) * self.layout.sectors_per_cluster

    # ── FAT ─────────────────────────────────────────────────────────

    @property
    def _mask(self):
        return 0xFFFF if self.layout.fat_type is FatType.FAT16 else 0x0FFFFFFF

    @property
    def _eoc(self):
        return 0xFFF8 if self.layout.fat_type is FatType.FAT16 else 0x0FFFFFF8

    def _get(self, cluster):
        return self._fat[cluster] & self._mask

    def _set(self, cluster, value):
        high = self._fat[cluster] & ~self._mask & 0xFFFFFFFF if self.layout.fat_type is FatType.FAT32 else 0
        self._fat[cluster] = high | (value & self._mask)
        self._dirty.add(cluster * self.layout.entry_bytes // SECTOR)

    def _flush_fat(self):
        if not self._dirty:
            return
        per_sector = SECTOR // self.layout.entry_bytes
        for start, length in _runs(sorted(self._dirty)):
            chunk = self._fat[start * per_sector:(start + length) * per_sector]
            if sys.byteorder == "big":
                chunk.byteswap()
            data = chunk.tobytes()
            for copy in range(self.layout.fat_count):
                self._write(self.layout.fat_start + copy * self.layout.fat_sectors + start, data)
        self._dirty.clear()

    def _chain(self, first):
        chain = []
        seen = set()
        cluster = first
        last = self.layout.clusters + 1
        while True:
            if not 2 <= cluster <= last:
                raise IoError(f"cluster {cluster} outside the data area")
            if cluster in seen:
                raise IoError(f"cluster chain from {first} loops at {cluster}")
            seen.add(cluster)
            chain.append(cluster)
            nxt = self._get(cluster)
            if nxt >= self._eoc:
                return chain
            if nxt in (0, self._eoc - 1):
                raise IoError(f"cluster chain from {first} hits a free or bad cluster")
            cluster = nxt

    def _allocate(self, count):
        """First-fit ascending; nothing is marked until the caller links the chain."""
        found = []
        cluster = 2
        stop = self.layout.clusters + 2
        while len(found) < count:
            try:
                cluster = self._fat.index(0, cluster, stop)
            except ValueError:
                raise NoSpace(f"need {count} free clusters, {len(found)} available") from None
            found.append(cluster)
            cluster += 1
        return found

    def _link(self, chain):
        for current, nxt in zip(chain, chain[1:]):
            self._set(current, nxt)
        if chain:
            self._set(chain[-1], 0x0FFFFFFF)

    def _free_chain(self, first):
        for cluster in self._chain(first):
            self._set(cluster, 0)

    def free_clusters(self):
        mask = self._mask
        return sum(1 for value in self._fat[2:self.layout.clusters + 2] if not value & mask)

    def allocated_clusters(self):
        return self.layout.clusters - self.free_clusters()

    def reachable_clusters(self):
        """Clusters referenced from the directory tree (root chain included)."""
        total = len(self._chain(self.layout.root_cluster)) if self.layout.root_cluster else 0
        stack = [0]
        while stack:
            for entry in self._entries(stack.pop()):
                if entry.first_cluster:
                    total += len(self._chain(entry.first_cluster))
                if entry.is_dir:
                    stack.append(entry.first_cluster)
        return total

    # ── directories ─────────────────────────────────────────────────

    def _dir_sectors(self, dir_cluster):
        if dir_cluster == 0 and self.layout.fat_type is FatType.FAT16:
            return [(self.layout.root_start, self.layout.root_dir_sectors)]
        first = dir_cluster or self.layout.root_cluster
        spc = self.layout.sectors_per_cluster
        return [(self._cluster_lba(c), n * spc) for c, n in _runs(self._chain(first))]

    def _slots(self, dir_cluster):
        """(lba, offset, raw) for every entry slot of a directory."""
        for lba, count in self._dir_sectors(dir_cluster):
            data = self._read(lba, count)
            for pos in range(0, len(data), DIR_ENTRY.size):
                yield lba + pos // SECTOR, pos % SECTOR, data[pos:pos + DIR_ENTRY.size]

    def _entries(self, dir_cluster):
        entries = []
        for lba, offset, raw in self._slots(dir_cluster):
            if raw[0] == 0x00:
                break
            if raw[0] == DELETED or raw[11] & ATTR_VOLUME_ID or raw[:11] in (DOT, DOTDOT):
                continue
            entries.append(DirEntry.unpack(raw, (lba, offset)))
        return entries

    def _find(self, dir_cluster, raw_name):
        for entry in self._entries(dir_cluster):
            if entry.raw_name == raw_name:
                return entry
        return None

    def _free_slot(self, dir_cluster):
        for lba, offset, raw in self._slots(dir_cluster):
            if raw[0] in (0x00, DELETED):
                return lba, offset
        if dir_cluster == 0 and self.layout.fat_type is FatType.FAT16:
            raise NoSpace("root directory is full")
        chain = self._chain(dir_cluster or self.layout.root_cluster)
        [cluster] = self._allocate(1)
        self._write(self._cluster_lba(cluster), bytes(self.layout.cluster_bytes))
        self._set(chain[-1], cluster)
        self._set(cluster, 0x0FFFFFFF)
        self._flush_fat()
        return self._cluster_lba(cluster), 0

    def _write_entry(self, entry):
        lba, offset = entry.slot
        sector = bytearray(self._read(lba, 1))
        sector[offset:offset + DIR_ENTRY.size] = entry.pack()
        self._write(lba, sector)

    def _split(self, path):
        return [encode_83(part) for part in path.split("/") if part]

    def _lookup(self, names, path):
        """Entry at the end of `names`; None for the root."""
        entry = None
        dir_cluster = 0
        for raw in names:
            if entry is not None and not entry.is_dir:
                raise NotADirectory(f"{decode_83(entry.raw_name)} in {path} is not a directory")
            entry = self._find(dir_cluster, raw)
            if entry is None:
                raise NotFound(f"{path} not found")
            dir_cluster = entry.first_cluster
        return entry

    def _create_dir(self, parent_cluster, raw_name):
        slot = self._free_slot(parent_cluster)
        [cluster] = self._allocate(1)
        block = bytearray(self.layout.cluster_bytes)
        block[0:32] = DirEntry(".", ATTR_DIRECTORY, cluster, 0, DOT).pack()
        block[32:64] = DirEntry("..", ATTR_DIRECTORY, parent_cluster, 0, DOTDOT).pack()
        self._write(self._cluster_lba(cluster), block)
        self._link([cluster])
        self._flush_fat()
        entry = DirEntry(decode_83(raw_name), ATTR_DIRECTORY, cluster, 0, raw_name, slot=slot)
        self._write_entry(entry)
        return entry

    def _ensure_dir(self, names, path):
        dir_cluster = 0
        for raw in names:
            entry = self._find(dir_cluster, raw)
            if entry is None:
                entry = self._create_dir(dir_cluster, raw)
            elif not entry.is_dir:
                raise NotADirectory(f"{decode_83(raw)} in {path} is not a directory")
            dir_cluster = entry.first_cluster
        return dir_cluster

    # ── file operations ─────────────────────────────────────────────

    def stat(self, path):
        entry = self._lookup(self._split(path), path)
        if entry is None:
            return DirEntry("/", ATTR_DIRECTORY, 0, 0, b"")
        return entry

    def list_dir(self, path="/"):
        entry = self._lookup(self._split(path), path)
        if entry is not None and not entry.is_dir:
            raise NotADirectory(f"{path} is not a directory")
        return self._entries(entry.first_cluster if entry else 0)

    def make_dir(self, path):
        """Create a directory and missing parents; returns (entry, created)."""
        names = self._split(path)
        if not names:
            return self.stat("/"), False
        parent = self._ensure_dir(names[:-1], path)
        existing = self._find(parent, names[-1])
        if existing is not None:
            if not existing.is_dir:
                raise NotADirectory(f"{path} exists and is a file")
            return existing, False
        return self._create_dir(parent, names[-1]), True

    def read_file(self, path):
        entry = self._lookup(self._split(path), path)
        if entry is None or entry.is_dir:
            raise IsADirectory(f"{path} is a directory")
        if entry.size_bytes == 0:
            return b""
        needed = -(-entry.size_bytes // self.layout.cluster_bytes)
        chain = self._chain(entry.first_cluster)
        if len(chain) < needed:
            raise IoError(f"{path}: chain of {len(chain)} clusters is short of {needed}")
        spc = self.layout.sectors_per_cluster
        data = bytearray()
        for first, count in _runs(chain[:needed]):
            data += self._read(self._cluster_lba(first), count * spc)
        return bytes(data[:entry.size_bytes])

    def write_file(self, path, data):
        """Create or replace a file; returns (entry, created)."""
        names = self._split(path)
        if not names:
            raise IsADirectory("/ is a directory")
        parent = self._ensure_dir(names[:-1], path)
        existing = self._find(parent, names[-1])
        if existing is not None and existing.is_dir:
            raise IsADirectory(f"{path} is a directory")

        slot = existing.slot if existing else self._free_slot(parent)
        cluster_bytes = self.layout.cluster_bytes
        chain = self._allocate(-(-len(data) // cluster_bytes))
        spc = self.layout.sectors_per_cluster
        view = memoryview(data)
        lo = 0
        for first, count in _runs(chain):
            block = bytes(view[lo:lo + count * cluster_bytes])
            self._write(self._cluster_lba(first), block.ljust(count * spc * SECTOR, b"\x00"))
            lo += count * cluster_bytes
        self._link(chain)
        self._flush_fat()

        entry = DirEntry(decode_83(names[-1]), ATTR_ARCHIVE, chain[0] if chain else 0, len(data),
                         names[-1], slot=slot)
        self._write_entry(entry)
        if existing is not None and existing.first_cluster:
            self._free_chain(existing.first_cluster)
            self._flush_fat()
        return entry, existing is None

    def delete_file(self, path):
        entry = self._lookup(self._split(path), path)
        if entry is None or entry.is_dir:
            raise IsADirectory(f"{path} is a directory")
        entry.raw_name = bytes([DELETED]) + entry.raw_name[1:]
        self._write_entry(entry)
        if entry.first_cluster:
            self._free_chain(entry.first_cluster)
            self._flush_fat()

    def flush(self):
        self._flush_fat()
        try:
            self.device.flush()
        except NetSdError as exc:
            raise IoError(f"flush failed: {exc}") from exc

    def info(self):
        return {
            "fat_type": self.layout.fat_type.value,
            "label": self.label,
            "clusters": self.layout.clusters,
            "cluster_bytes": self.layout.cluster_bytes,
            "free_clusters": self.free_clusters(),
        }
