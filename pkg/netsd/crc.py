"""
SD framing checksums.

CRC-7 (x^7 + x^3 + 1) protects command frames, CRC-16/CCITT
(x^16 + x^12 + x^5 + 1) protects data blocks. Both start from zero.
"""
import binascii

CRC7_POLY = 0x09


def _crc7_table():
    # Left-aligned in a byte so the table can be indexed by crc ^ data
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ (CRC7_POLY << 1)) if crc & 0x80 else crc << 1
        table.append(crc & 0xFF)
    return tuple(table)


CRC7_TABLE = _crc7_table()


def crc7(data):
    crc = 0
    for byte in data:
        crc = CRC7_TABLE[crc ^ byte]
    return crc >> 1


def crc7_byte(data):
    """Trailing frame byte: CRC-7 in the upper bits, end bit set."""
    return (crc7(data) << 1) | 0x01


def crc16(data):
    return binascii.crc_hqx(data, 0)
