import random

from django.test import SimpleTestCase

from netsd.crc import crc7, crc7_byte, crc16


def crc7_bitwise(data):
    crc = 0
    for byte in data:
        for bit in range(7, -1, -1):
            feedback = ((crc >> 6) & 1) ^ ((byte >> bit) & 1)
            crc = (crc << 1) & 0x7F
            if feedback:
                crc ^= 0x09
    return crc


def crc16_bitwise(data):
    crc = 0
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
    return crc


class Crc7Tests(SimpleTestCase):

    def test_go_idle_frame(self):
        self.assertEqual(crc7(bytes([0x40, 0, 0, 0, 0])), 0x4A)
        self.assertEqual(crc7_byte(bytes([0x40, 0, 0, 0, 0])), 0x95)

    def test_known_command_trailers(self):
        self.assertEqual(crc7_byte(bytes([0x48, 0x00, 0x00, 0x01, 0xAA])), 0x87)   # CMD8
        self.assertEqual(crc7_byte(bytes([0x77, 0x00, 0x00, 0x00, 0x00])), 0x65)   # CMD55
        self.assertEqual(crc7_byte(bytes([0x69, 0x40, 0x00, 0x00, 0x00])), 0x77)   # ACMD41 HCS
        self.assertEqual(crc7_byte(bytes([0x7A, 0x00, 0x00, 0x00, 0x00])), 0xFD)   # CMD58

    def test_matches_bitwise_division(self):
        rng = random.Random(7)
        for _ in range(2000):
            frame = rng.randbytes(5)
            self.assertEqual(crc7(frame), crc7_bitwise(frame))


class Crc16Tests(SimpleTestCase):

    def test_empty(self):
        self.assertEqual(crc16(b""), 0)

    def test_golden_vectors(self):
        self.assertEqual(crc16(b"123456789"), 0x31C3)
        self.assertEqual(crc16(b"\xFF" * 512), 0x7FA1)

    def test_matches_bitwise_division(self):
        rng = random.Random(11)
        for _ in range(500):
            data = rng.randbytes(rng.randrange(1, 600))
            self.assertEqual(crc16(data), crc16_bitwise(data))
