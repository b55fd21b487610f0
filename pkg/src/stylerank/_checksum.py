"""CRC64 helpers shared by the binary file formats."""

import crcmod

# CRC-64/XZ: ECMA-182 polynomial, reflected, check("123456789") = 0x995dc9bbdf1939fa.
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)


def crc64(data: bytes) -> int:
    return _crc64(data)


def fingerprint_hex(value: int) -> str:
    return f"{value:016x}"


class ChecksumError(ValueError):
    """Stored checksum does not match the file contents."""


class FormatError(ValueError):
    """File has the wrong magic, an unsupported version, or is truncated."""
