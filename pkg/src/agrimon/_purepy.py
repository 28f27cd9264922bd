"""Pure-Python kernels. Reference behaviour for ``_speedups.pyx``."""

from agrimon.errors import Malformed, Truncated, VarintOutOfRange

MAX_REMAINING_LENGTH = 268_435_455


def crc16(data) -> int:
    """CRC-16/MODBUS: reflected polynomial 0xA001, initial value 0xFFFF."""
    crc = 0xFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xA001
            else:
                crc >>= 1
    return crc


def encode_remaining_length(n: int) -> bytes:
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise VarintOutOfRange(f"remaining length {n} outside 0..{MAX_REMAINING_LENGTH}")
    out = bytearray()
    while True:
        digit = n & 0x7F
        n >>= 7
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_remaining_length(buf, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, consumed)`` for the varint starting at *offset*."""
    value = 0
    shift = 0
    for i in range(4):
        pos = offset + i
        if pos >= len(buf):
            raise Truncated("remaining length ends mid-number")
        byte = buf[pos]
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, i + 1
        shift += 7
    raise Malformed("remaining length continues past the fourth octet")


def topic_matches(topic_filter: str, topic: str) -> bool:
    # Filters starting with a wildcard never match topics beginning with '$'.
    if topic.startswith("$") and topic_filter[:1] in ("+", "#"):
        return False
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    nt = len(tlevels)
    for i, f in enumerate(flevels):
        if f == "#":
            return True
        if i >= nt:
            return False
        if f != "+" and f != tlevels[i]:
            return False
    return len(flevels) == nt
