"""Independent reference implementations used only by the tests.

Each one takes a different route from the production code so that agreement
is evidence rather than tautology.
"""

import itertools
import re


def _reflect(value: int, width: int) -> int:
    out = 0
    for i in range(width):
        if value >> i & 1:
            out |= 1 << (width - 1 - i)
    return out


def crc16_modbus(data: bytes) -> int:
    """MSB-first CRC with the unreflected polynomial on bit-reversed input."""
    reg = 0xFFFF
    for byte in data:
        reg ^= _reflect(byte, 8) << 8
        for _ in range(8):
            reg = ((reg << 1) ^ 0x8005) & 0xFFFF if reg & 0x8000 else (reg << 1) & 0xFFFF
    return _reflect(reg, 16)


def am2315_bits(frame: bytes):
    """Decode an AM2315 frame bit by bit; returns None for any invalid frame."""
    if len(frame) != 8:
        return None
    bits = [(b >> (7 - i)) & 1 for b in frame for i in range(8)]

    def word(start, n):
        v = 0
        for bit in bits[start:start + n]:
            v = v * 2 + bit
        return v

    crc = word(48, 8) | word(56, 8) << 8  # low octet first on the wire
    if crc != crc16_modbus(frame[:6]):
        return None
    if word(0, 8) != 0x03 or word(8, 8) != 0x04:
        return None
    humidity = word(16, 16) / 10
    if humidity > 100:
        return None
    magnitude = word(33, 15) / 10
    temperature = -magnitude if bits[32] else magnitude
    return humidity, temperature


def divider_volts(ohms: float, pullup: float = 10_000.0, vref: float = 3.3) -> float:
    return vref * ohms / (ohms + pullup)


def topic_matches_regex(topic_filter: str, topic: str) -> bool:
    """Translate the filter into an anchored regex and let ``re`` decide."""
    if topic.startswith("$") and topic_filter[:1] in ("+", "#"):
        return False
    parts = []
    levels = topic_filter.split("/")
    for i, lv in enumerate(levels):
        if lv == "#":
            assert i == len(levels) - 1
            # '#' also matches the parent level itself
            return re.fullmatch("/".join(parts) + "(/.*)?" if parts else ".*", topic) is not None
        parts.append("[^/]*" if lv == "+" else re.escape(lv))
    return re.fullmatch("/".join(parts), topic) is not None


def topic_corpus(alphabet=("a", "b", "$s", ""), max_levels=4):
    """Every topic of 1..max_levels levels over *alphabet*."""
    out = []
    for n in range(1, max_levels + 1):
        for combo in itertools.product(alphabet, repeat=n):
            t = "/".join(combo)
            if t and ("$" not in t or t.startswith("$")):
                out.append(t)
    return out


def filter_corpus(alphabet=("a", "b", "$s", "", "+"), max_levels=4):
    out = set()
    for n in range(1, max_levels + 1):
        for combo in itertools.product(alphabet, repeat=n):
            f = "/".join(combo)
            if f and ("$" not in f or f.startswith("$")):
                out.add(f)
            if n < max_levels:
                out.add("/".join(combo + ("#",)))
    out.add("#")
    return sorted(out)
