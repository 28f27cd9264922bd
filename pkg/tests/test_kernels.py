import pytest
from hypothesis import given, strategies as st

from agrimon import kernels as active
from agrimon.errors import Malformed, Truncated, VarintOutOfRange
from oracles import crc16_modbus, filter_corpus, topic_corpus, topic_matches_regex

VARINT_BOUNDARIES = {
    0: b"\x00",
    127: b"\x7f",
    128: b"\x80\x01",
    16_383: b"\xff\x7f",
    16_384: b"\x80\x80\x01",
    2_097_151: b"\xff\xff\x7f",
    2_097_152: b"\x80\x80\x80\x01",
    268_435_455: b"\xff\xff\xff\x7f",
}


def test_active_backend_is_known():
    assert active.BACKEND in ("cython", "python")


def test_crc_golden(kernels):
    assert kernels.crc16(bytes([0x03, 0x04, 0x03, 0x39, 0x01, 0x15])) == 0xFEE1
    assert kernels.crc16(b"123456789") == 0x4B37
    assert kernels.crc16(b"") == 0xFFFF


@given(st.binary(max_size=64))
def test_crc_matches_oracle(kernels, data):
    assert kernels.crc16(data) == crc16_modbus(data)


@given(st.binary(min_size=1, max_size=32))
def test_crc_residue_is_zero(kernels, data):
    c = kernels.crc16(data)
    assert kernels.crc16(data + bytes([c & 0xFF, c >> 8])) == 0


def test_crc_detects_every_single_bit_flip(kernels):
    frame = bytes([0x03, 0x04, 0x03, 0x39, 0x01, 0x15])
    good = kernels.crc16(frame)
    for bit in range(len(frame) * 8):
        bad = bytearray(frame)
        bad[bit // 8] ^= 1 << (bit % 8)
        assert kernels.crc16(bytes(bad)) != good


@pytest.mark.parametrize("n,enc", VARINT_BOUNDARIES.items())
def test_varint_boundaries(kernels, n, enc):
    assert kernels.encode_remaining_length(n) == enc
    assert kernels.decode_remaining_length(enc) == (n, len(enc))
    assert kernels.decode_remaining_length(b"\xaa" + enc + b"\x00", 1) == (n, len(enc))


@pytest.mark.parametrize("n", [-1, 268_435_456, 2**40])
def test_varint_out_of_range(kernels, n):
    with pytest.raises(VarintOutOfRange):
        kernels.encode_remaining_length(n)


def test_varint_truncated_and_malformed(kernels):
    for buf in (b"", b"\x80", b"\xff\xff", b"\xff\xff\xff"):
        with pytest.raises(Truncated):
            kernels.decode_remaining_length(buf)
    with pytest.raises(Malformed):
        kernels.decode_remaining_length(b"\xff\xff\xff\xff\x01")


@given(st.integers(0, 268_435_455))
def test_varint_roundtrip(kernels, n):
    enc = kernels.encode_remaining_length(n)
    assert 1 <= len(enc) <= 4
    assert kernels.decode_remaining_length(enc) == (n, len(enc))


@pytest.mark.parametrize(
    "f,t,want",
    [
        ("station/+/temperature", "station/n1/temperature", True),
        ("station/#", "station", True),
        ("station/#", "station/n1/humidity", True),
        ("station/+", "station/n1/humidity", False),
        ("#", "$SYS/load", False),
        ("+/load", "$SYS/load", False),
        ("$SYS/#", "$SYS/load", True),
        ("a/+", "a/", True),
        ("+", "", True),
        ("a", "a/b", False),
    ],
)
def test_topic_examples(kernels, f, t, want):
    assert kernels.topic_matches(f, t) is want


def test_topic_matches_regex_oracle_exhaustively(kernels):
    topics = topic_corpus()
    filters = filter_corpus()
    mismatches = [
        (f, t) for f in filters for t in topics
        if kernels.topic_matches(f, t) != topic_matches_regex(f, t)
    ]
    assert not mismatches, mismatches[:10]


def test_backends_agree_on_corpus():
    from agrimon import _purepy

    for f in filter_corpus():
        for t in topic_corpus():
            assert active.topic_matches(f, t) == _purepy.topic_matches(f, t)


def test_env_var_forces_python_fallback():
    import os
    import subprocess
    import sys

    env = dict(os.environ, AGRIMON_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from agrimon import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == "python"
