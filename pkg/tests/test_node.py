import json
import math

import pytest
from hypothesis import given, strategies as st

from agrimon.node import (
    MAX_PACKET_OCTETS, DataPacket, NodeConfig, ParseError, Sampler, SyntheticEnvironment,
    TraceReplay, parse_packet, round_sig, sample_once, sample_times, serialize_packet,
)
from agrimon.sensors import (
    DEFAULT_CALIBRATION, UNITS, AdcSample, VariableKind, adc_to_volts, encode_am2315,
    pulses_to_wind_speed, tips_to_rain, volts_to_counts, volts_to_irradiance,
)
from agrimon.errors import OutOfRange
from agrimon.transport import Protocol

FIXTURE = (b'{"name":"temperature","units":"C","value":27.7,"captured_at":1000,'
           b'"protocol":"zigbee","node_id":"n1"}')
LATEST_MS = 9_999_999_999_999  # 13-digit UTC milliseconds, good until 2286


class ConstantSource:
    """Raw signals that never change, except for monotone counters."""

    def __init__(self, frame=None, irr_counts=1, vane_counts=None, tips_per_s=0, pulses_per_s=0):
        self.frame = frame or encode_am2315(825, 277)
        self.irr = AdcSample(irr_counts)
        self.vane = AdcSample(vane_counts if vane_counts is not None else volts_to_counts(
            3.3 * 33_000 / 43_000))
        self.tips_per_s, self.pulses_per_s = tips_per_s, pulses_per_s

    def read(self, kind, t):
        kind = VariableKind(kind)
        return {
            VariableKind.TEMPERATURE: self.frame,
            VariableKind.HUMIDITY: self.frame,
            VariableKind.SOLAR_RADIATION: self.irr,
            VariableKind.WIND_DIRECTION: self.vane,
            VariableKind.PRECIPITATION: self.tips_per_s * t // 1000,
            VariableKind.WIND_SPEED: self.pulses_per_s * t // 1000,
        }[kind]


def test_fixture_parses():
    p = parse_packet(FIXTURE)
    assert p == DataPacket("temperature", "C", 27.7, 1000, Protocol.ZIGBEE, "n1")
    assert serialize_packet(p) == FIXTURE


packets = st.builds(
    DataPacket,
    st.sampled_from([k.value for k in VariableKind]),
    st.sampled_from(list(UNITS.values())),
    st.floats(allow_nan=False, allow_infinity=False),
    st.integers(0, LATEST_MS),
    st.sampled_from(list(Protocol)),
    st.from_regex(r"[A-Za-z0-9_-]{1,6}", fullmatch=True),
)


@given(packets)
def test_roundtrip(p):
    data = serialize_packet(p)
    assert parse_packet(data) == p
    assert list(json.loads(data)) == ["name", "units", "value", "captured_at", "protocol", "node_id"]


@pytest.mark.parametrize(
    "data,frag",
    [
        (FIXTURE.replace(b'"units":"C",', b""), "missing key 'units'"),
        (FIXTURE[:-1] + b',"extra":1}', "unknown key"),
        (FIXTURE.replace(b"27.7", b'"27.7"'), "value"),
        (FIXTURE.replace(b"1000", b"-5"), "captured_at"),
        (FIXTURE.replace(b"1000", b"1000.5"), "captured_at"),
        (FIXTURE.replace(b"zigbee", b"lora"), "protocol"),
        (FIXTURE.replace(b"27.7", b"NaN"), "value"),
        (b"[1,2]", "not a JSON object"),
        (b"\xff", "UTF-8"),
        (FIXTURE[:-1] + b',"name":"x"}', "duplicate"),
    ],
)
def test_parse_errors(data, frag):
    with pytest.raises(ParseError, match=frag) as exc:
        parse_packet(data)
    assert 0 <= exc.value.offset <= len(data)


def test_parse_error_offset_points_at_problem():
    data = b'{"name":"temperature",}'
    with pytest.raises(ParseError) as exc:
        parse_packet(data)
    assert exc.value.offset == data.index(b"}")


def test_node_config_invariants():
    with pytest.raises(ValueError):
        NodeConfig("n1", "wifi", sample_interval_ms=999)
    with pytest.raises(ValueError):
        NodeConfig("n1", "wifi", sensors=())
    with pytest.raises(ValueError):
        NodeConfig("n1", "wifi", sensors=("humidity", "humidity"))
    with pytest.raises(ValueError):
        NodeConfig("toolong7", "wifi")
    with pytest.raises(ValueError):
        NodeConfig("n1", "lora")


def test_sample_once_six_packets_with_units():
    cfg = NodeConfig("n1", "zigbee")
    pkts, faults = sample_once(cfg, ConstantSource(), 12_000)
    assert faults == 0
    assert [(p.name, p.units) for p in pkts] == [(k.value, UNITS[k]) for k in VariableKind]
    assert all(p.captured_at == 12_000 and p.protocol is Protocol.ZIGBEE for p in pkts)


def test_irradiance_scale_through_the_node():
    class Volts(ConstantSource):
        def read(self, kind, t):
            return 0.00167 if kind is VariableKind.SOLAR_RADIATION else super().read(kind, t)

    cfg = NodeConfig("n1", "wifi", sensors=("solar_radiation",))
    [p], _ = sample_once(cfg, Volts(), 0)
    assert p.value == 1.0


def test_corrupt_am2315_frame_drops_both_variables():
    bad = bytearray(encode_am2315(825, 277))
    bad[3] ^= 0x10
    pkts, faults = sample_once(NodeConfig("n1", "wifi"), ConstantSource(frame=bytes(bad)), 0)
    assert len(pkts) == 4 and faults == 1
    assert {p.name for p in pkts}.isdisjoint({"temperature", "humidity"})


def test_rain_delta_and_wind_window():
    cfg = NodeConfig("n1", "wifi", sample_interval_ms=10_000)
    s = Sampler(cfg, ConstantSource(tips_per_s=1, pulses_per_s=3))
    s.initialize(0)
    got = {p.name: p.value for p in s.sample_once(10_000)}
    assert got["precipitation"] == round_sig(tips_to_rain(10))
    assert got["wind_speed"] == round_sig(pulses_to_wind_speed(30, 10))


def test_sample_times():
    assert len(sample_times(0, 420_000, 12_000)) == 36
    assert sample_times(5, 5, 12_000) == [5]
    ts = sample_times(1000, 50_000, 7000)
    assert ts[-1] - ts[0] == (len(ts) - 1) * 7000


def test_synthetic_environment_is_pure():
    a = SyntheticEnvironment(3, "n1")
    b = SyntheticEnvironment(3, "n1")
    for t in (0, 12_000, 999_999):
        for k in VariableKind:
            assert a.read(k, t) == b.read(k, t)


def test_rain_conservation_over_a_run():
    cfg = NodeConfig("n1", "zigbee")
    env = SyntheticEnvironment(5, "n1")
    s = Sampler(cfg, env)
    s.initialize(-12_000)
    total = 0.0
    for t in sample_times(0, 3_600_000, 12_000):
        total += sum(p.value for p in s.sample_once(t) if p.name == "precipitation")
    assert s.rain_tips_total > 0
    assert math.isclose(total, s.rain_tips_total * DEFAULT_CALIBRATION.rain_mm_per_tip, rel_tol=1e-9)


def test_trace_replay(tmp_path):
    p = tmp_path / "trace.jsonl"
    recs = [
        {"t": 0, "kind": "temperature", "raw": encode_am2315(500, -57).hex()},
        {"t": 0, "kind": "solar_radiation", "raw": {"counts": 100}},
        {"t": -12000, "kind": "precipitation", "raw": 4},
        {"t": 0, "kind": "precipitation", "raw": 6},
    ]
    p.write_text("\n".join(json.dumps(r) for r in recs))
    cfg = NodeConfig("n1", "wifi", sensors=("temperature", "humidity", "solar_radiation", "precipitation"))
    pkts, faults = sample_once(cfg, TraceReplay.load(p), 0)
    got = {q.name: q.value for q in pkts}
    assert faults == 0
    assert got["temperature"] == -5.7 and got["humidity"] == 50.0
    assert got["precipitation"] == round_sig(2 * 0.2794)
    # a missing record is a sensor fault, not a crash
    _, faults = sample_once(cfg, TraceReplay.load(p), 12_000)
    assert faults >= 1


def _reachable_values():
    """Every value the default codecs can emit, per variable, at worst-case widths."""
    out = {k: set() for k in VariableKind}
    for raw in range(-32767, 32768):
        out[VariableKind.TEMPERATURE].add(raw / 10)
    for raw in range(0, 1001):
        out[VariableKind.HUMIDITY].add(raw / 10)
    for counts in range(1024):
        try:
            out[VariableKind.SOLAR_RADIATION].add(volts_to_irradiance(adc_to_volts(AdcSample(counts))))
        except OutOfRange:
            pass
    out[VariableKind.WIND_DIRECTION] = {d for _, d in DEFAULT_CALIBRATION.vane_entries}
    for tips in range(0, 20_000):
        out[VariableKind.PRECIPITATION].add(tips_to_rain(tips))
    for window in (1, 12, 60, 3600, 86_400):
        for pulses in range(0, 3000):
            out[VariableKind.WIND_SPEED].add(pulses_to_wind_speed(pulses, window))
    return out


def test_worst_case_packet_fits_one_zigbee_frame():
    worst = 0
    for kind, values in _reachable_values().items():
        widest = max(values, key=lambda v: len(serialize_packet(
            DataPacket(kind.value, UNITS[kind], v, 0, Protocol.WIFI, "n"))))
        for proto in Protocol:
            p = DataPacket(kind.value, UNITS[kind], widest, LATEST_MS, proto, "x" * 6)
            worst = max(worst, len(serialize_packet(p)))
    assert worst <= MAX_PACKET_OCTETS


def test_oversize_packets_are_withheld():
    from agrimon.sensors import CalibrationTable

    cal = CalibrationTable(irradiance_scale=1e-12)
    cfg = NodeConfig("abcdef", "bluetooth", sensors=("solar_radiation",), calibration=cal)

    class Odd(ConstantSource):
        def read(self, kind, t):
            return AdcSample(7)

    s = Sampler(cfg, Odd())
    assert s.sample_once(LATEST_MS) == [] and s.oversize == 1 and s.faults == 1
