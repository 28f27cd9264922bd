"""Sensing node: initialise, measure, quantify, publish.

A node reads its raw sensor signals from a ``SensorSource``, converts them
with :mod:`agrimon.sensors`, wraps every reading in a ``DataPacket`` and
publishes it on ``station/<node_id>/<name>`` over its single link.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from typing import Protocol as TypingProtocol

from agrimon.errors import AgrimonError, SensorError
from agrimon.sensors import (
    DEFAULT_CALIBRATION,
    DEFAULT_VREF,
    UNITS,
    AdcSample,
    CalibrationTable,
    VariableKind,
    adc_to_volts,
    check_range,
    decode_am2315,
    encode_am2315,
    pulses_to_wind_speed,
    tips_to_rain,
    vane_to_direction,
    volts_to_counts,
    volts_to_irradiance,
)
from agrimon.transport import Protocol

TOPIC_ROOT = "station"
NODE_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,6}$")
# every payload must fit one zigbee frame unfragmented
MAX_PACKET_OCTETS = 128
PACKET_KEYS = ("name", "units", "value", "captured_at", "protocol", "node_id")
SIGNIFICANT_DIGITS = 6
ALL_SENSORS = tuple(VariableKind)


class ParseError(AgrimonError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class LinkDown(AgrimonError):
    pass


def round_sig(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    return float(f"{value:.{digits}g}")


def topic_for(node_id: str, name: str) -> str:
    return f"{TOPIC_ROOT}/{node_id}/{name}"


# -- configuration and packets ----------------------------------------------------


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    protocol: Protocol
    sample_interval_ms: int = 12_000
    sensors: tuple[VariableKind, ...] = ALL_SENSORS
    calibration: CalibrationTable = DEFAULT_CALIBRATION
    qos: int = 1

    def __post_init__(self):
        if not NODE_ID_RE.match(self.node_id) or self.node_id == "gateway":
            raise ValueError(f"node id {self.node_id!r} must be 1-6 characters of [A-Za-z0-9_-]")
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        sensors = tuple(VariableKind(s) for s in self.sensors)
        object.__setattr__(self, "sensors", sensors)
        if not sensors:
            raise ValueError("a node needs at least one sensor")
        if len(set(sensors)) != len(sensors):
            raise ValueError("duplicate sensors in node config")
        if self.sample_interval_ms < 1000:
            raise ValueError("sample_interval_ms must be at least 1000")
        if self.qos not in (0, 1):
            raise ValueError("qos must be 0 or 1")


@dataclass(frozen=True)
class DataPacket:
    """One quantified measurement as carried on the wire.

    ``value`` is normalised to six significant digits on construction so
    that serialisation round-trips exactly.
    """

    name: str
    units: str
    value: float
    captured_at: int
    protocol: Protocol
    node_id: str

    def __post_init__(self):
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise TypeError("value must be a number")
        if not math.isfinite(self.value):
            raise ValueError("value must be finite")
        object.__setattr__(self, "value", round_sig(self.value))
        object.__setattr__(self, "protocol", Protocol(self.protocol))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.node_id, self.name, self.captured_at)

    @property
    def topic(self) -> str:
        return topic_for(self.node_id, self.name)


def _fmt_value(v: float) -> str:
    # ".6g" keeps large magnitudes in exponent form where repr would not
    return format(v, f".{SIGNIFICANT_DIGITS}g")


def serialize_packet(p: DataPacket) -> bytes:
    s = json.dumps
    text = (
        f'{{"name":{s(p.name, ensure_ascii=False)},"units":{s(p.units, ensure_ascii=False)},'
        f'"value":{_fmt_value(p.value)},"captured_at":{p.captured_at},'
        f'"protocol":"{p.protocol.value}","node_id":{s(p.node_id, ensure_ascii=False)}}}'
    )
    return text.encode("utf-8")


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def parse_packet(data: bytes) -> DataPacket:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("payload is not UTF-8", exc.start) from None

    def pairs(items):
        seen = {}
        for k, v in items:
            if k in seen:
                raise ParseError(f"duplicate key {k!r}", _byte_offset(text, text.find(f'"{k}"')))
            seen[k] = v
        return seen

    try:
        obj = json.loads(text, object_pairs_hook=pairs)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, _byte_offset(text, exc.pos)) from None
    if not isinstance(obj, dict):
        raise ParseError("payload is not a JSON object", 0)
    for k in obj:
        if k not in PACKET_KEYS:
            raise ParseError(f"unknown key {k!r}", _byte_offset(text, text.find(f'"{k}"')))
    for k in PACKET_KEYS:
        if k not in obj:
            raise ParseError(f"missing key {k!r}", len(data))

    def bad(k, why):
        return ParseError(f"{k}: {why}", _byte_offset(text, text.find(f'"{k}"')))

    for k in ("name", "units", "protocol", "node_id"):
        if not isinstance(obj[k], str):
            raise bad(k, "must be a string")
    value = obj["value"]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise bad("value", "must be a finite number")
    ts = obj["captured_at"]
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        raise bad("captured_at", "must be a non-negative integer")
    try:
        protocol = Protocol(obj["protocol"])
    except ValueError:
        raise bad("protocol", f"unknown protocol {obj['protocol']!r}") from None
    return DataPacket(obj["name"], obj["units"], float(value), ts, protocol, obj["node_id"])


# -- sensor sources ---------------------------------------------------------------


class SensorSource(TypingProtocol):
    """Produces the raw signal of one sensor at one instant.

    Raw signal types: ``bytes`` (AM2315 frame, for temperature and humidity),
    ``AdcSample`` or ``float`` volts (solar radiation, wind direction), and
    ``int`` cumulative counters (rain tips, anemometer closures).
    """

    def read(self, kind: VariableKind, t: int): ...


@dataclass(frozen=True)
class SiteModel:
    """Knobs of the synthetic weather.

    Each signal is a slow sinusoid shared by all nodes of a site, plus a
    per-node constant offset, plus noise drawn from a Gaussian truncated at
    three standard deviations. With the defaults two nodes of one site differ
    by at most 0.06 + 0.12 C of true temperature and 0.2 + 0.48 % of true
    humidity, before the sensor's 0.1-unit quantisation.
    """

    period_ms: int = 1_800_000
    temp_mean: float = 18.5
    temp_amp: float = 2.5
    temp_offset: float = 0.03
    temp_noise: float = 0.02
    hum_mean: float = 72.0
    hum_amp: float = 8.0
    hum_offset: float = 0.1
    hum_noise: float = 0.08
    irr_mean: float = 520.0
    irr_amp: float = 180.0
    irr_offset: float = 15.0
    irr_noise: float = 12.0
    wind_hz: float = 2.0
    wind_amp_hz: float = 1.2
    wind_node_spread: float = 0.15
    rain_tips_per_hour: float = 9.0
    vane_hold_ms: int = 90_000


class SyntheticEnvironment:
    """Deterministic weather for one node: a pure function of (seed, node, kind, t).

    Nodes built with the same *seed* share the site-wide signal and differ
    only by their node-specific offsets and noise. ``frame_error_rate``
    corrupts one bit of the AM2315 frame with that probability per read.
    """

    def __init__(self, seed: int, node_id: str, site: SiteModel | None = None,
                 frame_error_rate: float = 0.0, vref: float = DEFAULT_VREF,
                 calibration: CalibrationTable = DEFAULT_CALIBRATION):
        self.seed = seed
        self.node_id = node_id
        self.site = site or SiteModel()
        self.frame_error_rate = frame_error_rate
        self.vref = vref
        self.cal = calibration
        r = random.Random(f"{seed}:{node_id}:offsets")
        s = self.site
        self._temp_off = r.uniform(-s.temp_offset, s.temp_offset)
        self._hum_off = r.uniform(-s.hum_offset, s.hum_offset)
        self._irr_off = r.uniform(-s.irr_offset, s.irr_offset)
        self._wind_scale = 1 + r.uniform(-s.wind_node_spread, s.wind_node_spread)
        self._wind_phase = r.uniform(0, 0.5)
        self._rain_scale = 1 + r.uniform(-0.2, 0.2)
        self._vane_shift = r.randrange(2)

    def _noise(self, kind: str, t: int, sigma: float) -> float:
        g = random.Random(f"{self.seed}:{self.node_id}:{kind}:{t}").gauss(0.0, sigma)
        return max(-3 * sigma, min(3 * sigma, g))

    def _wave(self, t: int) -> float:
        return math.sin(2 * math.pi * t / self.site.period_ms)

    def temperature(self, t: int) -> float:
        s = self.site
        return s.temp_mean + s.temp_amp * self._wave(t) + self._temp_off + self._noise("t", t, s.temp_noise)

    def humidity(self, t: int) -> float:
        s = self.site
        h = s.hum_mean - s.hum_amp * self._wave(t) + self._hum_off + self._noise("h", t, s.hum_noise)
        return max(0.0, min(100.0, h))

    def irradiance(self, t: int) -> float:
        s = self.site
        w = s.irr_mean + s.irr_amp * self._wave(t) + self._irr_off + self._noise("i", t, s.irr_noise)
        return max(0.0, w)

    def wind_pulses(self, t: int) -> int:
        # closed-form integral of rate(t) = k * (mean + amp * sin(w t + phase))
        s = self.site
        period_s = s.period_ms / 1000
        w = 2 * math.pi / period_s
        ts = t / 1000
        integral = s.wind_hz * ts - (s.wind_amp_hz / w) * (
            math.cos(w * ts + self._wind_phase) - math.cos(self._wind_phase)
        )
        return math.floor(self._wind_scale * integral)

    def rain_tips(self, t: int) -> int:
        rate = self.site.rain_tips_per_hour * self._rain_scale / 3_600_000
        return math.floor(rate * t)

    def vane_index(self, t: int) -> int:
        n = len(self.cal.vane_entries)
        return (t // self.site.vane_hold_ms + self._vane_shift) % n

    def read(self, kind: VariableKind, t: int):
        kind = VariableKind(kind)
        if kind in (VariableKind.TEMPERATURE, VariableKind.HUMIDITY):
            t_raw = round(self.temperature(t) * 10)
            h_raw = round(self.humidity(t) * 10)
            frame = bytearray(encode_am2315(h_raw, t_raw))
            if self.frame_error_rate:
                r = random.Random(f"{self.seed}:{self.node_id}:fault:{t}")
                if r.random() < self.frame_error_rate:
                    bit = r.randrange(len(frame) * 8)
                    frame[bit // 8] ^= 1 << (bit % 8)
            return bytes(frame)
        if kind is VariableKind.SOLAR_RADIATION:
            volts = min(3.0, self.irradiance(t) * self.cal.irradiance_scale)
            return AdcSample(volts_to_counts(volts, self.vref), self.vref)
        if kind is VariableKind.WIND_SPEED:
            return self.wind_pulses(t)
        if kind is VariableKind.PRECIPITATION:
            return self.rain_tips(t)
        ohms, _ = self.cal.vane_entries[self.vane_index(t)]
        return AdcSample(volts_to_counts(self.cal.divider_voltage(ohms, self.vref), self.vref), self.vref)


class TraceReplay:
    """Replays recorded raw signals.

    *records* is an iterable of ``{"t": ms, "kind": name, "raw": value}``
    where ``raw`` is a hex string (AM2315 frame), an integer counter, a
    float voltage or ``{"counts": n, "vref": v}``.
    """

    def __init__(self, records):
        self._data = {}
        for rec in records:
            raw = rec["raw"]
            kind = VariableKind(rec["kind"])
            if kind in (VariableKind.TEMPERATURE, VariableKind.HUMIDITY) and isinstance(raw, str):
                raw = bytes.fromhex(raw)
            elif isinstance(raw, dict):
                raw = AdcSample(int(raw["counts"]), float(raw.get("vref", DEFAULT_VREF)))
            self._data[(kind, int(rec["t"]))] = raw

    @classmethod
    def load(cls, path) -> "TraceReplay":
        with open(path, encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def read(self, kind: VariableKind, t: int):
        try:
            return self._data[(VariableKind(kind), t)]
        except KeyError:
            raise SensorError(f"no recorded {VariableKind(kind).value} signal at t={t}") from None


# -- measurement routine --------------------------------------------------------------


def _analog_volts(raw) -> float:
    return adc_to_volts(raw) if isinstance(raw, AdcSample) else float(raw)


class Sampler:
    """Measurement state of one node between samples.

    The pulse counters are read once at ``initialize`` to set the baseline;
    every later sample reports rain and wind over the interval since the
    previous read.
    """

    def __init__(self, cfg: NodeConfig, source: SensorSource):
        self.cfg = cfg
        self.source = source
        self.faults = 0
        self.oversize = 0
        self.rain_tips_total = 0
        self._prev_t: int | None = None
        self._prev_tips: int | None = None
        self._prev_pulses: int | None = None

    def initialize(self, t: int) -> None:
        self._prev_t = t
        if VariableKind.PRECIPITATION in self.cfg.sensors:
            self._prev_tips = self.source.read(VariableKind.PRECIPITATION, t)
        if VariableKind.WIND_SPEED in self.cfg.sensors:
            self._prev_pulses = self.source.read(VariableKind.WIND_SPEED, t)

    def sample_once(self, t: int) -> list[DataPacket]:
        if self._prev_t is None:
            self.initialize(t - self.cfg.sample_interval_ms)
        cfg, cal = self.cfg, self.cfg.calibration
        readings: dict[VariableKind, float] = {}
        sensors = set(cfg.sensors)

        if sensors & {VariableKind.TEMPERATURE, VariableKind.HUMIDITY}:
            # one combined AM2315 read serves both variables
            am_kind = VariableKind.TEMPERATURE if VariableKind.TEMPERATURE in sensors else VariableKind.HUMIDITY
            try:
                humidity, temperature = decode_am2315(self.source.read(am_kind, t))
            except SensorError:
                self.faults += 1
            else:
                readings[VariableKind.HUMIDITY] = humidity
                readings[VariableKind.TEMPERATURE] = temperature

        for kind in cfg.sensors:
            try:
                if kind is VariableKind.SOLAR_RADIATION:
                    readings[kind] = volts_to_irradiance(_analog_volts(self.source.read(kind, t)), cal)
                elif kind is VariableKind.WIND_DIRECTION:
                    raw = self.source.read(kind, t)
                    vref = raw.vref if isinstance(raw, AdcSample) else DEFAULT_VREF
                    readings[kind] = vane_to_direction(_analog_volts(raw), vref, cal)
                elif kind is VariableKind.PRECIPITATION:
                    tips = self.source.read(kind, t)
                    delta = tips - self._prev_tips
                    self._prev_tips = tips
                    readings[kind] = tips_to_rain(delta, cal)
                    self.rain_tips_total += delta
                elif kind is VariableKind.WIND_SPEED:
                    pulses = self.source.read(kind, t)
                    delta = pulses - self._prev_pulses
                    self._prev_pulses = pulses
                    readings[kind] = pulses_to_wind_speed(delta, (t - self._prev_t) / 1000, cal)
            except (SensorError, ValueError):
                self.faults += 1
        self._prev_t = t

        packets = []
        for kind in cfg.sensors:
            if kind not in readings:
                continue
            try:
                check_range(kind, readings[kind])
            except SensorError:
                self.faults += 1
                continue
            packet = DataPacket(kind.value, UNITS[kind], readings[kind], t, cfg.protocol, cfg.node_id)
            if len(serialize_packet(packet)) > MAX_PACKET_OCTETS:
                self.faults += 1
                self.oversize += 1
                continue
            packets.append(packet)
        return packets


def sample_once(cfg: NodeConfig, source: SensorSource, t: int,
                previous_t: int | None = None) -> tuple[list[DataPacket], int]:
    """One measure-and-quantify pass. Returns ``(packets, fault_count)``.

    Counter baselines are read at *previous_t*, which defaults to one
    sampling interval before *t*.
    """
    sampler = Sampler(cfg, source)
    sampler.initialize(t - cfg.sample_interval_ms if previous_t is None else previous_t)
    packets = sampler.sample_once(t)
    return packets, sampler.faults


@dataclass
class NodeReport:
    node_id: str
    protocol: str
    samples: int = 0
    published: int = 0
    faults: int = 0
    retransmissions: int = 0
    errors: list[str] = field(default_factory=list)
    link_down: bool = False
    rain_tips_total: int = 0

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "protocol": self.protocol,
            "samples": self.samples,
            "published": self.published,
            "faults": self.faults,
            "retransmissions": self.retransmissions,
            "errors": len(self.errors),
            "link_down": self.link_down,
        }


def sample_times(t0: int, until: int, interval_ms: int) -> list[int]:
    """Sampling instants t0, t0 + interval, ... up to and including *until*."""
    if until < t0:
        return []
    return list(range(t0, until + 1, interval_ms))


def default_source(cfg: NodeConfig, seed: int, site: SiteModel | None = None,
                   frame_error_rate: float = 0.0) -> SyntheticEnvironment:
    return SyntheticEnvironment(seed, cfg.node_id, site, frame_error_rate, calibration=cfg.calibration)
