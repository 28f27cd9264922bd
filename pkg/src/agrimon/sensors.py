"""Quantification of raw weather-station signals into calibrated readings.

Covers the AM2315 temperature/humidity frame, the MCP3008 10-bit ADC, the
pyranometer voltage, the tipping-bucket rain gauge, the cup anemometer and the
resistor-ladder wind vane. Every function here is pure.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from agrimon.errors import BadHeader, CrcMismatch, NoMatch, OutOfRange, RangeError, ZeroWindow
from agrimon.kernels import crc16


class VariableKind(str, enum.Enum):
    TEMPERATURE = "temperature"
    HUMIDITY = "humidity"
    SOLAR_RADIATION = "solar_radiation"
    PRECIPITATION = "precipitation"
    WIND_SPEED = "wind_speed"
    WIND_DIRECTION = "wind_direction"

    @property
    def unit(self) -> str:
        return UNITS[self]


UNITS = {
    VariableKind.TEMPERATURE: "C",
    VariableKind.HUMIDITY: "%",
    VariableKind.SOLAR_RADIATION: "W/m2",
    VariableKind.PRECIPITATION: "mm",
    VariableKind.WIND_SPEED: "km/h",
    VariableKind.WIND_DIRECTION: "deg",
}

ADC_MAX_COUNTS = 1023
DEFAULT_VREF = 3.3

# Pyranometer analog span is 0..3 V; 5 % slack absorbs ADC noise.
IRRADIANCE_SPAN_V = 3.0
IRRADIANCE_SLACK = 0.05

AM2315_FUNCTION_CODE = 0x03
AM2315_BYTE_COUNT = 4
AM2315_FRAME_LEN = 8

# (ohms, degrees) for the 16 vane positions of the SEN-08942 assembly.
DEFAULT_VANE_ENTRIES = (
    (33_000, 0.0),
    (6_570, 22.5),
    (8_200, 45.0),
    (891, 67.5),
    (1_000, 90.0),
    (688, 112.5),
    (2_200, 135.0),
    (1_410, 157.5),
    (3_900, 180.0),
    (3_140, 202.5),
    (16_000, 225.0),
    (14_120, 247.5),
    (120_000, 270.0),
    (42_120, 292.5),
    (64_900, 315.0),
    (21_880, 337.5),
)


@dataclass(frozen=True)
class CalibrationTable:
    """Conversion constants for the analog and pulse sensors.

    ``vane_tolerance`` is the largest accepted gap, in volts, between a
    measured vane voltage and the nearest table entry. The table is checked at
    construction so that no two divider voltages (at ``DEFAULT_VREF``) are
    within ``2 * vane_tolerance`` of each other.
    """

    irradiance_scale: float = 0.00167  # V per W/m2
    rain_mm_per_tip: float = 0.2794  # 0.011 in
    speed_kmh_per_hz: float = 2.4
    vane_entries: tuple[tuple[float, float], ...] = DEFAULT_VANE_ENTRIES
    vane_pullup: float = 10_000.0
    vane_tolerance: float = 0.01

    def __post_init__(self):
        if self.irradiance_scale <= 0:
            raise ValueError("irradiance_scale must be positive")
        if self.rain_mm_per_tip <= 0:
            raise ValueError("rain_mm_per_tip must be positive")
        if self.speed_kmh_per_hz <= 0:
            raise ValueError("speed_kmh_per_hz must be positive")
        if self.vane_pullup <= 0 or self.vane_tolerance <= 0:
            raise ValueError("vane_pullup and vane_tolerance must be positive")
        entries = tuple((float(r), float(d)) for r, d in self.vane_entries)
        object.__setattr__(self, "vane_entries", entries)
        if not entries:
            raise ValueError("vane_entries is empty")
        dirs = [d for _, d in entries]
        if len(set(dirs)) != len(dirs):
            raise ValueError("vane directions must be distinct")
        if any(not 0.0 <= d < 360.0 for d in dirs):
            raise ValueError("vane directions must lie in [0, 360)")
        if any(r <= 0 for r, _ in entries):
            raise ValueError("vane resistances must be positive")
        gap = self.min_vane_gap(DEFAULT_VREF)
        if gap <= 2 * self.vane_tolerance:
            raise ValueError(
                f"vane divider voltages only {gap:.4f} V apart; "
                f"need more than 2 x tolerance ({2 * self.vane_tolerance:.4f} V)"
            )

    def divider_voltage(self, ohms: float, vref: float = DEFAULT_VREF) -> float:
        return vref * ohms / (ohms + self.vane_pullup)

    def min_vane_gap(self, vref: float = DEFAULT_VREF) -> float:
        volts = sorted(self.divider_voltage(r, vref) for r, _ in self.vane_entries)
        if len(volts) < 2:
            return float("inf")
        return min(b - a for a, b in zip(volts, volts[1:]))

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationTable":
        kwargs = {}
        keymap = {
            "irradiance_scale_v_per_wm2": "irradiance_scale",
            "rain_mm_per_tip": "rain_mm_per_tip",
            "speed_kmh_per_hz": "speed_kmh_per_hz",
            "vane_pullup_ohms": "vane_pullup",
            "vane_tolerance_v": "vane_tolerance",
        }
        unknown = set(data) - set(keymap) - {"vane_entries"}
        if unknown:
            raise ValueError(f"unknown calibration keys: {sorted(unknown)}")
        for key, attr in keymap.items():
            if key in data:
                kwargs[attr] = float(data[key])
        if "vane_entries" in data:
            kwargs["vane_entries"] = tuple(
                (float(e["ohms"]), float(e["degrees"])) for e in data["vane_entries"]
            )
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "irradiance_scale_v_per_wm2": self.irradiance_scale,
            "rain_mm_per_tip": self.rain_mm_per_tip,
            "speed_kmh_per_hz": self.speed_kmh_per_hz,
            "vane_pullup_ohms": self.vane_pullup,
            "vane_tolerance_v": self.vane_tolerance,
            "vane_entries": [{"ohms": r, "degrees": d} for r, d in self.vane_entries],
        }


DEFAULT_CALIBRATION = CalibrationTable()


@dataclass(frozen=True)
class AdcSample:
    counts: int
    vref: float = DEFAULT_VREF

    def __post_init__(self):
        if not 0 <= self.counts <= ADC_MAX_COUNTS:
            raise ValueError(f"ADC counts {self.counts} outside 0..{ADC_MAX_COUNTS}")
        if self.vref <= 0:
            raise ValueError("vref must be positive")


@dataclass(frozen=True)
class Reading:
    kind: VariableKind
    value: float
    captured_at: int = field(default=0)

    def __post_init__(self):
        check_range(self.kind, self.value)

    @property
    def units(self) -> str:
        return UNITS[self.kind]


def check_range(kind: VariableKind, value: float) -> None:
    """Raise ``RangeError`` if *value* is physically impossible for *kind*."""
    if value != value:
        raise RangeError(f"{kind.value} is NaN")
    if kind is VariableKind.HUMIDITY and not 0.0 <= value <= 100.0:
        raise RangeError(f"humidity {value} outside [0, 100]")
    if kind is VariableKind.WIND_DIRECTION and not 0.0 <= value < 360.0:
        raise RangeError(f"wind direction {value} outside [0, 360)")
    if kind in (VariableKind.PRECIPITATION, VariableKind.WIND_SPEED, VariableKind.SOLAR_RADIATION):
        if value < 0.0:
            raise RangeError(f"{kind.value} {value} is negative")


# -- AM2315 -------------------------------------------------------------------


def encode_am2315(raw_humidity: int, raw_temperature: int) -> bytes:
    """Build a combined-read response frame from raw tenths.

    *raw_temperature* is signed; negative values set the top bit of the
    magnitude word (sign-magnitude, not two's complement).
    """
    if not 0 <= raw_humidity <= 0xFFFF:
        raise ValueError("raw humidity must fit 16 bits")
    if abs(raw_temperature) > 0x7FFF:
        raise ValueError("raw temperature magnitude must fit 15 bits")
    temp_word = abs(raw_temperature) | (0x8000 if raw_temperature < 0 else 0)
    body = struct.pack(">BBHH", AM2315_FUNCTION_CODE, AM2315_BYTE_COUNT, raw_humidity, temp_word)
    return body + struct.pack("<H", crc16(body))


def decode_am2315(frame: bytes) -> tuple[float, float]:
    """Return ``(humidity %, temperature C)`` from an 8-octet AM2315 frame."""
    if len(frame) != AM2315_FRAME_LEN:
        raise BadHeader(f"AM2315 frame must be {AM2315_FRAME_LEN} octets, got {len(frame)}")
    (expected,) = struct.unpack_from("<H", frame, 6)
    actual = crc16(frame[:6])
    if actual != expected:
        raise CrcMismatch(f"AM2315 CRC {actual:#06x} != {expected:#06x}")
    func, count, raw_h, raw_t = struct.unpack_from(">BBHH", frame, 0)
    if func != AM2315_FUNCTION_CODE or count != AM2315_BYTE_COUNT:
        raise BadHeader(f"unexpected AM2315 header {func:#04x}/{count}")
    humidity = raw_h / 10
    if humidity > 100.0:
        raise RangeError(f"humidity {humidity} > 100")
    temperature = (raw_t & 0x7FFF) / 10
    if raw_t & 0x8000:
        temperature = -temperature
    return humidity, temperature


# -- analog and pulse channels --------------------------------------------------


def adc_to_volts(sample: AdcSample) -> float:
    return sample.counts * sample.vref / ADC_MAX_COUNTS


def volts_to_irradiance(v: float, cal: CalibrationTable = DEFAULT_CALIBRATION) -> float:
    limit = IRRADIANCE_SPAN_V * (1 + IRRADIANCE_SLACK)
    if v < 0 or v > limit:
        raise OutOfRange(f"pyranometer voltage {v} outside [0, {limit}]")
    return v / cal.irradiance_scale


def tips_to_rain(tips: int, cal: CalibrationTable = DEFAULT_CALIBRATION) -> float:
    if tips < 0:
        raise ValueError("tip count cannot be negative")
    return tips * cal.rain_mm_per_tip


def pulses_to_wind_speed(
    pulses: int, window: float, cal: CalibrationTable = DEFAULT_CALIBRATION
) -> float:
    """Mean wind speed in km/h from anemometer closures counted over *window* seconds."""
    if window <= 0:
        raise ZeroWindow(f"anemometer window must be positive, got {window}")
    if pulses < 0:
        raise ValueError("pulse count cannot be negative")
    return (pulses / window) * cal.speed_kmh_per_hz


def vane_to_direction(
    v: float, vref: float = DEFAULT_VREF, cal: CalibrationTable = DEFAULT_CALIBRATION
) -> float:
    """Heading in degrees for the vane divider voltage *v*.

    Picks the table entry whose divider voltage is nearest to *v*; raises
    ``NoMatch`` when even the nearest is further than ``cal.vane_tolerance``
    (open circuit or a broken reed switch).
    """
    if not 0 <= v <= vref:
        raise NoMatch(f"vane voltage {v} outside [0, {vref}]")
    best_gap = float("inf")
    best_dir = None
    for ohms, degrees in cal.vane_entries:
        gap = abs(cal.divider_voltage(ohms, vref) - v)
        if gap < best_gap:
            best_gap, best_dir = gap, degrees
    if best_gap > cal.vane_tolerance:
        raise NoMatch(f"vane voltage {v:.4f} V matches no table entry")
    return best_dir


def volts_to_counts(v: float, vref: float = DEFAULT_VREF) -> int:
    """Nearest ADC code for an analog voltage, saturating at the rails."""
    return max(0, min(ADC_MAX_COUNTS, round(v * ADC_MAX_COUNTS / vref)))
