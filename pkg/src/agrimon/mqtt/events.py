"""Inputs and outputs of the broker and client state machines.

All times are integer milliseconds on whatever clock the host drives
(scenario clock in simulation, wall clock in live mode).
"""

from __future__ import annotations

from dataclasses import dataclass

from agrimon.mqtt.packets import Packet

RETRY_TIMEOUT_MS = 5_000
MAX_RETRIES = 5


# -- events ---------------------------------------------------------------------


@dataclass(frozen=True)
class ClientConnected:
    conn: str
    now: int


@dataclass(frozen=True)
class ConnectionLost:
    conn: str
    now: int


@dataclass(frozen=True)
class PacketIn:
    packet: Packet
    now: int
    conn: str | None = None


@dataclass(frozen=True)
class Tick:
    now: int


@dataclass(frozen=True)
class ConnectRequest:
    now: int


@dataclass(frozen=True)
class PublishRequest:
    topic: str
    payload: bytes
    qos: int
    now: int


@dataclass(frozen=True)
class SubscribeRequest:
    filters: tuple[tuple[str, int], ...]
    now: int


@dataclass(frozen=True)
class DisconnectRequest:
    now: int


# -- actions --------------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    packet: Packet
    conn: str | None = None


@dataclass(frozen=True)
class Close:
    conn: str
    reason: str


@dataclass(frozen=True)
class Deliver:
    topic: str
    payload: bytes
    qos: int
    dup: bool = False


@dataclass(frozen=True)
class SignalError:
    reason: str
