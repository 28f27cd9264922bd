"""Simulated star-topology radio links.

A ``SimWorld`` owns one integer-millisecond clock, one seeded random source
and every frame in flight. Nodes attach over exactly one protocol; the
gateway owns one endpoint per protocol, so frames only ever travel
node <-> gateway. Loss is i.i.d. per frame and latency is
``ceil(latency_ms + U(0, jitter_ms))``.

``fragment``/``Reassembler`` carry messages larger than a link's
``max_frame`` as several frames; losing any fragment loses the message.
"""

from __future__ import annotations

import enum
import heapq
import math
import random
import struct
from dataclasses import dataclass, field

from agrimon.errors import AgrimonError


class LinkError(AgrimonError):
    pass


class FrameTooLarge(LinkError):
    pass


class NoPeer(LinkError):
    pass


class DuplicateNode(LinkError):
    pass


class UnknownNode(LinkError):
    pass


class ClockRegression(LinkError):
    pass


class Protocol(str, enum.Enum):
    WIFI = "wifi"
    BLUETOOTH = "bluetooth"
    ZIGBEE = "zigbee"


@dataclass(frozen=True)
class LinkProfile:
    protocol: Protocol
    latency_ms: float
    jitter_ms: float
    loss_prob: float
    max_frame: int

    def __post_init__(self):
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError(f"loss_prob {self.loss_prob} must lie in [0, 1)")
        if self.max_frame <= FRAGMENT_HEADER_LEN:
            raise ValueError(f"max_frame must exceed {FRAGMENT_HEADER_LEN} octets")

    def with_overrides(self, **changes) -> "LinkProfile":
        data = {
            "protocol": self.protocol,
            "latency_ms": self.latency_ms,
            "jitter_ms": self.jitter_ms,
            "loss_prob": self.loss_prob,
            "max_frame": self.max_frame,
        }
        data.update(changes)
        return LinkProfile(**data)


FRAGMENT_HEADER_LEN = 4

# Configuration, not measurements: the relative ordering makes the protocol
# choice visible in scenarios.
DEFAULT_PROFILES = {
    Protocol.WIFI: LinkProfile(Protocol.WIFI, 5, 2, 0.001, 65535),
    Protocol.BLUETOOTH: LinkProfile(Protocol.BLUETOOTH, 30, 10, 0.01, 1024),
    Protocol.ZIGBEE: LinkProfile(Protocol.ZIGBEE, 50, 15, 0.02, 128),
}

GATEWAY_ID = "gateway"


@dataclass(frozen=True)
class LinkEndpoint:
    node_id: str
    role: str  # "node" or "gateway"
    protocol: Protocol


@dataclass(frozen=True)
class Delivery:
    at: int
    endpoint: LinkEndpoint
    source: str
    frame: bytes


@dataclass
class LinkCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped


@dataclass(order=True)
class _Queued:
    deliver_at: int
    seq: int
    link: str = field(compare=False)
    dest: LinkEndpoint = field(compare=False)
    source: str = field(compare=False)
    frame: bytes = field(compare=False)


class SimWorld:
    def __init__(self, seed: int = 0, profiles: dict | None = None, start: int = 0):
        self.rng = random.Random(seed)
        self.profiles = dict(DEFAULT_PROFILES)
        if profiles:
            self.profiles.update({Protocol(k): v for k, v in profiles.items()})
        self.now = start
        self.gateway = {p: LinkEndpoint(GATEWAY_ID, "gateway", p) for p in Protocol}
        self.nodes: dict[str, LinkEndpoint] = {}
        self.counters: dict[str, LinkCounters] = {}
        self.log: list[dict] = []
        self._queue: list[_Queued] = []
        self._seq = 0

    # -- topology -------------------------------------------------------------------

    def attach(self, node_id: str, protocol: Protocol | str) -> LinkEndpoint:
        if node_id == GATEWAY_ID:
            raise ValueError(f"{GATEWAY_ID!r} is reserved for the hub")
        if node_id in self.nodes:
            raise DuplicateNode(f"node {node_id!r} already attached")
        ep = LinkEndpoint(node_id, "node", Protocol(protocol))
        self.nodes[node_id] = ep
        self.counters.setdefault(node_id, LinkCounters())
        return ep

    def detach(self, node_id: str) -> None:
        ep = self.nodes.pop(node_id, None)
        if ep is None:
            raise UnknownNode(f"node {node_id!r} is not attached")
        kept = []
        for item in self._queue:
            if item.link == node_id:
                self._drop(item.link, item.source, item.dest.node_id, ep.protocol, item.frame, self.now)
            else:
                kept.append(item)
        heapq.heapify(kept)
        self._queue = kept

    def is_attached(self, node_id: str) -> bool:
        return node_id in self.nodes

    # -- frames ---------------------------------------------------------------------

    def send(self, sender: LinkEndpoint, frame: bytes, to: str | None = None) -> bool:
        """Put *frame* on the air. Returns False when the channel loses it."""
        if sender.role == "gateway":
            peer = self.nodes.get(to)
            if peer is None or peer.protocol is not sender.protocol:
                raise NoPeer(f"no node {to!r} on the gateway's {sender.protocol.value} endpoint")
            link, dest = to, peer
        else:
            if self.nodes.get(sender.node_id) != sender:
                raise NoPeer(f"node {sender.node_id!r} is not attached to the star")
            link, dest = sender.node_id, self.gateway[sender.protocol]
        profile = self.profiles[sender.protocol]
        if len(frame) > profile.max_frame:
            raise FrameTooLarge(
                f"{len(frame)}-octet frame exceeds {sender.protocol.value} max_frame {profile.max_frame}"
            )
        counters = self.counters[link]
        counters.sent += 1
        self._log(self.now, sender.node_id, dest.node_id, sender.protocol, len(frame), "sent")
        if self.rng.random() < profile.loss_prob:
            self._drop(link, sender.node_id, dest.node_id, sender.protocol, frame, self.now)
            return False
        delay = profile.latency_ms
        if profile.jitter_ms:
            delay += self.rng.uniform(0, profile.jitter_ms)
        self._seq += 1
        heapq.heappush(
            self._queue,
            _Queued(self.now + math.ceil(delay), self._seq, link, dest, sender.node_id, bytes(frame)),
        )
        return True

    def advance(self, to: int) -> list[Delivery]:
        if to < self.now:
            raise ClockRegression(f"cannot move clock from {self.now} back to {to}")
        out = []
        while self._queue and self._queue[0].deliver_at <= to:
            item = heapq.heappop(self._queue)
            self.counters[item.link].delivered += 1
            self._log(item.deliver_at, item.source, item.dest.node_id, item.dest.protocol,
                      len(item.frame), "delivered")
            out.append(Delivery(item.deliver_at, item.dest, item.source, item.frame))
        self.now = to
        return out

    def next_delivery_time(self) -> int | None:
        return self._queue[0].deliver_at if self._queue else None

    def in_flight(self) -> int:
        return len(self._queue)

    def _drop(self, link, src, dst, protocol, frame, t) -> None:
        self.counters[link].dropped += 1
        self._log(t, src, dst, protocol, len(frame), "dropped")

    def _log(self, t, src, dst, protocol, size, event) -> None:
        self.log.append(
            {"t": t, "from": src, "to": dst, "protocol": protocol.value, "size": size, "event": event}
        )


# -- fragmentation --------------------------------------------------------------------


def fragment(msg_id: int, data: bytes, max_frame: int) -> list[bytes]:
    """Split *data* into link frames of at most *max_frame* octets.

    Each frame starts with ``>HBB``: message id, fragment index, fragment count.
    """
    room = max_frame - FRAGMENT_HEADER_LEN
    count = max(1, -(-len(data) // room))
    if count > 255:
        raise FrameTooLarge(f"{len(data)} octets needs {count} fragments (max 255)")
    return [
        struct.pack(">HBB", msg_id & 0xFFFF, i, count) + data[i * room : (i + 1) * room]
        for i in range(count)
    ]


class Reassembler:
    """Rebuilds fragmented messages per source; incomplete ones expire."""

    def __init__(self, expiry_ms: int = 30_000):
        self.expiry_ms = expiry_ms
        self._partial: dict[tuple[str, int], tuple[int, list]] = {}
        self.expired = 0

    def feed(self, source: str, frame: bytes, now: int) -> bytes | None:
        if len(frame) < FRAGMENT_HEADER_LEN:
            return None
        msg_id, index, count = struct.unpack_from(">HBB", frame, 0)
        body = frame[FRAGMENT_HEADER_LEN:]
        if count == 1:
            return body
        if index >= count:
            return None
        key = (source, msg_id)
        started, parts = self._partial.get(key, (now, [None] * count))
        if len(parts) != count:
            started, parts = now, [None] * count
        parts[index] = body
        if all(p is not None for p in parts):
            del self._partial[key]
            return b"".join(parts)
        self._partial[key] = (started, parts)
        self._expire(now)
        return None

    def _expire(self, now: int) -> None:
        stale = [k for k, (t, _) in self._partial.items() if now - t > self.expiry_ms]
        for k in stale:
            del self._partial[k]
            self.expired += 1
