"""Gateway ingest: validate, deduplicate, store, queue for upstream.

MQTT qos 1 delivers at least once, so the same packet can arrive several
times. The gateway collapses those copies on the key
``(node_id, name, captured_at)`` and stores each measurement once.
"""

from __future__ import annotations

import json
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from agrimon.errors import SensorError
from agrimon.node import TOPIC_ROOT, DataPacket, ParseError, parse_packet
from agrimon.sensors import UNITS, VariableKind, check_range
from agrimon.store import StoreRow, TelemetryStore

STORED = "stored"
DUPLICATE = "duplicate"
REJECTED = "rejected"
REASONS = ("parse", "topic_mismatch", "unit_mismatch", "range")


@dataclass(frozen=True)
class GatewayConfig:
    subscribe_filter: str = f"{TOPIC_ROOT}/#"
    upstream: str | None = None
    dedup_window: int = 10_000
    upstream_queue_limit: int = 10_000

    def __post_init__(self):
        if self.dedup_window < 1:
            raise ValueError("dedup_window must be positive")
        if self.upstream_queue_limit < 1:
            raise ValueError("upstream_queue_limit must be positive")


@dataclass(frozen=True)
class IngestOutcome:
    status: str
    reason: str | None = None
    packet: DataPacket | None = None


@dataclass
class IngestStats:
    received: int = 0
    stored: int = 0
    duplicates: int = 0
    rejected: int = 0
    per_protocol: dict[str, int] = field(default_factory=dict)
    rejected_by_reason: dict[str, int] = field(default_factory=dict)
    upstream_forwarded: int = 0
    upstream_dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "received": self.received,
            "stored": self.stored,
            "duplicates": self.duplicates,
            "rejected": self.rejected,
            "per_protocol": dict(sorted(self.per_protocol.items())),
            "rejected_by_reason": dict(sorted(self.rejected_by_reason.items())),
            "upstream_forwarded": self.upstream_forwarded,
            "upstream_dropped": self.upstream_dropped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class UpstreamQueue:
    """Bounded store-then-forward queue; the oldest entry goes when full."""

    def __init__(self, limit: int):
        self._q: deque[DataPacket] = deque()
        self.limit = limit
        self.dropped = 0

    def push(self, p: DataPacket) -> None:
        if len(self._q) >= self.limit:
            self._q.popleft()
            self.dropped += 1
        self._q.append(p)

    def drain(self) -> list[DataPacket]:
        out = list(self._q)
        self._q.clear()
        return out

    def __len__(self) -> int:
        return len(self._q)


class Gateway:
    def __init__(self, cfg: GatewayConfig | None = None, store: TelemetryStore | None = None):
        self.cfg = cfg or GatewayConfig()
        self.store = store if store is not None else TelemetryStore()
        self.stats = IngestStats()
        self._recent: OrderedDict[tuple, None] = OrderedDict()
        self.upstream = UpstreamQueue(self.cfg.upstream_queue_limit) if self.cfg.upstream else None

    def _reject(self, reason: str, packet=None) -> IngestOutcome:
        self.stats.rejected += 1
        self.stats.rejected_by_reason[reason] = self.stats.rejected_by_reason.get(reason, 0) + 1
        return IngestOutcome(REJECTED, reason, packet)

    def _seen(self, key) -> bool:
        if key in self._recent:
            self._recent.move_to_end(key)
            return True
        # keys evicted from the window are still caught by the store index
        return key in self.store

    def _remember(self, key) -> None:
        self._recent[key] = None
        if len(self._recent) > self.cfg.dedup_window:
            self._recent.popitem(last=False)

    def ingest(self, topic: str, payload: bytes, protocol: str | None = None) -> IngestOutcome:
        """Process one inbound publish; never raises, every failure is counted.

        *protocol* names the endpoint the packet came in on and is what
        ``per_protocol`` counts; it defaults to the payload's own tag.
        """
        self.stats.received += 1
        try:
            p = parse_packet(payload)
        except ParseError:
            if protocol is not None:
                self._count_protocol(protocol)
            return self._reject("parse")
        self._count_protocol(protocol if protocol is not None else p.protocol.value)

        levels = topic.split("/")
        if len(levels) != 3 or levels[0] != TOPIC_ROOT or levels[1] != p.node_id or levels[2] != p.name:
            return self._reject("topic_mismatch", p)
        try:
            kind = VariableKind(p.name)
        except ValueError:
            return self._reject("parse", p)
        if p.units != UNITS[kind]:
            return self._reject("unit_mismatch", p)
        try:
            check_range(kind, p.value)
        except SensorError:
            return self._reject("range", p)

        if self._seen(p.key):
            self.stats.duplicates += 1
            return IngestOutcome(DUPLICATE, None, p)
        self.store.append(StoreRow.from_packet(p))
        self._remember(p.key)
        self.stats.stored += 1
        if self.upstream is not None:
            self.upstream.push(p)
            self.stats.upstream_dropped = self.upstream.dropped
        return IngestOutcome(STORED, None, p)

    def _count_protocol(self, protocol: str) -> None:
        self.stats.per_protocol[protocol] = self.stats.per_protocol.get(protocol, 0) + 1
