"""Broker state machine.

``Broker.step`` consumes one event and returns the actions the I/O host must
carry out. The broker never touches sockets or clocks itself, so a recorded
event trace replays to identical actions. ``broker_step`` is the
copy-on-write form for callers that want the old state kept intact.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from agrimon.mqtt.events import (
    MAX_RETRIES,
    RETRY_TIMEOUT_MS,
    ClientConnected,
    Close,
    ConnectionLost,
    PacketIn,
    Send,
    Tick,
)
from agrimon.mqtt.packets import (
    ConnAck,
    Connect,
    Disconnect,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    SubAck,
    Subscribe,
)
from agrimon.mqtt.topics import topic_matches


@dataclass
class Inflight:
    packet: Publish | Subscribe
    sent_at: int
    retries: int = 0


@dataclass
class ClientRecord:
    """Broker-side view of one connected client."""

    client_id: str
    conn: str
    keep_alive: int
    last_activity: int
    subscriptions: dict[str, int] = field(default_factory=dict)
    inflight: dict[int, Inflight] = field(default_factory=dict)
    next_packet_id: int = 1

    def allocate_id(self) -> int:
        if len(self.inflight) >= 0xFFFF:
            raise RuntimeError(f"no free packet ids for {self.client_id}")
        pid = self.next_packet_id
        while pid in self.inflight:
            pid = pid % 0xFFFF + 1
        self.next_packet_id = pid % 0xFFFF + 1
        return pid


@dataclass
class BrokerStats:
    received: int = 0
    forwarded: int = 0
    retransmitted: int = 0
    expired: int = 0
    abandoned: int = 0


class Broker:
    """In-memory MQTT broker for the supported 3.1.1 subset.

    ``datagram_links`` relaxes the single-CONNECT rule for transports without
    a connection lifecycle: a repeated CONNECT on the same link restarts the
    session instead of closing it, since it is the retry of a handshake whose
    CONNACK was lost.
    """

    def __init__(self, datagram_links: bool = False, retry_ms: int = RETRY_TIMEOUT_MS,
                 max_retries: int = MAX_RETRIES):
        self.datagram_links = datagram_links
        self.retry_ms = retry_ms
        self.max_retries = max_retries
        self.conns: dict[str, int] = {}  # conn -> last activity before CONNECT
        self.clients: dict[str, ClientRecord] = {}  # client_id -> record
        self.by_conn: dict[str, str] = {}  # conn -> client_id
        self.stats = BrokerStats()
        self._auto_ids = 0

    def step(self, event) -> list:
        if isinstance(event, PacketIn):
            return self._packet(event.conn, event.packet, event.now)
        if isinstance(event, Tick):
            return self._tick(event.now)
        if isinstance(event, ClientConnected):
            self.conns[event.conn] = event.now
            return []
        if isinstance(event, ConnectionLost):
            self._drop_conn(event.conn)
            return []
        raise TypeError(f"unknown broker event {event!r}")

    # -- helpers ------------------------------------------------------------------

    def _drop_conn(self, conn: str) -> None:
        self.conns.pop(conn, None)
        client_id = self.by_conn.pop(conn, None)
        if client_id is not None:
            self.clients.pop(client_id, None)

    def _violation(self, conn: str, reason: str) -> list:
        self._drop_conn(conn)
        return [Close(conn, f"protocol violation: {reason}")]

    def _packet(self, conn: str, p, now: int) -> list:
        self.stats.received += 1
        client_id = self.by_conn.get(conn)
        if isinstance(p, Connect):
            if client_id is not None and not self.datagram_links:
                return self._violation(conn, "second CONNECT on one connection")
            return self._connect(conn, p, now)
        if client_id is None:
            return self._violation(conn, f"{type(p).__name__} before CONNECT")
        rec = self.clients[client_id]
        rec.last_activity = now
        if isinstance(p, Publish):
            return self._publish(rec, p, now)
        if isinstance(p, PubAck):
            rec.inflight.pop(p.packet_id, None)
            return []
        if isinstance(p, Subscribe):
            granted = []
            for topic_filter, qos in p.filters:
                g = min(qos, 1)
                rec.subscriptions[topic_filter] = g
                granted.append(g)
            return [Send(SubAck(p.packet_id, tuple(granted)), conn)]
        if isinstance(p, PingReq):
            return [Send(PingResp(), conn)]
        if isinstance(p, Disconnect):
            self._drop_conn(conn)
            return [Close(conn, "client disconnected")]
        return self._violation(conn, f"unexpected {type(p).__name__} from client")

    def _connect(self, conn: str, p: Connect, now: int) -> list:
        if not p.clean_session:
            return self._violation(conn, "persistent sessions are not supported")
        actions = []
        self._drop_conn(conn)
        client_id = p.client_id
        if not client_id:
            self._auto_ids += 1
            client_id = f"auto-{self._auto_ids}"
        old = self.clients.get(client_id)
        if old is not None:
            # session takeover: the older connection is closed
            self._drop_conn(old.conn)
            actions.append(Close(old.conn, f"session taken over by {conn}"))
        self.clients[client_id] = ClientRecord(client_id, conn, p.keep_alive, now)
        self.by_conn[conn] = client_id
        actions.append(Send(ConnAck(0), conn))
        return actions

    def _publish(self, sender: ClientRecord, p: Publish, now: int) -> list:
        actions = []
        for rec in self.clients.values():
            best = -1
            for topic_filter, qos in rec.subscriptions.items():
                if qos > best and topic_matches(topic_filter, p.topic):
                    best = qos
            if best < 0:
                continue
            qos = min(p.qos, best)
            if qos:
                pid = rec.allocate_id()
                out = Publish(p.topic, p.payload, 1, pid)
                rec.inflight[pid] = Inflight(out, now)
            else:
                out = Publish(p.topic, p.payload, 0)
            self.stats.forwarded += 1
            actions.append(Send(out, rec.conn))
        if p.qos == 1:
            actions.append(Send(PubAck(p.packet_id), sender.conn))
        return actions

    def _tick(self, now: int) -> list:
        actions = []
        for rec in list(self.clients.values()):
            if rec.keep_alive and now - rec.last_activity > rec.keep_alive * 1500:
                self.stats.expired += 1
                self._drop_conn(rec.conn)
                actions.append(Close(rec.conn, "keep-alive expired"))
                continue
            for pid, item in list(rec.inflight.items()):
                if now - item.sent_at < self.retry_ms:
                    continue
                if item.retries >= self.max_retries:
                    del rec.inflight[pid]
                    self.stats.abandoned += 1
                    continue
                item.retries += 1
                item.sent_at = now
                item.packet = Publish(item.packet.topic, item.packet.payload, 1, pid, dup=True)
                self.stats.retransmitted += 1
                actions.append(Send(item.packet, rec.conn))
        return actions

    def session_count(self) -> int:
        return len(self.clients)


def broker_step(state: Broker, event) -> tuple[Broker, list]:
    """Pure transition: returns a new broker and the actions; *state* is untouched."""
    new = copy.deepcopy(state)
    actions = new.step(event)
    return new, actions
