"""Client-side MQTT session state machine."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from agrimon.mqtt.broker import Inflight
from agrimon.mqtt.events import (
    MAX_RETRIES,
    RETRY_TIMEOUT_MS,
    ConnectRequest,
    Deliver,
    DisconnectRequest,
    PacketIn,
    PublishRequest,
    Send,
    SignalError,
    SubscribeRequest,
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


@dataclass
class SessionStats:
    published: int = 0
    retransmissions: int = 0
    acked: int = 0
    delivered: int = 0
    abandoned: int = 0
    connect_attempts: int = 0


@dataclass
class Session:
    """One client's protocol state.

    Publish and subscribe requests made before the CONNACK arrives are queued
    and flushed once the broker accepts the connection. Unacknowledged qos-1
    publishes are resent with DUP set every ``retry_ms`` until acknowledged
    or ``max_retries`` resends have failed.
    """

    client_id: str
    keep_alive: int = 60
    retry_ms: int = RETRY_TIMEOUT_MS
    max_retries: int = MAX_RETRIES
    connected: bool = False
    connect_sent_at: int | None = None
    subscriptions: dict[str, int] = field(default_factory=dict)
    pending_subs: dict[int, Inflight] = field(default_factory=dict)
    inflight: dict[int, Inflight] = field(default_factory=dict)
    queued: list = field(default_factory=list)
    next_packet_id: int = 1
    last_sent: int = 0
    stats: SessionStats = field(default_factory=SessionStats)

    def allocate_id(self) -> int:
        busy = self.inflight.keys() | self.pending_subs.keys()
        if len(busy) >= 0xFFFF:
            raise RuntimeError("no free packet ids")
        pid = self.next_packet_id
        while pid in busy:
            pid = pid % 0xFFFF + 1
        self.next_packet_id = pid % 0xFFFF + 1
        return pid

    def step(self, event) -> list:
        if isinstance(event, PacketIn):
            return self._inbound(event.packet, event.now)
        if isinstance(event, PublishRequest):
            if not self.connected:
                self.queued.append(event)
                return []
            return self._publish(event.topic, event.payload, event.qos, event.now)
        if isinstance(event, SubscribeRequest):
            if not self.connected:
                self.queued.append(event)
                return []
            return self._subscribe(event.filters, event.now)
        if isinstance(event, Tick):
            return self._tick(event.now)
        if isinstance(event, ConnectRequest):
            return self._connect(event.now)
        if isinstance(event, DisconnectRequest):
            self.connected = False
            return [self._send(Disconnect(), event.now)]
        raise TypeError(f"unknown client event {event!r}")

    def _send(self, packet, now: int) -> Send:
        self.last_sent = now
        return Send(packet)

    def _connect(self, now: int) -> list:
        self.connected = False
        self.connect_sent_at = now
        self.stats.connect_attempts += 1
        return [self._send(Connect(self.client_id, self.keep_alive, True), now)]

    def _publish(self, topic: str, payload: bytes, qos: int, now: int) -> list:
        self.stats.published += 1
        if qos == 0:
            return [self._send(Publish(topic, payload, 0), now)]
        pid = self.allocate_id()
        p = Publish(topic, payload, 1, pid)
        self.inflight[pid] = Inflight(p, now)
        return [self._send(p, now)]

    def _subscribe(self, filters, now: int) -> list:
        pid = self.allocate_id()
        p = Subscribe(pid, tuple(filters))
        self.pending_subs[pid] = Inflight(p, now)
        return [self._send(p, now)]

    def _inbound(self, p, now: int) -> list:
        if isinstance(p, ConnAck):
            if p.return_code != 0:
                self.connected = False
                return [SignalError(f"connection refused, return code {p.return_code}")]
            if self.connected:
                return []
            self.connected = True
            actions = []
            queued, self.queued = self.queued, []
            for req in queued:
                actions.extend(self.step(req))
            return actions
        if isinstance(p, Publish):
            self.stats.delivered += 1
            actions = [Deliver(p.topic, p.payload, p.qos, p.dup)]
            if p.qos == 1:
                actions.append(self._send(PubAck(p.packet_id), now))
            return actions
        if isinstance(p, PubAck):
            if self.inflight.pop(p.packet_id, None) is not None:
                self.stats.acked += 1
            return []
        if isinstance(p, SubAck):
            req = self.pending_subs.pop(p.packet_id, None)
            if req is not None:
                for (topic_filter, _), code in zip(req.packet.filters, p.granted):
                    if code != 0x80:
                        self.subscriptions[topic_filter] = code
            return []
        if isinstance(p, PingResp):
            return []
        return [SignalError(f"unexpected {type(p).__name__} from broker")]

    def _tick(self, now: int) -> list:
        actions = []
        if not self.connected:
            if self.connect_sent_at is not None and now - self.connect_sent_at >= self.retry_ms:
                actions.extend(self._connect(now))
            return actions
        for table in (self.inflight, self.pending_subs):
            for pid, item in list(table.items()):
                if now - item.sent_at < self.retry_ms:
                    continue
                if item.retries >= self.max_retries:
                    del table[pid]
                    self.stats.abandoned += 1
                    actions.append(SignalError(f"packet {pid} unacknowledged after {item.retries} retries"))
                    continue
                item.retries += 1
                item.sent_at = now
                if isinstance(item.packet, Publish):
                    p = item.packet
                    item.packet = Publish(p.topic, p.payload, p.qos, p.packet_id, dup=True, retain=p.retain)
                self.stats.retransmissions += 1
                actions.append(self._send(item.packet, now))
        if self.keep_alive and now - self.last_sent >= self.keep_alive * 750:
            actions.append(self._send(PingReq(), now))
        return actions


def client_step(session: Session, event) -> tuple[Session, list]:
    """Pure transition: returns a new session and the actions; *session* is untouched."""
    new = copy.deepcopy(session)
    actions = new.step(event)
    return new, actions
