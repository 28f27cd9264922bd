"""Seeded end-to-end simulation of the monitoring network.

Topology: every node talks over its one radio to the gateway. The gateway
hosts one broker per protocol endpoint and runs one ingest client session
per broker, subscribed with the configured filter. Stored packets can be
forwarded to an in-process upstream broker standing in for the public
server, where a subscriber counts what arrives.

The driver is a discrete-event loop on the world's integer-millisecond
clock. At each instant it handles frame deliveries first, then timer ticks,
then due samples, so a seed and a spec fully determine the run. Sampling
stops at ``t0 + duration_ms``; the run then keeps going until nothing is in
flight or unacknowledged, bounded by the retry budget.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from agrimon.errors import AgrimonError, Malformed, MqttError
from agrimon.gateway import Gateway, GatewayConfig, IngestStats
from agrimon.mqtt.broker import Broker
from agrimon.mqtt.client import Session
from agrimon.mqtt.events import (
    MAX_RETRIES,
    RETRY_TIMEOUT_MS,
    ConnectRequest,
    ConnectionLost,
    Deliver,
    PacketIn,
    PublishRequest,
    Send,
    SignalError,
    SubscribeRequest,
    Tick,
)
from agrimon.mqtt.packets import decode_packet, encode_packet
from agrimon.node import (
    LinkDown,
    NodeConfig,
    NodeReport,
    Sampler,
    SensorSource,
    SiteModel,
    SyntheticEnvironment,
    TOPIC_ROOT,
    sample_times,
    serialize_packet,
)
from agrimon.sensors import CalibrationTable
from agrimon.store import TelemetryStore
from agrimon.transport import (
    DEFAULT_PROFILES,
    LinkError,
    Protocol,
    Reassembler,
    SimWorld,
    fragment,
)

GATEWAY_CONN = "gw-ingest"
UPSTREAM_CONN = "gw-upstream"
CLOUD_CONN = "cloud-sub"
DEFAULT_TICK_MS = 1_000


class SpecError(AgrimonError, ValueError):
    pass


# -- spec -------------------------------------------------------------------------


@dataclass
class NodeSpec:
    config: NodeConfig
    source: SensorSource | None = None
    frame_error_rate: float = 0.0
    detach_at_ms: int | None = None


@dataclass
class ScenarioSpec:
    nodes: list[NodeSpec]
    seed: int = 0
    duration_ms: int = 420_000
    t0: int = 0
    profiles: dict = field(default_factory=dict)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    site: SiteModel = field(default_factory=SiteModel)
    tick_ms: int = DEFAULT_TICK_MS
    store_path: str | None = None
    delivery_log_path: str | None = None
    stats_path: str | None = None

    def __post_init__(self):
        seen = set()
        for i, n in enumerate(self.nodes):
            nid = n.config.node_id
            if nid in seen:
                raise SpecError(f"nodes[{i}].id: duplicate node id {nid!r}")
            seen.add(nid)
        if self.duration_ms < 0:
            raise SpecError("duration_ms: must be non-negative")
        if self.tick_ms <= 0:
            raise SpecError("tick_ms: must be positive")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ScenarioSpec":
        def field_error(name, exc):
            return SpecError(f"{name}: {exc}")

        known = {"seed", "duration_ms", "t0", "profiles", "broker", "nodes", "gateway",
                 "site", "tick_ms", "outputs", "description"}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"{sorted(unknown)[0]}: unknown scenario key")
        if d.get("broker", "gateway") != "gateway":
            raise SpecError("broker: only 'gateway' placement is supported")

        profiles = {}
        for proto, over in (d.get("profiles") or {}).items():
            try:
                p = Protocol(proto)
                profiles[p] = DEFAULT_PROFILES[p].with_overrides(**over)
            except (ValueError, TypeError) as exc:
                raise field_error(f"profiles.{proto}", exc) from None

        nodes_raw = d.get("nodes")
        if not isinstance(nodes_raw, list) or not nodes_raw:
            raise SpecError("nodes: at least one node is required")
        nodes, seen = [], set()
        for i, nd in enumerate(nodes_raw):
            where = f"nodes[{i}]"
            nid = nd.get("id")
            if nid in seen:
                raise SpecError(f"{where}.id: duplicate node id {nid!r}")
            seen.add(nid)
            proto = nd.get("protocol")
            if proto not in {p.value for p in Protocol}:
                raise SpecError(f"{where}.protocol: {proto!r} is not one of wifi, bluetooth, zigbee")
            try:
                cal = CalibrationTable.from_dict(nd.get("calibration", {}))
                cfg = NodeConfig(
                    node_id=nid,
                    protocol=Protocol(proto),
                    sample_interval_ms=int(nd.get("interval_ms", 12_000)),
                    sensors=tuple(nd.get("sensors", NodeConfig.__dataclass_fields__["sensors"].default)),
                    calibration=cal,
                    qos=int(nd.get("qos", 1)),
                )
            except (ValueError, TypeError) as exc:
                raise field_error(where, exc) from None
            nodes.append(NodeSpec(cfg, None, float(nd.get("frame_error_rate", 0.0)),
                                  nd.get("detach_at_ms")))

        try:
            gw = GatewayConfig(**(d.get("gateway") or {}))
        except (ValueError, TypeError) as exc:
            raise field_error("gateway", exc) from None
        try:
            site = SiteModel(**(d.get("site") or {}))
        except TypeError as exc:
            raise field_error("site", exc) from None

        outputs = d.get("outputs") or {}
        base = base_dir or Path.cwd()

        def out(key):
            v = outputs.get(key)
            return None if v is None else str(base / v)

        try:
            return cls(
                nodes=nodes,
                seed=int(d.get("seed", 0)),
                duration_ms=int(d.get("duration_ms", 420_000)),
                t0=int(d.get("t0", 0)),
                profiles=profiles,
                gateway=gw,
                site=site,
                tick_ms=int(d.get("tick_ms", DEFAULT_TICK_MS)),
                store_path=out("store"),
                delivery_log_path=out("delivery_log"),
                stats_path=out("stats"),
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"scenario: {exc}") from None

    @classmethod
    def load(cls, path: str | Path, out_dir: Path | None = None) -> "ScenarioSpec":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise SpecError(f"{path}: top level must be an object")
        return cls.from_dict(data, out_dir if out_dir is not None else Path.cwd())


# -- runtime ------------------------------------------------------------------------


class NodeAgent:
    def __init__(self, spec: NodeSpec, world: SimWorld, seed: int, site: SiteModel, t0: int,
                 until: int):
        self.cfg = spec.config
        self.world = world
        source = spec.source or SyntheticEnvironment(
            seed, self.cfg.node_id, site, spec.frame_error_rate, calibration=self.cfg.calibration
        )
        self.sampler = Sampler(self.cfg, source)
        self.endpoint = world.attach(self.cfg.node_id, self.cfg.protocol)
        self.session = Session(self.cfg.node_id)
        self.reassembler = Reassembler()
        self.report = NodeReport(self.cfg.node_id, self.cfg.protocol.value)
        self.schedule = deque(sample_times(t0, until, self.cfg.sample_interval_ms))
        self.detach_at = spec.detach_at_ms
        self.down = False
        self._msg_id = 0

    @property
    def next_sample(self) -> int | None:
        return self.schedule[0] if self.schedule and not self.down else None

    def transmit(self, packet) -> None:
        if self.down:
            return
        self._msg_id = (self._msg_id + 1) & 0xFFFF
        profile = self.world.profiles[self.cfg.protocol]
        try:
            for frame in fragment(self._msg_id, encode_packet(packet), profile.max_frame):
                self.world.send(self.endpoint, frame)
        except LinkError as exc:
            self.go_down(str(exc))

    def go_down(self, reason: str) -> None:
        self.down = True
        self.report.link_down = True
        self.report.errors.append(f"link down: {reason}")

    def run_actions(self, actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                self.transmit(a.packet)
            elif isinstance(a, SignalError):
                self.report.errors.append(a.reason)

    def on_frame(self, source: str, frame: bytes, now: int) -> None:
        msg = self.reassembler.feed(source, frame, now)
        if msg is None or self.down:
            return
        try:
            packet, _ = decode_packet(msg)
        except MqttError as exc:
            self.report.errors.append(f"malformed inbound packet: {exc}")
            return
        self.run_actions(self.session.step(PacketIn(packet, now)))

    def start(self, now: int) -> None:
        self.sampler.initialize(now - self.cfg.sample_interval_ms)
        self.run_actions(self.session.step(ConnectRequest(now)))

    def sample(self, now: int) -> None:
        self.schedule.popleft()
        if not self.world.is_attached(self.cfg.node_id):
            self.go_down("endpoint detached")
            return
        faults_before = self.sampler.faults
        packets = self.sampler.sample_once(now)
        self.report.samples += 1
        self.report.faults += self.sampler.faults - faults_before
        for p in packets:
            self.report.published += 1
            self.run_actions(self.session.step(
                PublishRequest(p.topic, serialize_packet(p), self.cfg.qos, now)
            ))
        self.report.rain_tips_total = self.sampler.rain_tips_total

    def tick(self, now: int) -> None:
        if not self.down:
            self.run_actions(self.session.step(Tick(now)))
        self.report.retransmissions = self.session.stats.retransmissions

    def idle(self) -> bool:
        s = self.session
        return self.down or (s.connected and not s.inflight and not s.queued and not s.pending_subs)


@dataclass
class ScenarioResult:
    stats: IngestStats
    nodes: list[NodeReport]
    links: dict
    brokers: dict
    upstream: dict
    end_ms: int
    store: TelemetryStore
    delivery_log: list[dict]
    wall_seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "gateway": self.stats.to_dict(),
            "nodes": [n.to_dict() for n in self.nodes],
            "links": self.links,
            "brokers": self.brokers,
            "upstream": self.upstream,
            "end_ms": self.end_ms,
        }

    def stats_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


class Scenario:
    def __init__(self, spec: ScenarioSpec, store: TelemetryStore | None = None):
        self.spec = spec
        self.world = SimWorld(spec.seed, spec.profiles, start=spec.t0)
        self.until = spec.t0 + spec.duration_ms
        if store is None:
            store = TelemetryStore(spec.store_path, truncate=True) if spec.store_path else TelemetryStore()
        self.gateway = Gateway(spec.gateway, store)
        self.brokers = {p: Broker(datagram_links=True) for p in Protocol}
        self.ingest_sessions = {p: Session(f"{GATEWAY_CONN}-{p.value}") for p in Protocol}
        self.reassemblers = {p: Reassembler() for p in Protocol}
        self._gw_msg_id = 0
        self.upstream_broker = Broker() if spec.gateway.upstream else None
        self.upstream_session = Session(UPSTREAM_CONN) if spec.gateway.upstream else None
        self.cloud_session = Session(CLOUD_CONN) if spec.gateway.upstream else None
        self.cloud_received = 0
        self.nodes = [
            NodeAgent(n, self.world, spec.seed, spec.site, spec.t0, self.until) for n in spec.nodes
        ]
        self._by_id = {a.cfg.node_id: a for a in self.nodes}
        self._work: deque = deque()

    # -- in-process routing for the gateway side ---------------------------------------

    def _to_broker(self, proto: Protocol, conn: str, packet, now: int) -> None:
        self._work.append(("broker", proto, conn, packet, now))

    def _drain_work(self) -> None:
        while self._work:
            kind, key, conn, packet, now = self._work.popleft()
            # every in-process hop still goes through the wire codec
            packet, _ = decode_packet(encode_packet(packet))
            if kind == "broker":
                self._broker_actions(key, self.brokers[key].step(PacketIn(packet, now, conn)), now)
            elif kind == "ingest":
                self._ingest_actions(key, self.ingest_sessions[key].step(PacketIn(packet, now)), now)
            elif kind == "upbroker":
                self._upbroker_actions(self.upstream_broker.step(PacketIn(packet, now, conn)), now)
            elif kind == "upsession":
                self._upsession_actions(self.upstream_session.step(PacketIn(packet, now)), now)
            elif kind == "cloud":
                self._cloud_actions(self.cloud_session.step(PacketIn(packet, now)), now)

    def _broker_actions(self, proto: Protocol, actions, now: int) -> None:
        for a in actions:
            if isinstance(a, Send):
                if a.conn == GATEWAY_CONN:
                    self._work.append(("ingest", proto, None, a.packet, now))
                else:
                    self._radio_to_node(proto, a.conn, a.packet)
            # Close on a datagram link has nothing to tear down

    def _radio_to_node(self, proto: Protocol, node_id: str, packet) -> None:
        self._gw_msg_id = (self._gw_msg_id + 1) & 0xFFFF
        profile = self.world.profiles[proto]
        try:
            for frame in fragment(self._gw_msg_id, encode_packet(packet), profile.max_frame):
                self.world.send(self.world.gateway[proto], frame, to=node_id)
        except LinkError:
            pass  # node detached; its session will expire at the broker

    def _ingest_actions(self, proto: Protocol, actions, now: int) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._to_broker(proto, GATEWAY_CONN, a.packet, now)
            elif isinstance(a, Deliver):
                self.gateway.ingest(a.topic, a.payload, proto.value)
        self._forward_upstream(now)

    def _forward_upstream(self, now: int) -> None:
        if self.upstream_session is None or not self.upstream_session.connected:
            return
        for p in self.gateway.upstream.drain():
            self.gateway.stats.upstream_forwarded += 1
            self._upsession_actions(
                self.upstream_session.step(PublishRequest(p.topic, serialize_packet(p), 1, now)), now
            )

    def _upsession_actions(self, actions, now: int) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._work.append(("upbroker", None, UPSTREAM_CONN, a.packet, now))

    def _upbroker_actions(self, actions, now: int) -> None:
        for a in actions:
            if isinstance(a, Send):
                target = "upsession" if a.conn == UPSTREAM_CONN else "cloud"
                self._work.append((target, None, None, a.packet, now))

    def _cloud_actions(self, actions, now: int) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._work.append(("upbroker", None, CLOUD_CONN, a.packet, now))
            elif isinstance(a, Deliver):
                self.cloud_received += 1

    # -- radio side ---------------------------------------------------------------------

    def _on_delivery(self, d) -> None:
        if d.endpoint.role == "gateway":
            proto = d.endpoint.protocol
            msg = self.reassemblers[proto].feed(d.source, d.frame, d.at)
            if msg is None:
                return
            try:
                packet, _ = decode_packet(msg)
            except Malformed:
                # protocol violation: the broker forgets that link's session
                self.brokers[proto].step(ConnectionLost(d.source, d.at))
                return
            except MqttError:
                return
            self._to_broker(proto, d.source, packet, d.at)
            self._drain_work()
        else:
            agent = self._by_id.get(d.endpoint.node_id)
            if agent is not None:
                agent.on_frame(d.source, d.frame, d.at)

    def _tick(self, now: int) -> None:
        for proto, broker in self.brokers.items():
            self._broker_actions(proto, broker.step(Tick(now)), now)
        for proto, session in self.ingest_sessions.items():
            self._ingest_actions(proto, session.step(Tick(now)), now)
        if self.upstream_broker is not None:
            self._upbroker_actions(self.upstream_broker.step(Tick(now)), now)
            self._upsession_actions(self.upstream_session.step(Tick(now)), now)
            self._cloud_actions(self.cloud_session.step(Tick(now)), now)
        self._drain_work()
        for agent in self.nodes:
            agent.tick(now)

    def _start(self, now: int) -> None:
        for proto, session in self.ingest_sessions.items():
            self._ingest_actions(proto, session.step(ConnectRequest(now)), now)
            self._ingest_actions(proto, session.step(
                SubscribeRequest(((self.spec.gateway.subscribe_filter, 1),), now)), now)
        if self.upstream_broker is not None:
            self._upsession_actions(self.upstream_session.step(ConnectRequest(now)), now)
            self._cloud_actions(self.cloud_session.step(ConnectRequest(now)), now)
            self._cloud_actions(self.cloud_session.step(
                SubscribeRequest(((f"{TOPIC_ROOT}/#", 1),), now)), now)
        self._drain_work()
        for agent in self.nodes:
            agent.start(now)

    def _settled(self) -> bool:
        if self.world.in_flight():
            return False
        if any(not a.idle() for a in self.nodes):
            return False
        if any(r.inflight for b in self.brokers.values() for r in b.clients.values()):
            return False
        if self.upstream_broker is not None:
            if len(self.gateway.upstream) or self.upstream_session.inflight:
                return False
            if any(r.inflight for r in self.upstream_broker.clients.values()):
                return False
        return True

    def run(self) -> ScenarioResult:
        wall = time.perf_counter()
        spec = self.spec
        now = spec.t0
        hard_stop = self.until + (MAX_RETRIES + 2) * RETRY_TIMEOUT_MS + 10_000
        self._start(now)
        next_tick = now + spec.tick_ms
        while True:
            samples = [a.next_sample for a in self.nodes if a.next_sample is not None]
            detaches = [a.detach_at for a in self.nodes
                        if a.detach_at is not None and self.world.is_attached(a.cfg.node_id)]
            if not samples and not detaches and self._settled():
                break
            candidates = samples + detaches + [next_tick]
            nd = self.world.next_delivery_time()
            if nd is not None:
                candidates.append(nd)
            now = min(candidates)
            if now > hard_stop:
                break
            for d in self.world.advance(now):
                self._on_delivery(d)
            for a in self.nodes:
                if a.detach_at == now and self.world.is_attached(a.cfg.node_id):
                    self.world.detach(a.cfg.node_id)
            if now == next_tick:
                self._tick(now)
                next_tick += spec.tick_ms
            for a in self.nodes:
                if a.next_sample == now:
                    a.sample(now)
        for a in self.nodes:
            a.report.retransmissions = a.session.stats.retransmissions

        result = ScenarioResult(
            stats=self.gateway.stats,
            nodes=[a.report for a in self.nodes],
            links={
                nid: {"sent": c.sent, "delivered": c.delivered, "dropped": c.dropped,
                      "in_flight": c.in_flight}
                for nid, c in sorted(self.world.counters.items())
            },
            brokers={
                p.value: {"received": b.stats.received, "forwarded": b.stats.forwarded,
                          "retransmitted": b.stats.retransmitted, "abandoned": b.stats.abandoned}
                for p, b in self.brokers.items()
            },
            upstream={
                "enabled": self.upstream_broker is not None,
                "cloud_received": self.cloud_received,
                "queued": len(self.gateway.upstream) if self.gateway.upstream is not None else 0,
            },
            end_ms=now,
            store=self.gateway.store,
            delivery_log=self.world.log,
            wall_seconds=time.perf_counter() - wall,
        )
        self._write_outputs(result)
        return result

    def _write_outputs(self, result: ScenarioResult) -> None:
        spec = self.spec
        if spec.delivery_log_path:
            path = Path(spec.delivery_log_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for entry in result.delivery_log:
                    fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
        if spec.stats_path:
            path = Path(spec.stats_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(result.stats_json(), encoding="utf-8")


def run_scenario(spec: ScenarioSpec, store: TelemetryStore | None = None) -> ScenarioResult:
    scenario = Scenario(spec, store)
    try:
        return scenario.run()
    finally:
        if store is None and spec.store_path:
            scenario.gateway.store.close()


def run_node(cfg: NodeConfig, source: SensorSource | None = None, until: int = 0, *,
             t0: int = 0, seed: int = 0, profiles: dict | None = None,
             detach_at_ms: int | None = None) -> NodeReport:
    """Run one node against the gateway until *until*; returns its report.

    Raises ``LinkDown`` carrying the partial report when the node's endpoint
    is detached mid-run.
    """
    spec = ScenarioSpec(
        nodes=[NodeSpec(cfg, source, detach_at_ms=detach_at_ms)],
        seed=seed, duration_ms=until - t0, t0=t0, profiles=profiles or {},
    )
    report = run_scenario(spec).nodes[0]
    if report.link_down:
        err = LinkDown(f"node {cfg.node_id} lost its link")
        err.report = report
        raise err
    return report


def run_gateway(cfg: GatewayConfig, nodes: list[NodeSpec], store: TelemetryStore | None = None,
                until: int = 420_000, *, t0: int = 0, seed: int = 0,
                profiles: dict | None = None) -> IngestStats:
    """Run the gateway with *nodes* attached; an empty node list idles to *until*."""
    spec = ScenarioSpec(nodes=nodes, seed=seed, duration_ms=until - t0, t0=t0,
                        profiles=profiles or {}, gateway=cfg)
    return run_scenario(spec, store).stats
