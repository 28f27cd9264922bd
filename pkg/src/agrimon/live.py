"""Live mode: the same state machines driven over real TCP sockets.

Timers use the monotonic clock; capture timestamps use UTC wall-clock
milliseconds.
"""

from __future__ import annotations

import asyncio
import logging
import time

from agrimon.errors import AgrimonError, Malformed, MqttError
from agrimon.gateway import Gateway, GatewayConfig
from agrimon.mqtt.broker import Broker
from agrimon.mqtt.client import Session
from agrimon.mqtt.events import (
    ClientConnected,
    Close,
    ConnectionLost,
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
from agrimon.mqtt.packets import ConnAck, StreamDecoder, encode_packet
from agrimon.node import NodeConfig, NodeReport, Sampler, SyntheticEnvironment, serialize_packet
from agrimon.store import TelemetryStore

log = logging.getLogger(__name__)

TICK_SECONDS = 0.2


class BindFailure(AgrimonError):
    pass


class ConnectFailure(AgrimonError):
    pass


def mono_ms() -> int:
    return int(time.monotonic() * 1000)


def wall_ms() -> int:
    return int(time.time() * 1000)


def parse_address(addr: str, default_port: int = 1883) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr, default_port
    if not port.isdigit() or not 0 < int(port) < 65536:
        raise ValueError(f"bad port in address {addr!r}")
    return host or "127.0.0.1", int(port)


# -- broker ---------------------------------------------------------------------------


class BrokerServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 1883):
        self.host, self.port = host, port
        self.broker = Broker()
        self._writers: dict[str, asyncio.StreamWriter] = {}
        self._server = None
        self._ticker = None
        self._n = 0

    async def start(self) -> tuple[str, int]:
        try:
            self._server = await asyncio.start_server(self._handle, self.host, self.port)
        except OSError as exc:
            raise BindFailure(f"cannot listen on {self.host}:{self.port}: {exc}") from None
        self.port = self._server.sockets[0].getsockname()[1]
        self._ticker = asyncio.create_task(self._tick_loop())
        return self.host, self.port

    async def stop(self) -> None:
        if self._ticker:
            self._ticker.cancel()
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        for w in list(self._writers.values()):
            w.close()
        self._writers.clear()

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(TICK_SECONDS)
            self._apply(self.broker.step(Tick(mono_ms())))

    def _apply(self, actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                w = self._writers.get(a.conn)
                if w is not None and not w.is_closing():
                    w.write(encode_packet(a.packet))
            elif isinstance(a, Close):
                log.info("closing %s: %s", a.conn, a.reason)
                w = self._writers.pop(a.conn, None)
                if w is not None:
                    w.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._n += 1
        peer = writer.get_extra_info("peername")
        conn = f"{peer[0]}:{peer[1]}#{self._n}" if peer else f"conn#{self._n}"
        self._writers[conn] = writer
        self.broker.step(ClientConnected(conn, mono_ms()))
        decoder = StreamDecoder()
        try:
            while conn in self._writers:
                data = await reader.read(65536)
                if not data:
                    break
                try:
                    packets = decoder.feed(data)
                except Malformed as exc:
                    log.info("malformed packet from %s: %s", conn, exc)
                    break
                for p in packets:
                    self._apply(self.broker.step(PacketIn(p, mono_ms(), conn)))
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            self.broker.step(ConnectionLost(conn, mono_ms()))
            w = self._writers.pop(conn, None)
            if w is not None:
                w.close()


# -- client ---------------------------------------------------------------------------


class LiveClient:
    """An MQTT client session bound to one TCP connection."""

    def __init__(self, client_id: str, host: str, port: int, keep_alive: int = 60,
                 on_message=None, retry_ms: int | None = None):
        self.host, self.port = host, port
        self.session = Session(client_id, keep_alive)
        if retry_ms is not None:
            self.session.retry_ms = retry_ms
        self.on_message = on_message
        self.errors: list[str] = []
        self.return_code: int | None = None
        self._reader = None
        self._writer = None
        self._tasks: list[asyncio.Task] = []
        self._connack: asyncio.Future | None = None
        self.closed = asyncio.Event()

    async def connect(self, attempts: int = 5, backoff: float = 0.2, timeout: float = 5.0) -> int:
        """Open the socket (with retry/backoff) and wait for CONNACK; returns its code."""
        delay = backoff
        for attempt in range(1, attempts + 1):
            try:
                self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
                break
            except OSError as exc:
                if attempt == attempts:
                    raise ConnectFailure(
                        f"cannot reach {self.host}:{self.port} after {attempts} attempts: {exc}"
                    ) from None
                await asyncio.sleep(delay)
                delay *= 2
        self._connack = asyncio.get_running_loop().create_future()
        self._tasks = [asyncio.create_task(self._read_loop()), asyncio.create_task(self._tick_loop())]
        self._apply(self.session.step(ConnectRequest(mono_ms())))
        try:
            self.return_code = await asyncio.wait_for(self._connack, timeout)
        except asyncio.TimeoutError:
            raise ConnectFailure(f"no CONNACK from {self.host}:{self.port}") from None
        return self.return_code

    def _apply(self, actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                if self._writer is not None and not self._writer.is_closing():
                    self._writer.write(encode_packet(a.packet))
            elif isinstance(a, Deliver):
                if self.on_message is not None:
                    self.on_message(a.topic, a.payload)
            elif isinstance(a, SignalError):
                log.warning("%s: %s", self.session.client_id, a.reason)
                self.errors.append(a.reason)

    async def _read_loop(self) -> None:
        decoder = StreamDecoder()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                for p in decoder.feed(data):
                    if isinstance(p, ConnAck) and self._connack and not self._connack.done():
                        self._connack.set_result(p.return_code)
                    self._apply(self.session.step(PacketIn(p, mono_ms())))
        except (ConnectionError, MqttError) as exc:
            self.errors.append(str(exc))
        finally:
            self.session.connected = False
            if self._connack and not self._connack.done():
                self._connack.set_exception(ConnectFailure("connection closed before CONNACK"))
            self.closed.set()

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(TICK_SECONDS)
            self._apply(self.session.step(Tick(mono_ms())))

    def publish(self, topic: str, payload: bytes, qos: int = 1) -> None:
        self._apply(self.session.step(PublishRequest(topic, payload, qos, mono_ms())))

    def subscribe(self, topic_filter: str, qos: int = 1) -> None:
        self._apply(self.session.step(SubscribeRequest(((topic_filter, qos),), mono_ms())))

    @property
    def connected(self) -> bool:
        return self.session.connected and not self.closed.is_set()

    async def wait_idle(self, timeout: float = 5.0) -> bool:
        """Wait until every qos-1 publish and subscribe is acknowledged."""
        deadline = time.monotonic() + timeout
        while self.session.inflight or self.session.pending_subs:
            if time.monotonic() > deadline or self.closed.is_set():
                return False
            await asyncio.sleep(0.01)
        return True

    async def close(self) -> None:
        if self._writer is not None and not self._writer.is_closing():
            self._apply(self.session.step(DisconnectRequest(mono_ms())))
            try:
                await self._writer.drain()
            except ConnectionError:
                pass
            self._writer.close()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)


# -- node and gateway processes -------------------------------------------------------------


async def run_node_live(cfg: NodeConfig, host: str, port: int, *, count: int | None = None,
                        seed: int = 0, stop: asyncio.Event | None = None,
                        attempts: int = 5, on_connack=None) -> NodeReport:
    client = LiveClient(cfg.node_id, host, port)
    rc = await client.connect(attempts=attempts)
    if on_connack is not None:
        on_connack(rc)
    report = NodeReport(cfg.node_id, cfg.protocol.value)
    if rc != 0:
        report.errors.append(f"CONNACK return code {rc}")
        await client.close()
        return report
    source = SyntheticEnvironment(seed, cfg.node_id, calibration=cfg.calibration)
    sampler = Sampler(cfg, source)
    stop = stop or asyncio.Event()
    interval = cfg.sample_interval_ms / 1000
    sampler.initialize(wall_ms() - cfg.sample_interval_ms)
    try:
        while not stop.is_set() and not client.closed.is_set():
            packets = sampler.sample_once(wall_ms())
            report.samples += 1
            for p in packets:
                client.publish(p.topic, serialize_packet(p), cfg.qos)
                report.published += 1
            if count is not None and report.samples >= count:
                break
            try:
                await asyncio.wait_for(stop.wait(), interval)
            except asyncio.TimeoutError:
                pass
        await client.wait_idle()
    finally:
        report.faults = sampler.faults
        report.rain_tips_total = sampler.rain_tips_total
        report.retransmissions = client.session.stats.retransmissions
        report.errors.extend(client.errors)
        report.link_down = client.closed.is_set()
        await client.close()
    return report


class LiveGateway:
    """Gateway ingest over a real broker, optionally forwarding upstream."""

    def __init__(self, cfg: GatewayConfig, host: str, port: int, store: TelemetryStore):
        self.cfg = cfg
        self.gateway = Gateway(cfg, store)
        self.client = LiveClient("gateway", host, port, on_message=self._on_message)
        self.upstream_addr = None
        if cfg.upstream:
            self.upstream_addr = parse_address(cfg.upstream)
        self.upstream_client: LiveClient | None = None

    def _on_message(self, topic: str, payload: bytes) -> None:
        self.gateway.ingest(topic, payload)
        self._flush_upstream()

    def _flush_upstream(self) -> None:
        up = self.upstream_client
        if up is None or not up.connected:
            return
        for p in self.gateway.upstream.drain():
            up.publish(p.topic, serialize_packet(p), 1)
            self.gateway.stats.upstream_forwarded += 1

    async def _upstream_loop(self, stop: asyncio.Event) -> None:
        host, port = self.upstream_addr
        while not stop.is_set():
            if self.upstream_client is None or not self.upstream_client.connected:
                if self.upstream_client is not None:
                    await self.upstream_client.close()
                self.upstream_client = LiveClient("gateway-up", host, port)
                try:
                    await self.upstream_client.connect(attempts=1)
                except ConnectFailure as exc:
                    log.warning("upstream down: %s", exc)
                    self.upstream_client = None
            self._flush_upstream()
            try:
                await asyncio.wait_for(stop.wait(), 1.0)
            except asyncio.TimeoutError:
                pass

    async def run(self, stop: asyncio.Event, attempts: int = 5) -> dict:
        rc = await self.client.connect(attempts=attempts)
        if rc != 0:
            raise ConnectFailure(f"broker refused gateway, return code {rc}")
        self.client.subscribe(self.cfg.subscribe_filter, 1)
        tasks = []
        if self.upstream_addr is not None:
            tasks.append(asyncio.create_task(self._upstream_loop(stop)))
        closed = asyncio.create_task(self.client.closed.wait())
        stopped = asyncio.create_task(stop.wait())
        await asyncio.wait([closed, stopped], return_when=asyncio.FIRST_COMPLETED)
        stop.set()
        closed.cancel()
        stopped.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        if self.upstream_client is not None:
            await self.upstream_client.wait_idle(2.0)
            await self.upstream_client.close()
        await self.client.close()
        return self.gateway.stats.to_dict()
