"""``agrimon`` command-line entry point.

Exit codes are stable so the commands can be scripted:

* 0  success
* 1  runtime failure (bind/connect failure, corrupt store, I/O error)
* 2  usage or scenario-file error
* 3  empty result (``query``/``compare`` matched nothing)
* 4  store file not found
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from importlib import resources
from pathlib import Path

from agrimon import __version__
from agrimon.errors import AgrimonError
from agrimon.transport import Protocol

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_EMPTY = 3
EXIT_NO_STORE = 4

CONFIG_DIR_ENV = "AGRIMON_CONFIG_DIR"
BUNDLED_SCENARIOS = ("paper_repro.json",)


def _err(msg: str) -> None:
    print(f"agrimon: {msg}", file=sys.stderr)


def resolve_scenario(name: str) -> Path:
    """Find a scenario file: as given, then in $AGRIMON_CONFIG_DIR, then bundled."""
    p = Path(name)
    if p.exists():
        return p
    cfg_dir = os.environ.get(CONFIG_DIR_ENV)
    if cfg_dir and not p.is_absolute():
        candidate = Path(cfg_dir) / p
        if candidate.exists():
            return candidate
    if p.name == name and name in BUNDLED_SCENARIOS:
        ref = resources.files("agrimon") / "data" / name
        if ref.is_file():
            return Path(str(ref))
    raise FileNotFoundError(name)


def _open_store(path: str):
    from agrimon.store import TelemetryStore

    p = Path(path)
    if not p.is_file():
        return None
    return TelemetryStore(p)


# -- offline commands -------------------------------------------------------------------------


def cmd_scenario(args) -> int:
    from agrimon.scenario import ScenarioSpec, SpecError, run_scenario

    try:
        path = resolve_scenario(args.file)
    except FileNotFoundError:
        _err(f"scenario file not found: {args.file}")
        return EXIT_USAGE
    out_dir = Path(args.out) if args.out else Path.cwd()
    try:
        spec = ScenarioSpec.load(path, out_dir)
    except SpecError as exc:
        _err(f"{path}: {exc}")
        return EXIT_USAGE
    if args.seed is not None:
        spec.seed = args.seed
    result = run_scenario(spec)
    summary = {
        "stored": result.stats.stored,
        "received": result.stats.received,
        "duplicates": result.stats.duplicates,
        "rejected": result.stats.rejected,
        "rows": len(result.store),
        "end_ms": result.end_ms,
        "store": spec.store_path,
        "delivery_log": spec.delivery_log_path,
        "stats": spec.stats_path,
    }
    print(json.dumps(summary, sort_keys=True))
    print(f"wall_seconds={result.wall_seconds:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_query(args) -> int:
    from agrimon.store import SeriesQuery, export_rows_csv

    try:
        q = SeriesQuery(args.node, args.name, args.t_from, args.t_to)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    store = _open_store(args.store)
    if store is None:
        _err(f"store not found: {args.store}")
        return EXIT_NO_STORE
    with store:
        rows = store.query(q)
    sys.stdout.write(export_rows_csv(rows))
    return EXIT_OK if rows else EXIT_EMPTY


def cmd_compare(args) -> int:
    from agrimon.store import align, export_pairs_csv, max_abs_diff

    store = _open_store(args.store)
    if store is None:
        _err(f"store not found: {args.store}")
        return EXIT_NO_STORE
    with store:
        a = store.series(args.a, args.name)
        b = store.series(args.b, args.name)
    pairs = align(a, b, args.tolerance)
    csv_text = export_pairs_csv(pairs)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    if not pairs:
        print("max_diff=nan at t=none pairs=0")
        if not args.csv:
            sys.stdout.write(csv_text)
        return EXIT_EMPTY
    diff, at = max_abs_diff(pairs)
    print(f"max_diff={diff:.6g} at t={at} pairs={len(pairs)}")
    if not args.csv:
        sys.stdout.write(csv_text)
    return EXIT_OK


# -- live commands ----------------------------------------------------------------------------


def _stop_event(loop, extra=None) -> asyncio.Event:
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    if extra is not None and hasattr(signal, "SIGUSR1"):
        try:
            loop.add_signal_handler(signal.SIGUSR1, extra)
        except (NotImplementedError, RuntimeError):
            pass
    return stop


async def _stop_after(stop: asyncio.Event, seconds: float | None) -> None:
    if seconds is None:
        return
    try:
        await asyncio.wait_for(stop.wait(), seconds)
    except asyncio.TimeoutError:
        stop.set()


def cmd_broker(args) -> int:
    from agrimon.live import BrokerServer, parse_address

    host, port = parse_address(args.listen)

    async def main() -> None:
        server = BrokerServer(host, port)
        bound = await server.start()
        print(json.dumps({"listening": f"{bound[0]}:{bound[1]}"}), flush=True)
        stop = _stop_event(asyncio.get_running_loop())
        await _stop_after(stop, args.duration)
        await stop.wait()
        await server.stop()
        s = server.broker.stats
        print(json.dumps({"received": s.received, "forwarded": s.forwarded,
                          "retransmitted": s.retransmitted, "expired": s.expired,
                          "abandoned": s.abandoned}, sort_keys=True), flush=True)

    asyncio.run(main())
    return EXIT_OK


def cmd_gateway(args) -> int:
    from agrimon.gateway import GatewayConfig
    from agrimon.live import LiveGateway, parse_address
    from agrimon.store import TelemetryStore

    host, port = parse_address(args.broker)
    if args.upstream:
        parse_address(args.upstream)
    cfg = GatewayConfig(subscribe_filter=args.filter, upstream=args.upstream)

    async def main() -> dict:
        with TelemetryStore(args.store, fsync=args.fsync) as store:
            gw = LiveGateway(cfg, host, port, store)

            def dump():
                print(gw.gateway.stats.to_json(), flush=True)

            stop = _stop_event(asyncio.get_running_loop(), dump)
            timer = asyncio.create_task(_stop_after(stop, args.duration))
            try:
                return await gw.run(stop, attempts=args.attempts)
            finally:
                timer.cancel()

    stats = asyncio.run(main())
    print(json.dumps(stats, sort_keys=True), flush=True)
    return EXIT_OK


def cmd_node(args) -> int:
    from agrimon.live import parse_address, run_node_live
    from agrimon.node import NodeConfig

    host, port = parse_address(args.broker)
    cfg = NodeConfig(node_id=args.id, protocol=Protocol(args.protocol),
                     sample_interval_ms=args.interval, qos=args.qos)

    async def main():
        stop = _stop_event(asyncio.get_running_loop())
        timer = asyncio.create_task(_stop_after(stop, args.duration))
        try:
            return await run_node_live(cfg, host, port, count=args.count, seed=args.seed,
                                       stop=stop, attempts=args.attempts,
                                       on_connack=lambda rc: print(json.dumps({"connack": rc}),
                                                                   flush=True))
        finally:
            timer.cancel()

    report = asyncio.run(main())
    print(json.dumps(report.to_dict(), sort_keys=True), flush=True)
    return EXIT_OK if not report.errors else EXIT_RUNTIME


# -- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agrimon", description="Agro-meteorological station stack")
    parser.add_argument("--version", action="version", version=f"agrimon {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="run a seeded simulation")
    p.add_argument("file", help=f"scenario JSON (also looked up in ${CONFIG_DIR_ENV} and bundled)")
    p.add_argument("--out", help="directory for output files (default: cwd)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("query", help="print stored rows as CSV")
    p.add_argument("--store", required=True)
    p.add_argument("--node")
    p.add_argument("--name", choices=[k.value for k in _kinds()])
    p.add_argument("--from", dest="t_from", type=int, metavar="MS")
    p.add_argument("--to", dest="t_to", type=int, metavar="MS")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("compare", help="align two nodes' series and report the max difference")
    p.add_argument("--store", required=True)
    p.add_argument("--a", required=True, metavar="NODE")
    p.add_argument("--b", required=True, metavar="NODE")
    p.add_argument("--name", required=True, choices=[k.value for k in _kinds()])
    p.add_argument("--tolerance", type=int, default=2000, metavar="MS")
    p.add_argument("--csv", metavar="PATH", help="write pairs here instead of stdout")
    p.set_defaults(func=cmd_compare)

    protocols = [x.value for x in Protocol]

    p = sub.add_parser("broker", help="run an MQTT broker on a TCP socket")
    p.add_argument("--listen", default="127.0.0.1:1883", metavar="H:P")
    p.add_argument("--duration", type=float, metavar="S", help="stop after S seconds")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("gateway", help="ingest from a live broker into a store")
    p.add_argument("--broker", required=True, metavar="H:P")
    p.add_argument("--upstream", metavar="H:P", help="republish stored packets here")
    p.add_argument("--store", default="store.jsonl")
    p.add_argument("--filter", default="station/#")
    p.add_argument("--fsync", action="store_true")
    p.add_argument("--attempts", type=int, default=5, help="connect attempts before giving up")
    p.add_argument("--duration", type=float, metavar="S")
    p.set_defaults(func=cmd_gateway)

    p = sub.add_parser("node", help="sample a synthetic station and publish to a live broker")
    p.add_argument("--broker", required=True, metavar="H:P")
    p.add_argument("--protocol", required=True, choices=protocols)
    p.add_argument("--interval", type=int, default=12000, metavar="MS")
    p.add_argument("--id", required=True)
    p.add_argument("--qos", type=int, choices=(0, 1), default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, help="stop after this many sampling rounds")
    p.add_argument("--attempts", type=int, default=5)
    p.add_argument("--duration", type=float, metavar="S")
    p.set_defaults(func=cmd_node)
    return parser


def _kinds():
    from agrimon.sensors import VariableKind

    return list(VariableKind)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        # bad flag values caught after argparse (addresses, node ids, intervals)
        _err(str(exc))
        return EXIT_USAGE
    except AgrimonError as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except OSError as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
