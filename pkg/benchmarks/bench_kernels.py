"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--number N]
"""

import argparse
import importlib
import json
import timeit

from agrimon import _purepy

FRAME = bytes(range(256)) * 4
FILTERS = ["station/+/temperature", "station/#", "+/+/+", "station/n1/humidity"]
TOPICS = ["station/n1/temperature", "station/n2/wind_speed", "$SYS/broker/load", "a/b/c/d"]


def workloads(mod):
    return {
        "crc16_1k": lambda: mod.crc16(FRAME),
        "varint_roundtrip": lambda: [
            mod.decode_remaining_length(mod.encode_remaining_length(n)) for n in
            (0, 127, 128, 16383, 16384, 2097151, 2097152, 268435455)
        ],
        "topic_matches": lambda: [mod.topic_matches(f, t) for f in FILTERS for t in TOPICS],
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--number", type=int, default=2000)
    args = ap.parse_args()
    backends = {"python": _purepy}
    try:
        backends["cython"] = importlib.import_module("agrimon._speedups")
    except ImportError:
        print("compiled extension not built; timing the Python fallback only")
    results = {}
    for name, mod in backends.items():
        for label, fn in workloads(mod).items():
            best = min(timeit.repeat(fn, number=args.number, repeat=5))
            results.setdefault(label, {})[name] = best / args.number * 1e6
    for label, row in results.items():
        line = f"{label:18s} " + "  ".join(f"{k}={v:8.2f}us" for k, v in row.items())
        if len(row) == 2:
            line += f"  speedup={row['python'] / row['cython']:.1f}x"
        print(line)
    print(json.dumps(results, sort_keys=True))


if __name__ == "__main__":
    main()
