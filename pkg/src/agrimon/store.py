"""Append-only telemetry store and two-node comparison.

The store is a JSON-lines file, one row per line, with an in-memory index
rebuilt on open. A torn final line (crash mid-append) is discarded and cut
off on open; damage anywhere else raises ``StoreCorrupt``.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

from agrimon.errors import AgrimonError

ROW_KEYS = ("node_id", "name", "units", "value", "captured_at", "protocol")
DEFAULT_ALIGN_TOLERANCE_MS = 2_000


class StoreError(AgrimonError):
    pass


class DuplicateKey(StoreError):
    pass


class StoreCorrupt(StoreError):
    pass


class EmptyPair(AgrimonError, ValueError):
    pass


@dataclass(frozen=True)
class StoreRow:
    node_id: str
    name: str
    units: str
    value: float
    captured_at: int
    protocol: str

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.node_id, self.name, self.captured_at)

    def to_json(self) -> str:
        return json.dumps(
            {k: getattr(self, k) for k in ROW_KEYS}, separators=(",", ":"), ensure_ascii=False
        )

    @classmethod
    def from_dict(cls, d: dict) -> "StoreRow":
        if set(d) != set(ROW_KEYS):
            raise ValueError(f"row keys {sorted(d)} != {sorted(ROW_KEYS)}")
        return cls(
            str(d["node_id"]), str(d["name"]), str(d["units"]),
            float(d["value"]), int(d["captured_at"]), str(d["protocol"]),
        )

    @classmethod
    def from_packet(cls, p) -> "StoreRow":
        return cls(p.node_id, p.name, p.units, p.value, p.captured_at, p.protocol.value)


@dataclass(frozen=True)
class SeriesQuery:
    node_id: str | None = None
    name: str | None = None
    t0: int | None = None
    t1: int | None = None

    def __post_init__(self):
        if self.t0 is not None and self.t1 is not None and self.t0 > self.t1:
            raise ValueError(f"empty time range [{self.t0}, {self.t1}]")

    def accepts(self, row: StoreRow) -> bool:
        return (
            (self.node_id is None or row.node_id == self.node_id)
            and (self.name is None or row.name == self.name)
            and (self.t0 is None or row.captured_at >= self.t0)
            and (self.t1 is None or row.captured_at <= self.t1)
        )


class TelemetryStore:
    """Rows in arrival order, persisted as JSON lines when *path* is given.

    Every append is flushed to the OS before returning, so it survives a
    killed process; ``fsync=True`` additionally forces it to disk.
    """

    def __init__(self, path: str | Path | None = None, fsync: bool = False, truncate: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.rows: list[StoreRow] = []
        self._keys: set[tuple[str, str, int]] = set()
        self.recovered_partial = False
        self._fh = None
        if self.path is not None:
            if truncate or not self.path.exists():
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_bytes(b"")
            else:
                self._load()
            self._fh = open(self.path, "ab")

    def _load(self) -> None:
        data = self.path.read_bytes()
        good_end = 0
        lines = data.split(b"\n")
        # the chunk after the last newline is a torn write unless empty
        for i, line in enumerate(lines):
            last = i == len(lines) - 1
            if not line:
                if not last:
                    good_end += 1
                continue
            try:
                row = StoreRow.from_dict(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                if last:
                    break
                raise StoreCorrupt(f"{self.path}: bad row on line {i + 1}: {exc}") from None
            if last:
                # complete JSON but no trailing newline: still a torn write
                break
            if row.key in self._keys:
                raise StoreCorrupt(f"{self.path}: duplicate key {row.key} on line {i + 1}")
            self._keys.add(row.key)
            self.rows.append(row)
            good_end += len(line) + 1
        if good_end < len(data):
            self.recovered_partial = True
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, key) -> bool:
        return key in self._keys

    def append(self, row: StoreRow) -> None:
        if row.key in self._keys:
            raise DuplicateKey(f"row {row.key} already stored")
        if self._fh is not None:
            self._fh.write(row.to_json().encode("utf-8") + b"\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        self._keys.add(row.key)
        self.rows.append(row)

    def query(self, q: SeriesQuery = SeriesQuery()) -> list[StoreRow]:
        hits = [r for r in self.rows if q.accepts(r)]
        hits.sort(key=lambda r: r.captured_at)
        return hits

    def series(self, node_id: str, name: str) -> list[tuple[int, float]]:
        return [(r.captured_at, r.value) for r in self.query(SeriesQuery(node_id, name))]


# -- analysis -----------------------------------------------------------------------


@dataclass(frozen=True)
class PairPoint:
    t: int
    value_a: float
    value_b: float


def align(a, b, tolerance_ms: int = DEFAULT_ALIGN_TOLERANCE_MS) -> list[PairPoint]:
    """Pair samples of two ``(t, value)`` series by nearest timestamp.

    Candidate pairs within *tolerance_ms* are taken greedily, smallest gap
    first (ties by ``ta + tb``), each sample used at most once. The result is
    labelled with series *a*'s timestamps and sorted by them. Because the
    ordering key is symmetric in the two series, swapping *a* and *b* yields
    the same number of pairs.
    """
    b_times = [tb for tb, _ in b]
    candidates = []
    for i, (ta, _) in enumerate(a):
        j = bisect.bisect_left(b_times, ta - tolerance_ms)
        while j < len(b_times) and b_times[j] <= ta + tolerance_ms:
            tb = b_times[j]
            candidates.append((abs(ta - tb), ta + tb, i, j))
            j += 1
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append(PairPoint(a[i][0], a[i][1], b[j][1]))
    pairs.sort(key=lambda p: p.t)
    return pairs


def max_abs_diff(pairs: list[PairPoint]) -> tuple[float, int]:
    """Largest ``|value_a - value_b|`` and the earliest timestamp reaching it."""
    if not pairs:
        raise EmptyPair("no aligned samples to compare")
    best, at = -1.0, None
    for p in sorted(pairs, key=lambda p: p.t):
        d = abs(p.value_a - p.value_b)
        if d > best:
            best, at = d, p.t
    return best, at


def _fmt(v: float) -> str:
    return format(v, ".6g")


def export_rows_csv(rows: list[StoreRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "node", "name", "value"])
    for r in rows:
        w.writerow([r.captured_at, r.node_id, r.name, _fmt(r.value)])
    return buf.getvalue()


def export_pairs_csv(pairs: list[PairPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "value_a", "value_b", "diff"])
    for p in pairs:
        w.writerow([p.t, _fmt(p.value_a), _fmt(p.value_b), _fmt(p.value_a - p.value_b)])
    return buf.getvalue()


def export_plot_data(source) -> str:
    """CSV for plotting: a list of ``StoreRow`` or of ``PairPoint``."""
    source = list(source)
    if source and isinstance(source[0], PairPoint):
        return export_pairs_csv(source)
    return export_rows_csv(source)
