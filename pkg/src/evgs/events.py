"""Event data types, event file I/O, count-based slicing and frame accumulation.

Timestamps are integer microseconds. A stream carries its contrast threshold so
accumulated frames are always expressed in log-intensity units.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

CSV_HEADER = "t_us,x,y,p"
BINARY_MAGIC = b"EVGS"
_BINARY_HEADER = struct.Struct("<4sHHd")
_RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventFormatError(ValueError):
    """Malformed event file content."""


class EventValidationError(ValueError):
    """Event values outside their domain (polarity, coordinates, threshold)."""


class EventOrderError(ValueError):
    """Event timestamps are not sorted nondecreasing."""


class InsufficientEventsError(ValueError):
    """The stream holds fewer events than a requested window."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Sorted events of a ``width`` x ``height`` sensor with contrast threshold ``threshold``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    threshold: float

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(self.t, dtype=np.int64)
        x = np.ascontiguousarray(self.x, dtype=np.int64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        p = np.ascontiguousarray(self.p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise EventValidationError("event field arrays must be 1-D and equally long")
        if self.width <= 0 or self.height <= 0:
            raise EventValidationError(f"invalid sensor size {self.width}x{self.height}")
        if not (self.threshold > 0 and np.isfinite(self.threshold)):
            raise EventValidationError(f"threshold must be positive, got {self.threshold}")
        bad = np.flatnonzero((p != 1) & (p != -1))
        if bad.size:
            raise EventValidationError(f"event {bad[0]}: polarity {int(p[bad[0]])} not in {{-1, +1}}")
        bad = np.flatnonzero((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height))
        if bad.size:
            i = bad[0]
            raise EventValidationError(
                f"event {i}: pixel ({x[i]}, {y[i]}) outside {self.width}x{self.height} sensor"
            )
        bad = np.flatnonzero(np.diff(t) < 0)
        if bad.size:
            raise EventOrderError(f"event {bad[0] + 1}: timestamp decreases ({t[bad[0]]} -> {t[bad[0] + 1]})")
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "threshold", float(self.threshold))

    @classmethod
    def empty(cls, width: int, height: int, threshold: float) -> EventStream:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, threshold)

    @classmethod
    def from_events(cls, events, width: int, height: int, threshold: float) -> EventStream:
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, threshold)

    def __len__(self) -> int:
        return int(self.t.size)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height, self.threshold) == (other.width, other.height, other.threshold)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def start_time(self) -> int:
        """Exclusive lower bound of the stream: first timestamp minus 1 us."""
        if not len(self):
            raise InsufficientEventsError("empty stream has no start time")
        return int(self.t[0]) - 1

    @property
    def end_time(self) -> int:
        return int(self.t[-1])

    def subset(self, start: int, stop: int) -> EventStream:
        return EventStream(
            self.t[start:stop], self.x[start:stop], self.y[start:stop], self.p[start:stop],
            self.width, self.height, self.threshold,
        )


@dataclass(frozen=True)
class EventFrame:
    values: np.ndarray  # (height, width), log-intensity units
    t1: int
    t2: int


def _format_tag(fmt: str) -> str:
    fmt = fmt.lower().lstrip(".")
    if fmt in ("csv", "txt"):
        return "csv"
    if fmt in ("bin", "binary", "evgs"):
        return "bin"
    raise ValueError(f"unknown event format {fmt!r} (expected 'csv' or 'bin')")


def write_events(stream: EventStream, fmt: str = "csv") -> bytes:
    """Serialize ``stream`` to the CSV or binary event format."""
    if _format_tag(fmt) == "csv":
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        if len(stream):
            rows = np.stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)], axis=1)
            np.savetxt(buf, rows, fmt="%d", delimiter=",")
        return buf.getvalue().encode("ascii")
    rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    header = _BINARY_HEADER.pack(BINARY_MAGIC, stream.width, stream.height, stream.threshold)
    return header + rec.tobytes()


def parse_events(
    data: bytes,
    fmt: str = "csv",
    *,
    width: int | None = None,
    height: int | None = None,
    threshold: float | None = None,
) -> EventStream:
    """Parse an event file.

    CSV files carry no sensor metadata, so ``width``, ``height`` and
    ``threshold`` must be supplied for them. Binary files carry all three in
    their header; explicitly passed values must agree with it.
    """
    if _format_tag(fmt) == "bin":
        if len(data) < _BINARY_HEADER.size:
            raise EventFormatError("binary event file shorter than its 16-byte header")
        magic, w, h, thr = _BINARY_HEADER.unpack_from(data)
        if magic != BINARY_MAGIC:
            raise EventFormatError(f"bad magic {magic!r}")
        body = data[_BINARY_HEADER.size:]
        if len(body) % _RECORD_DTYPE.itemsize:
            raise EventFormatError(
                f"record {len(body) // _RECORD_DTYPE.itemsize}: truncated binary record"
            )
        for name, given, stored in (("width", width, w), ("height", height, h), ("threshold", threshold, thr)):
            if given is not None and given != stored:
                raise EventValidationError(f"{name} {given} disagrees with file header {stored}")
        rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
        if rec.size and rec["t"].max() > np.iinfo(np.int64).max:
            raise EventFormatError("timestamp exceeds int64 range")
        return EventStream(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"], w, h, thr)

    if width is None or height is None or threshold is None:
        raise ValueError("CSV event files need width, height and threshold")
    text = data.decode("ascii", errors="replace")
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise EventFormatError(f"line 1: expected header {CSV_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
        if p not in (1, -1):
            raise EventValidationError(f"line {lineno}: polarity {p} not in {{-1, +1}}")
        if rows and t < rows[-1][0]:
            raise EventOrderError(f"line {lineno}: timestamp {t} precedes {rows[-1][0]}")
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, threshold)


def read_event_file(path, **meta) -> EventStream:
    path = str(path)
    fmt = "csv" if path.endswith((".csv", ".txt")) else "bin"
    with open(path, "rb") as fh:
        return parse_events(fh.read(), fmt, **meta)


def write_event_file(path, stream: EventStream) -> None:
    path = str(path)
    fmt = "csv" if path.endswith((".csv", ".txt")) else "bin"
    with open(path, "wb") as fh:
        fh.write(write_events(stream, fmt))


def window_bounds(stream: EventStream, start: int, stop: int) -> tuple[int, int]:
    """Time bounds ``(t1, t2]`` covering events ``start:stop`` of the stream."""
    t1 = int(stream.t[start - 1]) if start > 0 else stream.start_time
    return t1, int(stream.t[stop - 1])


def slice_by_count(stream: EventStream, k: int) -> list[tuple[int, int, range]]:
    """Split the stream into consecutive windows of exactly ``k`` events.

    A trailing remainder shorter than ``k`` is dropped.
    """
    if k <= 0:
        raise ValueError(f"window size must be positive, got {k}")
    if not len(stream):
        raise InsufficientEventsError("cannot slice an empty stream")
    out = []
    for start in range(0, len(stream) - k + 1, k):
        t1, t2 = window_bounds(stream, start, start + k)
        out.append((t1, t2, range(start, start + k)))
    return out


def accumulate_frame(stream: EventStream, t1: int, t2: int) -> EventFrame:
    """Sum ``p * threshold`` per pixel over events with ``t1 < t <= t2``."""
    if t1 >= t2:
        raise ValueError(f"window must satisfy t1 < t2, got ({t1}, {t2}]")
    lo = np.searchsorted(stream.t, t1, side="right")
    hi = np.searchsorted(stream.t, t2, side="right")
    flat = stream.y[lo:hi] * stream.width + stream.x[lo:hi]
    # integer counts first so the result is an exact multiple of the threshold
    counts = np.bincount(flat, weights=stream.p[lo:hi], minlength=stream.width * stream.height)
    values = counts.reshape(stream.height, stream.width) * stream.threshold
    return EventFrame(values, int(t1), int(t2))
