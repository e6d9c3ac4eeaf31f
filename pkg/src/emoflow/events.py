"""Event-stream containers, file formats, segmentation, and normalization.

An event is (t, x, y, p): timestamp in seconds, pixel coordinates, and
polarity in {-1, +1}.  Streams are kept columnar (numpy arrays) for speed but
index and iterate as Event records.

Two interchangeable on-disk formats:

* CSV: optional "t,x,y,p" header, then one "t,x,y,p" line per event.
* Binary: magic b"EVT1", then a 16-byte header (width uint32, height uint32,
  count uint64), then packed little-endian records (t float64, x float32,
  y float32, p int8), 17 bytes each.

Camera intrinsics live in a key=value text file with keys fx, fy, cx, cy,
width, height.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sIIQ")
_RECORD_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("p", "<i1")])


class FormatError(ValueError):
    """Malformed event file (bad magic, truncated payload, unparseable line)."""


class Event(NamedTuple):
    t: float
    x: float
    y: float
    p: int


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for rectified (distortion-free) images."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        values = {}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
        try:
            return cls(fx=float(values["fx"]), fy=float(values["fy"]),
                       cx=float(values["cx"]), cy=float(values["cy"]),
                       width=int(values["width"]), height=int(values["height"]))
        except KeyError as e:
            raise FormatError(f"{path}: missing intrinsics key {e.args[0]!r}") from e

    def save(self, path) -> None:
        with open(path, "w") as f:
            for key in ("fx", "fy", "cx", "cy"):
                f.write(f"{key} = {format(getattr(self, key), '.17g')}\n")
            f.write(f"width = {self.width}\nheight = {self.height}\n")


class Events:
    """Columnar event stream; len/indexing/iteration yield Event records."""

    def __init__(self, t, x, y, p):
        self.t = np.ascontiguousarray(t, dtype=np.float64)
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")

    @classmethod
    def from_records(cls, records) -> "Events":
        records = list(records)
        return cls(
            [e[0] for e in records], [e[1] for e in records],
            [e[2] for e in records], [e[3] for e in records],
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Events(self.t[i], self.x[i], self.y[i], self.p[i])
        return Event(float(self.t[i]), float(self.x[i]), float(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def xy(self) -> np.ndarray:
        """Pixel coordinates as an (N, 2) array."""
        return np.stack([self.x, self.y], axis=1)

    def validate(self) -> None:
        """Check timestamp ordering and polarity domain; raise on violation."""
        if len(self) and np.any(np.diff(self.t) < 0):
            i = int(np.argmax(np.diff(self.t) < 0))
            raise FormatError(f"timestamps decrease at record {i + 1}")
        bad = (self.p != 1) & (self.p != -1)
        if np.any(bad):
            raise FormatError(f"polarity must be +1 or -1, got {self.p[np.argmax(bad)]} "
                              f"at record {int(np.argmax(bad))}")


@dataclass
class EventSegment:
    """A contiguous slice of a stream plus its normalized-time window."""

    events: Events
    t_start: float
    t_end: float
    intrinsics: CameraIntrinsics | None = None
    index: int = 0

    @property
    def t_span(self) -> float:
        return self.t_end - self.t_start

    def __len__(self) -> int:
        return len(self.events)


def read_events_csv(path) -> Events:
    rows = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            if lineno == 1 and line.replace(" ", "") == "t,x,y,p":
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    ev = Events.from_records(rows)
    ev.validate()
    return ev


def write_events_csv(path, events: Events) -> None:
    with open(path, "w") as f:
        f.write("t,x,y,p\n")
        for i in range(len(events)):
            f.write(f"{format(events.t[i], '.17g')},{format(events.x[i], '.17g')},"
                    f"{format(events.y[i], '.17g')},{int(events.p[i])}\n")


def _binary_io(path, mode):
    # paths and already-open binary streams are both accepted
    if hasattr(path, "read") or hasattr(path, "write"):
        return contextlib.nullcontext(path)
    return open(path, mode)


def read_events_binary(path) -> tuple[Events, int, int]:
    """Read a binary stream; returns (events, width, height)."""
    with _binary_io(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, width, height, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        payload = f.read(count * _RECORD_DTYPE.itemsize)
    if len(payload) != count * _RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: payload holds {len(payload) // _RECORD_DTYPE.itemsize} "
                          f"records, header promised {count}")
    rec = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    ev = Events(rec["t"], rec["x"], rec["y"], rec["p"])
    ev.validate()
    return ev, int(width), int(height)


def write_events_binary(path, events: Events, width: int, height: int) -> None:
    rec = np.empty(len(events), dtype=_RECORD_DTYPE)
    rec["t"] = events.t
    rec["x"] = events.x
    rec["y"] = events.y
    rec["p"] = events.p
    with _binary_io(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, width, height, len(events)))
        f.write(rec.tobytes())


def read_events(path) -> Events:
    """Read either format, sniffing the binary magic."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        return read_events_binary(path)[0]
    return read_events_csv(path)


def segment_stream(events: Events, events_per_segment: int,
                   intrinsics: CameraIntrinsics | None = None) -> list[EventSegment]:
    """Split into fixed-count segments in order; a final partial segment is dropped.

    Each segment's time window is [first event t, last event t] of that
    segment.  Zero-span segments (all timestamps equal) are rejected because
    normalized time would be undefined.
    """
    if events_per_segment < 2:
        raise ValueError("events_per_segment must be at least 2")
    if len(events) and np.any(np.diff(events.t) < 0):
        raise FormatError("events must be sorted by timestamp")
    n_full = len(events) // events_per_segment
    segments = []
    for k in range(n_full):
        sl = events[k * events_per_segment:(k + 1) * events_per_segment]
        t0, t1 = float(sl.t[0]), float(sl.t[-1])
        if t1 <= t0:
            raise ValueError(f"segment {k} has zero time span; cannot normalize")
        segments.append(EventSegment(sl, t0, t1, intrinsics=intrinsics, index=k))
    return segments


def normalize_event(ev: Event, segment: EventSegment,
                    intrinsics: CameraIntrinsics | None = None):
    """Normalize one event against a segment window; returns (x_n 2-vector, t_n)."""
    intr = intrinsics if intrinsics is not None else segment.intrinsics
    if intr is None:
        raise ValueError("no intrinsics available")
    if segment.t_span <= 0:
        raise ValueError("segment has zero time span")
    xn = np.array([(ev.x - intr.cx) / intr.fx, (ev.y - intr.cy) / intr.fy])
    tn = (ev.t - segment.t_start) / segment.t_span
    return xn, tn


def normalize_segment(segment: EventSegment, intrinsics: CameraIntrinsics | None = None):
    """Map a segment to network units: calibrated coordinates, time in [0, 1].

    Returns (tn, xn): tn (N,) with tn = (t - t_start) / t_span, and xn (N, 2)
    with xn = ((px - cx) / fx, (py - cy) / fy).
    """
    intr = intrinsics if intrinsics is not None else segment.intrinsics
    if intr is None:
        raise ValueError("no intrinsics available")
    if segment.t_span <= 0:
        raise ValueError("segment has zero time span")
    ev = segment.events
    tn = (ev.t - segment.t_start) / segment.t_span
    xn = np.stack([(ev.x - intr.cx) / intr.fx,
                   (ev.y - intr.cy) / intr.fy], axis=1)
    return tn, xn


def normalize_points(xy_px: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    xy_px = np.asarray(xy_px, dtype=np.float64)
    return np.stack([(xy_px[..., 0] - intrinsics.cx) / intrinsics.fx,
                     (xy_px[..., 1] - intrinsics.cy) / intrinsics.fy], axis=-1)


def unnormalize_points(xy_n: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    xy_n = np.asarray(xy_n, dtype=np.float64)
    return np.stack([xy_n[..., 0] * intrinsics.fx + intrinsics.cx,
                     xy_n[..., 1] * intrinsics.fy + intrinsics.cy], axis=-1)
