"""Event data model, stream ingestion, and slicing into fixed time windows.

Events are kept as parallel numpy arrays (t seconds float64, x/y int32,
optional polarity int8) so that encoding stays fully vectorized. Slices
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EventParseError, GeometryError

BINARY_MAGIC = b"EVN1"
# Packed little-endian record: f64 t_seconds, i32 x, i32 y, i8 polarity.
BINARY_RECORD_DTYPE = np.dtype([("t", "<f8"), ("x", "<i4"), ("y", "<i4"), ("p", "<i1")])


@dataclass(frozen=True)
class CameraGeometry:
    """Sensor pixel grid: ``0 <= x < width``, ``0 <= y < height``."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"geometry must be at least 1x1, got {self.width}x{self.height}")

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)


@dataclass(frozen=True)
class Event:
    """A single camera event. Polarity is carried but unused by encoding."""

    t: float
    x: int
    y: int
    polarity: Optional[int] = None


def _validate_events(t: np.ndarray, x: np.ndarray, y: np.ndarray, geometry: CameraGeometry) -> None:
    if not (len(t) == len(x) == len(y)):
        raise ValueError("t, x, y must have equal length")
    if len(t) == 0:
        return
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        bad = int(np.flatnonzero(~np.isfinite(t) | (t < 0))[0])
        raise ValueError(f"event {bad}: timestamp {t[bad]} must be finite and non-negative")
    inside = geometry.contains(x, y)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise GeometryError(
            f"event {bad}: ({x[bad]}, {y[bad]}) outside geometry "
            f"{geometry.width}x{geometry.height}"
        )


@dataclass
class EventStream:
    """An ordered sequence of events plus the geometry it was recorded on."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    geometry: CameraGeometry
    polarity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        if self.polarity is not None:
            self.polarity = np.asarray(self.polarity, dtype=np.int8)
            if len(self.polarity) != len(self.t):
                raise ValueError("polarity length mismatch")
        _validate_events(self.t, self.x, self.y, self.geometry)

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class EventSlice:
    """Events inside one window ``[t_start, t_start + window]``, sorted by t.

    ``window`` is the full slice length (twice the encoder's time radius).
    Slices are treated as immutable once constructed.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    t_start: float
    window: float
    geometry: CameraGeometry
    polarity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        if self.polarity is not None:
            self.polarity = np.asarray(self.polarity, dtype=np.int8)
        if self.window <= 0:
            raise ValueError("window must be positive")
        if len(self.t) != len(self.x) or len(self.t) != len(self.y):
            raise ValueError("t, x, y must have equal length")
        if len(self.t):
            # A few ulps of slack: rebasing a far-from-zero window can push
            # an edge timestamp just past the bound by rounding alone.
            upper = self.t_start + self.window
            tol = 4.0 * np.spacing(max(abs(upper), self.window))
            if self.t[0] < self.t_start - tol or self.t[-1] > upper + tol:
                raise ValueError(
                    f"timestamps [{self.t.min()}, {self.t.max()}] fall outside "
                    f"window [{self.t_start}, {upper}]"
                )
            if np.any(np.diff(self.t) < 0):
                raise ValueError("slice events must be sorted ascending by t")
        inside = self.geometry.contains(self.x, self.y)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise GeometryError(f"event {bad} at ({self.x[bad]}, {self.y[bad]}) outside geometry")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n(self) -> int:
        return len(self.t)

    def event(self, i: int) -> Event:
        p = int(self.polarity[i]) if self.polarity is not None else None
        return Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), p)


@dataclass(frozen=True)
class QuerySet:
    """Positions into ``EventSlice.events`` at which flow is predicted."""

    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.indices)

    def check_within(self, n: int) -> None:
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise IndexError(f"query indices must lie in [0, {n})")

    @classmethod
    def all(cls, n: int) -> "QuerySet":
        return cls(np.arange(n, dtype=np.int64))

    @classmethod
    def every_kth(cls, n: int, k: int) -> "QuerySet":
        if k < 1:
            raise ValueError("k must be >= 1")
        return cls(np.arange(0, n, k, dtype=np.int64))

    @classmethod
    def random_m(cls, n: int, m: int, seed: int = 0) -> "QuerySet":
        rng = np.random.default_rng(seed)
        m = min(m, n)
        return cls(np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64))


def _parse_csv(path: str, geometry: CameraGeometry) -> EventStream:
    ts: list[float] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    saw_polarity = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if lineno == 1:
                # Optional header: detected by a non-numeric first field.
                try:
                    float(fields[0])
                except ValueError:
                    continue
            if len(fields) not in (3, 4):
                raise EventParseError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            try:
                t = float(fields[0])
                x = int(fields[1])
                y = int(fields[2])
            except ValueError as exc:
                raise EventParseError(f"{path}:{lineno}: {exc}") from exc
            if not np.isfinite(t) or t < 0:
                raise EventParseError(f"{path}:{lineno}: timestamp {t} not finite and non-negative")
            if not (0 <= x < geometry.width):
                raise GeometryError(
                    f"{path}:{lineno}: x={x} violates 0 <= x < {geometry.width}"
                )
            if not (0 <= y < geometry.height):
                raise GeometryError(
                    f"{path}:{lineno}: y={y} violates 0 <= y < {geometry.height}"
                )
            if len(fields) == 4:
                try:
                    p = int(fields[3])
                except ValueError as exc:
                    raise EventParseError(f"{path}:{lineno}: bad polarity {fields[3]!r}") from exc
                if p not in (0, 1, -1):
                    raise EventParseError(f"{path}:{lineno}: polarity must be 0, 1 or -1, got {p}")
                saw_polarity = True
                ps.append(p)
            else:
                ps.append(0)
            ts.append(t)
            xs.append(x)
            ys.append(y)
    polarity = np.array(ps, dtype=np.int8) if saw_polarity else None
    return EventStream(
        t=np.array(ts, dtype=np.float64),
        x=np.array(xs, dtype=np.int32),
        y=np.array(ys, dtype=np.int32),
        geometry=geometry,
        polarity=polarity,
    )


def _parse_binary(path: str) -> EventStream:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != BINARY_MAGIC:
            raise EventParseError(f"{path}: missing {BINARY_MAGIC!r} header")
        width, height = struct.unpack("<II", header[4:12])
        payload = fh.read()
    if len(payload) % BINARY_RECORD_DTYPE.itemsize != 0:
        raise EventParseError(
            f"{path}: truncated record at offset {12 + len(payload)} "
            f"(payload not a multiple of {BINARY_RECORD_DTYPE.itemsize} bytes)"
        )
    geometry = CameraGeometry(width, height)
    records = np.frombuffer(payload, dtype=BINARY_RECORD_DTYPE)
    x = records["x"].astype(np.int32)
    y = records["y"].astype(np.int32)
    inside = geometry.contains(x, y)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise GeometryError(
            f"{path}: record {bad} at ({x[bad]}, {y[bad]}) outside geometry {width}x{height}"
        )
    return EventStream(
        t=records["t"].astype(np.float64),
        x=x,
        y=y,
        geometry=geometry,
        polarity=records["p"].astype(np.int8),
    )


def load_events(path: str, fmt: str = "csv", geometry: Optional[CameraGeometry] = None) -> EventStream:
    """Load an event stream from disk.

    CSV files carry no geometry, so ``geometry`` is required for them;
    binary files embed it in their header (a ``geometry`` argument, if
    given, must match).
    """
    if not os.path.exists(path):
        raise EventParseError(f"{path}: no such file")
    if fmt == "csv":
        if geometry is None:
            raise ValueError("CSV event files require an explicit geometry")
        return _parse_csv(path, geometry)
    if fmt == "binary":
        stream = _parse_binary(path)
        if geometry is not None and geometry != stream.geometry:
            raise GeometryError(
                f"{path}: file geometry {stream.geometry.width}x{stream.geometry.height} "
                f"does not match declared {geometry.width}x{geometry.height}"
            )
        return stream
    raise ValueError(f"unknown event format {fmt!r}")


def write_events_csv(stream: EventStream, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if stream.polarity is not None:
            for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.polarity):
                fh.write(f"{float(t)!r},{x},{y},{p}\n")
        else:
            for t, x, y in zip(stream.t, stream.x, stream.y):
                fh.write(f"{float(t)!r},{x},{y}\n")


def write_events_binary(stream: EventStream, path: str) -> None:
    records = np.empty(len(stream), dtype=BINARY_RECORD_DTYPE)
    records["t"] = stream.t
    records["x"] = stream.x
    records["y"] = stream.y
    records["p"] = stream.polarity if stream.polarity is not None else 0
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", stream.geometry.width, stream.geometry.height))
        fh.write(records.tobytes())


def filter_polarity(stream: EventStream, keep: str) -> EventStream:
    """Drop one polarity before encoding (``keep`` is 'pos' or 'neg')."""
    if keep not in ("pos", "neg"):
        raise ValueError("keep must be 'pos' or 'neg'")
    if stream.polarity is None:
        return stream
    mask = stream.polarity > 0 if keep == "pos" else stream.polarity <= 0
    return EventStream(
        t=stream.t[mask],
        x=stream.x[mask],
        y=stream.y[mask],
        geometry=stream.geometry,
        polarity=stream.polarity[mask],
    )


def slice_stream(
    stream: EventStream,
    delta_t: float,
    stride: float,
    t0: float = 0.0,
) -> list[EventSlice]:
    """Cut a stream into windows of length ``2 * delta_t``.

    Slice ``i`` covers the half-open interval
    ``[t0 + i*stride, t0 + i*stride + 2*delta_t)``; an event exactly at the
    upper edge belongs to the next overlapping slice only. With
    ``stride < 2*delta_t`` an event can appear in several slices. Trailing
    empty slices beyond the last event are not emitted (interior gaps still
    produce empty slices).
    """
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if stride <= 0:
        raise ValueError("stride must be positive")
    window = 2.0 * delta_t
    if len(stream) == 0:
        return []
    t = stream.t
    if np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t = t[order]
        x = stream.x[order]
        y = stream.y[order]
        polarity = stream.polarity[order] if stream.polarity is not None else None
    else:
        x, y, polarity = stream.x, stream.y, stream.polarity

    t_last = float(t[-1])
    slices: list[EventSlice] = []
    i = 0
    while True:
        start = t0 + i * stride
        if start > t_last:
            break
        lo = int(np.searchsorted(t, start, side="left"))
        hi = int(np.searchsorted(t, start + window, side="left"))
        slices.append(
            EventSlice(
                t=t[lo:hi],
                x=x[lo:hi],
                y=y[lo:hi],
                t_start=start,
                window=window,
                geometry=stream.geometry,
                polarity=polarity[lo:hi] if polarity is not None else None,
            )
        )
        i += 1
    # Drop trailing windows that start after the last event but caught nothing.
    while slices and len(slices[-1]) == 0:
        slices.pop()
    return slices


def rebase_slice(sl: EventSlice) -> EventSlice:
    """Shift a slice to local time: ``t -> t - t_start``, ``t_start -> 0``.

    Encoding always operates on rebased slices so that phase arguments stay
    small; the embedding itself depends only on timestamp differences, so
    this is purely a precision guard. Idempotent.
    """
    if sl.t_start == 0.0:
        return sl
    return EventSlice(
        t=sl.t - sl.t_start,
        x=sl.x,
        y=sl.y,
        t_start=0.0,
        window=sl.window,
        geometry=sl.geometry,
        polarity=sl.polarity,
    )
