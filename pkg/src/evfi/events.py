"""Event streams, voxel grids, reversal/splitting and a frame-pair event simulator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

LOG_EPS = 1e-3
DEFAULT_BINS = 16


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _as_arrays(t, x, y, p):
    return (np.asarray(t, dtype=np.uint64).reshape(-1), np.asarray(x, dtype=np.uint16).reshape(-1),
            np.asarray(y, dtype=np.uint16).reshape(-1), np.asarray(p, dtype=np.int8).reshape(-1))


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events on a ``width`` x ``height`` sensor over ``[t_start, t_end]`` (microseconds)."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        t, x, y, p = _as_arrays(self.t, self.x, self.y, self.p)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event field arrays differ in length")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor geometry must be positive, got {self.width}x{self.height}")
        if self.t_end < self.t_start:
            raise ValueError(f"window end {self.t_end} precedes start {self.t_start}")
        if len(t):
            if np.any(t[1:] < t[:-1]):
                raise ValueError("events are not sorted by timestamp")
            if t[0] < self.t_start or t[-1] > self.t_end:
                raise ValueError(f"events span [{t[0]}, {t[-1]}] outside window [{self.t_start}, {self.t_end}]")
            if x.max() >= self.width or y.max() >= self.height:
                raise ValueError("event coordinates outside sensor geometry")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be -1 or +1")

    @classmethod
    def empty(cls, width: int, height: int, t_start: int, t_end: int) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), width, height, t_start, t_end)

    @classmethod
    def from_events(cls, events, width: int, height: int, t_start: int, t_end: int) -> "EventStream":
        events = sorted(events, key=lambda e: e[0])
        if not events:
            return cls.empty(width, height, t_start, t_end)
        t, x, y, p = zip(*events)
        return cls(t, x, y, p, width, height, t_start, t_end)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    def same_as(self, other: "EventStream") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.t_start == other.t_start and self.t_end == other.t_end
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def select(self, mask: np.ndarray, t_start: int, t_end: int) -> "EventStream":
        return EventStream(self.t[mask], self.x[mask], self.y[mask], self.p[mask],
                           self.width, self.height, t_start, t_end)

    def mirrored(self) -> "EventStream":
        """Horizontal flip of the sensor plane."""
        return EventStream(self.t, (self.width - 1) - self.x.astype(np.int64), self.y, self.p,
                           self.width, self.height, self.t_start, self.t_end)


def voxelize(stream: EventStream, t0: int, t1: int, bins: int = DEFAULT_BINS,
             height: int | None = None, width: int | None = None) -> np.ndarray:
    """Temporal-bilinear voxel grid of shape (bins, H, W); signed polarities summed per bin."""
    if t1 <= t0:
        raise ValueError(f"voxel window must have t1 > t0, got [{t0}, {t1}]")
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    height = stream.height if height is None else height
    width = stream.width if width is None else width
    grid = np.zeros(bins * height * width)
    if len(stream) == 0:
        return grid.reshape(bins, height, width)
    ts = stream.t
    if ts[0] < t0 or ts[-1] > t1:
        raise ValueError(f"events span [{ts[0]}, {ts[-1]}] outside voxel window [{t0}, {t1}]")
    tn = (bins - 1) * (ts.astype(np.float64) - t0) / float(t1 - t0)
    lo = np.floor(tn).astype(np.int64)
    frac = tn - lo
    pol = stream.p.astype(np.float64)
    pix = stream.y.astype(np.int64) * width + stream.x.astype(np.int64)
    hw = height * width
    # lo is at most bins-1; the upper neighbour only exists below it
    grid += np.bincount(lo * hw + pix, weights=pol * (1.0 - frac), minlength=grid.size)
    up = lo < bins - 1
    grid += np.bincount((lo[up] + 1) * hw + pix[up], weights=pol[up] * frac[up], minlength=grid.size)
    return grid.reshape(bins, height, width)


def reverse_events(stream: EventStream) -> EventStream:
    """Reflect timestamps inside the window and flip polarities."""
    if len(stream) == 0:
        return stream
    span = np.uint64(stream.t_start + stream.t_end)
    t = (span - stream.t)[::-1]
    return EventStream(t, stream.x[::-1], stream.y[::-1], -stream.p[::-1],
                       stream.width, stream.height, stream.t_start, stream.t_end)


def split_events(stream: EventStream, t: int) -> tuple[EventStream, EventStream]:
    """Left gets ``ts < t`` over ``[t_start, t]``; right gets ``ts >= t`` over ``[t, t_end]``."""
    if not stream.t_start <= t <= stream.t_end:
        raise ValueError(f"split time {t} outside window [{stream.t_start}, {stream.t_end}]")
    k = int(np.searchsorted(stream.t, np.uint64(t), side="left"))
    left = EventStream(stream.t[:k], stream.x[:k], stream.y[:k], stream.p[:k],
                       stream.width, stream.height, stream.t_start, t)
    right = EventStream(stream.t[k:], stream.x[k:], stream.y[k:], stream.p[k:],
                        stream.width, stream.height, t, stream.t_end)
    return left, right


def log_luminance(frame: np.ndarray) -> np.ndarray:
    """``log(mean_c(frame) + 1e-3)`` for a C x H x W frame."""
    frame = np.asarray(frame, dtype=np.float64)
    lum = frame.mean(axis=0) if frame.ndim == 3 else frame
    return np.log(lum + LOG_EPS)


class EventSimulator:
    """Threshold-crossing event generator with a per-pixel reference level.

    Each call to :meth:`advance` compares the new frame's log luminance with
    the reference, emits one event per full threshold crossing and moves the
    reference by the emitted amount, so sub-threshold change carries over to
    the next frame.  Crossing times are placed by linear interpolation of the
    log luminance between the two frame timestamps.
    """

    def __init__(self, first_frame: np.ndarray, t_start: int, contrast_threshold: float):
        if contrast_threshold <= 0:
            raise ValueError(f"contrast threshold must be positive, got {contrast_threshold}")
        self.threshold = float(contrast_threshold)
        self.prev_log = log_luminance(first_frame)
        self.ref = self.prev_log.copy()
        self.t_prev = int(t_start)
        self.height, self.width = self.prev_log.shape

    def advance(self, frame: np.ndarray, t: int) -> EventStream:
        cur = log_luminance(frame)
        if cur.shape != self.prev_log.shape:
            raise ValueError(f"frame geometry {cur.shape} differs from {self.prev_log.shape}")
        t = int(t)
        if t <= self.t_prev:
            raise ValueError(f"frame time {t} must exceed previous {self.t_prev}")
        c = self.threshold
        diff = cur - self.ref
        # tolerance guards exact multiples of the threshold against rounding
        counts = np.floor(np.abs(diff) / c + 1e-9).astype(np.int64)
        ys, xs = np.nonzero(counts)
        n = counts[ys, xs]
        total = int(n.sum())
        if total == 0:
            stream = EventStream.empty(self.width, self.height, self.t_prev, t)
            self.prev_log = cur
            self.t_prev = t
            return stream

        sign = np.sign(diff[ys, xs]).astype(np.int8)
        rep = np.repeat(np.arange(len(n)), n)
        k = np.arange(total) - np.repeat(np.cumsum(n) - n, n) + 1
        level = self.ref[ys, xs][rep] + sign[rep] * k * c
        start = self.prev_log[ys, xs][rep]
        change = cur[ys, xs][rep] - start
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(np.abs(change) > 0, (level - start) / change, 1.0)
        frac = np.clip(frac, 0.0, 1.0)
        span = t - self.t_prev
        ts = self.t_prev + np.maximum(np.rint(frac * span).astype(np.int64), 1)
        ts = np.minimum(ts, t)

        order = np.lexsort((xs[rep], ys[rep], ts))
        stream = EventStream(ts[order], xs[rep][order], ys[rep][order], sign[rep][order],
                             self.width, self.height, self.t_prev, t)
        self.ref[ys, xs] += sign * n * c
        self.prev_log = cur
        self.t_prev = t
        return stream


def simulate_events(frame_a: np.ndarray, frame_b: np.ndarray, t_a: int, t_b: int,
                    contrast_threshold: float) -> EventStream:
    """Events for a single frame pair, timestamps in ``(t_a, t_b]``."""
    frame_a = np.asarray(frame_a)
    frame_b = np.asarray(frame_b)
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame geometry mismatch: {frame_a.shape} vs {frame_b.shape}")
    if t_b <= t_a:
        raise ValueError(f"need t_b > t_a, got {t_a} and {t_b}")
    sim = EventSimulator(frame_a, t_a, contrast_threshold)
    return sim.advance(frame_b, t_b)


def simulate_sequence(frames, times, contrast_threshold: float) -> EventStream:
    """Chain the simulator over consecutive frames and merge into one stream."""
    sim = EventSimulator(frames[0], times[0], contrast_threshold)
    parts = [sim.advance(f, t) for f, t in zip(frames[1:], times[1:])]
    h, w = sim.height, sim.width
    if not parts:
        return EventStream.empty(w, h, int(times[0]), int(times[0]))
    return EventStream(np.concatenate([s.t for s in parts]), np.concatenate([s.x for s in parts]),
                       np.concatenate([s.y for s in parts]), np.concatenate([s.p for s in parts]),
                       w, h, int(times[0]), int(times[-1]))


def concat_streams(streams) -> EventStream:
    streams = list(streams)
    first = streams[0]
    return EventStream(np.concatenate([s.t for s in streams]), np.concatenate([s.x for s in streams]),
                       np.concatenate([s.y for s in streams]), np.concatenate([s.p for s in streams]),
                       first.width, first.height, first.t_start, streams[-1].t_end)


def random_stream(rng: np.random.Generator, n: int, width: int = 16, height: int = 12,
                  t_start: int = 0, t_end: int = 100_000) -> EventStream:
    """Uniformly random events, for property tests and round-trip checks."""
    t = np.sort(rng.integers(t_start, t_end + 1, size=n)).astype(np.uint64)
    return EventStream(t, rng.integers(0, width, size=n), rng.integers(0, height, size=n),
                       rng.choice(np.array([-1, 1]), size=n), width, height, t_start, t_end)
