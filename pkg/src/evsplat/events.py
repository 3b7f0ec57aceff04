"""Event stream ingestion, slicing and accumulation into supervision frames."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DimensionMismatch, EmptyStream, FormatError, OutOfBounds

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
EVT1_MAGIC = b"EVT1"
_EVT1_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
CSV_HEADER = ("t_us", "x", "y", "p")


@dataclass(frozen=True)
class Event:
    time: int
    x: int
    y: int
    polarity: int


class EventStream:
    """Time-ordered events stored as a structured array ``(t, x, y, p)``."""

    def __init__(self, events, width: int, height: int):
        self.events = np.asarray(events, dtype=EVENT_DTYPE)
        self.width = int(width)
        self.height = int(height)

    @classmethod
    def from_arrays(cls, t, x, y, p, width, height) -> "EventStream":
        ev = np.empty(len(t), dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        return cls(ev, width, height)

    def __len__(self):
        return self.events.shape[0]

    def __iter__(self):
        for t, x, y, p in self.events:
            yield Event(int(t), int(x), int(y), int(p))

    @property
    def t(self):
        return self.events["t"]

    def validate(self) -> None:
        ev = self.events
        if len(ev) == 0:
            return
        bad = np.nonzero((ev["x"] >= self.width) | (ev["y"] >= self.height))[0]
        if bad.size:
            i = int(bad[0])
            raise OutOfBounds(f"record {i}: pixel ({ev['x'][i]}, {ev['y'][i]}) outside "
                              f"{self.width}x{self.height} sensor")
        badp = np.nonzero((ev["p"] != 1) & (ev["p"] != -1))[0]
        if badp.size:
            raise FormatError(f"polarity {ev['p'][badp[0]]} not in {{-1, 1}}", int(badp[0]))
        if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise FormatError("timestamps are not non-decreasing")


@dataclass
class EventWindow:
    start_time: int
    end_time: int
    events: np.ndarray  # slice of the parent stream's structured array

    def __len__(self):
        return self.events.shape[0]


@dataclass
class EventCameraModel:
    threshold: float = 0.2
    noise_sigma: float = 0.2
    neutralization_pixel_threshold: int | float = 2048
    window_event_count: int = 50_000
    trailing_fraction: float = 0.1

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("event threshold must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.window_event_count <= 0 or self.neutralization_pixel_threshold <= 0:
            raise ValueError("slicing thresholds must be positive")

    @classmethod
    def for_sensor(cls, width: int, height: int, **kw) -> "EventCameraModel":
        """Defaults scaled to the sensor: 2% of pixels trigger a neutralization cut."""
        kw.setdefault("neutralization_pixel_threshold", max(1, int(round(0.02 * width * height))))
        return cls(**kw)


@dataclass
class EventFrame:
    accumulated: np.ndarray
    no_event_mask: np.ndarray
    start_time: int
    end_time: int


class BayerMask:
    """RGGB channel selector; ``channels[y, x]`` is 0 (R), 1 (G) or 2 (B)."""

    def __init__(self, height: int, width: int, enabled: bool = True):
        self.height, self.width, self.enabled = int(height), int(width), bool(enabled)
        yy, xx = np.mgrid[0:height, 0:width]
        self.channels = (yy % 2) + (xx % 2)

    @property
    def shape(self):
        return (self.height, self.width)

    def one_hot(self) -> np.ndarray:
        """``(H, W, 3)`` selection weights (1/3 each when disabled)."""
        if not self.enabled:
            return np.full((self.height, self.width, 3), 1.0 / 3.0)
        out = np.zeros((self.height, self.width, 3))
        np.put_along_axis(out, self.channels[..., None], 1.0, axis=2)
        return out


def apply_bayer(frame_rgb: np.ndarray, mask: BayerMask) -> np.ndarray:
    frame_rgb = np.asarray(frame_rgb)
    if frame_rgb.shape[:2] != mask.shape or frame_rgb.ndim != 3 or frame_rgb.shape[2] != 3:
        raise DimensionMismatch(f"image {frame_rgb.shape} does not match mask {mask.shape}")
    if not mask.enabled:
        return frame_rgb.mean(axis=2)
    return np.take_along_axis(frame_rgb, mask.channels[..., None], axis=2)[..., 0]


# ---------------------------------------------------------------------------
# parsing / writing


def parse_stream(data: bytes, width: int | None = None, height: int | None = None) -> EventStream:
    """Parse CSV (``t_us,x,y,p``) or packed ``EVT1`` bytes.

    CSV carries no sensor size, so ``width`` and ``height`` are required for
    it; for EVT1 they default to the header values.
    """
    if data[:4] == EVT1_MAGIC:
        stream = _parse_evt1(data, width, height)
    else:
        if width is None or height is None:
            raise FormatError("CSV event files need an explicit sensor width and height")
        stream = _parse_csv(data, width, height)
    order = np.argsort(stream.events["t"], kind="stable")
    stream.events = stream.events[order]
    stream.validate()
    return stream


def _parse_csv(data: bytes, width, height) -> EventStream:
    text = data.decode("utf-8")
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        return EventStream(np.empty(0, EVENT_DTYPE), width, height)
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise FormatError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}", 0)
    t, x, y, p = [], [], [], []
    for i, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise FormatError(f"expected 4 fields, got {len(row)}", i)
        try:
            ti, xi, yi, pi = (int(c) for c in row)
        except ValueError as exc:
            raise FormatError(f"non-integer field ({exc})", i) from None
        if ti < 0:
            raise FormatError("negative timestamp", i)
        if pi not in (-1, 1):
            raise FormatError(f"polarity {pi} not in {{-1, 1}}", i)
        if not (0 <= xi < width and 0 <= yi < height):
            raise OutOfBounds(f"record {i}: pixel ({xi}, {yi}) outside {width}x{height} sensor")
        t.append(ti)
        x.append(xi)
        y.append(yi)
        p.append(pi)
    return EventStream.from_arrays(t, x, y, p, width, height)


def _parse_evt1(data: bytes, width, height) -> EventStream:
    head = struct.Struct("<4sIIQ")
    if len(data) < head.size:
        raise FormatError("truncated EVT1 header")
    _, w, h, count = head.unpack_from(data)
    need = head.size + count * _EVT1_RECORD.itemsize
    if len(data) != need:
        raise FormatError(f"EVT1 body holds {len(data) - head.size} bytes, header promises {need - head.size}")
    rec = np.frombuffer(data, dtype=_EVT1_RECORD, count=count, offset=head.size)
    ev = np.empty(count, dtype=EVENT_DTYPE)
    for name in ("t", "x", "y", "p"):
        ev[name] = rec[name]
    if width is not None and (width, height) != (w, h):
        raise FormatError(f"EVT1 sensor {w}x{h} != expected {width}x{height}")
    return EventStream(ev, w, h)


def to_csv(stream: EventStream) -> bytes:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    ev = stream.events
    for t, x, y, p in zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), ev["p"].tolist()):
        buf.write(f"{t},{x},{y},{p}\n")
    return buf.getvalue().encode("utf-8")


def to_evt1(stream: EventStream) -> bytes:
    rec = np.zeros(len(stream), dtype=_EVT1_RECORD)
    for name in ("t", "x", "y", "p"):
        rec[name] = stream.events[name]
    return struct.pack("<4sIIQ", EVT1_MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


# ---------------------------------------------------------------------------
# slicing / accumulation


@njit(cache=True)
def _cut_points(x, y, p, width, height, count_thresh, neutral_thresh):
    seen = np.zeros(width * height, dtype=np.uint8)
    touched = np.empty(x.shape[0], dtype=np.int64)
    n_touched = 0
    cuts = []
    count = 0
    neutral = 0
    for k in range(x.shape[0]):
        pix = int(y[k]) * width + int(x[k])
        bit = 1 if p[k] > 0 else 2
        before = seen[pix]
        if before == 0:
            touched[n_touched] = pix
            n_touched += 1
        if before != 3 and (before | bit) == 3:
            neutral += 1
        seen[pix] = before | bit
        count += 1
        if count >= count_thresh or neutral >= neutral_thresh:
            cuts.append(k + 1)
            for j in range(n_touched):
                seen[touched[j]] = 0
            n_touched = 0
            count = 0
            neutral = 0
    return cuts


def slice_stream(stream: EventStream, model: EventCameraModel) -> list[EventWindow]:
    """Cut the stream on event count or on the number of neutralized pixels.

    A pixel counts as neutralized once it has fired both polarities within
    the current window. A trailing remainder smaller than
    ``trailing_fraction * window_event_count`` is merged into the previous
    window.
    """
    n = len(stream)
    if n == 0:
        raise EmptyStream("cannot slice an empty event stream")
    ev = stream.events
    neutral = model.neutralization_pixel_threshold
    neutral = np.iinfo(np.int64).max if not np.isfinite(neutral) else int(neutral)
    cuts = list(_cut_points(ev["x"], ev["y"], ev["p"], stream.width, stream.height,
                            int(model.window_event_count), neutral))
    bounds = [0] + [c for c in cuts if c < n] + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < model.trailing_fraction * model.window_event_count:
        del bounds[-2]
    windows = []
    prev_end = None
    for a, b in zip(bounds[:-1], bounds[1:]):
        chunk = ev[a:b]
        first = int(chunk["t"][0])
        # consecutive windows tile the timeline where timestamps allow it
        start = first if prev_end is None else min(prev_end, first)
        prev_end = int(chunk["t"][-1]) + 1
        windows.append(EventWindow(start, prev_end, chunk))
    return windows


def polarity_sums(window: EventWindow, width: int, height: int):
    """Per-pixel signed polarity sum and event count for a window."""
    ev = window.events
    flat = ev["y"].astype(np.int64) * width + ev["x"].astype(np.int64)
    sums = np.bincount(flat, weights=ev["p"].astype(np.float64), minlength=width * height)
    counts = np.bincount(flat, minlength=width * height)
    return sums.reshape(height, width), counts.reshape(height, width)


def accumulate(window: EventWindow, model: EventCameraModel, rng_seed, width: int, height: int) -> EventFrame:
    """Event frame in log-intensity units with noise on silent pixels.

    Pixels that fired get ``threshold * sum(polarity)``; silent pixels get
    ``threshold * N(0, noise_sigma**2)`` drawn from ``rng_seed``.
    """
    sums, counts = polarity_sums(window, width, height)
    mask = counts == 0
    acc = model.threshold * sums
    if model.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        noise = rng.normal(0.0, model.noise_sigma, size=(height, width))
        acc = np.where(mask, model.threshold * noise, acc)
    else:
        acc = np.where(mask, 0.0, acc)
    return EventFrame(acc, mask, window.start_time, window.end_time)


def dssim_range(windows, model: EventCameraModel, width: int, height: int, q: float = 99.0) -> float:
    """Shared DSSIM normalization half-range: ``5 * threshold * q-th percentile |polarity sum|``."""
    vals = []
    for w in windows:
        sums, counts = polarity_sums(w, width, height)
        vals.append(np.abs(sums[counts > 0]))
    vals = np.concatenate(vals) if vals else np.zeros(0)
    peak = float(np.percentile(vals, q)) if vals.size else 1.0
    return 5.0 * model.threshold * max(peak, 1.0)
