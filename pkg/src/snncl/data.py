"""Event datasets: synthetic generation, EVT1 file I/O and rasterisation.

EVT1 layout (little-endian)::

    b"EVT1" | channels u32 | classes u32 | samples u32
    per sample: label u32 | event count u32 | events as (time f32 seconds, channel u32)

Event times are sorted within a sample. Sample duration is not stored; the
reader applies one duration to every sample (1 s unless told otherwise).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import SpikeTrain
from .errors import ContractError, EventFormatError

EVT_MAGIC = b"EVT1"
_EVENT_DTYPE = np.dtype([("time", "<f4"), ("channel", "<u4")])
DEFAULT_DURATION = 1.0


@dataclass
class EventSample:
    times: np.ndarray  # float32 seconds, sorted
    channels: np.ndarray  # int64
    label: int
    duration: float = DEFAULT_DURATION

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float32)
        self.channels = np.asarray(self.channels, dtype=np.int64)
        if self.times.shape != self.channels.shape or self.times.ndim != 1:
            raise ContractError("times and channels must be equal-length vectors")
        if np.any(np.diff(self.times) < 0):
            raise ContractError("event times must be sorted")

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, EventSample):
            return NotImplemented
        return (self.label == other.label and self.duration == other.duration
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.channels, other.channels))


@dataclass(frozen=True)
class DatasetManifest:
    channels: int
    classes: int
    samples: int
    source: str
    seed: Optional[int] = None


@dataclass
class EventDataset:
    samples: list
    channels: int
    classes: int
    source: str = "synthetic"
    seed: Optional[int] = None

    def __post_init__(self):
        for s in self.samples:
            if len(s) and (s.channels.min() < 0 or s.channels.max() >= self.channels):
                raise ContractError(f"event channel outside 0..{self.channels - 1}")
            if not 0 <= s.label < self.classes:
                raise ContractError(f"label {s.label} outside 0..{self.classes - 1}")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def manifest(self):
        return DatasetManifest(self.channels, self.classes, len(self.samples), self.source, self.seed)

    def subset(self, indices):
        return EventDataset([self.samples[i] for i in indices], self.channels, self.classes,
                            self.source, self.seed)

    def digest(self):
        return hashlib.sha256(events_bytes(self)).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, EventDataset):
            return NotImplemented
        return (self.channels == other.channels and self.classes == other.classes
                and self.samples == other.samples)


def synth_generate(classes, samples_per_class, channels, seed=0, *, duration=DEFAULT_DURATION,
                   segments=8, active_fraction=0.25, active_rate=(20.0, 60.0),
                   background_rate=2.0, jitter=0.15) -> EventDataset:
    """Class-conditional inhomogeneous Poisson event data.

    Each class owns a piecewise-constant rate profile (``segments`` equal time
    slices by ``channels``); a sample scales the profile by a log-normal gain
    and draws events by thinning. Every sample depends only on
    ``(seed, class, index)``.
    """
    if min(classes, samples_per_class, channels) < 1:
        raise ContractError("classes, samples_per_class and channels must all be >= 1")
    lo, hi = active_rate
    samples = []
    for c in range(classes):
        prof_rng = np.random.default_rng([seed, c])
        active = prof_rng.random((segments, channels)) < active_fraction
        rates = np.where(active, prof_rng.uniform(lo, hi, (segments, channels)), background_rate)
        for i in range(samples_per_class):
            rng = np.random.default_rng([seed, c, i, 1])
            gain = rng.lognormal(0.0, jitter)
            r = rates * gain
            r_max = r.max()
            n = rng.poisson(r_max * duration * channels)
            t = rng.uniform(0.0, duration, n)
            ch = rng.integers(0, channels, n)
            seg = np.minimum((t / duration * segments).astype(np.int64), segments - 1)
            keep = rng.random(n) * r_max < r[seg, ch]
            t = t[keep].astype(np.float32)
            ch = ch[keep]
            # float32 rounding may land on the duration itself
            t = np.minimum(t, np.nextafter(np.float32(duration), np.float32(0)))
            order = np.lexsort((ch, t))
            samples.append(EventSample(t[order], ch[order], c, duration))
    return EventDataset(samples, channels, classes, "synthetic", seed)


def rasterize(sample: EventSample, t_step, width=None) -> SpikeTrain:
    """Bin events into ``t_step`` equal windows; a bin is 1 if any event hit it.

    ``width`` defaults to the highest channel present plus one.
    """
    return SpikeTrain(_raster(sample, t_step, _max_channel(sample) if width is None else width))


def _max_channel(sample):
    return int(sample.channels.max()) + 1 if len(sample) else 1


def _raster(sample, t_step, width):
    if t_step < 1:
        raise ContractError("t_step must be >= 1")
    out = np.zeros((t_step, width), dtype=np.uint8)
    if len(sample):
        bins = np.floor(sample.times.astype(np.float64) * t_step / sample.duration).astype(np.int64)
        np.clip(bins, 0, t_step - 1, out=bins)
        out[bins, sample.channels] = 1
    return out


def rasterize_dataset(samples, t_step, channels):
    """Stack rasters of ``samples`` into ``(B, t_step, channels)`` uint8."""
    samples = list(samples)
    out = np.zeros((len(samples), t_step, channels), dtype=np.uint8)
    for i, s in enumerate(samples):
        out[i] = _raster(s, t_step, channels)
    return out


def stratified_split(dataset: EventDataset, fraction, seed=0):
    """Per-class random split; returns ``(rest_indices, held_indices)``."""
    rng = np.random.default_rng([seed, 7])
    labels = dataset.labels
    held = []
    for c in range(dataset.classes):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * len(idx)))
        held.extend(rng.permutation(idx)[:k].tolist())
    held = np.sort(np.array(held, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(dataset)), held)
    return rest, held


def events_bytes(dataset: EventDataset) -> bytes:
    parts = [EVT_MAGIC, struct.pack("<III", dataset.channels, dataset.classes, len(dataset.samples))]
    for s in dataset.samples:
        parts.append(struct.pack("<II", s.label, len(s)))
        ev = np.empty(len(s), dtype=_EVENT_DTYPE)
        ev["time"] = s.times
        ev["channel"] = s.channels
        parts.append(ev.tobytes())
    return b"".join(parts)


def write_events(dataset: EventDataset, path):
    with open(path, "wb") as fh:
        fh.write(events_bytes(dataset))


def parse_events(data: bytes, duration=DEFAULT_DURATION, source="file") -> EventDataset:
    if data[:4] != EVT_MAGIC:
        raise EventFormatError(f"bad magic {data[:4]!r}, expected {EVT_MAGIC!r}", 0)
    if len(data) < 16:
        raise EventFormatError("truncated file header", len(data))
    channels, classes, n_samples = struct.unpack_from("<III", data, 4)
    pos = 16
    samples = []
    for _ in range(n_samples):
        if pos + 8 > len(data):
            raise EventFormatError("truncated sample header", pos)
        label, n_events = struct.unpack_from("<II", data, pos)
        if label >= classes:
            raise EventFormatError(f"label {label} >= class count {classes}", pos)
        pos += 8
        end = pos + n_events * _EVENT_DTYPE.itemsize
        if end > len(data):
            raise EventFormatError(f"truncated event block ({n_events} events declared)", pos)
        ev = np.frombuffer(data, _EVENT_DTYPE, n_events, pos)
        times = ev["time"]
        bad = np.flatnonzero(np.diff(times) < 0)
        if len(bad):
            raise EventFormatError("event times not sorted", pos + (bad[0] + 1) * _EVENT_DTYPE.itemsize)
        over = np.flatnonzero(ev["channel"] >= channels)
        if len(over):
            raise EventFormatError(f"channel {ev['channel'][over[0]]} >= channel count {channels}",
                                   pos + over[0] * _EVENT_DTYPE.itemsize + 4)
        outside = np.flatnonzero(~((times >= 0) & (times < duration)))
        if len(outside):
            raise EventFormatError(f"event time {times[outside[0]]} outside [0, {duration})",
                                   pos + outside[0] * _EVENT_DTYPE.itemsize)
        samples.append(EventSample(times.copy(), ev["channel"].astype(np.int64), int(label), duration))
        pos = end
    if pos != len(data):
        raise EventFormatError(f"{len(data) - pos} trailing bytes", pos)
    return EventDataset(samples, channels, classes, source)


def load_events(path, duration=DEFAULT_DURATION) -> EventDataset:
    with open(path, "rb") as fh:
        return parse_events(fh.read(), duration)
