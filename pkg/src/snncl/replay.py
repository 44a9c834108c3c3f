"""Frozen/learning split, latent activation codecs and the latent store.

Codecs
------
``bitpack``
    Lossless, one bit per (t, n) entry, row-major: ``ceil(T*N/8)`` bytes.
``ratechunk``
    Per chunk of ``chunk`` timesteps and per neuron, the spike count as u8:
    ``ceil(T/chunk)*N`` bytes. Spike timing inside a chunk is discarded; on
    decode ``k`` spikes sit at offsets ``floor(i*len/k)``, where ``len`` is the
    chunk length (shorter for a trailing partial chunk).

Every stored entry carries a 16-byte header ``<BBHHHII``: codec id, flags,
T, width, chunk, label, payload length.

Store file: ``b"LRS1" | codec u8 | l_ins u8 | T u16 | width u16 | chunk u16 |
entry count u32`` followed by the entries (header + payload), little-endian.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Network, SpikeTrain, network_forward
from .errors import CodecError, CodecWarning, ContractError, DecodeError

CODECS = {"bitpack": 1, "ratechunk": 2}
CODEC_NAMES = {v: k for k, v in CODECS.items()}
ENTRY_HEADER = struct.Struct("<BBHHHII")
HEADER_SIZE = ENTRY_HEADER.size  # 16
STORE_HEADER = struct.Struct("<4sBBHHHI")
STORE_MAGIC = b"LRS1"

FLAG_PADDED = 1
FLAG_SATURATED = 2


@dataclass
class ReplaySplit:
    """View of ``net`` cut before layer ``l_ins``; weights are shared."""

    net: Network
    l_ins: int

    @property
    def frozen_layers(self):
        return self.net.layers[:self.l_ins - 1]

    @property
    def learning_layers(self):
        return self.net.layers[self.l_ins - 1:]

    @property
    def frozen_indices(self):
        return list(range(1, self.l_ins))

    @property
    def learning_indices(self):
        return list(range(self.l_ins, self.net.depth + 1))

    @property
    def latent_width(self):
        """Width of the activations entering layer ``l_ins``."""
        return self.net.input_width_of(self.l_ins)

    def rejoin(self) -> Network:
        return Network(list(self.frozen_layers) + list(self.learning_layers))


def split_network(net: Network, l_ins) -> ReplaySplit:
    if not 1 <= l_ins <= net.depth:
        raise ContractError(f"insertion layer {l_ins} outside 1..{net.depth}")
    for i, layer in enumerate(net.layers, start=1):
        layer.frozen = i < l_ins
    return ReplaySplit(net, l_ins)


def payload_size(codec, timesteps, width, chunk=0):
    if codec == "bitpack":
        return math.ceil(timesteps * width / 8)
    if codec == "ratechunk":
        if chunk < 1:
            raise CodecError("ratechunk needs chunk >= 1")
        return math.ceil(timesteps / chunk) * width
    raise CodecError(f"unknown codec {codec!r}")


def entry_size(codec, timesteps, width, chunk=0):
    return payload_size(codec, timesteps, width, chunk) + HEADER_SIZE


@dataclass
class LatentActivations:
    codec: str
    payload: bytes
    label: int
    timesteps: int
    width: int
    chunk: int = 0
    flags: int = 0
    spike_counts: Optional[np.ndarray] = None  # per neuron, before compression

    @property
    def nbytes(self):
        return len(self.payload) + HEADER_SIZE

    def header_bytes(self):
        return ENTRY_HEADER.pack(CODECS[self.codec], self.flags, self.timesteps, self.width,
                                 self.chunk, self.label, len(self.payload))


def compress_latent(train, codec="ratechunk", chunk=0, label=0) -> LatentActivations:
    data = train.data if isinstance(train, SpikeTrain) else SpikeTrain(train).data
    timesteps, width = data.shape
    if timesteps > 0xFFFF or width > 0xFFFF:
        raise CodecError("T and width must fit in 16 bits")
    counts = data.sum(axis=0, dtype=np.int64)
    if codec == "bitpack":
        payload = np.packbits(data.reshape(-1), bitorder="little").tobytes()
        return LatentActivations(codec, payload, int(label), timesteps, width, 0, 0, counts)
    if codec != "ratechunk":
        raise CodecError(f"unknown codec {codec!r}")
    if not 1 <= chunk <= 0xFFFF:
        raise CodecError(f"ratechunk chunk must be in 1..65535, got {chunk}")
    n_chunks = math.ceil(timesteps / chunk)
    flags = 0
    if n_chunks * chunk != timesteps:
        flags |= FLAG_PADDED
        data = np.concatenate([data, np.zeros((n_chunks * chunk - timesteps, width), np.uint8)])
    per_chunk = data.reshape(n_chunks, chunk, width).sum(axis=1, dtype=np.int64)
    if per_chunk.max(initial=0) > 255:
        warnings.warn("chunk spike count above 255 clamped", CodecWarning, stacklevel=2)
        flags |= FLAG_SATURATED
        per_chunk = np.minimum(per_chunk, 255)
    payload = per_chunk.astype(np.uint8).tobytes()
    return LatentActivations(codec, payload, int(label), timesteps, width, chunk, flags, counts)


def _spread(counts, length):
    """Place ``counts[n]`` spikes at ``floor(i*length/k)`` within one chunk."""
    out = np.zeros((length, counts.shape[0]), dtype=np.uint8)
    for k in np.unique(counts):
        if k == 0:
            continue
        offsets = (np.arange(k) * length) // k
        cols = np.flatnonzero(counts == k)
        out[np.ix_(offsets, cols)] = 1
    return out


def decompress_latent(a: LatentActivations) -> SpikeTrain:
    if a.codec not in CODECS:
        raise DecodeError(f"unknown codec {a.codec!r}")
    expected = payload_size(a.codec, a.timesteps, a.width, a.chunk) if (
        a.codec == "bitpack" or a.chunk >= 1) else None
    if expected is None or len(a.payload) != expected:
        raise DecodeError(f"payload is {len(a.payload)} bytes, header implies {expected}")
    if a.codec == "bitpack":
        bits = np.unpackbits(np.frombuffer(a.payload, np.uint8), bitorder="little")
        return SpikeTrain(bits[:a.timesteps * a.width].reshape(a.timesteps, a.width))
    n_chunks = expected // a.width if a.width else 0
    counts = np.frombuffer(a.payload, np.uint8).reshape(n_chunks, a.width).astype(np.int64)
    out = np.zeros((a.timesteps, a.width), dtype=np.uint8)
    for c in range(n_chunks):
        lo = c * a.chunk
        length = min(a.chunk, a.timesteps - lo)
        if counts[c].max(initial=0) > length:
            raise DecodeError(f"chunk {c} holds more spikes than timesteps")
        out[lo:lo + length] = _spread(counts[c], length)
    return SpikeTrain(out)


@dataclass
class LatentStore:
    codec: str
    timesteps: int
    width: int
    chunk: int = 0
    l_ins: int = 1
    entries: list = field(default_factory=list)
    sealed: bool = False

    def append(self, entry: LatentActivations):
        if self.sealed:
            raise ContractError("latent store is sealed")
        if (entry.codec, entry.timesteps, entry.width, entry.chunk) != (
                self.codec, self.timesteps, self.width, self.chunk):
            raise ContractError("entry does not share the store's codec, T, width and chunk")
        self.entries.append(entry)

    def seal(self):
        self.sealed = True
        return self

    def __len__(self):
        return len(self.entries)

    @property
    def payload_bytes(self):
        return sum(len(e.payload) for e in self.entries)

    @property
    def total_bytes(self):
        return sum(e.nbytes for e in self.entries)

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def decode_all(self):
        """All entries as a ``(n, T, width)`` uint8 batch."""
        out = np.zeros((len(self.entries), self.timesteps, self.width), dtype=np.uint8)
        for i, e in enumerate(self.entries):
            out[i] = decompress_latent(e).data
        return out

    def to_bytes(self) -> bytes:
        parts = [STORE_HEADER.pack(STORE_MAGIC, CODECS[self.codec], self.l_ins, self.timesteps,
                                   self.width, self.chunk, len(self.entries))]
        for e in self.entries:
            parts.append(e.header_bytes())
            parts.append(e.payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentStore":
        if len(data) < STORE_HEADER.size:
            raise DecodeError("truncated store header")
        magic, codec_id, l_ins, timesteps, width, chunk, count = STORE_HEADER.unpack_from(data, 0)
        if magic != STORE_MAGIC:
            raise DecodeError(f"bad store magic {magic!r}")
        if codec_id not in CODEC_NAMES:
            raise DecodeError(f"unknown codec id {codec_id}")
        store = cls(CODEC_NAMES[codec_id], timesteps, width, chunk, l_ins)
        pos = STORE_HEADER.size
        for _ in range(count):
            if pos + HEADER_SIZE > len(data):
                raise DecodeError(f"truncated entry header at byte {pos}")
            cid, flags, t, w, ch, label, plen = ENTRY_HEADER.unpack_from(data, pos)
            pos += HEADER_SIZE
            if cid != codec_id or (t, w, ch) != (timesteps, width, chunk):
                raise DecodeError(f"entry header at byte {pos - HEADER_SIZE} disagrees with the store")
            if pos + plen > len(data):
                raise DecodeError(f"truncated payload at byte {pos}")
            entry = LatentActivations(store.codec, data[pos:pos + plen], label, t, w, ch, flags)
            entry.spike_counts = decompress_latent(entry).data.sum(axis=0, dtype=np.int64)
            store.entries.append(entry)
            pos += plen
        if pos != len(data):
            raise DecodeError(f"{len(data) - pos} trailing bytes after last entry")
        return store.seal()

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return data

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def capture_activations(split: ReplaySplit, x, v_thr_schedule=None):
    """Spikes entering layer ``l_ins`` for a raw input batch.

    Layers before ``l_ins`` run under ``v_thr_schedule``; for ``l_ins == 1``
    the input itself is returned. Also returns the frozen-layer traces.
    """
    x = np.asarray(x)
    if split.l_ins == 1:
        return x.astype(np.uint8), []
    out, traces = network_forward(split.net, x, 1, v_thr_schedule, stop_layer=split.l_ins - 1)
    return out.astype(np.uint8), traces


def generate_latent(split: ReplaySplit, x_replay, y_replay, v_thr_schedule=None,
                    codec="ratechunk", chunk=0) -> LatentStore:
    """Run the frozen part over the replay set and store compressed activations."""
    x_replay = np.asarray(x_replay)
    y_replay = np.asarray(y_replay)
    if x_replay.shape[0] == 0:
        raise ContractError("replay set is empty")
    if codec not in CODECS:
        raise CodecError(f"unknown codec {codec!r}")
    acts, _ = capture_activations(split, x_replay, v_thr_schedule)
    chunk = chunk if codec == "ratechunk" else 0
    store = LatentStore(codec, x_replay.shape[1], split.latent_width, chunk, split.l_ins)
    for a, label in zip(acts, y_replay):
        store.append(compress_latent(a, codec, chunk, int(label)))
    return store.seal()


@dataclass
class MemoryReport:
    total_bytes: int
    payload_bytes: int
    header_bytes: int
    per_sample: list
    alternates: dict  # (T, codec, chunk) -> total bytes for the same entries


def latent_memory_report(store: LatentStore, alternates: Sequence = ()) -> MemoryReport:
    """Analytic byte accounting, optionally under alternative (T, codec, chunk)."""
    per_sample = [e.nbytes for e in store.entries]
    alt = {}
    for spec in alternates:
        t, codec, chunk = (tuple(spec) + (0,))[:3]
        alt[(t, codec, chunk)] = len(store.entries) * entry_size(codec, t, store.width, chunk)
    return MemoryReport(sum(per_sample), store.payload_bytes, HEADER_SIZE * len(per_sample),
                        per_sample, alt)
