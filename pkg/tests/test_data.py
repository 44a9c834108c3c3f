import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nearest_centroid_accuracy
from snncl.data import (EventDataset, EventSample, events_bytes, load_events, parse_events,
                        rasterize, rasterize_dataset, stratified_split, synth_generate, write_events)
from snncl.errors import ContractError, EventFormatError


def evt1(channels, classes, samples):
    """Hand-assembled EVT1 bytes; ``samples`` is a list of (label, [(time, channel), ...])."""
    out = b"EVT1" + struct.pack("<III", channels, classes, len(samples))
    for label, events in samples:
        out += struct.pack("<II", label, len(events))
        for t, c in events:
            out += struct.pack("<fI", t, c)
    return out


@st.composite
def datasets(draw):
    channels = draw(st.integers(1, 6))
    classes = draw(st.integers(1, 4))
    samples = []
    for _ in range(draw(st.integers(0, 5))):
        n = draw(st.integers(0, 12))
        time = st.floats(0, 1, width=32, exclude_max=True)
        times = sorted(draw(st.lists(time, min_size=n, max_size=n)))
        chans = draw(st.lists(st.integers(0, channels - 1), min_size=n, max_size=n))
        samples.append(EventSample(np.array(times, np.float32), chans, draw(st.integers(0, classes - 1))))
    return EventDataset(samples, channels, classes, "file")


class TestSynthGenerate:
    def test_same_seed_same_data(self):
        assert synth_generate(3, 4, 5, seed=9) == synth_generate(3, 4, 5, seed=9)

    def test_different_seed_differs(self):
        assert synth_generate(3, 4, 5, seed=1) != synth_generate(3, 4, 5, seed=2)

    def test_degenerate(self):
        ds = synth_generate(1, 1, 1, seed=0)
        assert len(ds) == 1 and ds.channels == 1 and ds.classes == 1

    def test_counts_must_be_positive(self):
        with pytest.raises(ContractError):
            synth_generate(0, 1, 1)

    def test_manifest(self):
        m = synth_generate(3, 4, 5, seed=2).manifest
        assert (m.channels, m.classes, m.samples, m.source, m.seed) == (5, 3, 12, "synthetic", 2)

    def test_sample_depends_only_on_its_indices(self):
        small = synth_generate(2, 3, 8, seed=4)
        large = synth_generate(3, 5, 8, seed=4)
        assert small.samples[0] == large.samples[0]
        assert small.samples[3] == large.samples[5]

    def test_nearest_centroid_separates_two_classes(self):
        ds = synth_generate(2, 60, 24, seed=0)
        x = rasterize_dataset(ds.samples, 20, ds.channels)
        rest, held = stratified_split(ds, 0.5, seed=0)
        acc = nearest_centroid_accuracy(x[rest], ds.labels[rest], x[held], ds.labels[held])
        assert acc >= 0.9


class TestRasterize:
    def test_no_events(self):
        train = rasterize(EventSample(np.zeros(0), np.zeros(0), 0), 10, 4)
        assert train.count() == 0 and train.data.shape == (10, 4)

    def test_single_event(self):
        train = rasterize(EventSample([0.0], [3], 0), 10, 5)
        assert train.count() == 1 and train.data[0, 3] == 1

    def test_events_in_one_bin_clip_to_one(self):
        train = rasterize(EventSample([0.01, 0.02, 0.03, 0.04, 0.05], [2] * 5, 0), 10, 3)
        assert train.count() == 1 and train.data[0, 2] == 1

    @given(datasets(), st.integers(1, 50))
    def test_count_bounded_by_events(self, ds, t_step):
        for s in ds.samples:
            train = rasterize(s, t_step, ds.channels)
            assert train.count() <= len(s)
            bins = np.floor(s.times.astype(float) * t_step).astype(int)
            if len(set(zip(bins.tolist(), s.channels.tolist()))) == len(s):
                assert train.count() == len(s)

    @settings(max_examples=50)
    @given(datasets())
    def test_or_downsample_100_to_20(self, ds):
        for s in ds.samples:
            fine = rasterize(s, 100, ds.channels).data
            coarse = rasterize(s, 20, ds.channels).data
            assert np.array_equal(fine.reshape(20, 5, -1).max(axis=1), coarse)


class TestEvt1:
    def test_hand_built_two_events(self):
        ds = parse_events(evt1(4, 2, [(1, [(0.25, 3), (0.5, 0)])]))
        s = ds.samples[0]
        assert s.label == 1
        assert s.times.tolist() == [0.25, 0.5]
        assert s.channels.tolist() == [3, 0]

    def test_empty_sample(self):
        ds = parse_events(evt1(2, 1, [(0, [])]))
        assert len(ds) == 1 and len(ds.samples[0]) == 0

    def test_bad_magic_names_offset_zero(self):
        with pytest.raises(EventFormatError) as exc:
            parse_events(b"EVT2" + bytes(12))
        assert exc.value.offset == 0
        assert "offset 0" in str(exc.value)

    def test_truncated_events(self):
        data = evt1(4, 2, [(0, [(0.1, 1), (0.2, 2)])])
        with pytest.raises(EventFormatError) as exc:
            parse_events(data[:-3])
        assert exc.value.offset == 24

    def test_unsorted_times(self):
        with pytest.raises(EventFormatError) as exc:
            parse_events(evt1(4, 1, [(0, [(0.5, 1), (0.2, 2)])]))
        assert exc.value.offset == 32

    def test_channel_overflow(self):
        with pytest.raises(EventFormatError) as exc:
            parse_events(evt1(4, 1, [(0, [(0.1, 1), (0.2, 4)])]))
        assert exc.value.offset == 36

    def test_label_overflow(self):
        with pytest.raises(EventFormatError) as exc:
            parse_events(evt1(4, 2, [(2, [])]))
        assert exc.value.offset == 16

    def test_time_outside_duration(self):
        with pytest.raises(EventFormatError):
            parse_events(evt1(4, 1, [(0, [(1.5, 1)])]))
        assert len(parse_events(evt1(4, 1, [(0, [(1.5, 1)])]), duration=2.0)) == 1

    def test_trailing_bytes(self):
        with pytest.raises(EventFormatError):
            parse_events(evt1(4, 1, [(0, [])]) + b"\x00")

    @given(datasets())
    def test_roundtrip(self, ds):
        assert parse_events(events_bytes(ds)) == ds

    def test_file_roundtrip(self, tmp_path):
        ds = synth_generate(3, 4, 6, seed=1)
        write_events(ds, tmp_path / "d.evt1")
        assert load_events(tmp_path / "d.evt1") == ds


class TestStratifiedSplit:
    def test_per_class_fraction_and_disjoint(self):
        ds = synth_generate(4, 20, 4, seed=0)
        rest, held = stratified_split(ds, 0.25, seed=3)
        assert len(np.intersect1d(rest, held)) == 0
        assert len(rest) + len(held) == len(ds)
        assert np.bincount(ds.labels[held]).tolist() == [5, 5, 5, 5]

    def test_seeded(self):
        ds = synth_generate(4, 20, 4, seed=0)
        a = stratified_split(ds, 0.25, seed=3)
        b = stratified_split(ds, 0.25, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
