import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evflow import (
    CameraGeometry,
    EventParseError,
    EventSlice,
    EventStream,
    GeometryError,
    load_events,
    rebase_slice,
    slice_stream,
    write_events_binary,
    write_events_csv,
)
from evflow.events import QuerySet, filter_polarity

GEOM8 = CameraGeometry(8, 8)


class TestCsvLoading:
    def test_two_plain_rows(self, tmp_path):
        path = tmp_path / "ev.csv"
        path.write_text("0.000,3,4\n0.001,3,5\n")
        stream = load_events(str(path), "csv", GEOM8)
        assert len(stream) == 2
        np.testing.assert_allclose(stream.t, [0.000, 0.001])
        assert stream.polarity is None

    def test_empty_file_gives_empty_stream(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        stream = load_events(str(path), "csv", GEOM8)
        assert len(stream) == 0

    def test_out_of_bounds_names_row_and_bound(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.002,9,0\n")
        with pytest.raises(GeometryError, match=r":1: x=9 violates 0 <= x < 8"):
            load_events(str(path), "csv", GEOM8)

    def test_header_detected_by_non_numeric_first_field(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("t,x,y,p\n0.5,1,2,1\n")
        stream = load_events(str(path), "csv", GEOM8)
        assert len(stream) == 1
        assert stream.polarity is not None and stream.polarity[0] == 1

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.0,1,2\nnot-a-number,1,2\n")
        with pytest.raises(EventParseError, match=":2:"):
            load_events(str(path), "csv", GEOM8)

    def test_csv_requires_geometry(self, tmp_path):
        path = tmp_path / "ev.csv"
        path.write_text("0,1,2\n")
        with pytest.raises(ValueError, match="geometry"):
            load_events(str(path), "csv")


class TestBinaryFormat:
    def test_roundtrip(self, tmp_path, rng):
        stream = EventStream(
            t=np.sort(rng.uniform(0, 1, 100)),
            x=rng.integers(0, 8, 100),
            y=rng.integers(0, 8, 100),
            geometry=GEOM8,
            polarity=rng.choice([-1, 1], 100).astype(np.int8),
        )
        path = tmp_path / "ev.bin"
        write_events_binary(stream, str(path))
        loaded = load_events(str(path), "binary")
        assert loaded.geometry == GEOM8
        np.testing.assert_array_equal(loaded.t, stream.t)
        np.testing.assert_array_equal(loaded.x, stream.x)
        np.testing.assert_array_equal(loaded.polarity, stream.polarity)

    def test_record_is_packed_17_bytes(self, tmp_path):
        stream = EventStream(t=np.array([0.5]), x=np.array([1]), y=np.array([2]),
                             geometry=GEOM8, polarity=np.array([1], dtype=np.int8))
        path = tmp_path / "one.bin"
        write_events_binary(stream, str(path))
        assert path.stat().st_size == 12 + 17  # magic+W+H then one record

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(EventParseError, match="header"):
            load_events(str(path), "binary")

    def test_truncated_record_rejected(self, tmp_path, rng):
        stream = EventStream(t=np.array([0.5]), x=np.array([1]), y=np.array([2]),
                             geometry=GEOM8)
        path = tmp_path / "trunc.bin"
        write_events_binary(stream, str(path))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(EventParseError, match="truncated"):
            load_events(str(path), "binary")

    def test_csv_roundtrip(self, tmp_path, rng):
        stream = EventStream(
            t=np.sort(rng.uniform(0, 1, 50)), x=rng.integers(0, 8, 50),
            y=rng.integers(0, 8, 50), geometry=GEOM8,
        )
        path = tmp_path / "rt.csv"
        write_events_csv(stream, str(path))
        loaded = load_events(str(path), "csv", GEOM8)
        np.testing.assert_array_equal(loaded.t, stream.t)


class TestSliceStream:
    def events_ms(self, times_ms):
        t = np.array(times_ms) / 1000.0
        n = len(t)
        return EventStream(t=t, x=np.zeros(n, int), y=np.zeros(n, int), geometry=GEOM8)

    def test_non_overlapping_windows(self):
        stream = self.events_ms([0, 10, 33, 50])
        slices = slice_stream(stream, delta_t=0.016, stride=0.032, t0=0.0)
        assert len(slices) == 2
        np.testing.assert_allclose(slices[0].t, [0.000, 0.010])
        np.testing.assert_allclose(slices[1].t, [0.033, 0.050])

    def test_overlapping_stride_shares_events(self):
        stream = self.events_ms([0, 10, 33, 50])
        slices = slice_stream(stream, delta_t=0.016, stride=0.016, t0=0.0)
        # slice 1 covers [16, 48) ms
        np.testing.assert_allclose(slices[1].t, [0.033])

    def test_empty_stream(self):
        stream = self.events_ms([])
        assert slice_stream(stream, 0.016, 0.032) == []

    def test_event_at_upper_edge_excluded(self):
        stream = self.events_ms([0, 32])
        slices = slice_stream(stream, delta_t=0.016, stride=0.032, t0=0.0)
        np.testing.assert_allclose(slices[0].t, [0.0])
        np.testing.assert_allclose(slices[1].t, [0.032])

    def test_unsorted_input_is_stably_sorted(self):
        t = np.array([0.010, 0.000, 0.010])
        x = np.array([1, 2, 3])
        stream = EventStream(t=t, x=x, y=np.zeros(3, int), geometry=GEOM8)
        slices = slice_stream(stream, 0.016, 0.032)
        np.testing.assert_array_equal(slices[0].x, [2, 1, 3])  # ties keep input order

    def test_invalid_arguments(self):
        stream = self.events_ms([0])
        with pytest.raises(ValueError):
            slice_stream(stream, delta_t=0.0, stride=0.01)
        with pytest.raises(ValueError):
            slice_stream(stream, delta_t=0.01, stride=0.0)

    def test_nonoverlapping_cover_reproduces_input(self, rng):
        t = np.sort(rng.uniform(0, 1.0, 500))
        stream = EventStream(t=t, x=rng.integers(0, 8, 500), y=rng.integers(0, 8, 500),
                             geometry=GEOM8)
        slices = slice_stream(stream, delta_t=0.016, stride=0.032, t0=0.0)
        recon = np.concatenate([sl.t for sl in slices])
        np.testing.assert_array_equal(recon, t)

    def test_interior_gap_still_emits_empty_slice(self):
        stream = self.events_ms([0, 100])
        slices = slice_stream(stream, delta_t=0.016, stride=0.032, t0=0.0)
        assert len(slices) == 4  # [0,32) [32,64) [64,96) [96,128)
        assert len(slices[1]) == 0 and len(slices[2]) == 0


class TestRebase:
    def test_shifts_to_local_time(self):
        sl = EventSlice(t=np.array([100.000, 100.010]), x=np.array([0, 1]),
                        y=np.array([0, 1]), t_start=100.0, window=0.032, geometry=GEOM8)
        rb = rebase_slice(sl)
        assert rb.t_start == 0.0
        np.testing.assert_allclose(rb.t, [0.000, 0.010], atol=1e-12)

    def test_idempotent(self):
        sl = EventSlice(t=np.array([0.0, 0.01]), x=np.array([0, 1]), y=np.array([0, 1]),
                        t_start=0.0, window=0.032, geometry=GEOM8)
        assert rebase_slice(sl) is sl

    def test_empty_slice(self):
        sl = EventSlice(t=np.empty(0), x=np.empty(0, int), y=np.empty(0, int),
                        t_start=5.0, window=0.032, geometry=GEOM8)
        rb = rebase_slice(sl)
        assert rb.t_start == 0.0 and len(rb) == 0

    @given(
        start_ticks=st.integers(min_value=0, max_value=2**30),
        offsets=st.lists(st.integers(min_value=0, max_value=1024), min_size=2, max_size=20),
    )
    @settings(max_examples=50, deadline=None)
    def test_pairwise_differences_preserved_for_representable_inputs(self, start_ticks, offsets):
        # Dyadic timestamps (multiples of 2^-15 s) make every subtraction exact.
        tick = 2.0**-15
        t_start = start_ticks * tick
        t = t_start + np.sort(np.array(offsets)) * tick
        sl = EventSlice(t=t, x=np.zeros(len(t), int), y=np.zeros(len(t), int),
                        t_start=t_start, window=1024 * tick, geometry=GEOM8)
        rb = rebase_slice(sl)
        orig = t[:, None] - t[None, :]
        new = rb.t[:, None] - rb.t[None, :]
        assert np.array_equal(orig, new)


class TestSliceInvariants:
    def test_window_membership_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            EventSlice(t=np.array([0.0, 0.05]), x=np.array([0, 0]), y=np.array([0, 0]),
                       t_start=0.0, window=0.032, geometry=GEOM8)

    def test_sorted_enforced(self):
        with pytest.raises(ValueError, match="sorted"):
            EventSlice(t=np.array([0.01, 0.0]), x=np.array([0, 0]), y=np.array([0, 0]),
                       t_start=0.0, window=0.032, geometry=GEOM8)

    def test_geometry_enforced(self):
        with pytest.raises(GeometryError):
            EventSlice(t=np.array([0.0]), x=np.array([8]), y=np.array([0]),
                       t_start=0.0, window=0.032, geometry=GEOM8)


class TestQuerySet:
    def test_policies(self):
        assert len(QuerySet.all(10)) == 10
        np.testing.assert_array_equal(QuerySet.every_kth(10, 3).indices, [0, 3, 6, 9])
        q = QuerySet.random_m(10, 4, seed=1)
        assert len(q) == 4 and len(set(q.indices.tolist())) == 4
        assert QuerySet.random_m(10, 4, seed=1).indices.tolist() == q.indices.tolist()

    def test_bounds_check(self):
        with pytest.raises(IndexError):
            QuerySet(np.array([5])).check_within(5)


def test_polarity_filter():
    stream = EventStream(
        t=np.array([0.0, 0.1, 0.2]), x=np.array([0, 1, 2]), y=np.array([0, 1, 2]),
        geometry=GEOM8, polarity=np.array([1, -1, 1], dtype=np.int8),
    )
    pos = filter_polarity(stream, "pos")
    assert len(pos) == 2 and pos.x.tolist() == [0, 2]
    neg = filter_polarity(stream, "neg")
    assert len(neg) == 1 and neg.x.tolist() == [1]
