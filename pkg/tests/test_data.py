import json

import numpy as np
import pytest

from egotraj.data import (Track, TrackFormatError, load_tracks, save_tracks,
                          speed_to_behavior, split, synth_generate,
                          to_behavior_tracks, window_samples)
from egotraj.representation import cvcs_reference, cvcs_statistics


def make_track(tid="t0", length=10, kind="speed"):
    boxes = np.stack([np.linspace(100, 200, length),
                      np.linspace(300, 350, length),
                      np.full(length, 50.0), np.full(length, 80.0)], axis=1)
    ego = np.linspace(0, 9, length) if kind == "speed" else np.zeros(length, np.int64)
    return Track(track_id=tid, fps=30.0, frames=np.arange(length, dtype=np.int64),
                 boxes=boxes, ego=ego, ego_kind=kind)


class TestJsonlRoundTrip:
    def test_save_load(self, tmp_path):
        path = tmp_path / "tracks.jsonl"
        orig = [make_track("a", 8), make_track("b", 12, kind="behavior")]
        save_tracks(path, orig)
        loaded = load_tracks(path)
        assert len(loaded) == 2
        for a, b in zip(orig, loaded):
            assert a.track_id == b.track_id and a.ego_kind == b.ego_kind
            assert np.array_equal(a.boxes, b.boxes)
            assert np.array_equal(a.ego, b.ego)
            assert np.array_equal(a.frames, b.frames)

    def test_one_record_per_line(self, tmp_path):
        path = tmp_path / "tracks.jsonl"
        save_tracks(path, [make_track("a"), make_track("b")])
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 2
        assert json.loads(lines[0])["track_id"] == "a"

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "tracks.jsonl"
        save_tracks(path, [make_track("a")])
        path.write_text(path.read_text() + "\n\n")
        assert len(load_tracks(path)) == 1


class TestValidation:
    def write_record(self, tmp_path, rec):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        return path

    def base_record(self):
        return {"track_id": "x", "fps": 30, "frames": [0, 1],
                "boxes": [[1, 2, 3, 4], [1, 2, 3, 4]],
                "ego": [0.0, 1.0], "ego_kind": "speed"}

    def test_missing_field(self, tmp_path):
        rec = self.base_record()
        del rec["ego"]
        with pytest.raises(TrackFormatError, match="missing field 'ego'"):
            load_tracks(self.write_record(tmp_path, rec))

    def test_error_names_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = json.dumps(self.base_record())
        bad = self.base_record()
        bad["frames"] = [0, 5]
        path.write_text(good + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(TrackFormatError, match=r":2: .*not contiguous"):
            load_tracks(path)

    def test_length_mismatch(self, tmp_path):
        rec = self.base_record()
        rec["ego"] = [0.0]
        with pytest.raises(TrackFormatError, match="mismatched lengths"):
            load_tracks(self.write_record(tmp_path, rec))

    def test_bad_ego_kind(self, tmp_path):
        rec = self.base_record()
        rec["ego_kind"] = "imu"
        with pytest.raises(TrackFormatError, match="unknown ego_kind"):
            load_tracks(self.write_record(tmp_path, rec))

    def test_nonpositive_box(self, tmp_path):
        rec = self.base_record()
        rec["boxes"][1][2] = 0
        with pytest.raises(TrackFormatError, match="non-positive"):
            load_tracks(self.write_record(tmp_path, rec))

    def test_behavior_label_range(self, tmp_path):
        rec = self.base_record()
        rec["ego_kind"] = "behavior"
        rec["ego"] = [0, 5]
        with pytest.raises(TrackFormatError, match="behavior labels"):
            load_tracks(self.write_record(tmp_path, rec))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(TrackFormatError, match="invalid JSON"):
            load_tracks(path)


class TestWindowing:
    def test_window_counts(self):
        # m_obs=15, n_pred=45: window length 60
        for length, expect in ((60, 1), (62, 3), (59, 0)):
            samples = window_samples([make_track(length=length)], 15, 45)
            assert len(samples) == expect

    def test_stride(self):
        samples = window_samples([make_track(length=64)], 15, 45, stride=2)
        assert [s.start_frame for s in samples] == [0, 2, 4]

    def test_window_contents(self):
        t = make_track(length=60)
        s = window_samples([t], 15, 45)[0]
        assert np.array_equal(s.obs_boxes, t.boxes[:15])
        assert np.array_equal(s.obs_ego, t.ego[:15])
        assert np.array_equal(s.future_boxes, t.boxes[15:60])
        assert s.track_id == t.track_id

    def test_deterministic_order(self):
        tracks = [make_track("a", 62), make_track("b", 61)]
        ids = [s.track_id for s in window_samples(tracks, 15, 45)]
        assert ids == ["a", "a", "a", "b", "b"]

    def test_bad_stride(self):
        with pytest.raises(ValueError, match="stride"):
            window_samples([make_track()], 2, 2, stride=0)


class TestSplit:
    def test_floor_counts(self):
        tracks = [make_track(f"t{i}") for i in range(10)]
        train, val, test = split(tracks, (0.5, 0.1, 0.4), seed=0)
        assert (len(train), len(val), len(test)) == (5, 1, 4)

    def test_no_overlap_no_loss(self):
        tracks = [make_track(f"t{i}") for i in range(23)]
        train, val, test = split(tracks, seed=3)
        ids = [t.track_id for t in train + val + test]
        assert sorted(ids) == sorted(t.track_id for t in tracks)
        assert len(set(ids)) == len(ids)

    def test_seed_determinism(self):
        tracks = [make_track(f"t{i}") for i in range(12)]
        a = split(tracks, seed=7)
        b = split(tracks, seed=7)
        assert [t.track_id for t in a[0]] == [t.track_id for t in b[0]]

    def test_bad_ratios(self):
        with pytest.raises(ValueError, match="sum to 1"):
            split([make_track()], (0.5, 0.5, 0.5))


class TestBehaviorLabels:
    def test_thresholds(self):
        speeds = np.array([0.0, 0.4, 2.0, 6.0, 5.0])
        # first frame has no accel; 0.4 stopped, 2 slow, 6 accel (+4), 5 decel (-1)
        assert speed_to_behavior(speeds).tolist() == [0, 0, 4, 4, 3]

    def test_steady_speeds(self):
        assert speed_to_behavior(np.array([3.0, 3.0, 10.0, 10.0])).tolist() == [1, 1, 4, 2]

    def test_to_behavior_tracks(self):
        out = to_behavior_tracks([make_track(length=6)])
        assert out[0].ego_kind == "behavior"
        assert out[0].ego.dtype == np.int64
        with pytest.raises(ValueError, match="not a speed track"):
            to_behavior_tracks(out)


class TestSynthGenerator:
    def test_shapes_and_kinds(self):
        tracks = synth_generate(3, 70, seed=1)
        assert len(tracks) == 3
        for t in tracks:
            assert t.boxes.shape == (70, 4)
            assert t.ego.shape == (70,)
            assert t.ego_kind == "speed"
            assert np.all(t.boxes[:, 2:] > 0)
            assert np.all(t.ego >= 0) and np.all(t.ego <= 15)

    def test_seed_determinism(self):
        a = synth_generate(4, 50, seed=9)
        b = synth_generate(4, 50, seed=9)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.boxes, tb.boxes)
            assert np.array_equal(ta.ego, tb.ego)
        c = synth_generate(4, 50, seed=10)
        assert not np.array_equal(a[0].boxes, c[0].boxes)

    def test_zero_gain_zero_noise_is_cvcs(self):
        # the CV-CS reference must reproduce such tracks to float precision
        for t in synth_generate(5, 60, seed=2, ego_gain=0.0, noise=0.0):
            ref = cvcs_reference(t.boxes[14], cvcs_statistics(t.boxes[:15]), 45)
            np.testing.assert_allclose(ref, t.boxes[15:], rtol=0, atol=1e-6)

    def test_ego_gain_shifts_pixels(self):
        # same seed, gain on vs off: cx differs by exactly gain * cumsum(speed)
        off = synth_generate(1, 40, seed=5, ego_gain=0.0, noise=0.0)[0]
        on = synth_generate(1, 40, seed=5, ego_gain=0.8, noise=0.0)[0]
        drift = 0.8 * np.cumsum(on.ego)
        np.testing.assert_allclose(off.boxes[:, 0] - on.boxes[:, 0], drift,
                                   rtol=0, atol=1e-9)
        assert np.array_equal(off.boxes[:, 1:], on.boxes[:, 1:])

    def test_bad_sizes(self):
        with pytest.raises(ValueError, match="generator sizes"):
            synth_generate(0, 10)
        with pytest.raises(ValueError, match="generator sizes"):
            synth_generate(1, 1)
