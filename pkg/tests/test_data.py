import numpy as np
import pytest

from gazenlq.data import (
    DatasetFormatError,
    QuerySample,
    SyntheticSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
    _world,
    train_val_split,
)
from gazenlq.seeding import numpy_rng, substream_seed

SMALL = dict(d_video=16, d_gaze_in=12, d_text=8)


def _assert_same(a, b):
    assert a.spec == b.spec
    assert len(a) == len(b)
    np.testing.assert_array_equal(a.target_locations, b.target_locations)
    for sa, sb in zip(a.samples, b.samples):
        assert (sa.video_id, sa.query_idx, sa.query_text, sa.target_id) == (sb.video_id, sb.query_idx, sb.query_text, sb.target_id)
        assert tuple(sa.gt_interval) == tuple(sb.gt_interval)
        for name in ("video_features", "gaze_features", "text_embeddings"):
            np.testing.assert_array_equal(getattr(sa, name), getattr(sb, name))
    for ta, tb in zip(a.tracks, b.tracks):
        for name in ("frame_index", "x", "y", "valid"):
            np.testing.assert_array_equal(getattr(ta, name), getattr(tb, name))
    for ha, hb in zip(a.heatmaps, b.heatmaps):
        np.testing.assert_array_equal(ha, hb)


def test_default_shapes():
    ds = generate_dataset(SyntheticSpec(n_videos=16, frames_per_video=96))
    assert len(ds.samples) == 16
    s = ds.samples[0]
    assert s.video_features.shape == (5, 2304)
    assert s.gaze_features.shape == (5, 1536)
    assert s.text_embeddings.shape[1] == 512
    assert ds.heatmaps[0].shape == (5, 64, 64)


def test_same_seed_is_bitwise_identical():
    spec = SyntheticSpec(n_videos=4, seed=11, **SMALL)
    _assert_same(generate_dataset(spec), generate_dataset(spec))


def test_different_seed_differs():
    a = generate_dataset(SyntheticSpec(n_videos=2, seed=1, **SMALL))
    b = generate_dataset(SyntheticSpec(n_videos=2, seed=2, **SMALL))
    assert not np.array_equal(a.samples[0].video_features, b.samples[0].video_features)


def test_videos_are_sharded_by_index():
    whole = generate_dataset(SyntheticSpec(n_videos=6, seed=5, **SMALL))
    tail = generate_dataset(SyntheticSpec(n_videos=2, seed=5, first_index=4, **SMALL))
    np.testing.assert_array_equal(whole.samples[5].video_features, tail.samples[1].video_features)


def test_gaze_concentrates_in_segment_at_full_strength():
    spec = SyntheticSpec(n_videos=8, frames_per_video=128, gaze_signal_strength=1.0, gaze_jitter=0.0, **SMALL)
    ds = generate_dataset(spec)
    for s, track, (first, last) in zip(ds.samples, ds.tracks, ds.segments):
        loc = ds.target_locations[s.target_id]
        seg_win = track.frame_index // spec.stride
        inside = (seg_win >= first) & (seg_win < last) & track.valid
        assert inside.any()
        np.testing.assert_allclose(track.x[inside], loc[0], atol=1e-9)
        np.testing.assert_allclose(track.y[inside], loc[1], atol=1e-9)


def test_zero_strength_gaze_is_independent_of_segment():
    spec = SyntheticSpec(n_videos=60, frames_per_video=128, gaze_signal_strength=0.0, **SMALL)
    ds = generate_dataset(spec)
    ins, outs = [], []
    for s, track, (first, last) in zip(ds.samples, ds.tracks, ds.segments):
        seg_win = track.frame_index // spec.stride
        seg = (seg_win >= first) & (seg_win < last) & track.valid
        loc = ds.target_locations[s.target_id]
        near = np.hypot(track.x - loc[0], track.y - loc[1]) < 0.1
        ins.append(near[seg])
        outs.append(near[~seg & track.valid])
    p_in, p_out = np.concatenate(ins).mean(), np.concatenate(outs).mean()
    # uniform gaze lands within 0.1 of a point with probability < pi * 0.01
    assert p_in < 0.05 and abs(p_in - p_out) < 0.02


def test_query_encodes_target():
    spec = SyntheticSpec(n_videos=12, d_text=256)
    words = _world(spec)["words"]
    words = words / np.linalg.norm(words, axis=1, keepdims=True)
    for s in generate_dataset(spec).samples:
        tokens = s.text_embeddings / np.linalg.norm(s.text_embeddings, axis=1, keepdims=True)
        assert int(np.argmax((tokens @ words.T).max(axis=0))) == s.target_id


def test_round_trip(tmp_path):
    ds = generate_dataset(SyntheticSpec(n_videos=3, seed=9, **SMALL))
    path = tmp_path / "d.gnlq"
    save_dataset(ds, path)
    assert path.read_bytes()[:8] == b"GNLQDS1\0"
    _assert_same(ds, load_dataset(path))


def test_empty_dataset_round_trip(tmp_path):
    ds = generate_dataset(SyntheticSpec(n_videos=1, **SMALL)).subset([])
    path = tmp_path / "e.gnlq"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert len(back) == 0


def test_corrupted_magic_and_truncation(tmp_path):
    ds = generate_dataset(SyntheticSpec(n_videos=2, **SMALL))
    path = tmp_path / "d.gnlq"
    save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(path)
    path.write_bytes(raw[:-7])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(path)


def test_split_is_deterministic_tail():
    ds = generate_dataset(SyntheticSpec(n_videos=8, **SMALL))
    tr, va = train_val_split(ds, 0.25)
    assert [s.video_id for s in va.samples] == [s.video_id for s in ds.samples[6:]]
    assert len(tr) == 6


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_videos=0)
    with pytest.raises(ValueError):
        SyntheticSpec(gaze_signal_strength=1.5)
    with pytest.raises(ValueError):
        SyntheticSpec(frames_per_video=10)


def test_query_sample_rejects_bad_interval():
    feats = np.zeros((4, 2))
    with pytest.raises(ValueError):
        QuerySample("v", 0, "q", np.zeros((1, 2)), feats, feats, (2.0, 1.0), 0.5)


def test_substreams_are_independent_and_stable():
    assert substream_seed(0, "a") == substream_seed(0, "a")
    assert substream_seed(0, "a") != substream_seed(0, "b")
    assert substream_seed(0, "a") != substream_seed(1, "a")
    np.testing.assert_array_equal(numpy_rng(3, "x").random(4), numpy_rng(3, "x").random(4))
