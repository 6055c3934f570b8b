"""Synthetic gaze-correlated grounding data and its on-disk format.

Every video hides one target segment. Inside it, gaze fixates a location tied
to the target, and both feature streams are shifted along target-specific
directions; the query text embeds the same target id. Signal amplitudes scale
with ``gaze_signal_strength``.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .heatmaps import GazeTrack, n_windows, track_heatmaps, window_average_heatmaps
from .seeding import numpy_rng

DATASET_MAGIC = b"GNLQDS1\0"


class DatasetFormatError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n_videos: int = 16
    frames_per_video: int = 96
    d_video: int = 2304
    d_gaze_in: int = 1536
    d_text: int = 512
    seed: int = 0
    gaze_signal_strength: float = 1.0
    vocabulary_size: int = 8
    fps: float = 30.0
    window: int = 32
    stride: int = 16
    min_segment_windows: int = 1
    max_segment_windows: int = 4
    feature_signal: float = 8.0
    background_rank: int = 4
    text_tokens: int = 8
    heatmap_sigma: float = 3.0
    gaze_jitter: float = 0.02
    drop_rate: float = 0.05
    first_index: int = 0

    def __post_init__(self):
        counts = ("n_videos", "frames_per_video", "d_video", "d_gaze_in", "d_text",
                  "vocabulary_size", "window", "stride", "text_tokens")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gaze_signal_strength <= 1.0:
            raise ValueError("gaze_signal_strength must lie in [0, 1]")
        if self.frames_per_video < self.window:
            raise ValueError("frames_per_video must cover at least one window")
        if not 1 <= self.min_segment_windows <= self.max_segment_windows:
            raise ValueError("need 1 <= min_segment_windows <= max_segment_windows")

    @property
    def n_windows(self):
        return n_windows(self.frames_per_video, self.window, self.stride)

    @property
    def seconds_per_window(self):
        return self.stride / self.fps


@dataclass
class QuerySample:
    video_id: str
    query_idx: int
    query_text: str
    text_embeddings: np.ndarray  # (L, d_text)
    video_features: np.ndarray  # (T, d_video)
    gaze_features: np.ndarray  # (T, d_gaze_in)
    gt_interval: tuple
    seconds_per_window: float
    target_id: int = -1

    def __post_init__(self):
        s, e = self.gt_interval
        if not 0 <= s < e:
            raise ValueError(f"invalid gt interval {self.gt_interval}")
        if e > self.duration + 1e-6:
            raise ValueError(f"gt interval {self.gt_interval} exceeds video length {self.duration}")

    @property
    def n_windows(self):
        return len(self.video_features)

    @property
    def duration(self):
        return self.n_windows * self.seconds_per_window

    @property
    def key(self):
        return (self.video_id, self.video_id, self.query_idx)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    samples: list
    tracks: list
    heatmaps: list  # per video, (T, 64, 64) float32 window-averaged maps
    target_locations: np.ndarray  # (vocabulary_size, 2) normalized (x, y)
    segments: list = field(default_factory=list)  # per video (first, last+1) window

    def __len__(self):
        return len(self.samples)

    def subset(self, indices):
        indices = list(indices)
        return SyntheticDataset(
            self.spec,
            [self.samples[i] for i in indices],
            [self.tracks[i] for i in indices],
            [self.heatmaps[i] for i in indices],
            self.target_locations,
            [self.segments[i] for i in indices] if self.segments else [],
        )


def _target_locations(rng, k, min_sep=0.18):
    locs = []
    for _ in range(10000):
        if len(locs) == k:
            break
        p = rng.uniform(0.15, 0.85, size=2)
        if all(np.hypot(*(p - q)) >= min_sep for q in locs):
            locs.append(p)
    while len(locs) < k:  # too many targets for the separation constraint
        locs.append(rng.uniform(0.15, 0.85, size=2))
    return np.array(locs)


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _world(spec):
    rng = numpy_rng(spec.seed, "data/world")
    k = spec.vocabulary_size
    return {
        "locations": _target_locations(rng, k),
        "video_dirs": _unit_rows(rng, k, spec.d_video),
        "gaze_dirs": _unit_rows(rng, k, spec.d_gaze_in),
        "video_bg": _unit_rows(rng, spec.background_rank, spec.d_video),
        "gaze_bg": _unit_rows(rng, spec.background_rank, spec.d_gaze_in),
        "words": rng.standard_normal((k, spec.d_text)),
    }


def _generate_video(spec, world, index):
    rng = numpy_rng(spec.seed, f"data/video/{index}")
    t = spec.n_windows
    n_frames = spec.frames_per_video
    s = spec.gaze_signal_strength
    target = int(rng.integers(spec.vocabulary_size))
    length = int(rng.integers(spec.min_segment_windows, min(spec.max_segment_windows, t) + 1))
    first = int(rng.integers(0, t - length + 1))
    last = first + length

    # gaze: fixations on the target location inside the segment, uniform elsewhere
    frames = np.arange(n_frames)
    in_seg = (frames // spec.stride >= first) & (frames // spec.stride < last)
    fixate = in_seg & (rng.random(n_frames) < s)
    xy = rng.random((n_frames, 2))
    jitter = rng.normal(0.0, spec.gaze_jitter, size=(n_frames, 2))
    xy = np.where(fixate[:, None], np.clip(world["locations"][target] + jitter, 0.0, 1.0), xy)
    valid = rng.random(n_frames) >= spec.drop_rate
    track = GazeTrack(frames, xy[:, 0], xy[:, 1], valid)

    amp = s * spec.feature_signal
    in_win = np.zeros(t, dtype=bool)
    in_win[first:last] = True

    def features(dim, dirs, bg):
        noise = rng.standard_normal((t, dim))
        scene = rng.standard_normal(spec.background_rank) @ bg
        return noise + scene + np.outer(in_win * amp, dirs[target])

    video = features(spec.d_video, world["video_dirs"], world["video_bg"])
    gaze_feats = features(spec.d_gaze_in, world["gaze_dirs"], world["gaze_bg"])

    text = rng.standard_normal((spec.text_tokens, spec.d_text))
    word_pos = 1 + int(rng.integers(spec.text_tokens - 1)) if spec.text_tokens > 1 else 0
    text[word_pos] = world["words"][target] + 0.5 * text[word_pos]

    spw = spec.seconds_per_window
    video_id = f"vid{index:05d}"
    sample = QuerySample(
        video_id=video_id,
        query_idx=0,
        query_text=f"where did I last see object {target}?",
        text_embeddings=text.astype(np.float32),
        video_features=video.astype(np.float32),
        gaze_features=gaze_feats.astype(np.float32),
        gt_interval=(first * spw, last * spw),
        seconds_per_window=spw,
        target_id=target,
    )
    return sample, track, (first, last)


def window_heatmaps_for_track(track, spec):
    per_frame = track_heatmaps(track, spec.frames_per_video, spec.heatmap_sigma)
    return window_average_heatmaps(per_frame, spec.window, spec.stride).astype(np.float32)


def generate_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    world = _world(spec)
    samples, tracks, heatmaps, segments = [], [], [], []
    for i in range(spec.first_index, spec.first_index + spec.n_videos):
        sample, track, seg = _generate_video(spec, world, i)
        samples.append(sample)
        tracks.append(track)
        heatmaps.append(window_heatmaps_for_track(track, spec))
        segments.append(seg)
    return SyntheticDataset(spec, samples, tracks, heatmaps, world["locations"], segments)


def train_val_split(dataset, val_fraction=0.25):
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    return dataset.subset(range(n - n_val)), dataset.subset(range(n - n_val, n))


# on-disk format -------------------------------------------------------------

def _pack_json(obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_dataset(dataset: SyntheticDataset, path):
    meta = {
        "spec": asdict(dataset.spec),
        "n_records": len(dataset.samples),
        "target_locations": np.asarray(dataset.target_locations).tolist(),
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_pack_json(meta))
        for i, (s, tr) in enumerate(zip(dataset.samples, dataset.tracks)):
            seg = dataset.segments[i] if dataset.segments else None
            header = {
                "video_id": s.video_id,
                "query_idx": s.query_idx,
                "query_text": s.query_text,
                "target_id": s.target_id,
                "gt_interval": list(s.gt_interval),
                "seconds_per_window": s.seconds_per_window,
                "segment": list(seg) if seg else None,
                "shapes": {
                    "video": list(s.video_features.shape),
                    "gaze": list(s.gaze_features.shape),
                    "text": list(s.text_embeddings.shape),
                    "track": len(tr),
                },
            }
            fh.write(_pack_json(header))
            for arr in (s.video_features, s.gaze_features, s.text_embeddings):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(tr.frame_index, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tr.x, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(tr.y, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(tr.valid, dtype="u1").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise DatasetFormatError("truncated dataset file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def json(self):
        (n,) = struct.unpack("<I", self.take(4))
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"corrupt record header: {exc}") from exc

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).reshape(shape).copy()


def load_dataset(path) -> SyntheticDataset:
    data = Path(path).read_bytes()
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(
            f"version mismatch: expected magic {DATASET_MAGIC!r}, found {data[:len(DATASET_MAGIC)]!r}"
        )
    r = _Reader(data)
    r.take(len(DATASET_MAGIC))
    meta = r.json()
    spec = SyntheticSpec(**meta["spec"])
    samples, tracks, heatmaps, segments = [], [], [], []
    for _ in range(meta["n_records"]):
        h = r.json()
        shp = h["shapes"]
        video = r.array("<f4", shp["video"]).astype(np.float32)
        gaze = r.array("<f4", shp["gaze"]).astype(np.float32)
        text = r.array("<f4", shp["text"]).astype(np.float32)
        n = shp["track"]
        track = GazeTrack(
            r.array("<i4", (n,)), r.array("<f4", (n,)), r.array("<f4", (n,)),
            r.array("u1", (n,)).astype(bool),
        )
        samples.append(QuerySample(
            video_id=h["video_id"],
            query_idx=h["query_idx"],
            query_text=h["query_text"],
            text_embeddings=text,
            video_features=video,
            gaze_features=gaze,
            gt_interval=tuple(h["gt_interval"]),
            seconds_per_window=h["seconds_per_window"],
            target_id=h["target_id"],
        ))
        tracks.append(track)
        heatmaps.append(window_heatmaps_for_track(track, spec))
        if h.get("segment"):
            segments.append(tuple(h["segment"]))
    if r.off != len(data):
        raise DatasetFormatError("trailing bytes after last record")
    return SyntheticDataset(
        spec, samples, tracks, heatmaps,
        np.asarray(meta["target_locations"], dtype=np.float64).reshape(-1, 2),
        segments if len(segments) == len(samples) else [],
    )
