"""Gaze heatmap synthesis, window averaging and the heatmap cache format.

Heatmaps are ``(64, 64)`` float arrays indexed ``[row, col]`` = ``[y, x]``.
A normalized gaze coordinate ``u`` in ``[0, 1]`` maps to grid position
``u * 64``, so cell ``i`` is centered on position ``i``.
"""

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

HEATMAP_SIZE = 64
N_CELLS = HEATMAP_SIZE * HEATMAP_SIZE


@dataclass(frozen=True)
class GazePoint:
    frame_index: int
    x: float
    y: float
    valid: bool = True


@dataclass
class GazeTrack:
    """Per-frame gaze samples for one video, stored as parallel arrays."""

    frame_index: np.ndarray  # int64, strictly increasing
    x: np.ndarray  # float32 in [0, 1]
    y: np.ndarray
    valid: np.ndarray  # bool

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = len(self.frame_index)
        if not (len(self.x) == len(self.y) == len(self.valid) == n):
            raise ValueError("gaze track arrays must have equal length")
        if n > 1 and np.any(np.diff(self.frame_index) <= 0):
            raise ValueError("frame_index must be strictly increasing")
        v = self.valid
        if np.any((self.x[v] < 0) | (self.x[v] > 1) | (self.y[v] < 0) | (self.y[v] > 1)):
            raise ValueError("valid gaze coordinates must lie in [0, 1]")

    def __len__(self):
        return len(self.frame_index)

    def points(self) -> Iterator[GazePoint]:
        for f, x, y, v in zip(self.frame_index, self.x, self.y, self.valid):
            yield GazePoint(int(f), float(x), float(y), bool(v))


def is_distribution(grid, atol: float = 1e-6) -> bool:
    grid = np.asarray(grid)
    return bool(np.all(grid >= 0) and abs(float(grid.sum()) - 1.0) <= atol)


def uniform_heatmap() -> np.ndarray:
    return np.full((HEATMAP_SIZE, HEATMAP_SIZE), 1.0 / N_CELLS)


def _axis_profile(coord, sigma):
    # unnormalized 1D Gaussian over the 64 cell positions, shape (n, 64)
    pos = np.arange(HEATMAP_SIZE, dtype=np.float64)
    centre = np.asarray(coord, dtype=np.float64)[:, None] * HEATMAP_SIZE
    return np.exp(-0.5 * ((pos[None, :] - centre) / sigma) ** 2)


def build_gaze_heatmap(points: Iterable, sigma: float) -> np.ndarray:
    """Heatmap for one frame from its gaze points.

    ``points`` holds :class:`GazePoint` entries or ``(x, y[, valid])`` tuples.
    Each valid point contributes an isotropic Gaussian of std ``sigma`` cells;
    the sum is normalized to a distribution. With no valid point the result is
    uniform.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xs, ys = [], []
    for p in points:
        if isinstance(p, GazePoint):
            x, y, valid = p.x, p.y, p.valid
        else:
            x, y, *rest = p
            valid = bool(rest[0]) if rest else True
        if valid:
            xs.append(x)
            ys.append(y)
    if not xs:
        return uniform_heatmap()
    grid = np.einsum("ni,nj->ij", _axis_profile(ys, sigma), _axis_profile(xs, sigma))
    return grid / grid.sum()


def track_heatmaps(track: GazeTrack, n_frames: int, sigma: float) -> np.ndarray:
    """Per-frame heatmaps ``(n_frames, 64, 64)`` for a one-point-per-frame track.

    Frames absent from the track or flagged invalid get the uniform map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = np.empty((n_frames, HEATMAP_SIZE, HEATMAP_SIZE), dtype=np.float64)
    out[:] = 1.0 / N_CELLS
    keep = track.valid & (track.frame_index < n_frames)
    frames = track.frame_index[keep]
    if len(frames):
        gy = _axis_profile(track.y[keep], sigma)
        gx = _axis_profile(track.x[keep], sigma)
        grids = gy[:, :, None] * gx[:, None, :]
        out[frames] = grids / grids.sum(axis=(1, 2), keepdims=True)
    return out


def n_windows(n_frames: int, window: int = 32, stride: int = 16) -> int:
    if n_frames < window:
        return 0
    return (n_frames - window) // stride + 1


def pad_to_window(frames: np.ndarray, window: int = 32):
    """Right-pad a frame sequence by repeating its last frame.

    Returns ``(padded, mask)`` where ``mask`` is False on padding frames.
    """
    frames = np.asarray(frames)
    n = len(frames)
    if n == 0:
        raise ValueError("cannot pad an empty sequence")
    mask = np.ones(max(n, window), dtype=bool)
    if n >= window:
        return frames, mask
    reps = np.repeat(frames[-1:], window - n, axis=0)
    mask[n:] = False
    return np.concatenate([frames, reps], axis=0), mask


def window_average_heatmaps(per_frame: Sequence, window: int = 32, stride: int = 16) -> np.ndarray:
    """Mean heatmap over each ``window``-frame segment taken every ``stride`` frames."""
    if window <= 0 or not 0 < stride <= window:
        raise ValueError("need window > 0 and 0 < stride <= window")
    per_frame = np.asarray(per_frame, dtype=np.float64)
    n = len(per_frame)
    if n < window:
        raise ValueError(f"insufficient frames: {n} < window {window}; pad first")
    csum = np.concatenate([np.zeros_like(per_frame[:1]), np.cumsum(per_frame, axis=0)])
    starts = np.arange(n_windows(n, window, stride)) * stride
    means = (csum[starts + window] - csum[starts]) / window
    means = np.clip(means, 0.0, None)
    return means / means.sum(axis=(1, 2), keepdims=True)


def complement_heatmap(grid):
    """``(1 - G) / sum(1 - G)`` over the last two axes; works on numpy or torch."""
    comp = 1.0 - grid
    return comp / comp.sum(axis=(-2, -1), keepdims=True)


# heatmap cache: repeated records of
#   u32 id length | utf-8 id | i32 T | T*64*64 float32, little-endian

def write_heatmap_cache(fh: BinaryIO, records: Iterable) -> int:
    count = 0
    for video_id, maps in records:
        maps = np.ascontiguousarray(maps, dtype="<f4")
        if maps.ndim != 3 or maps.shape[1:] != (HEATMAP_SIZE, HEATMAP_SIZE):
            raise ValueError(f"expected (T, 64, 64) heatmaps, got {maps.shape}")
        raw_id = video_id.encode("utf-8")
        fh.write(struct.pack("<I", len(raw_id)))
        fh.write(raw_id)
        fh.write(struct.pack("<i", maps.shape[0]))
        fh.write(maps.tobytes())
        count += 1
    return count


def read_heatmap_cache(fh: BinaryIO) -> dict:
    out = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise ValueError("truncated heatmap cache")
        (n_id,) = struct.unpack("<I", head)
        raw_id = fh.read(n_id)
        raw_t = fh.read(4)
        if len(raw_id) < n_id or len(raw_t) < 4:
            raise ValueError("truncated heatmap cache")
        (t,) = struct.unpack("<i", raw_t)
        nbytes = t * N_CELLS * 4
        raw = fh.read(nbytes)
        if t < 0 or len(raw) < nbytes:
            raise ValueError("truncated heatmap cache")
        out[raw_id.decode("utf-8")] = np.frombuffer(raw, dtype="<f4").reshape(
            t, HEATMAP_SIZE, HEATMAP_SIZE
        ).copy()
